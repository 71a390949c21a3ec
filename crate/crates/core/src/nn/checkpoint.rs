//! Single-file checkpoint: a text header of `key=value` lines describing the
//! topology, one `tensor=<name> <d0>x<d1>...` line per tensor, an `end`
//! line, then every tensor as little-endian f64 in header order.

use std::fmt::Write as _;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "qcbm-wgan-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn dims(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x")
    }
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse("checkpoint", format!("missing key {key}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(header, "{k}={v}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(header, "tensor={name} {}", dims(&t.shape));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC.as_bytes()) || bytes.get(MAGIC.len()) != Some(&b'\n') {
            return Err(Error::BadMagic { expected: MAGIC });
        }
        let mut pos = MAGIC.len() + 1;
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or(Error::Truncated {
                expected: pos + 1,
                found: bytes.len(),
            })?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::parse("checkpoint header", "not utf-8"))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("checkpoint header", line))?;
            if k == "tensor" {
                let (name, d) = v
                    .split_once(' ')
                    .ok_or_else(|| Error::parse("tensor line", line))?;
                let shape: Vec<usize> = if d == "-" {
                    vec![]
                } else {
                    d.split('x')
                        .map(|s| s.parse().map_err(|_| Error::parse("tensor dims", d)))
                        .collect::<Result<_>>()?
                };
                shapes.push((name.to_string(), shape));
            } else {
                ck.meta.push((k.to_string(), v.to_string()));
            }
        }
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let expected = pos + total * 8;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::parse(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - expected),
            ));
        }
        for (name, shape) in shapes {
            let len: usize = shape.iter().product();
            let data = bytes[pos..pos + len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos += len * 8;
            ck.tensors.push((name, Tensor { shape, data }));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: vec![("n_z".into(), "12".into()), ("range".into(), "tanh[-1,1]".into())],
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
                ("s".into(), Tensor::scalar(7.25)),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("n_z"), Some("12"));
        assert_eq!(back.tensor("s").unwrap().item(), 7.25);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_payloads_round_trip(
            bits in proptest::collection::vec(any::<u64>(), 0..64),
            rows in 1usize..4,
        ) {
            let n = bits.len() / rows * rows;
            let data: Vec<f64> = bits[..n].iter().map(|&b| f64::from_bits(b)).collect();
            let ck = Checkpoint {
                meta: vec![("k".into(), "v".into())],
                tensors: vec![("t".into(), Tensor::new(vec![rows, n / rows], data).unwrap())],
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let orig: Vec<u64> = ck.tensors[0].1.data.iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back.tensors[0].1.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(orig, got);
        }
    }
}
