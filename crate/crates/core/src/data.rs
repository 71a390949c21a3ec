//! 5-channel EBSD-style image batches: the `EBSD1` container, a procedural
//! desk-scale dataset, pixel normalization and Bernoulli latents.
//!
//! Channel order: image quality, crystal-structure label, KAM, K-S deviation,
//! region mask. All channels are stored as `u8` in `[0, 255]`.
//!
//! Synthetic anchors: the label channel uses levels `{0, 64, 128, 192}` for
//! labels 0–3 (noise, BCC, FCC, other); KAM maps 0°–3.5° linearly onto
//! 0–255; K-S deviation maps 0°–20° onto 0–255; the mask is 0 or 255.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Tensor, CHANNELS};

pub const MAGIC: &[u8; 5] = b"EBSD1";
const HEADER_LEN: usize = 5 + 4 + 2 + 2 + 1 + 1 + 4;

pub const CH_IQ: usize = 0;
pub const CH_LABEL: usize = 1;
pub const CH_KAM: usize = 2;
pub const CH_KS: usize = 3;
pub const CH_MASK: usize = 4;

pub const LABEL_LEVELS: [u8; 4] = [0, 64, 128, 192];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Ferrite,
    Bainite,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::Ferrite => 0,
            Phase::Bainite => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Phase::Ferrite),
            1 => Ok(Phase::Bainite),
            other => Err(Error::parse("phase label", other.to_string())),
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ferrite" => Ok(Phase::Ferrite),
            "bainite" => Ok(Phase::Bainite),
            other => Err(Error::parse("phase", other)),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Ferrite => "ferrite",
            Phase::Bainite => "bainite",
        })
    }
}

/// Images stored back to back, each channel-major (`[5, H, W]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EbsdBatch {
    pub phase: Phase,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl EbsdBatch {
    pub fn new(phase: Phase, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        let per = CHANNELS * height * width;
        if per == 0 || pixels.len() % per != 0 {
            return Err(Error::invalid(format!(
                "{} bytes is not a whole number of {height}x{width} images",
                pixels.len()
            )));
        }
        Ok(EbsdBatch {
            phase,
            height,
            width,
            pixels,
        })
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn channel(&self, i: usize, c: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.image(i)[c * plane..(c + 1) * plane]
    }

    pub fn select(&self, rows: &[usize]) -> EbsdBatch {
        let mut pixels = Vec::with_capacity(rows.len() * self.image_len());
        for &r in rows {
            pixels.extend_from_slice(self.image(r));
        }
        EbsdBatch {
            pixels,
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(CHANNELS as u8);
        out.push(self.phase.code());
        out.extend_from_slice(&crc32fast::hash(&self.pixels).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic { expected: "EBSD1" });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let count = u32_at(5) as usize;
        let (height, width) = (u16_at(9), u16_at(11));
        if bytes[13] as usize != CHANNELS {
            return Err(Error::parse("channel count", bytes[13].to_string()));
        }
        let phase = Phase::from_code(bytes[14])?;
        let stored = u32_at(15);
        let expected = HEADER_LEN + count * CHANNELS * height * width;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::parse(
                "EBSD1 container",
                format!("{} trailing bytes", bytes.len() - expected),
            ));
        }
        let payload = &bytes[HEADER_LEN..];
        let computed = crc32fast::hash(payload);
        if computed != stored {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        if height == 0 || width == 0 {
            return Err(Error::parse("EBSD1 container", "zero image size"));
        }
        Ok(EbsdBatch {
            phase,
            height,
            width,
            pixels: payload.to_vec(),
        })
    }
}

pub fn save_dataset(batch: &EbsdBatch, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, batch.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EbsdBatch> {
    EbsdBatch::from_bytes(&std::fs::read(path)?)
}

/// `x ↦ x / 127.5 − 1`, shape `[n, 5, H, W]`.
pub fn normalize(batch: &EbsdBatch) -> Tensor {
    Tensor {
        shape: vec![batch.len(), CHANNELS, batch.height, batch.width],
        data: batch.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect(),
    }
}

/// Inverse of [`normalize`], rounding and clamping into `u8`.
pub fn denormalize(t: &Tensor, phase: Phase) -> Result<EbsdBatch> {
    if t.shape.len() != 4 || t.shape[1] != CHANNELS {
        return Err(Error::shape(format!("expected [n, 5, H, W], got {:?}", t.shape)));
    }
    let pixels = t
        .data
        .iter()
        .map(|&x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    EbsdBatch::new(phase, t.shape[2], t.shape[3], pixels)
}

/// Maps network range `[-1, 1]` to `[0, 1]` for scoring.
pub fn to_unit_range(t: &Tensor) -> Tensor {
    t.map(|x| (x + 1.0) * 0.5)
}

/// `[batch, n_z]` of fair coin flips.
pub fn bernoulli_latent(n_z: usize, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bernoulli_latent_with(&mut rng, n_z, batch)
}

pub fn bernoulli_latent_with(rng: &mut impl Rng, n_z: usize, batch: usize) -> Tensor {
    Tensor {
        shape: vec![batch, n_z],
        data: (0..batch * n_z)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
            .collect(),
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// Sum of a few random low-frequency plane waves, rescaled to `[0, 1]`.
fn smooth_field(rng: &mut ChaCha8Rng, n: usize, max_freq: f64) -> Vec<f64> {
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let ang = rng.gen_range(0.0..PI);
            let f = rng.gen_range(0.5..max_freq) * 2.0 * PI / n as f64;
            Wave {
                kx: f * ang.cos(),
                ky: f * ang.sin(),
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: rng.gen_range(0.5..1.0),
            }
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let v: f64 = waves
                .iter()
                .map(|w| w.amp * (w.kx * x as f64 + w.ky * y as f64 + w.phase).cos())
                .sum();
            out.push(0.5 + 0.5 * v / total);
        }
    }
    out
}

fn synth_image(rng: &mut ChaCha8Rng, n: usize, phase: Phase, out: &mut Vec<u8>) {
    let nf = n as f64;
    let (cx, cy) = (
        nf / 2.0 + rng.gen_range(-0.1..0.1) * nf,
        nf / 2.0 + rng.gen_range(-0.1..0.1) * nf,
    );
    // ferrite grains are roundish, bainite laths elongated
    let (ra, rb, texture_freq) = match phase {
        Phase::Ferrite => {
            let a = nf * rng.gen_range(0.26..0.36);
            (a, a * rng.gen_range(0.8..1.0), 1.0)
        }
        Phase::Bainite => {
            let a = nf * rng.gen_range(0.34..0.44);
            (a, a * rng.gen_range(0.35..0.55), 3.0)
        }
    };
    let rot = rng.gen_range(0.0..PI);
    let (sr, cr) = rot.sin_cos();

    let seeds: Vec<(f64, f64, u8)> = (0..rng.gen_range(3..6))
        .map(|_| {
            let label = LABEL_LEVELS[rng.gen_range(1..4)];
            (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf), label)
        })
        .collect();

    let iq = smooth_field(rng, n, 2.0);
    let ks = smooth_field(rng, n, 2.5);
    let tex_phase = rng.gen_range(0.0..2.0 * PI);

    let plane = n * n;
    let mut img = vec![0u8; CHANNELS * plane];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (dx * cr + dy * sr, -dx * sr + dy * cr);
            let r = ((u / ra).powi(2) + (v / rb).powi(2)).sqrt();
            let inside = r <= 1.0;

            // distance to the blob edge, in pixels (approximate)
            let edge_dist = (1.0 - r).abs() * rb;
            // distance to the nearest Voronoi boundary
            let mut d = seeds
                .iter()
                .map(|&(sx, sy, l)| ((sx - x as f64).hypot(sy - y as f64), l))
                .collect::<Vec<_>>();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let cell_dist = if d.len() > 1 { (d[1].0 - d[0].0) / 2.0 } else { nf };
            let boundary = (-(edge_dist.min(cell_dist)).powi(2) / 1.5).exp();

            let texture = 0.5
                + 0.5 * (texture_freq * 2.0 * PI * u / nf + tex_phase).sin();
            let (gain, label) = if inside { (1.0, d[0].1) } else { (0.25, 0) };

            img[CH_IQ * plane + i] = (255.0 * gain * (0.35 + 0.6 * iq[i])) as u8;
            img[CH_LABEL * plane + i] = label;
            let kam = if inside {
                0.08 + 0.12 * texture + 0.75 * boundary
            } else {
                0.05 * texture
            };
            img[CH_KAM * plane + i] = (255.0 * kam.clamp(0.0, 1.0)) as u8;
            img[CH_KS * plane + i] = (255.0 * gain * (0.1 + 0.6 * ks[i])) as u8;
            img[CH_MASK * plane + i] = if inside { 255 } else { 0 };
        }
    }
    out.extend_from_slice(&img);
}

/// Procedural grain-like patches standing in for real EBSD maps.
pub fn synth_dataset(n: usize, size: usize, phase: Phase, seed: u64) -> Result<EbsdBatch> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    if !(8..=64).contains(&size) {
        return Err(Error::invalid(format!("image size must be in 8..=64, got {size}")));
    }
    let mut pixels = Vec::with_capacity(n * CHANNELS * size * size);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        synth_image(&mut rng, size, phase, &mut pixels);
    }
    EbsdBatch::new(phase, size, size, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_dataset(100, 16, Phase::Ferrite, 5).unwrap();
        assert_eq!(a, synth_dataset(100, 16, Phase::Ferrite, 5).unwrap());
        assert_ne!(a, synth_dataset(100, 16, Phase::Ferrite, 6).unwrap());
        assert_eq!(a.len(), 100);
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(synth_dataset(0, 16, Phase::Ferrite, 0).is_err());
        assert!(synth_dataset(1, 4, Phase::Ferrite, 0).is_err());
        assert!(synth_dataset(1, 65, Phase::Ferrite, 0).is_err());
    }

    #[test]
    fn mask_is_bimodal_and_labels_quantized() {
        for phase in [Phase::Ferrite, Phase::Bainite] {
            let b = synth_dataset(50, 16, phase, 1).unwrap();
            let mut hist = [0usize; 256];
            for i in 0..b.len() {
                for &p in b.channel(i, CH_MASK) {
                    hist[p as usize] += 1;
                }
                assert!(b.channel(i, CH_LABEL).iter().all(|l| LABEL_LEVELS.contains(l)));
            }
            let total: usize = hist.iter().sum();
            assert_eq!(hist[0] + hist[255], total);
            assert!(hist[0] > total / 10 && hist[255] > total / 10);
        }
    }

    #[test]
    fn kam_concentrates_at_mask_boundary() {
        let n = 16;
        for phase in [Phase::Ferrite, Phase::Bainite] {
            let b = synth_dataset(100, n, phase, 2).unwrap();
            let (mut edge, mut ne, mut inner, mut ni) = (0.0, 0, 0.0, 0);
            for i in 0..b.len() {
                let mask = b.channel(i, CH_MASK);
                let kam = b.channel(i, CH_KAM);
                let on = |x: isize, y: isize| {
                    x >= 0 && y >= 0 && (x as usize) < n && (y as usize) < n
                        && mask[y as usize * n + x as usize] == 255
                };
                for y in 0..n as isize {
                    for x in 0..n as isize {
                        if !on(x, y) {
                            continue;
                        }
                        let border = !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1));
                        let v = kam[y as usize * n + x as usize] as f64;
                        if border {
                            edge += v;
                            ne += 1;
                        } else {
                            inner += v;
                            ni += 1;
                        }
                    }
                }
            }
            assert!(edge / ne as f64 > inner / ni as f64, "{phase}");
        }
    }

    #[test]
    fn phases_differ() {
        let f = synth_dataset(20, 16, Phase::Ferrite, 3).unwrap();
        let b = synth_dataset(20, 16, Phase::Bainite, 3).unwrap();
        assert_ne!(f.pixels, b.pixels);
        assert_eq!(b.phase, Phase::Bainite);
    }

    #[test]
    fn container_errors_are_distinct() {
        let batch = synth_dataset(3, 8, Phase::Bainite, 0).unwrap();
        let bytes = batch.to_bytes();
        assert_eq!(&bytes[..5], b"EBSD1");
        assert_eq!(EbsdBatch::from_bytes(&bytes).unwrap(), batch);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(EbsdBatch::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            EbsdBatch::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            EbsdBatch::from_bytes(&bytes[..10]),
            Err(Error::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(
            EbsdBatch::from_bytes(&flipped),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ebsd");
        let batch = synth_dataset(4, 12, Phase::Ferrite, 8).unwrap();
        save_dataset(&batch, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), batch);
    }

    #[test]
    fn normalize_endpoints_and_lattice_round_trip() {
        let pixels: Vec<u8> = (0..=255u8).cycle().take(5 * 8 * 8).collect();
        let batch = EbsdBatch::new(Phase::Ferrite, 8, 8, pixels).unwrap();
        let t = normalize(&batch);
        assert_eq!(t.data[0], -1.0);
        assert!((t.data[255] - 1.0).abs() < 1e-12);
        assert_eq!(denormalize(&t, Phase::Ferrite).unwrap(), batch);
    }

    #[test]
    fn bernoulli_latents() {
        let z = bernoulli_latent(10, 10_000, 4);
        assert!(z.data.iter().all(|&v| v == 0.0 || v == 1.0));
        let rate = z.data.iter().sum::<f64>() / z.len() as f64;
        // 1e5 draws: 0.01 is ~6 binomial standard deviations
        assert!((rate - 0.5).abs() < 0.01);
        assert_eq!(z, bernoulli_latent(10, 10_000, 4));
        assert_eq!(z.shape, vec![10_000, 10]);
    }

    proptest! {
        #[test]
        fn container_round_trip(
            n in 1usize..4,
            h in 1usize..6,
            w in 1usize..6,
            bainite in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels: Vec<u8> = (0..n * 5 * h * w).map(|_| rng.gen()).collect();
            let phase = if bainite { Phase::Bainite } else { Phase::Ferrite };
            let batch = EbsdBatch::new(phase, h, w, pixels).unwrap();
            let bytes = batch.to_bytes();
            let back = EbsdBatch::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, batch);
        }
    }
}
