//! Rewrites of the standard-gate QCBM circuit: CNOT-decomposed form and
//! trapped-ion native form (GPI, GPI2, VirtualZ, MS).

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::time::Duration;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::quantum_sim::{Circuit, GateKind, GateOp, Statevector};

/// Default single-qubit gate duration.
pub const T_1Q: Duration = Duration::from_micros(135);
/// Default two-qubit gate duration.
pub const T_2Q: Duration = Duration::from_micros(600);

/// Native gate with concrete angles, as it would be submitted to hardware.
#[derive(Debug, Clone, PartialEq)]
pub struct NativeOp {
    pub kind: GateKind,
    pub targets: Vec<usize>,
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NativeCircuit {
    pub n_qubits: usize,
    pub ops: Vec<NativeOp>,
    /// Index of the source op each native op was produced from.
    pub provenance: Vec<usize>,
}

impl NativeCircuit {
    pub fn count_kind(&self, kind: GateKind) -> usize {
        self.ops.iter().filter(|op| op.kind == kind).count()
    }
}

/// Anything that is an ordered list of gates with known arity.
pub trait GateList {
    fn arities(&self) -> Vec<usize>;
}

impl GateList for Circuit {
    fn arities(&self) -> Vec<usize> {
        self.ops.iter().map(|op| op.targets.len()).collect()
    }
}

impl GateList for NativeCircuit {
    fn arities(&self) -> Vec<usize> {
        self.ops.iter().map(|op| op.targets.len()).collect()
    }
}

pub fn two_qubit_count(circuit: &impl GateList) -> usize {
    circuit.arities().into_iter().filter(|&a| a == 2).count()
}

/// Serial execution time: every gate runs back to back.
pub fn estimate_runtime(circuit: &impl GateList, t1q: Duration, t2q: Duration) -> Duration {
    circuit
        .arities()
        .into_iter()
        .map(|a| if a == 2 { t2q } else { t1q })
        .sum()
}

/// `Rxx(t) = CNOT · (I ⊗ Rx(t)) · CNOT`.
///
/// The `Rx` acts on the second Rxx qubit, which is also the CNOT control;
/// conjugating `X` on the control by CNOT yields `X ⊗ X`.
pub fn decompose_rxx_cnot(gate: &GateOp) -> Result<Vec<GateOp>> {
    if gate.kind != GateKind::Rxx {
        return Err(Error::invalid(format!("expected RXX, got {}", gate.kind)));
    }
    let (a, b) = (gate.targets[0], gate.targets[1]);
    Ok(vec![
        GateOp::new(GateKind::Cnot, vec![b, a], vec![]),
        GateOp::new(GateKind::Rx, vec![b], gate.slots.clone()),
        GateOp::new(GateKind::Cnot, vec![b, a], vec![]),
    ])
}

/// Replaces every `Rxx` by its CNOT decomposition; other gates pass through.
pub fn to_cnot_form(circuit: &Circuit) -> Result<Circuit> {
    let mut ops = Vec::with_capacity(circuit.ops.len());
    for op in &circuit.ops {
        if op.kind == GateKind::Rxx {
            ops.extend(decompose_rxx_cnot(op)?);
        } else {
            ops.push(op.clone());
        }
    }
    Circuit::new(circuit.n_qubits, ops, circuit.n_params)
}

/// Converts a `{Rx, Rz, Rxx}` circuit into native gates for concrete `theta`.
///
/// * `Rz(t)  -> VirtualZ(t)`
/// * `Rx(t)  -> GPI2(3π/2), VirtualZ(t), GPI2(π/2)` (a Z rotation framed by
///   `Ry(∓π/2)`)
/// * `Rxx(t) -> MS(0, 0, t)`, one entangling gate per `Rxx`
pub fn to_native(circuit: &Circuit, theta: &[f64]) -> Result<NativeCircuit> {
    if theta.len() != circuit.n_params {
        return Err(Error::invalid(format!(
            "expected {} parameters, got {}",
            circuit.n_params,
            theta.len()
        )));
    }
    let mut ops = Vec::new();
    let mut provenance = Vec::new();
    for (index, op) in circuit.ops.iter().enumerate() {
        let t = op.angles(theta)?;
        let q = &op.targets;
        let mut push = |kind, targets: Vec<usize>, angles: Vec<f64>| {
            ops.push(NativeOp {
                kind,
                targets,
                angles,
            });
            provenance.push(index);
        };
        match op.kind {
            GateKind::Rz => push(GateKind::VirtualZ, q.clone(), t),
            GateKind::Rx => {
                push(GateKind::Gpi2, q.clone(), vec![3.0 * FRAC_PI_2]);
                push(GateKind::VirtualZ, q.clone(), t);
                push(GateKind::Gpi2, q.clone(), vec![FRAC_PI_2]);
            }
            GateKind::Rxx => push(GateKind::Ms, q.clone(), vec![0.0, 0.0, t[0]]),
            other => {
                return Err(Error::UnsupportedGate {
                    kind: other.to_string(),
                    index,
                })
            }
        }
    }
    Ok(NativeCircuit {
        n_qubits: circuit.n_qubits,
        ops,
        provenance,
    })
}

/// Dense unitary of a gate sequence, column `j` = image of basis state `j`.
/// Only sensible for small `n_qubits`.
fn unitary_from<F>(n_qubits: usize, apply_all: F) -> Result<Vec<Vec<Complex64>>>
where
    F: Fn(&mut Statevector) -> Result<()>,
{
    if n_qubits > 10 {
        return Err(Error::invalid("dense unitaries limited to 10 qubits"));
    }
    let dim = 1usize << n_qubits;
    let mut cols = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut amps = vec![Complex64::new(0.0, 0.0); dim];
        amps[j] = Complex64::new(1.0, 0.0);
        let mut state = Statevector::from_amplitudes(amps)?;
        apply_all(&mut state)?;
        cols.push(state.amplitudes().to_vec());
    }
    // transpose to row-major
    Ok((0..dim)
        .map(|r| (0..dim).map(|c| cols[c][r]).collect())
        .collect())
}

pub fn circuit_unitary(circuit: &Circuit, theta: &[f64]) -> Result<Vec<Vec<Complex64>>> {
    unitary_from(circuit.n_qubits, |s| {
        for op in &circuit.ops {
            s.apply(op.kind, &op.targets, &op.angles(theta)?)?;
        }
        Ok(())
    })
}

pub fn native_unitary(circuit: &NativeCircuit) -> Result<Vec<Vec<Complex64>>> {
    unitary_from(circuit.n_qubits, |s| {
        for op in &circuit.ops {
            s.apply(op.kind, &op.targets, &op.angles)?;
        }
        Ok(())
    })
}

/// Largest elementwise deviation between `a` and `b` after removing the
/// best global phase (anchored on the largest entry of `a`).
pub fn phase_distance(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> f64 {
    let mut anchor = (0, 0, 0.0);
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if v.norm() > anchor.2 {
                anchor = (r, c, v.norm());
            }
        }
    }
    let (r, c, _) = anchor;
    let ratio = b[r][c] / a[r][c];
    let phase = if ratio.norm() > 0.0 {
        ratio / ratio.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(move |(x, y)| (x * phase - y).norm()))
        .fold(0.0, f64::max)
}

// --- text format -----------------------------------------------------------

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Line format: header `qubits=<n> params=<k>`, then `KIND q0[,q1] slot0[,slot1]`.
pub fn write_circuit(circuit: &Circuit) -> String {
    let mut out = format!("qubits={} params={}\n", circuit.n_qubits, circuit.n_params);
    for op in &circuit.ops {
        let _ = write!(out, "{} {}", op.kind, join(&op.targets));
        if !op.slots.is_empty() {
            let _ = write!(out, " {}", join(&op.slots));
        }
        out.push('\n');
    }
    out
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &'static str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| t.parse::<T>().map_err(|_| Error::parse(what, t)))
        .collect()
}

fn parse_header<'a>(line: Option<&'a str>, keys: &[&str]) -> Result<Vec<usize>> {
    let line = line.ok_or_else(|| Error::parse("circuit header", "missing"))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != keys.len() {
        return Err(Error::parse("circuit header", line));
    }
    fields
        .iter()
        .zip(keys)
        .map(|(f, k)| {
            f.strip_prefix(k)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse("circuit header", line))
        })
        .collect()
}

pub fn read_circuit(text: &str) -> Result<Circuit> {
    let mut lines = text.lines();
    let header = parse_header(lines.next(), &["qubits", "params"])?;
    let mut ops = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        let kind: GateKind = fields[0].parse()?;
        let (targets, slots) = match fields.as_slice() {
            [_, t] => (parse_list(t, "targets")?, vec![]),
            [_, t, s] => (parse_list(t, "targets")?, parse_list(s, "slots")?),
            _ => return Err(Error::parse("gate line", line)),
        };
        ops.push(GateOp::new(kind, targets, slots));
    }
    Circuit::new(header[0], ops, header[1])
}

/// Native line format: header `native qubits=<n>`, then
/// `KIND q0[,q1] angle0[,angle1,...] @source`. Angles use the shortest
/// representation that round-trips exactly.
pub fn write_native(circuit: &NativeCircuit) -> String {
    let mut out = format!("native qubits={}\n", circuit.n_qubits);
    for (op, src) in circuit.ops.iter().zip(&circuit.provenance) {
        let angles: Vec<String> = op.angles.iter().map(|a| format!("{a:?}")).collect();
        let _ = writeln!(
            out,
            "{} {} {} @{}",
            op.kind,
            join(&op.targets),
            angles.join(","),
            src
        );
    }
    out
}

pub fn read_native(text: &str) -> Result<NativeCircuit> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix("native "))
        .ok_or_else(|| Error::parse("native header", "missing `native` tag"))?;
    let n_qubits = parse_header(Some(header), &["qubits"])?[0];
    let mut ops = Vec::new();
    let mut provenance = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        let [kind, targets, angles, src] = fields.as_slice() else {
            return Err(Error::parse("native line", line));
        };
        let kind: GateKind = kind.parse()?;
        if !kind.is_native() {
            return Err(Error::UnsupportedGate {
                kind: kind.to_string(),
                index: ops.len(),
            });
        }
        ops.push(NativeOp {
            kind,
            targets: parse_list(targets, "targets")?,
            angles: parse_list(angles, "angles")?,
        });
        provenance.push(
            src.strip_prefix('@')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse("provenance", *src))?,
        );
    }
    Ok(NativeCircuit {
        n_qubits,
        ops,
        provenance,
    })
}

/// `MS(0, 0, π/2)`, the fully entangling gate.
pub fn full_ms_angle() -> f64 {
    PI / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum_sim::{
        build_qcbm_ansatz, gpi2_matrix, init_theta, ms_matrix, rz_matrix, virtual_z_matrix,
        Connectivity,
    };
    use std::f64::consts::FRAC_1_SQRT_2;

    fn dense_exp_xx(t: f64) -> Vec<Vec<Complex64>> {
        // exp(-i t XX / 2) = cos(t/2) I - i sin(t/2) XX, written out directly
        let (s, c) = (t / 2.0).sin_cos();
        let mut m = vec![vec![Complex64::new(0.0, 0.0); 4]; 4];
        for i in 0..4 {
            m[i][i] = Complex64::new(c, 0.0);
            m[i][3 - i] = Complex64::new(0.0, -s);
        }
        m
    }

    fn single(kind: GateKind, targets: Vec<usize>, n_q: usize) -> Circuit {
        let n = kind.n_angles();
        Circuit::new(n_q, vec![GateOp::new(kind, targets, (0..n).collect())], n).unwrap()
    }

    #[test]
    fn rxx_decomposition_matches_dense() {
        let rxx = GateOp::new(GateKind::Rxx, vec![0, 1], vec![0]);
        let parts = decompose_rxx_cnot(&rxx).unwrap();
        assert_eq!(parts.iter().filter(|g| g.kind == GateKind::Cnot).count(), 2);
        let c = Circuit::new(2, parts, 1).unwrap();
        // basis index = 2*bit(q1)+bit(q0) in the dense matrix vs the local
        // convention; XX is symmetric so the orderings coincide.
        for t in [0.0, 0.7] {
            let u = circuit_unitary(&c, &[t]).unwrap();
            let want = dense_exp_xx(t);
            for r in 0..4 {
                for k in 0..4 {
                    assert!((u[r][k] - want[r][k]).norm() < 1e-10, "t={t}");
                }
            }
        }
        let rx = GateOp::new(GateKind::Rx, vec![0], vec![0]);
        assert!(decompose_rxx_cnot(&rx).is_err());
    }

    #[test]
    fn rz_becomes_one_virtual_z() {
        let c = single(GateKind::Rz, vec![0], 1);
        let native = to_native(&c, &[0.37]).unwrap();
        assert_eq!(native.ops.len(), 1);
        assert_eq!(native.ops[0].kind, GateKind::VirtualZ);
        assert_eq!(native.ops[0].angles, vec![0.37]);
        let d = phase_distance(
            &circuit_unitary(&c, &[0.37]).unwrap(),
            &native_unitary(&native).unwrap(),
        );
        assert!(d < 1e-12);
    }

    #[test]
    fn virtual_z_is_unitary_rz() {
        let t = 1.3;
        let vz = virtual_z_matrix(t);
        let rz = rz_matrix(t);
        assert_eq!(vz, rz);
        let n0 = vz[0][0].norm_sqr() + vz[1][0].norm_sqr();
        assert!((n0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn native_matrices_match_published_forms() {
        let phi = 0.41;
        let g2 = gpi2_matrix(phi);
        let mi = Complex64::new(0.0, -1.0);
        assert!((g2[0][1] - mi * Complex64::from_polar(FRAC_1_SQRT_2, -phi)).norm() < 1e-15);
        let (p0, p1) = (0.3, -0.8);
        let ms = ms_matrix(p0, p1, full_ms_angle());
        let want03 = mi * Complex64::from_polar(FRAC_1_SQRT_2, -(p0 + p1));
        let want21 = mi * Complex64::from_polar(FRAC_1_SQRT_2, p0 - p1);
        assert!((ms[0][3] - want03).norm() < 1e-15);
        assert!((ms[2][1] - want21).norm() < 1e-15);
        assert!((ms[0][0].re - FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn native_ms_count_equals_rxx_count() {
        for (conn, want) in [(Connectivity::Full, 66), (Connectivity::Reduced, 30)] {
            let c = build_qcbm_ansatz(12, 1, conn).unwrap();
            let native = to_native(&c, &init_theta(c.n_params, 1)).unwrap();
            assert_eq!(native.count_kind(GateKind::Ms), want);
            assert_eq!(two_qubit_count(&native), want);
            assert!(native.ops.iter().all(|op| op.kind.is_native()));
        }
    }

    #[test]
    fn cnot_form_doubles_two_qubit_count() {
        let c = build_qcbm_ansatz(12, 1, Connectivity::Full).unwrap();
        assert_eq!(two_qubit_count(&c), 66);
        assert_eq!(two_qubit_count(&to_cnot_form(&c).unwrap()), 132);
        let empty = Circuit::new(2, vec![], 0).unwrap();
        assert_eq!(two_qubit_count(&empty), 0);
    }

    #[test]
    fn native_rejects_unsupported() {
        let c = single(GateKind::Cnot, vec![0, 1], 2);
        match to_native(&c, &[]) {
            Err(Error::UnsupportedGate { kind, index }) => {
                assert_eq!(kind, "CNOT");
                assert_eq!(index, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn runtime_estimates() {
        let mut ops = Vec::new();
        for i in 0..66 {
            ops.push(GateOp::new(GateKind::Rxx, vec![0, 1], vec![i]));
        }
        for i in 0..48 {
            ops.push(GateOp::new(GateKind::Rx, vec![0], vec![66 + i]));
        }
        let c = Circuit::new(2, ops, 114).unwrap();
        assert_eq!(estimate_runtime(&c, T_1Q, T_2Q), Duration::from_micros(46_080));
        let empty = Circuit::new(2, vec![], 0).unwrap();
        assert_eq!(estimate_runtime(&empty, T_1Q, T_2Q), Duration::ZERO);
        let ms = to_native(&single(GateKind::Rxx, vec![0, 1], 2), &[0.2]).unwrap();
        assert_eq!(estimate_runtime(&ms, T_1Q, T_2Q), Duration::from_micros(600));
    }

    #[test]
    fn circuit_text_round_trip() {
        let c = to_cnot_form(&build_qcbm_ansatz(5, 2, Connectivity::Reduced).unwrap()).unwrap();
        let text = write_circuit(&c);
        let back = read_circuit(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(write_circuit(&back), text);
        assert!(text.starts_with("qubits=5 params="));
        assert!(text.contains("\nCNOT 1,0\n"));
    }

    #[test]
    fn native_text_round_trip() {
        let c = build_qcbm_ansatz(4, 1, Connectivity::Full).unwrap();
        let n = to_native(&c, &init_theta(c.n_params, 5)).unwrap();
        let text = write_native(&n);
        let back = read_native(&text).unwrap();
        assert_eq!(back, n);
        assert_eq!(write_native(&back), text);
    }

    #[test]
    fn read_circuit_rejects_garbage() {
        assert!(read_circuit("").is_err());
        assert!(read_circuit("qubits=2 params=1\nFOO 0 0\n").is_err());
        assert!(read_circuit("qubits=2 params=1\nRX 5 0\n").is_err());
        assert!(read_circuit("qubits=2\n").is_err());
    }
}
