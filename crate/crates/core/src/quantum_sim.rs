//! Exact statevector simulation of the QCBM ansatz.
//!
//! Conventions used throughout the crate:
//!
//! * Qubit 0 is the least-significant bit of a basis-state index, so bit `i`
//!   of a sampled bitstring is the `i`-th latent component.
//! * Rotations are `R_G(t) = exp(-i t G / 2)` for `G` in `{X, Z, X⊗X}`.
//! * For a two-qubit gate acting on `targets = [a, b]`, the local 4×4 matrix
//!   is indexed by `2 * bit(a) + bit(b)`: `a` is the first tensor factor.
//!   For `CNOT`, `a` is the control.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Mat2 = [[Complex64; 2]; 2];
pub type Mat4 = [[Complex64; 4]; 4];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Gate kinds understood by the simulator.
///
/// Angle arity: `Cnot` takes none, `Ms` takes three (`φ0`, `φ1`, rotation
/// angle), every other kind takes one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    Rx,
    Rz,
    Rxx,
    Cnot,
    Gpi,
    Gpi2,
    VirtualZ,
    Ms,
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            GateKind::Rxx | GateKind::Cnot | GateKind::Ms => 2,
            _ => 1,
        }
    }

    pub fn n_angles(self) -> usize {
        match self {
            GateKind::Cnot => 0,
            GateKind::Ms => 3,
            _ => 1,
        }
    }

    pub fn is_native(self) -> bool {
        matches!(
            self,
            GateKind::Gpi | GateKind::Gpi2 | GateKind::VirtualZ | GateKind::Ms
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Rx => "RX",
            GateKind::Rz => "RZ",
            GateKind::Rxx => "RXX",
            GateKind::Cnot => "CNOT",
            GateKind::Gpi => "GPI",
            GateKind::Gpi2 => "GPI2",
            GateKind::VirtualZ => "VZ",
            GateKind::Ms => "MS",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "RX" => GateKind::Rx,
            "RZ" => GateKind::Rz,
            "RXX" => GateKind::Rxx,
            "CNOT" => GateKind::Cnot,
            "GPI" => GateKind::Gpi,
            "GPI2" => GateKind::Gpi2,
            "VZ" => GateKind::VirtualZ,
            "MS" => GateKind::Ms,
            other => return Err(Error::parse("gate kind", other)),
        })
    }
}

/// Matrix of a gate for concrete angles.
#[derive(Debug, Clone, Copy)]
pub enum GateMatrix {
    One(Mat2),
    Two(Mat4),
}

fn cis(phi: f64) -> Complex64 {
    Complex64::from_polar(1.0, phi)
}

pub fn rx_matrix(t: f64) -> Mat2 {
    let (s, c) = (t / 2.0).sin_cos();
    let m = Complex64::new(0.0, -s);
    [[c.into(), m], [m, c.into()]]
}

pub fn rz_matrix(t: f64) -> Mat2 {
    [[cis(-t / 2.0), ZERO], [ZERO, cis(t / 2.0)]]
}

pub fn gpi_matrix(phi: f64) -> Mat2 {
    [[ZERO, cis(-phi)], [cis(phi), ZERO]]
}

pub fn gpi2_matrix(phi: f64) -> Mat2 {
    let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
    let mi = Complex64::new(0.0, -FRAC_1_SQRT_2);
    [[h, mi * cis(-phi)], [mi * cis(phi), h]]
}

/// Identical to [`rz_matrix`]: the virtual Z is a frame change.
pub fn virtual_z_matrix(t: f64) -> Mat2 {
    rz_matrix(t)
}

pub fn rxx_matrix(t: f64) -> Mat4 {
    ms_matrix(0.0, 0.0, t)
}

/// Mølmer–Sørensen gate with phases `phi0`, `phi1` and rotation angle
/// `angle`. At `angle = π/2` this is the fully entangling MS gate.
pub fn ms_matrix(phi0: f64, phi1: f64, angle: f64) -> Mat4 {
    let (s, c) = (angle / 2.0).sin_cos();
    let c = Complex64::new(c, 0.0);
    let mis = Complex64::new(0.0, -s);
    let mut m = [[ZERO; 4]; 4];
    m[0][0] = c;
    m[1][1] = c;
    m[2][2] = c;
    m[3][3] = c;
    m[0][3] = mis * cis(-(phi0 + phi1));
    m[1][2] = mis * cis(-(phi0 - phi1));
    m[2][1] = mis * cis(phi0 - phi1);
    m[3][0] = mis * cis(phi0 + phi1);
    m
}

pub fn cnot_matrix() -> Mat4 {
    let mut m = [[ZERO; 4]; 4];
    m[0][0] = ONE;
    m[1][1] = ONE;
    m[2][3] = ONE;
    m[3][2] = ONE;
    m
}

pub fn gate_matrix(kind: GateKind, angles: &[f64]) -> Result<GateMatrix> {
    if angles.len() != kind.n_angles() {
        return Err(Error::invalid(format!(
            "{kind} takes {} angle(s), got {}",
            kind.n_angles(),
            angles.len()
        )));
    }
    Ok(match kind {
        GateKind::Rx => GateMatrix::One(rx_matrix(angles[0])),
        GateKind::Rz => GateMatrix::One(rz_matrix(angles[0])),
        GateKind::Gpi => GateMatrix::One(gpi_matrix(angles[0])),
        GateKind::Gpi2 => GateMatrix::One(gpi2_matrix(angles[0])),
        GateKind::VirtualZ => GateMatrix::One(virtual_z_matrix(angles[0])),
        GateKind::Rxx => GateMatrix::Two(rxx_matrix(angles[0])),
        GateKind::Cnot => GateMatrix::Two(cnot_matrix()),
        GateKind::Ms => GateMatrix::Two(ms_matrix(angles[0], angles[1], angles[2])),
    })
}

/// A gate whose angles are read from a shared parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateOp {
    pub kind: GateKind,
    pub targets: Vec<usize>,
    pub slots: Vec<usize>,
}

impl GateOp {
    pub fn new(kind: GateKind, targets: Vec<usize>, slots: Vec<usize>) -> Self {
        GateOp {
            kind,
            targets,
            slots,
        }
    }

    pub fn angles(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.slots
            .iter()
            .map(|&s| {
                theta.get(s).copied().ok_or_else(|| {
                    Error::invalid(format!("slot {s} out of range for {} params", theta.len()))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Every qubit pair.
    Full,
    /// Pairs `(i, i + d)` for `d` in `1..=3`.
    Reduced,
}

impl Connectivity {
    pub fn pairs(self, n_qubits: usize) -> Vec<(usize, usize)> {
        let max_d = match self {
            Connectivity::Full => n_qubits,
            Connectivity::Reduced => 3,
        };
        let mut pairs = Vec::new();
        for d in 1..=max_d.min(n_qubits.saturating_sub(1)) {
            for i in 0..n_qubits - d {
                pairs.push((i, i + d));
            }
        }
        pairs
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Connectivity::Full),
            "reduced" => Ok(Connectivity::Reduced),
            other => Err(Error::parse("connectivity", other)),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Full => "full",
            Connectivity::Reduced => "reduced",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    pub n_qubits: usize,
    pub ops: Vec<GateOp>,
    pub n_params: usize,
}

impl Circuit {
    /// Builds a circuit and checks targets, angle arity and slot coverage.
    pub fn new(n_qubits: usize, ops: Vec<GateOp>, n_params: usize) -> Result<Self> {
        let circuit = Circuit {
            n_qubits,
            ops,
            n_params,
        };
        circuit.validate()?;
        Ok(circuit)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > 30 {
            return Err(Error::invalid(format!("n_qubits = {}", self.n_qubits)));
        }
        let mut used = vec![false; self.n_params];
        for (i, op) in self.ops.iter().enumerate() {
            check_targets(op.kind, &op.targets, self.n_qubits)
                .map_err(|e| Error::invalid(format!("op {i}: {e}")))?;
            if op.slots.len() != op.kind.n_angles() {
                return Err(Error::invalid(format!(
                    "op {i}: {} expects {} slot(s)",
                    op.kind,
                    op.kind.n_angles()
                )));
            }
            for &s in &op.slots {
                match used.get_mut(s) {
                    Some(u) => *u = true,
                    None => {
                        return Err(Error::invalid(format!(
                            "op {i}: slot {s} >= n_params {}",
                            self.n_params
                        )))
                    }
                }
            }
        }
        if let Some(s) = used.iter().position(|u| !u) {
            return Err(Error::invalid(format!("parameter slot {s} is never used")));
        }
        Ok(())
    }

    pub fn count_kind(&self, kind: GateKind) -> usize {
        self.ops.iter().filter(|op| op.kind == kind).count()
    }
}

fn check_targets(kind: GateKind, targets: &[usize], n_qubits: usize) -> Result<()> {
    if targets.len() != kind.arity() {
        return Err(Error::invalid(format!(
            "{kind} acts on {} qubit(s), got {}",
            kind.arity(),
            targets.len()
        )));
    }
    if let Some(&q) = targets.iter().find(|&&q| q >= n_qubits) {
        return Err(Error::invalid(format!(
            "target {q} out of range for {n_qubits} qubits"
        )));
    }
    if targets.len() == 2 && targets[0] == targets[1] {
        return Err(Error::invalid(format!("repeated target {}", targets[0])));
    }
    Ok(())
}

/// Builds the layered QCBM ansatz.
///
/// Region 1 is `Rx` then `Rz` on every qubit, region 2 is one `Rxx` per
/// connected pair, region 3 repeats region 1. Each extra layer appends
/// another region 2 + region 3 block. Every gate owns its own parameter.
pub fn build_qcbm_ansatz(
    n_qubits: usize,
    layers: usize,
    connectivity: Connectivity,
) -> Result<Circuit> {
    if n_qubits < 2 {
        return Err(Error::invalid(format!("n_qubits must be >= 2, got {n_qubits}")));
    }
    if layers < 1 {
        return Err(Error::invalid("layers must be >= 1"));
    }
    let mut ops = Vec::new();
    let mut next = 0usize;
    let mut slot = || {
        next += 1;
        next - 1
    };
    let rotations = |ops: &mut Vec<GateOp>, slot: &mut dyn FnMut() -> usize| {
        for q in 0..n_qubits {
            ops.push(GateOp::new(GateKind::Rx, vec![q], vec![slot()]));
            ops.push(GateOp::new(GateKind::Rz, vec![q], vec![slot()]));
        }
    };
    rotations(&mut ops, &mut slot);
    let pairs = connectivity.pairs(n_qubits);
    for _ in 0..layers {
        for &(a, b) in &pairs {
            ops.push(GateOp::new(GateKind::Rxx, vec![a, b], vec![slot()]));
        }
        rotations(&mut ops, &mut slot);
    }
    let n_params = ops.iter().map(|op| op.slots.len()).sum();
    Circuit::new(n_qubits, ops, n_params)
}

/// Near-identity start: uniform on `[-0.01, 0.01]`.
pub fn init_theta(n_params: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_params).map(|_| rng.gen_range(-0.01..=0.01)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl Statevector {
    /// `|0…0⟩` on `n_qubits` qubits.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > 30 {
            return Err(Error::invalid(format!("n_qubits = {n_qubits}")));
        }
        let mut amplitudes = vec![ZERO; 1 << n_qubits];
        amplitudes[0] = ONE;
        Ok(Statevector {
            n_qubits,
            amplitudes,
        })
    }

    /// Wraps raw amplitudes; length must be a power of two and the vector
    /// normalized within 1e-10.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::invalid(format!("amplitude length {len}")));
        }
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("state not normalized: {norm}")));
        }
        Ok(Statevector {
            n_qubits: len.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Applies a gate with explicit angles in place.
    pub fn apply(&mut self, kind: GateKind, targets: &[usize], angles: &[f64]) -> Result<()> {
        check_targets(kind, targets, self.n_qubits)?;
        match gate_matrix(kind, angles)? {
            GateMatrix::One(m) => self.apply_1q(&m, targets[0]),
            GateMatrix::Two(m) => self.apply_2q(&m, targets[0], targets[1]),
        }
        Ok(())
    }

    fn apply_1q(&mut self, m: &Mat2, q: usize) {
        let bit = 1usize << q;
        for i in 0..self.amplitudes.len() {
            if i & bit != 0 {
                continue;
            }
            let j = i | bit;
            let (a0, a1) = (self.amplitudes[i], self.amplitudes[j]);
            self.amplitudes[i] = m[0][0] * a0 + m[0][1] * a1;
            self.amplitudes[j] = m[1][0] * a0 + m[1][1] * a1;
        }
    }

    fn apply_2q(&mut self, m: &Mat4, qa: usize, qb: usize) {
        let (ba, bb) = (1usize << qa, 1usize << qb);
        // local index = 2*bit(a) + bit(b)
        let offsets = [0, bb, ba, ba | bb];
        for i in 0..self.amplitudes.len() {
            if i & (ba | bb) != 0 {
                continue;
            }
            let v = offsets.map(|o| self.amplitudes[i | o]);
            for (r, &o) in offsets.iter().enumerate() {
                self.amplitudes[i | o] =
                    m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2] + m[r][3] * v[3];
            }
        }
    }
}

/// Applies one parameterized gate, returning the new state.
pub fn apply_gate(state: &Statevector, gate: &GateOp, theta: &[f64]) -> Result<Statevector> {
    let mut out = state.clone();
    out.apply(gate.kind, &gate.targets, &gate.angles(theta)?)?;
    Ok(out)
}

/// `U(θ)|0…0⟩`.
pub fn simulate(circuit: &Circuit, theta: &[f64]) -> Result<Statevector> {
    if theta.len() != circuit.n_params {
        return Err(Error::invalid(format!(
            "expected {} parameters, got {}",
            circuit.n_params,
            theta.len()
        )));
    }
    let mut state = Statevector::zero(circuit.n_qubits)?;
    for op in &circuit.ops {
        state.apply(op.kind, &op.targets, &op.angles(theta)?)?;
    }
    Ok(state)
}

pub fn born_probabilities(state: &Statevector) -> Vec<f64> {
    state.amplitudes.iter().map(|a| a.norm_sqr()).collect()
}

/// Draws `shots` basis-state indices i.i.d. from the Born distribution.
/// Bit `i` of each returned index is the measurement outcome of qubit `i`.
pub fn sample_bitstrings(state: &Statevector, shots: usize, seed: u64) -> Result<Vec<u64>> {
    if shots == 0 {
        return Err(Error::invalid("shots must be >= 1"));
    }
    let mut cdf = Vec::with_capacity(state.amplitudes.len());
    let mut acc = 0.0;
    for p in born_probabilities(state) {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    let last = cdf.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..shots)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            cdf.partition_point(|&c| c <= u).min(last) as u64
        })
        .collect())
}

/// Expands a bitstring into a `{0, 1}` latent vector, qubit 0 first.
pub fn bits_to_latent(bits: u64, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((bits >> i) & 1) as f64).collect()
}
