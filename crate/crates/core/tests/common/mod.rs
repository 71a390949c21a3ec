#![allow(dead_code)]

use num_complex::Complex64;
use qcbm_wgan::nn::{Graph, NodeId, Tensor};
use qcbm_wgan::quantum_sim::{Circuit, GateKind};
use qcbm_wgan::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Entries with `|x|` in `[0.1, 1]`, random sign.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ x ⊙ R` for a fixed pseudo-random `R`: turns any node into a scalar
/// whose gradient exercises every output entry.
pub fn project(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let r = uniform(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let rn = g.constant(r);
    let p = g.mul(x, rn)?;
    Ok(g.sum(p))
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Normwise relative error between the recorded gradient and central
/// differences with step `h`, over every entry of every input.
///
/// Coordinates whose `±h` probes change the leaky-ReLU activation pattern
/// straddle a kink and are skipped.
pub fn fd_check<F>(inputs: &[Tensor], h: f64, f: F) -> FdReport
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor]| -> (f64, Vec<bool>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &ids).unwrap();
        (g.value(loss).item(), g.activation_pattern())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &ids).unwrap();
    let pattern = g.activation_pattern();
    let grads = g.grad(loss, &ids).unwrap();
    let analytic: Vec<Vec<f64>> = grads.iter().map(|&n| g.value(n).data.clone()).collect();

    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0, 0);
    let mut probe = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let x = inputs[t].data[i];
            probe[t].data[i] = x + h;
            let (lp, pp) = eval(&probe);
            probe[t].data[i] = x - h;
            let (lm, pm) = eval(&probe);
            probe[t].data[i] = x;
            if pp != pattern || pm != pattern {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[t][i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nf += numeric * numeric;
            checked += 1;
        }
    }
    let scale = na.sqrt().max(nf.sqrt()).max(1e-12);
    FdReport {
        rel_err: diff.sqrt() / scale,
        checked,
        skipped,
    }
}

// --- dense circuit oracle ----------------------------------------------------

pub type Dense = Vec<Vec<Complex64>>;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(dim: usize) -> Dense {
    (0..dim)
        .map(|i| (0..dim).map(|j| c((i == j) as u8 as f64, 0.0)).collect())
        .collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let mut out = vec![vec![c(0.0, 0.0); n]; n];
    for i in 0..n {
        for k in 0..n {
            if a[i][k] == c(0.0, 0.0) {
                continue;
            }
            for j in 0..n {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Embeds a single-qubit matrix on qubit `q` (qubit 0 = least significant
/// bit of the basis index) by checking bit agreement entry by entry.
fn embed1(m: [[Complex64; 2]; 2], q: usize, n: usize) -> Dense {
    let dim = 1 << n;
    let mut out = vec![vec![c(0.0, 0.0); dim]; dim];
    for (r, row) in out.iter_mut().enumerate() {
        for (col, v) in row.iter_mut().enumerate() {
            if (r ^ col) & !(1 << q) == 0 {
                *v = m[(r >> q) & 1][(col >> q) & 1];
            }
        }
    }
    out
}

/// Two-qubit matrix on `(a, b)` with local index `2·bit(a) + bit(b)`.
fn embed2(m: [[Complex64; 4]; 4], a: usize, b: usize, n: usize) -> Dense {
    let dim = 1 << n;
    let mask = !((1 << a) | (1 << b));
    let local = |x: usize| 2 * ((x >> a) & 1) + ((x >> b) & 1);
    let mut out = vec![vec![c(0.0, 0.0); dim]; dim];
    for (r, row) in out.iter_mut().enumerate() {
        for (col, v) in row.iter_mut().enumerate() {
            if (r ^ col) & mask == 0 {
                *v = m[local(r)][local(col)];
            }
        }
    }
    out
}

/// Written from the textbook exponentials, independent of the library's
/// matrix helpers: `exp(−i t σ/2)` and `exp(−i t X⊗X / 2)`.
fn textbook(kind: GateKind, a: &[f64]) -> Option<Dense1or2> {
    let z = c(0.0, 0.0);
    match kind {
        GateKind::Rx => {
            let (cs, sn) = ((a[0] / 2.0).cos(), (a[0] / 2.0).sin());
            Some(Dense1or2::One([[c(cs, 0.0), c(0.0, -sn)], [c(0.0, -sn), c(cs, 0.0)]]))
        }
        GateKind::Rz => {
            let e = |s: f64| Complex64::from_polar(1.0, s * a[0] / 2.0);
            Some(Dense1or2::One([[e(-1.0), z], [z, e(1.0)]]))
        }
        GateKind::Rxx => {
            let (cs, sn) = (c((a[0] / 2.0).cos(), 0.0), c(0.0, -(a[0] / 2.0).sin()));
            Some(Dense1or2::Two([
                [cs, z, z, sn],
                [z, cs, sn, z],
                [z, sn, cs, z],
                [sn, z, z, cs],
            ]))
        }
        GateKind::Cnot => {
            let o = c(1.0, 0.0);
            Some(Dense1or2::Two([
                [o, z, z, z],
                [z, o, z, z],
                [z, z, z, o],
                [z, z, o, z],
            ]))
        }
        _ => None,
    }
}

enum Dense1or2 {
    One([[Complex64; 2]; 2]),
    Two([[Complex64; 4]; 4]),
}

/// Full unitary of a standard-gate circuit, built by Kronecker embedding.
pub fn dense_unitary(circuit: &Circuit, theta: &[f64]) -> Dense {
    let n = circuit.n_qubits;
    let mut u = identity(1 << n);
    for op in &circuit.ops {
        let angles: Vec<f64> = op.slots.iter().map(|&s| theta[s]).collect();
        let g = match textbook(op.kind, &angles).expect("standard gate") {
            Dense1or2::One(m) => embed1(m, op.targets[0], n),
            Dense1or2::Two(m) => embed2(m, op.targets[0], op.targets[1], n),
        };
        u = matmul(&g, &u);
    }
    u
}

/// Max elementwise deviation after removing the best global phase.
pub fn phase_aligned_distance(a: &Dense, b: &Dense) -> f64 {
    let mut overlap = c(0.0, 0.0);
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            overlap += x.conj() * y;
        }
    }
    let phase = if overlap.norm() > 0.0 {
        overlap / overlap.norm()
    } else {
        c(1.0, 0.0)
    };
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x * phase - y).norm());
        }
    }
    worst
}

fn kron2(a: [[Complex64; 2]; 2], b: [[Complex64; 2]; 2]) -> [[Complex64; 4]; 4] {
    let mut m = [[c(0.0, 0.0); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = a[i / 2][j / 2] * b[i % 2][j % 2];
        }
    }
    m
}

/// `cos φ·X + sin φ·Y`
fn sigma(phi: f64) -> [[Complex64; 2]; 2] {
    let z = c(0.0, 0.0);
    [[z, Complex64::from_polar(1.0, -phi)], [Complex64::from_polar(1.0, phi), z]]
}

/// Native gates from their defining forms: `GPI(φ) = σ_φ`,
/// `GPI2(φ) = (I − i σ_φ)/√2`, `VZ(t) = exp(−i t Z/2)`,
/// `MS(φ0, φ1, t) = cos(t/2)·I − i sin(t/2)·σ_φ0 ⊗ σ_φ1`.
pub fn dense_native(circuit: &qcbm_wgan::transpile::NativeCircuit) -> Dense {
    let n = circuit.n_qubits;
    let mut u = identity(1 << n);
    for op in &circuit.ops {
        let a = &op.angles;
        let g = match op.kind {
            GateKind::Gpi => embed1(sigma(a[0]), op.targets[0], n),
            GateKind::Gpi2 => {
                let s = sigma(a[0]);
                let r = std::f64::consts::FRAC_1_SQRT_2;
                let m = [
                    [c(r, 0.0), c(0.0, -r) * s[0][1]],
                    [c(0.0, -r) * s[1][0], c(r, 0.0)],
                ];
                embed1(m, op.targets[0], n)
            }
            GateKind::VirtualZ => {
                let m = [
                    [Complex64::from_polar(1.0, -a[0] / 2.0), c(0.0, 0.0)],
                    [c(0.0, 0.0), Complex64::from_polar(1.0, a[0] / 2.0)],
                ];
                embed1(m, op.targets[0], n)
            }
            GateKind::Ms => {
                let ss = kron2(sigma(a[0]), sigma(a[1]));
                let (cs, sn) = ((a[2] / 2.0).cos(), (a[2] / 2.0).sin());
                let mut m = [[c(0.0, 0.0); 4]; 4];
                for i in 0..4 {
                    for j in 0..4 {
                        let id = if i == j { cs } else { 0.0 };
                        m[i][j] = c(id, 0.0) + c(0.0, -sn) * ss[i][j];
                    }
                }
                embed2(m, op.targets[0], op.targets[1], n)
            }
            other => panic!("{other} is not native"),
        };
        u = matmul(&g, &u);
    }
    u
}

/// Total-variation distance between an empirical histogram and `p`.
pub fn tv_distance(samples: &[u64], p: &[f64]) -> f64 {
    let mut counts = vec![0usize; p.len()];
    for &s in samples {
        counts[s as usize] += 1;
    }
    let n = samples.len() as f64;
    0.5 * counts
        .iter()
        .zip(p)
        .map(|(&k, &q)| (k as f64 / n - q).abs())
        .sum::<f64>()
}

/// Expected TV of an exact `shots`-sample histogram from `p`, using the
/// normal approximation `E|k/N − p| ≈ √(2p(1−p)/(πN))`.
pub fn tv_noise_floor(p: &[f64], shots: usize) -> f64 {
    let n = shots as f64;
    p.iter()
        .map(|&q| 0.5 * (2.0 * q * (1.0 - q) / (std::f64::consts::PI * n)).sqrt())
        .sum()
}
