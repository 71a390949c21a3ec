//! Training the circuit parameters θ against the generator loss: central
//! finite differences with plain gradient descent, or SPSA.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::SamplerBackend;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::quantum_sim::{bits_to_latent, Circuit};

/// A seeded scalar loss over θ. Each `eval` is one backend execution when
/// the loss samples a circuit.
pub trait Objective {
    fn eval(&mut self, theta: &[f64], seed: u64) -> Result<f64>;

    /// The closing evaluation of an SPSA run.
    fn finalize(&mut self, theta: &[f64], seed: u64) -> Result<f64> {
        self.eval(theta, seed)
    }
}

impl<F> Objective for F
where
    F: FnMut(&[f64], u64) -> Result<f64>,
{
    fn eval(&mut self, theta: &[f64], seed: u64) -> Result<f64> {
        self(theta, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QcbmOptimizer {
    FiniteDifference,
    Spsa,
}

impl FromStr for QcbmOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fd" => Ok(QcbmOptimizer::FiniteDifference),
            "spsa" => Ok(QcbmOptimizer::Spsa),
            other => Err(Error::parse("qcbm optimizer", other)),
        }
    }
}

impl fmt::Display for QcbmOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QcbmOptimizer::FiniteDifference => "fd",
            QcbmOptimizer::Spsa => "spsa",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpsaConfig {
    pub iterations: usize,
    pub a: f64,
    pub c: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// `A`; `None` means `0.1 · iterations`.
    pub stability: Option<f64>,
    /// Replace `a` from [`spsa_calibrate`] before the first run.
    pub calibrate: bool,
    pub calibration_calls: usize,
    /// Desired size of the first calibrated step.
    pub target_step: f64,
    /// Upper bound on the Euclidean norm of a single update.
    pub max_step: Option<f64>,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig {
            iterations: 50,
            a: 0.1,
            c: 0.1,
            alpha: 0.602,
            gamma: 0.101,
            stability: None,
            calibrate: true,
            calibration_calls: 50,
            target_step: 0.1,
            max_step: Some(0.5),
        }
    }
}

impl SpsaConfig {
    pub fn stability_constant(&self) -> f64 {
        self.stability.unwrap_or(0.1 * self.iterations as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("SPSA needs at least one iteration"));
        }
        if !(self.c > 0.0) || !(self.a >= 0.0) {
            return Err(Error::invalid("SPSA needs a >= 0 and c > 0"));
        }
        if self.max_step.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::invalid("SPSA max step must be > 0"));
        }
        if self.calibrate && (self.calibration_calls < 2 || self.calibration_calls % 2 != 0) {
            return Err(Error::invalid("calibration calls must be a positive even number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcbmTrainConfig {
    pub alpha: f64,
    pub delta: f64,
    pub update_period: usize,
    pub freeze_epoch: usize,
    pub n_samples: usize,
    pub optimizer: QcbmOptimizer,
    pub spsa: SpsaConfig,
}

impl Default for QcbmTrainConfig {
    fn default() -> Self {
        QcbmTrainConfig {
            alpha: 0.016,
            delta: 0.01,
            update_period: 30,
            freeze_epoch: 100,
            n_samples: 64,
            optimizer: QcbmOptimizer::FiniteDifference,
            spsa: SpsaConfig::default(),
        }
    }
}

impl QcbmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.delta > 0.0) {
            return Err(Error::invalid("alpha and delta must be > 0"));
        }
        if self.update_period == 0 {
            return Err(Error::invalid("update period must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be >= 1"));
        }
        self.spsa.validate()
    }

    /// Number of epochs in `0..epochs` where θ is updated.
    pub fn update_events(&self, epochs: usize) -> usize {
        (0..epochs)
            .filter(|&e| schedule_step(e, self.update_period, self.freeze_epoch))
            .count()
    }
}

/// `true` iff `epoch < freeze` and `epoch` is a multiple of `period`.
pub fn schedule_step(epoch: usize, period: usize, freeze: usize) -> bool {
    period > 0 && epoch < freeze && epoch % period == 0
}

/// `−mean D(G(z))` with `z` drawn as `n_samples` bitstrings at θ.
pub fn qcbm_generator_loss<B, G, D>(
    circuit: &Circuit,
    theta: &[f64],
    backend: &B,
    generator: G,
    critic: D,
    n_samples: usize,
    seed: u64,
) -> Result<f64>
where
    B: SamplerBackend + ?Sized,
    G: Fn(&Tensor) -> Result<Tensor>,
    D: Fn(&Tensor) -> Result<Tensor>,
{
    let bits = backend.sample(circuit, theta, n_samples, seed)?;
    let z = latents_from_bits(&bits, circuit.n_qubits);
    let scores = critic(&generator(&z)?)?;
    if scores.is_empty() {
        return Err(Error::shape("critic returned no scores"));
    }
    Ok(-scores.data.iter().sum::<f64>() / scores.len() as f64)
}

/// `[bits.len(), n]` latent batch.
pub fn latents_from_bits(bits: &[u64], n: usize) -> Tensor {
    Tensor {
        shape: vec![bits.len(), n],
        data: bits.iter().flat_map(|&b| bits_to_latent(b, n)).collect(),
    }
}

/// `g_i = (L(θ + δe_i) − L(θ − δe_i)) / 2δ`, exactly `2·|θ|` evaluations.
/// Both sides of a coordinate share one loss seed.
pub fn finite_diff_gradient(
    objective: &mut impl Objective,
    theta: &[f64],
    delta: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("delta must be > 0, got {delta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let s = rng.gen();
        probe[i] = theta[i] + delta;
        let plus = objective.eval(&probe, s)?;
        probe[i] = theta[i] - delta;
        let minus = objective.eval(&probe, s)?;
        probe[i] = theta[i];
        grad.push((plus - minus) / (2.0 * delta));
    }
    Ok(grad)
}

/// `θ − α·g`
pub fn gd_update(theta: &[f64], grad: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if theta.len() != grad.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            theta.len()
        )));
    }
    Ok(theta.iter().zip(grad).map(|(t, g)| t - alpha * g).collect())
}

fn rademacher(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn shifted(theta: &[f64], dir: &[f64], step: f64) -> Vec<f64> {
    theta.iter().zip(dir).map(|(t, d)| t + step * d).collect()
}

/// Chooses `a` so the first SPSA step has roughly `target_step` magnitude,
/// from `calibration_calls / 2` symmetric probes at scale `c`.
///
/// Returns `(a, c)`; `c` is passed through unchanged.
pub fn spsa_calibrate(
    objective: &mut impl Objective,
    theta0: &[f64],
    config: &SpsaConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if config.calibration_calls < 2 || config.calibration_calls % 2 != 0 {
        return Err(Error::invalid("calibration calls must be a positive even number"));
    }
    if !(config.c > 0.0) {
        return Err(Error::invalid("SPSA needs c > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = config.calibration_calls / 2;
    let c = config.c;
    let mut magnitude = 0.0;
    for _ in 0..steps {
        let dir = rademacher(&mut rng, theta0.len());
        let s = rng.gen();
        let plus = objective.eval(&shifted(theta0, &dir, c), s)?;
        let minus = objective.eval(&shifted(theta0, &dir, -c), s)?;
        magnitude += ((plus - minus) / (2.0 * c)).abs();
    }
    magnitude /= steps as f64;
    let scale = (config.stability_constant() + 1.0).powf(config.alpha);
    // a flat landscape gives no signal; fall back to a unit gradient estimate
    let magnitude = if magnitude > 1e-12 { magnitude } else { 1.0 };
    Ok((config.target_step * scale / magnitude, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpsaResult {
    pub theta: Vec<f64>,
    pub final_loss: f64,
    pub evaluations: usize,
}

/// `iterations` SPSA steps (two evaluations each) followed by one
/// [`Objective::finalize`] at the result: `2N + 1` evaluations in total.
pub fn spsa_run(
    objective: &mut impl Objective,
    theta0: &[f64],
    config: &SpsaConfig,
    seed: u64,
) -> Result<SpsaResult> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let big_a = config.stability_constant();
    let mut theta = theta0.to_vec();
    let mut evaluations = 0;
    for k in 0..config.iterations {
        let kf = k as f64;
        let ak = config.a / (kf + 1.0 + big_a).powf(config.alpha);
        let ck = config.c / (kf + 1.0).powf(config.gamma);
        let dir = rademacher(&mut rng, theta.len());
        let s = rng.gen();
        let plus = objective.eval(&shifted(&theta, &dir, ck), s)?;
        let minus = objective.eval(&shifted(&theta, &dir, -ck), s)?;
        evaluations += 2;
        // 1/Δ_i = Δ_i for ±1 entries, so every coordinate moves by the same
        // magnitude and the update norm is |step|·√n
        let mut step = ak * (plus - minus) / (2.0 * ck);
        if let Some(max) = config.max_step {
            let norm = step.abs() * (theta.len() as f64).sqrt();
            if norm > max {
                step *= max / norm;
            }
        }
        for (t, d) in theta.iter_mut().zip(&dir) {
            *t -= step * d;
        }
    }
    let final_loss = objective.finalize(&theta, rng.gen())?;
    Ok(SpsaResult {
        theta,
        final_loss,
        evaluations: evaluations + 1,
    })
}
