//! Experiment runner: run configuration, the alternating WGAN-GP / circuit
//! training loop, run comparison and multi-seed suites.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{
    counted, depolarizing_backend, exact_backend, CallLedger, CountedBackend, Phase as LedgerPhase,
    SamplerBackend,
};
use crate::data::{self, EbsdBatch, Phase};
use crate::error::{Error, Result};
use crate::metrics::{self, mmd_linear, relative_improvement, EpochRecord, Estimator};
use crate::nn::{
    wgan_gp_losses, Adam, AdamConfig, BoundCritic, Checkpoint, CriticNet, CriticShape, Graph,
    GeneratorNet, GeneratorShape, Tensor,
};
use crate::qcbm_train::{
    finite_diff_gradient, gd_update, latents_from_bits, qcbm_generator_loss, schedule_step,
    spsa_calibrate, spsa_run, Objective, QcbmOptimizer, QcbmTrainConfig, SpsaConfig,
};
use crate::quantum_sim::{build_qcbm_ansatz, init_theta, Circuit, Connectivity};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    Bernoulli,
    Qcbm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Exact,
    Depolarizing,
    Counted,
}

impl FromStr for LatentSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(LatentSource::Bernoulli),
            "qcbm" => Ok(LatentSource::Qcbm),
            other => Err(Error::parse("latent source", other)),
        }
    }
}

impl fmt::Display for LatentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentSource::Bernoulli => "bernoulli",
            LatentSource::Qcbm => "qcbm",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(BackendKind::Exact),
            "depolarizing" => Ok(BackendKind::Depolarizing),
            "counted" => Ok(BackendKind::Counted),
            other => Err(Error::parse("backend", other)),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Exact => "exact",
            BackendKind::Depolarizing => "depolarizing",
            BackendKind::Counted => "counted",
        })
    }
}

/// Everything that determines a run. Serialized as flat `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub name: String,
    pub n_z: usize,
    pub image_size: usize,
    pub dataset_size: usize,
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub critic_steps: usize,
    pub lambda: f64,
    /// Clamp every critic weight into `[-c, c]` after each critic step.
    pub weight_clip: Option<f64>,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gen_channels: (usize, usize),
    pub critic_channels: (usize, usize),
    pub latent: LatentSource,
    pub layers: usize,
    pub connectivity: Connectivity,
    pub qcbm: QcbmTrainConfig,
    pub backend: BackendKind,
    pub p_flip: f64,
    /// Bitstrings drawn after each θ change; training latents are resampled
    /// from this pool.
    pub latent_pool: usize,
    pub eval_size: usize,
    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_train: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            name: "custom".into(),
            n_z: 12,
            image_size: 16,
            dataset_size: 500,
            phase: Phase::Ferrite,
            epochs: 400,
            batch_size: 50,
            critic_steps: 1,
            lambda: DESK_LAMBDA,
            weight_clip: None,
            lr_g: 5e-4,
            lr_d: 5e-4,
            beta1: 0.5,
            beta2: 0.9,
            gen_channels: (16, 8),
            critic_channels: (8, 16),
            latent: LatentSource::Bernoulli,
            layers: 1,
            connectivity: Connectivity::Full,
            qcbm: QcbmTrainConfig::default(),
            backend: BackendKind::Exact,
            p_flip: 0.0,
            latent_pool: 4096,
            eval_size: 256,
            seed_data: 1,
            seed_init: 2,
            seed_train: 3,
        }
    }
}

/// Penalty weight for desk-scale runs. The library default
/// ([`crate::nn::DEFAULT_LAMBDA`]) leaves the critic effectively
/// unconstrained on 16×16 five-channel images and training diverges.
pub const DESK_LAMBDA: f64 = 10.0;

/// Settings shared by the full-scale presets.
fn full_scale() -> TrainConfig {
    TrainConfig {
        lambda: crate::nn::DEFAULT_LAMBDA,
        lr_g: AdamConfig::default().lr,
        lr_d: AdamConfig::default().lr,
        ..Default::default()
    }
}

pub const PRESETS: [&str; 8] = [
    "ferrite-sim",
    "bainite-sim",
    "ferrite-qpu-like",
    "bainite-qpu-like",
    "ferrite-sim-desk",
    "bainite-sim-desk",
    "ferrite-qpu-like-desk",
    "bainite-qpu-like-desk",
];

fn qpu_like(phase: Phase, connectivity: Connectivity, cycles: usize) -> TrainConfig {
    TrainConfig {
        n_z: 12,
        image_size: 60,
        dataset_size: 3000,
        phase,
        epochs: 2000,
        latent: LatentSource::Qcbm,
        connectivity,
        backend: BackendKind::Counted,
        qcbm: QcbmTrainConfig {
            optimizer: QcbmOptimizer::Spsa,
            update_period: 50,
            freeze_epoch: 50 * cycles,
            spsa: SpsaConfig {
                iterations: 50,
                ..Default::default()
            },
            ..Default::default()
        },
        ..full_scale()
    }
}

/// Named configurations. The `-desk` variants keep the schedule structure
/// and shrink images, dataset and epoch counts to single-core scale.
pub fn preset(name: &str) -> Result<TrainConfig> {
    let mut c = match name {
        "ferrite-sim" => TrainConfig {
            n_z: 16,
            image_size: 60,
            dataset_size: 9000,
            epochs: 4000,
            latent: LatentSource::Qcbm,
            qcbm: QcbmTrainConfig {
                update_period: 30,
                freeze_epoch: 100,
                ..Default::default()
            },
            ..full_scale()
        },
        "bainite-sim" => TrainConfig {
            phase: Phase::Bainite,
            ..preset_with("ferrite-sim", |c| {
                c.dataset_size = 3000;
                c.qcbm.update_period = 10;
            })?
        },
        "ferrite-qpu-like" => qpu_like(Phase::Ferrite, Connectivity::Full, 5),
        "bainite-qpu-like" => qpu_like(Phase::Bainite, Connectivity::Reduced, 6),
        "ferrite-sim-desk" => preset_with("ferrite-sim", desk)?,
        "bainite-sim-desk" => preset_with("bainite-sim", desk)?,
        "ferrite-qpu-like-desk" => preset_with("ferrite-qpu-like", desk_qpu)?,
        "bainite-qpu-like-desk" => preset_with("bainite-qpu-like", desk_qpu)?,
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")),
            ))
        }
    };
    c.name = name.to_string();
    Ok(c)
}

fn preset_with(name: &str, f: impl FnOnce(&mut TrainConfig)) -> Result<TrainConfig> {
    let mut c = preset(name)?;
    f(&mut c);
    Ok(c)
}

fn desk_common(c: &mut TrainConfig) {
    let d = TrainConfig::default();
    c.image_size = d.image_size;
    c.lambda = d.lambda;
    c.lr_g = d.lr_g;
    c.lr_d = d.lr_d;
}

fn desk(c: &mut TrainConfig) {
    desk_common(c);
    c.n_z = 12;
    c.dataset_size = (c.dataset_size / 20).max(150);
    c.epochs = 200;
}

fn desk_qpu(c: &mut TrainConfig) {
    desk_common(c);
    c.dataset_size = c.dataset_size / 10;
    // cycles stay at 50-epoch spacing; the tail after freezing is shortened
    c.epochs = c.qcbm.freeze_epoch + 100;
}

fn pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated integers")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

impl TrainConfig {
    /// Every key in file order, as written by [`TrainConfig::to_text`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let q = &self.qcbm;
        let s = &q.spsa;
        vec![
            ("name", self.name.clone()),
            ("n_z", self.n_z.to_string()),
            ("image_size", self.image_size.to_string()),
            ("dataset_size", self.dataset_size.to_string()),
            ("phase", self.phase.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("critic_steps", self.critic_steps.to_string()),
            ("lambda", format!("{:?}", self.lambda)),
            (
                "weight_clip",
                self.weight_clip.map_or("none".to_string(), |v| format!("{v:?}")),
            ),
            ("lr_g", format!("{:?}", self.lr_g)),
            ("lr_d", format!("{:?}", self.lr_d)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("gen_channels", format!("{},{}", self.gen_channels.0, self.gen_channels.1)),
            (
                "critic_channels",
                format!("{},{}", self.critic_channels.0, self.critic_channels.1),
            ),
            ("latent", self.latent.to_string()),
            ("layers", self.layers.to_string()),
            ("connectivity", self.connectivity.to_string()),
            ("qcbm_optimizer", q.optimizer.to_string()),
            ("alpha", format!("{:?}", q.alpha)),
            ("delta", format!("{:?}", q.delta)),
            ("update_period", q.update_period.to_string()),
            ("freeze_epoch", q.freeze_epoch.to_string()),
            ("n_samples", q.n_samples.to_string()),
            ("spsa_iterations", s.iterations.to_string()),
            ("spsa_a", format!("{:?}", s.a)),
            ("spsa_c", format!("{:?}", s.c)),
            ("spsa_alpha", format!("{:?}", s.alpha)),
            ("spsa_gamma", format!("{:?}", s.gamma)),
            (
                "spsa_stability",
                s.stability.map_or("auto".to_string(), |v| format!("{v:?}")),
            ),
            ("spsa_calibrate", s.calibrate.to_string()),
            ("spsa_calibration_calls", s.calibration_calls.to_string()),
            ("spsa_target_step", format!("{:?}", s.target_step)),
            (
                "spsa_max_step",
                s.max_step.map_or("none".to_string(), |v| format!("{v:?}")),
            ),
            ("backend", self.backend.to_string()),
            ("p_flip", format!("{:?}", self.p_flip)),
            ("latent_pool", self.latent_pool.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("seed_data", self.seed_data.to_string()),
            ("seed_init", self.seed_init.to_string()),
            ("seed_train", self.seed_train.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| Error::config(key, format!("{v:?}: {e}")))
        }
        let enumerated = |e: Error| Error::config(key, e.to_string());
        let q = &mut self.qcbm;
        match key {
            "name" => self.name = value.to_string(),
            "preset" => {
                let name = self.name.clone();
                *self = preset(value)?;
                if name != "custom" {
                    self.name = name;
                }
            }
            "n_z" => self.n_z = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "dataset_size" => self.dataset_size = num(key, value)?,
            "phase" => self.phase = value.parse().map_err(enumerated)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "critic_steps" => self.critic_steps = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lr_g" => self.lr_g = num(key, value)?,
            "lr_d" => self.lr_d = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "gen_channels" => self.gen_channels = pair(value).map_err(|e| Error::config(key, e))?,
            "critic_channels" => {
                self.critic_channels = pair(value).map_err(|e| Error::config(key, e))?
            }
            "latent" => self.latent = value.parse().map_err(enumerated)?,
            "layers" => self.layers = num(key, value)?,
            "connectivity" => self.connectivity = value.parse().map_err(enumerated)?,
            "qcbm_optimizer" => q.optimizer = value.parse().map_err(enumerated)?,
            "alpha" => q.alpha = num(key, value)?,
            "delta" => q.delta = num(key, value)?,
            "update_period" => q.update_period = num(key, value)?,
            "freeze_epoch" => q.freeze_epoch = num(key, value)?,
            "n_samples" => q.n_samples = num(key, value)?,
            "spsa_iterations" => q.spsa.iterations = num(key, value)?,
            "spsa_a" => q.spsa.a = num(key, value)?,
            "spsa_c" => q.spsa.c = num(key, value)?,
            "spsa_alpha" => q.spsa.alpha = num(key, value)?,
            "spsa_gamma" => q.spsa.gamma = num(key, value)?,
            "spsa_stability" => {
                q.spsa.stability = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "spsa_calibrate" => q.spsa.calibrate = num(key, value)?,
            "spsa_calibration_calls" => q.spsa.calibration_calls = num(key, value)?,
            "spsa_target_step" => q.spsa.target_step = num(key, value)?,
            "weight_clip" => {
                self.weight_clip = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "spsa_max_step" => {
                q.spsa.max_step = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "backend" => self.backend = value.parse().map_err(enumerated)?,
            "p_flip" => self.p_flip = num(key, value)?,
            "latent_pool" => self.latent_pool = num(key, value)?,
            "eval_size" => self.eval_size = num(key, value)?,
            "seed_data" => self.seed_data = num(key, value)?,
            "seed_init" => self.seed_init = num(key, value)?,
            "seed_train" => self.seed_train = num(key, value)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. A `preset=` line resets
    /// every field to that preset, so it normally comes first.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected key=value"))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Checks every field; the first violation is reported by name.
    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, m: &str| Err(Error::config(f, m));
        if self.n_z == 0 || self.n_z > 20 {
            return fail("n_z", "must be in 1..=20");
        }
        if self.image_size < 8 || self.image_size % 4 != 0 || self.image_size > 64 {
            return fail("image_size", "must be a multiple of 4 in 8..=64");
        }
        if self.dataset_size < 2 {
            return fail("dataset_size", "must be >= 2");
        }
        if self.epochs == 0 {
            return fail("epochs", "must be >= 1");
        }
        if self.batch_size < 2 || self.batch_size > self.dataset_size {
            return fail("batch_size", "must be in 2..=dataset_size");
        }
        if self.critic_steps == 0 {
            return fail("critic_steps", "must be >= 1");
        }
        if !(self.lambda >= 0.0) {
            return fail("lambda", "must be >= 0");
        }
        if self.weight_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("weight_clip", "must be > 0 or none");
        }
        for (f, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0) {
                return fail(f, "must be > 0");
            }
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(f, "must be in [0, 1)");
            }
        }
        let (g0, g1) = self.gen_channels;
        let (c0, c1) = self.critic_channels;
        if g0 == 0 || g1 == 0 {
            return fail("gen_channels", "must be positive");
        }
        if c0 == 0 || c1 == 0 {
            return fail("critic_channels", "must be positive");
        }
        if self.latent == LatentSource::Qcbm {
            if self.n_z < 2 {
                return fail("n_z", "a circuit needs at least 2 qubits");
            }
            if self.layers == 0 {
                return fail("layers", "must be >= 1");
            }
        }
        let q = &self.qcbm;
        if !(q.alpha > 0.0) {
            return fail("alpha", "must be > 0");
        }
        if !(q.delta > 0.0) {
            return fail("delta", "must be > 0");
        }
        if q.update_period == 0 {
            return fail("update_period", "must be >= 1");
        }
        if q.n_samples == 0 {
            return fail("n_samples", "must be >= 1");
        }
        let s = &q.spsa;
        if s.iterations == 0 {
            return fail("spsa_iterations", "must be >= 1");
        }
        if !(s.a >= 0.0) {
            return fail("spsa_a", "must be >= 0");
        }
        if !(s.c > 0.0) {
            return fail("spsa_c", "must be > 0");
        }
        if s.stability.is_some_and(|a| !(a >= 0.0)) {
            return fail("spsa_stability", "must be >= 0 or auto");
        }
        if s.calibrate && (s.calibration_calls < 2 || s.calibration_calls % 2 != 0) {
            return fail("spsa_calibration_calls", "must be a positive even number");
        }
        if !(s.target_step > 0.0) {
            return fail("spsa_target_step", "must be > 0");
        }
        if s.max_step.is_some_and(|m| !(m > 0.0)) {
            return fail("spsa_max_step", "must be > 0 or none");
        }
        if !(0.0..=0.5).contains(&self.p_flip) {
            return fail("p_flip", "must be in [0, 0.5]");
        }
        if self.latent_pool == 0 {
            return fail("latent_pool", "must be >= 1");
        }
        if self.eval_size < 2 {
            return fail("eval_size", "must be >= 2");
        }
        Ok(())
    }

    /// Whether θ can still change at or after `epoch`.
    pub fn theta_frozen(&self, epoch: usize) -> bool {
        if self.latent != LatentSource::Qcbm {
            return true;
        }
        let m = self.qcbm.update_period;
        let next = epoch.div_ceil(m) * m;
        next >= self.qcbm.freeze_epoch
    }

    /// θ-update events over the whole run.
    pub fn theta_updates(&self) -> usize {
        if self.latent != LatentSource::Qcbm {
            return 0;
        }
        self.qcbm.update_events(self.epochs)
    }

    pub fn n_params(&self) -> usize {
        let pairs = self.connectivity.pairs(self.n_z).len();
        2 * self.n_z + self.layers * (pairs + 2 * self.n_z)
    }

    /// Backend executions the whole run must record:
    /// `events · (2N + 1) + calibration` for SPSA, `events · 2|θ|` for
    /// finite differences.
    pub fn expected_executions(&self) -> (u64, u64) {
        let events = self.theta_updates() as u64;
        if events == 0 {
            return (0, 0);
        }
        match self.qcbm.optimizer {
            QcbmOptimizer::FiniteDifference => (0, events * 2 * self.n_params() as u64),
            QcbmOptimizer::Spsa => {
                let s = &self.qcbm.spsa;
                let cal = if s.calibrate { s.calibration_calls as u64 } else { 0 };
                (cal, events * (2 * s.iterations as u64 + 1))
            }
        }
    }
}

/// Latents for the classical networks: coin flips, or draws from the pool
/// of circuit samples.
enum LatentSampler {
    Bernoulli,
    Pool(Vec<u64>),
}

impl LatentSampler {
    fn draw(&self, rng: &mut ChaCha8Rng, n_z: usize, batch: usize) -> Tensor {
        match self {
            LatentSampler::Bernoulli => data::bernoulli_latent_with(rng, n_z, batch),
            LatentSampler::Pool(pool) => {
                let bits: Vec<u64> = (0..batch).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
                latents_from_bits(&bits, n_z)
            }
        }
    }
}

/// The circuit-side loss `−mean D(G(z))` with every network fixed.
struct CircuitLoss<'a> {
    circuit: &'a Circuit,
    backend: &'a dyn SamplerBackend,
    generator: &'a GeneratorNet,
    critic: &'a CriticNet,
    n_samples: usize,
}

impl Objective for CircuitLoss<'_> {
    fn eval(&mut self, theta: &[f64], seed: u64) -> Result<f64> {
        qcbm_generator_loss(
            self.circuit,
            theta,
            self.backend,
            |z: &Tensor| self.generator.generate(z),
            |x: &Tensor| self.critic.score(x),
            self.n_samples,
            seed,
        )
    }
}

/// Final state of a run plus what it wrote.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub generator: GeneratorNet,
    pub critic: CriticNet,
    pub theta: Option<Vec<f64>>,
    /// θ at the end of each epoch (circuit latents only).
    pub theta_history: Vec<Vec<f64>>,
    pub theta_updates: usize,
    /// `(calibration, optimization)` executions.
    pub executions: (u64, u64),
    pub checkpoints: Vec<PathBuf>,
}

fn checkpoint(
    config: &TrainConfig,
    epoch: usize,
    generator: &GeneratorNet,
    critic: &CriticNet,
    theta: Option<&[f64]>,
) -> Checkpoint {
    let mut meta: Vec<(String, String)> = vec![
        ("epoch".into(), epoch.to_string()),
        ("normalization".into(), "tanh [-1, 1], x/127.5 - 1".into()),
    ];
    meta.extend(config.entries().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    let mut tensors = Vec::new();
    for (n, t) in GeneratorNet::PARAM_NAMES.iter().zip(&generator.params) {
        tensors.push((format!("gen.{n}"), t.clone()));
    }
    for (n, t) in CriticNet::PARAM_NAMES.iter().zip(&critic.params) {
        tensors.push((format!("critic.{n}"), t.clone()));
    }
    if let Some(theta) = theta {
        tensors.push(("theta".into(), Tensor {
            shape: vec![theta.len()],
            data: theta.to_vec(),
        }));
    }
    Checkpoint { meta, tensors }
}

/// Rebuilds the run configuration and networks stored by a training run.
pub fn restore(ck: &Checkpoint) -> Result<(TrainConfig, GeneratorNet, Option<Vec<f64>>)> {
    let mut config = TrainConfig::default();
    for (k, v) in &ck.meta {
        if let Some(key) = k.strip_prefix("config.") {
            config.set(key, v)?;
        }
    }
    config.validate()?;
    let mut generator = GeneratorNet::new(generator_shape(&config), 0)?;
    for (i, n) in GeneratorNet::PARAM_NAMES.iter().enumerate() {
        let t = ck.tensor(&format!("gen.{n}"))?;
        if t.shape != generator.params[i].shape {
            return Err(Error::parse("checkpoint", format!("gen.{n} has shape {:?}", t.shape)));
        }
        generator.params[i] = t.clone();
    }
    let theta = match config.latent {
        LatentSource::Qcbm => Some(ck.tensor("theta")?.data.clone()),
        LatentSource::Bernoulli => None,
    };
    Ok((config, generator, theta))
}

/// `n` generated images from a checkpoint, latents drawn exactly from the
/// stored circuit (or coin flips for Bernoulli runs).
pub fn sample_from_checkpoint(ck: &Checkpoint, n: usize, seed: u64) -> Result<EbsdBatch> {
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let (config, generator, theta) = restore(ck)?;
    let z = match theta {
        Some(theta) => {
            let circuit = build_qcbm_ansatz(config.n_z, config.layers, config.connectivity)?;
            let bits = exact_backend().sample(&circuit, &theta, n, seed)?;
            latents_from_bits(&bits, config.n_z)
        }
        None => data::bernoulli_latent(config.n_z, n, seed),
    };
    data::denormalize(&generator.generate(&z)?, config.phase)
}

fn generator_shape(c: &TrainConfig) -> GeneratorShape {
    GeneratorShape {
        n_z: c.n_z,
        image_size: c.image_size,
        channels: c.gen_channels,
    }
}

fn critic_step(
    config: &TrainConfig,
    generator: &GeneratorNet,
    critic: &mut CriticNet,
    opt: &mut Adam,
    real: &Tensor,
    z: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let gp = generator.bind(&mut g, false);
    let cp = critic.bind(&mut g, true);
    let bound = BoundCritic {
        net: critic,
        params: cp.clone(),
    };
    let eps: Vec<f64> = (0..real.batch()).map(|_| rng.gen()).collect();
    let losses = wgan_gp_losses(&mut g, &bound, generator, &gp, real, z, &eps, config.lambda)?;
    let grads = g.grad(losses.critic, &cp)?;
    let grads: Vec<Tensor> = grads.iter().map(|&n| g.value(n).clone()).collect();
    let value = g.value(losses.critic).item();
    opt.step(&mut critic.params, &grads)?;
    if let Some(c) = config.weight_clip {
        critic.clip_weights(c)?;
    }
    Ok(value)
}

fn generator_step(
    generator: &mut GeneratorNet,
    critic: &CriticNet,
    opt: &mut Adam,
    z: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let gp = generator.bind(&mut g, true);
    let cp = critic.bind(&mut g, false);
    let zn = g.constant(z.clone());
    let fake = generator.forward(&mut g, &gp, zn)?;
    let scores = critic.forward(&mut g, &cp, fake)?;
    let m = g.mean(scores);
    let loss = g.scale(m, -1.0);
    let grads = g.grad(loss, &gp)?;
    let grads: Vec<Tensor> = grads.iter().map(|&n| g.value(n).clone()).collect();
    let value = g.value(loss).item();
    opt.step(&mut generator.params, &grads)?;
    Ok(value)
}

struct Circuitry {
    circuit: Circuit,
    theta: Vec<f64>,
    /// Uncounted; serves the latent pool.
    base: Arc<dyn SamplerBackend>,
    /// Serves every loss evaluation of θ training.
    counted: CountedBackend<Arc<dyn SamplerBackend>>,
    calibrated: Option<f64>,
}

/// Runs one training job. With `out_dir`, writes `config.txt`,
/// `metrics.csv`, `ledger.csv` and checkpoints under `checkpoints/`.
pub fn run_training(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::write(dir.join("config.txt"), config.to_text())?;
    }

    let dataset = data::synth_dataset(config.dataset_size, config.image_size, config.phase, config.seed_data)?;
    let real_all = data::normalize(&dataset);
    let real_unit = data::to_unit_range(&real_all);

    let mut generator = GeneratorNet::new(generator_shape(config), config.seed_init)?;
    let mut critic = CriticNet::new(
        CriticShape {
            image_size: config.image_size,
            channels: config.critic_channels,
        },
        config.seed_init.wrapping_add(1),
    )?;
    let adam = |lr| AdamConfig {
        lr,
        beta1: config.beta1,
        beta2: config.beta2,
        ..Default::default()
    };
    let mut opt_g = Adam::new(adam(config.lr_g), &generator.params);
    let mut opt_d = Adam::new(adam(config.lr_d), &critic.params);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed_train);
    let mut circuitry = match config.latent {
        LatentSource::Bernoulli => None,
        LatentSource::Qcbm => {
            let circuit = build_qcbm_ansatz(config.n_z, config.layers, config.connectivity)?;
            let theta = init_theta(circuit.n_params, config.seed_init);
            let base: Arc<dyn SamplerBackend> = match config.backend {
                BackendKind::Exact | BackendKind::Counted => Arc::new(exact_backend()),
                BackendKind::Depolarizing => {
                    Arc::new(depolarizing_backend(exact_backend(), config.p_flip)?)
                }
            };
            let (counted, _) = counted(Arc::clone(&base));
            Some(Circuitry {
                circuit,
                theta,
                base,
                counted,
                calibrated: None,
            })
        }
    };
    let ledger = match &circuitry {
        Some(c) => Arc::clone(c.counted.ledger()),
        None => Arc::new(CallLedger::default()),
    };

    let refresh_pool = |c: &Circuitry, seed: u64| -> Result<LatentSampler> {
        Ok(LatentSampler::Pool(c.base.sample(&c.circuit, &c.theta, config.latent_pool, seed)?))
    };
    let mut sampler = match &circuitry {
        Some(c) => refresh_pool(c, rng.gen())?,
        None => LatentSampler::Bernoulli,
    };

    let eval_seed: u64 = rng.gen();
    let n = dataset.len();
    let ckpt_every = (config.epochs / 20).max(1);
    let mut records = Vec::with_capacity(config.epochs);
    let mut theta_history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut theta_updates = 0;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        if let Some(c) = circuitry.as_mut() {
            if schedule_step(epoch, config.qcbm.update_period, config.qcbm.freeze_epoch) {
                let mut loss = CircuitLoss {
                    circuit: &c.circuit,
                    backend: &c.counted,
                    generator: &generator,
                    critic: &critic,
                    n_samples: config.qcbm.n_samples,
                };
                let q = &config.qcbm;
                c.theta = match q.optimizer {
                    QcbmOptimizer::FiniteDifference => {
                        let grad = finite_diff_gradient(&mut loss, &c.theta, q.delta, rng.gen())?;
                        gd_update(&c.theta, &grad, q.alpha)?
                    }
                    QcbmOptimizer::Spsa => {
                        let mut spsa = q.spsa.clone();
                        if spsa.calibrate {
                            let a = match c.calibrated {
                                Some(a) => a,
                                None => {
                                    ledger.set_phase(LedgerPhase::Calibration);
                                    let r = spsa_calibrate(&mut loss, &c.theta, &spsa, rng.gen());
                                    ledger.set_phase(LedgerPhase::Optimization);
                                    r?.0
                                }
                            };
                            c.calibrated = Some(a);
                            spsa.a = a;
                        }
                        spsa_run(&mut loss, &c.theta, &spsa, rng.gen())?.theta
                    }
                };
                theta_updates += 1;
                sampler = refresh_pool(c, rng.gen())?;
            }
        }

        // shuffle, then one critic/generator alternation per mini-batch
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let (mut sum_d, mut sum_g, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let real = real_all.gather_batch(chunk);
            for _ in 0..config.critic_steps {
                let z = sampler.draw(&mut rng, config.n_z, chunk.len());
                sum_d += critic_step(config, &generator, &mut critic, &mut opt_d, &real, &z, &mut rng)?
                    / config.critic_steps as f64;
            }
            let z = sampler.draw(&mut rng, config.n_z, chunk.len());
            sum_g += generator_step(&mut generator, &critic, &mut opt_g, &z)?;
            batches += 1;
        }

        let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed);
        let z_eval = sampler.draw(&mut eval_rng, config.n_z, config.eval_size);
        let fake = data::to_unit_range(&generator.generate(&z_eval)?);
        let mmd = mmd_linear(&real_unit, &fake, Estimator::Unbiased)?.score;
        records.push(EpochRecord {
            epoch,
            mmd,
            loss_d: sum_d / batches as f64,
            loss_g: sum_g / batches as f64,
            theta_frozen: config.theta_frozen(epoch + 1),
            executions: ledger.total(),
        });
        if let Some(c) = &circuitry {
            theta_history.push(c.theta.clone());
        }

        let last = epoch + 1 == config.epochs;
        if let Some(dir) = out_dir {
            if (epoch + 1) % ckpt_every == 0 || last {
                let theta = circuitry.as_ref().map(|c| c.theta.as_slice());
                let path = if last {
                    dir.join("checkpoints").join("final.ckpt")
                } else {
                    dir.join("checkpoints").join(format!("epoch-{:05}.ckpt", epoch + 1))
                };
                checkpoint(config, epoch + 1, &generator, &critic, theta).save(&path)?;
                checkpoints.push(path);
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), log_with_header(config, &records))?;
        std::fs::write(dir.join("ledger.csv"), ledger_csv(&records, &ledger))?;
    }

    Ok(TrainOutcome {
        records,
        generator,
        critic,
        theta: circuitry.map(|c| c.theta),
        theta_history,
        theta_updates,
        executions: (ledger.calibration(), ledger.optimization()),
        checkpoints,
    })
}

/// Metric log with the full run configuration as `#` comment lines.
pub fn log_with_header(config: &TrainConfig, records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for (k, v) in config.entries() {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str(&metrics::write_log(records));
    out
}

fn ledger_csv(records: &[EpochRecord], ledger: &CallLedger) -> String {
    let mut out = String::from("epoch,executions\n");
    for r in records {
        let _ = writeln!(out, "{},{}", r.epoch, r.executions);
    }
    let _ = writeln!(
        out,
        "# calibration={} optimization={} total={}",
        ledger.calibration(),
        ledger.optimization(),
        ledger.total()
    );
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub window: usize,
    pub tail_b: f64,
    pub tail_q: f64,
    pub improvement: f64,
}

impl Comparison {
    pub const HEADER: &'static str = "window,tail_mmd_b,tail_mmd_q,relative_improvement_pct";

    pub fn row(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.4}",
            self.window, self.tail_b, self.tail_q, self.improvement
        )
    }
}

fn tail_mean(log: &[EpochRecord], window: usize) -> f64 {
    log[log.len() - window..].iter().map(|r| r.mmd).sum::<f64>() / window as f64
}

/// Relative improvement of the circuit run over the baseline, on MMD
/// averaged over the final `window` epochs of each log.
pub fn compare_runs(log_b: &[EpochRecord], log_q: &[EpochRecord], window: usize) -> Result<Comparison> {
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    if log_b.len() < window || log_q.len() < window {
        return Err(Error::invalid(format!(
            "logs have {} and {} rows, window needs {window}",
            log_b.len(),
            log_q.len()
        )));
    }
    let (tail_b, tail_q) = (tail_mean(log_b, window), tail_mean(log_q, window));
    Ok(Comparison {
        window,
        tail_b,
        tail_q,
        improvement: relative_improvement(tail_b, tail_q)?,
    })
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub seeds: Vec<u64>,
    pub logs: Vec<Vec<EpochRecord>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Per-seed comparison against a Bernoulli twin (circuit templates only).
    pub comparisons: Vec<Comparison>,
    pub positive_fraction: Option<f64>,
}

impl SuiteReport {
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("epoch,mean_mmd,std_mmd\n");
        for (e, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            let _ = writeln!(out, "{e},{m:.8e},{s:.8e}");
        }
        out
    }
}

/// Mean and population standard deviation across equal-length series.
pub fn mean_std(series: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    let k = series.len() as f64;
    (0..len)
        .map(|i| {
            let m = series.iter().map(|s| s[i]).sum::<f64>() / k;
            let v = series.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>() / k;
            (m, v.sqrt())
        })
        .unzip()
}

/// Runs `template` once per seed (varying init and training seeds, fixed
/// data). For circuit templates each seed also runs a Bernoulli twin and
/// reports the relative improvement per seed.
pub fn run_suite(template: &TrainConfig, seeds: &[u64], out_dir: Option<&Path>) -> Result<SuiteReport> {
    if seeds.len() < 2 {
        return Err(Error::invalid("a suite needs at least 2 seeds"));
    }
    let window = template.epochs.min(100);
    let mut logs = Vec::new();
    let mut comparisons = Vec::new();
    for &seed in seeds {
        let config = TrainConfig {
            seed_init: seed,
            seed_train: seed,
            ..template.clone()
        };
        let sub = out_dir.map(|d| d.join(format!("seed-{seed}")));
        let run = run_training(&config, sub.as_deref())?;
        if config.latent == LatentSource::Qcbm {
            let twin = TrainConfig {
                latent: LatentSource::Bernoulli,
                name: format!("{}-bernoulli", config.name),
                ..config.clone()
            };
            let sub = out_dir.map(|d| d.join(format!("seed-{seed}-bernoulli")));
            let base = run_training(&twin, sub.as_deref())?;
            comparisons.push(compare_runs(&base.records, &run.records, window)?);
        }
        logs.push(run.records);
    }
    let series: Vec<Vec<f64>> = logs.iter().map(|l| l.iter().map(|r| r.mmd).collect()).collect();
    let (mean, std) = mean_std(&series);
    let positive_fraction = (!comparisons.is_empty()).then(|| {
        comparisons.iter().filter(|c| c.improvement > 0.0).count() as f64 / comparisons.len() as f64
    });
    let report = SuiteReport {
        seeds: seeds.to_vec(),
        logs,
        mean,
        std,
        comparisons,
        positive_fraction,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("aggregate.csv"), report.aggregate_csv())?;
        if !report.comparisons.is_empty() {
            let mut text = format!("seed,{}\n", Comparison::HEADER);
            for (s, c) in seeds.iter().zip(&report.comparisons) {
                let _ = writeln!(text, "{s},{}", c.row());
            }
            if let Some(f) = report.positive_fraction {
                let _ = writeln!(text, "# positive_fraction={f}");
            }
            std::fs::write(dir.join("comparisons.csv"), text)?;
        }
    }
    Ok(report)
}
