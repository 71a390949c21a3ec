//! Sampling backends: where the QCBM bitstrings come from.

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantum_sim::{sample_bitstrings, simulate, Circuit};

/// One call to `sample` is one circuit execution.
pub trait SamplerBackend: Send + Sync {
    fn sample(&self, circuit: &Circuit, theta: &[f64], shots: usize, seed: u64)
        -> Result<Vec<u64>>;
}

impl<B: SamplerBackend + ?Sized> SamplerBackend for Box<B> {
    fn sample(&self, c: &Circuit, theta: &[f64], shots: usize, seed: u64) -> Result<Vec<u64>> {
        (**self).sample(c, theta, shots, seed)
    }
}

impl<B: SamplerBackend + ?Sized> SamplerBackend for Arc<B> {
    fn sample(&self, c: &Circuit, theta: &[f64], shots: usize, seed: u64) -> Result<Vec<u64>> {
        (**self).sample(c, theta, shots, seed)
    }
}

impl<B: SamplerBackend + ?Sized> SamplerBackend for &B {
    fn sample(&self, c: &Circuit, theta: &[f64], shots: usize, seed: u64) -> Result<Vec<u64>> {
        (**self).sample(c, theta, shots, seed)
    }
}

/// Noiseless statevector simulation followed by Born-rule sampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactBackend;

pub fn exact_backend() -> ExactBackend {
    ExactBackend
}

impl SamplerBackend for ExactBackend {
    fn sample(&self, c: &Circuit, theta: &[f64], shots: usize, seed: u64) -> Result<Vec<u64>> {
        let state = simulate(c, theta)?;
        sample_bitstrings(&state, shots, seed)
    }
}

/// Flips each output bit of the inner backend independently.
#[derive(Debug, Clone)]
pub struct DepolarizingBackend<B> {
    inner: B,
    p_flip: f64,
}

pub fn depolarizing_backend<B: SamplerBackend>(inner: B, p_flip: f64) -> Result<DepolarizingBackend<B>> {
    if !(0.0..=0.5).contains(&p_flip) {
        return Err(Error::invalid(format!("p_flip must be in [0, 0.5], got {p_flip}")));
    }
    Ok(DepolarizingBackend { inner, p_flip })
}

impl<B: SamplerBackend> SamplerBackend for DepolarizingBackend<B> {
    fn sample(&self, c: &Circuit, theta: &[f64], shots: usize, seed: u64) -> Result<Vec<u64>> {
        let mut out = self.inner.sample(c, theta, shots, seed)?;
        if self.p_flip == 0.0 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for bits in &mut out {
            for q in 0..c.n_qubits {
                if rng.gen::<f64>() < self.p_flip {
                    *bits ^= 1 << q;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Calibration,
    Optimization,
}

/// Execution counts per phase. Counts only ever increase.
#[derive(Debug, Default)]
pub struct CallLedger {
    calibration: AtomicU64,
    optimization: AtomicU64,
    calibrating: AtomicU8,
}

impl CallLedger {
    pub fn set_phase(&self, phase: Phase) {
        self.calibrating
            .store((phase == Phase::Calibration) as u8, Ordering::SeqCst);
    }

    pub fn phase(&self) -> Phase {
        if self.calibrating.load(Ordering::SeqCst) == 1 {
            Phase::Calibration
        } else {
            Phase::Optimization
        }
    }

    pub fn record(&self) {
        match self.phase() {
            Phase::Calibration => self.calibration.fetch_add(1, Ordering::SeqCst),
            Phase::Optimization => self.optimization.fetch_add(1, Ordering::SeqCst),
        };
    }

    pub fn calibration(&self) -> u64 {
        self.calibration.load(Ordering::SeqCst)
    }

    pub fn optimization(&self) -> u64 {
        self.optimization.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> u64 {
        self.calibration() + self.optimization()
    }
}

/// Transparent wrapper that records every execution in a shared ledger.
#[derive(Debug, Clone)]
pub struct CountedBackend<B> {
    inner: B,
    ledger: Arc<CallLedger>,
}

pub fn counted<B: SamplerBackend>(inner: B) -> (CountedBackend<B>, Arc<CallLedger>) {
    let ledger = Arc::new(CallLedger::default());
    (
        CountedBackend {
            inner,
            ledger: Arc::clone(&ledger),
        },
        ledger,
    )
}

impl<B> CountedBackend<B> {
    pub fn ledger(&self) -> &Arc<CallLedger> {
        &self.ledger
    }
}

impl<B: SamplerBackend> SamplerBackend for CountedBackend<B> {
    fn sample(&self, c: &Circuit, theta: &[f64], shots: usize, seed: u64) -> Result<Vec<u64>> {
        self.ledger.record();
        self.inner.sample(c, theta, shots, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum_sim::{build_qcbm_ansatz, init_theta, Connectivity};

    fn ansatz() -> Circuit {
        build_qcbm_ansatz(4, 1, Connectivity::Full).unwrap()
    }

    #[test]
    fn exact_zero_theta_is_all_zero() {
        let c = ansatz();
        let out = exact_backend()
            .sample(&c, &vec![0.0; c.n_params], 500, 3)
            .unwrap();
        assert!(out.iter().all(|&b| b == 0));
    }

    #[test]
    fn exact_is_seed_deterministic() {
        let c = ansatz();
        let theta: Vec<f64> = init_theta(c.n_params, 1).iter().map(|t| t * 100.0).collect();
        let b = exact_backend();
        assert_eq!(
            b.sample(&c, &theta, 1000, 42).unwrap(),
            b.sample(&c, &theta, 1000, 42).unwrap()
        );
    }

    #[test]
    fn depolarizing_range_checked() {
        assert!(depolarizing_backend(ExactBackend, -0.1).is_err());
        assert!(depolarizing_backend(ExactBackend, 0.6).is_err());
        assert!(depolarizing_backend(ExactBackend, 0.5).is_ok());
    }

    #[test]
    fn depolarizing_zero_is_transparent() {
        let c = ansatz();
        let theta: Vec<f64> = init_theta(c.n_params, 2).iter().map(|t| t * 100.0).collect();
        let noisy = depolarizing_backend(ExactBackend, 0.0).unwrap();
        assert_eq!(
            noisy.sample(&c, &theta, 300, 5).unwrap(),
            ExactBackend.sample(&c, &theta, 300, 5).unwrap()
        );
    }

    fn one_rate(p: f64) -> f64 {
        let c = ansatz();
        let noisy = depolarizing_backend(ExactBackend, p).unwrap();
        let out = noisy.sample(&c, &vec![0.0; c.n_params], 25_000, 11).unwrap();
        let ones: u32 = out.iter().map(|b| b.count_ones()).sum();
        ones as f64 / (25_000.0 * 4.0)
    }

    #[test]
    fn depolarizing_flip_rates() {
        // 1e5 bits; 0.01 is > 3 binomial standard deviations for both rates
        assert!((one_rate(0.5) - 0.5).abs() < 0.01);
        assert!((one_rate(0.1) - 0.1).abs() < 0.01);
    }

    #[test]
    fn counted_is_transparent_and_counts() {
        let c = ansatz();
        let theta: Vec<f64> = init_theta(c.n_params, 3).iter().map(|t| t * 100.0).collect();
        let (b, ledger) = counted(ExactBackend);
        let a = b.sample(&c, &theta, 64, 9).unwrap();
        assert_eq!(a, ExactBackend.sample(&c, &theta, 64, 9).unwrap());
        ledger.set_phase(Phase::Calibration);
        b.sample(&c, &theta, 1, 1).unwrap();
        b.sample(&c, &theta, 1, 2).unwrap();
        ledger.set_phase(Phase::Optimization);
        assert_eq!(ledger.calibration(), 2);
        assert_eq!(ledger.optimization(), 1);
        assert_eq!(ledger.total(), 3);
    }
}
