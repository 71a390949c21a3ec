//! Linear-kernel MMD scoring, the relative-improvement statistic, rolling
//! averages and the per-epoch metric log.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Includes the diagonal `k(x_i, x_i)` terms; zero for identical batches.
    Biased,
    /// Excludes the diagonal terms of the within-sample sums.
    Unbiased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmdReport {
    pub score: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub kernel: &'static str,
    pub estimator: Estimator,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let n = t.batch();
    let per = if n == 0 { 0 } else { t.len() / n };
    t.data.chunks(per.max(1)).take(n).collect()
}

/// `Σ_i x_i` and `Σ_i k(x_i, x_i)`; with these every pairwise kernel sum
/// of the linear kernel is a single dot product.
fn sums(x: &[&[f64]]) -> (Vec<f64>, f64) {
    let mut total = vec![0.0; x.first().map_or(0, |r| r.len())];
    let mut diag = 0.0;
    for r in x {
        for (t, v) in total.iter_mut().zip(*r) {
            *t += v;
        }
        diag += dot(r, r);
    }
    (total, diag)
}

/// Two-sample MMD with the linear kernel `k(x, y) = x·y` on flattened images.
///
/// Both batches are `[B, ...]` tensors with pixels already scaled to `[0, 1]`.
pub fn mmd_linear(real: &Tensor, gen: &Tensor, estimator: Estimator) -> Result<MmdReport> {
    let (m, n) = (real.batch(), gen.batch());
    if real.is_empty() || gen.is_empty() || m == 0 || n == 0 {
        return Err(Error::invalid("MMD needs two non-empty batches"));
    }
    if real.len() / m != gen.len() / n {
        return Err(Error::invalid(format!(
            "image length mismatch: {} vs {}",
            real.len() / m,
            gen.len() / n
        )));
    }
    let ((sx, dx), (sy, dy)) = (sums(&rows(real)), sums(&rows(gen)));
    let (kxx, kyy, kxy) = (dot(&sx, &sx), dot(&sy, &sy), dot(&sx, &sy));
    let (mf, nf) = (m as f64, n as f64);
    let score = match estimator {
        Estimator::Biased => kxx / (mf * mf) + kyy / (nf * nf) - 2.0 * kxy / (mf * nf),
        Estimator::Unbiased => {
            if m < 2 || n < 2 {
                return Err(Error::invalid("unbiased MMD needs at least 2 images per batch"));
            }
            (kxx - dx) / (mf * (mf - 1.0)) + (kyy - dy) / (nf * (nf - 1.0))
                - 2.0 * kxy / (mf * nf)
        }
    };
    Ok(MmdReport {
        score,
        n_real: m,
        n_gen: n,
        kernel: "linear",
        estimator,
    })
}

/// Symmetric percentage difference `100·(b − q) / ((b + q)/2)`.
pub fn relative_improvement(mmd_b: f64, mmd_q: f64) -> Result<f64> {
    if !(mmd_b > 0.0 && mmd_q > 0.0) {
        return Err(Error::invalid(format!(
            "relative improvement needs positive scores, got {mmd_b} and {mmd_q}"
        )));
    }
    Ok(100.0 * (mmd_b - mmd_q) / (0.5 * (mmd_b + mmd_q)))
}

/// Trailing mean over the last `window` points; the first points average
/// over whatever prefix is available.
pub fn rolling_mean(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for i in 0..series.len() {
        acc += series[i];
        if i >= window {
            acc -= series[i - window];
        }
        let count = (i + 1).min(window);
        out.push(acc / count as f64);
    }
    Ok(out)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mmd: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub theta_frozen: bool,
    /// Backend executions so far (not part of the CSV log).
    pub executions: u64,
}

pub const LOG_HEADER: &str = "epoch,mmd,loss_d,loss_g,theta_frozen";

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// CSV with header [`LOG_HEADER`]; floats carry 9 significant digits.
pub fn write_log(records: &[EpochRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            sig9(r.mmd),
            sig9(r.loss_d),
            sig9(r.loss_g),
            r.theta_frozen
        );
    }
    out
}

pub fn read_log(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::parse("metric log", "missing header"));
    }
    let mut out: Vec<EpochRecord> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::parse("metric log row", line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse("metric log value", s));
        let rec = EpochRecord {
            epoch: f[0].parse().map_err(|_| Error::parse("epoch", f[0]))?,
            mmd: num(f[1])?,
            loss_d: num(f[2])?,
            loss_g: num(f[3])?,
            theta_frozen: f[4].parse().map_err(|_| Error::parse("theta_frozen", f[4]))?,
            executions: 0,
        };
        if let Some(prev) = out.last() {
            if rec.epoch <= prev.epoch {
                return Err(Error::parse("metric log", "epochs not strictly increasing"));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    read_log(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::new(
            vec![rows.len(), rows[0].len()],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_batches_score_zero() {
        let x = t(&[&[0.1, 0.9, 0.3], &[0.5, 0.2, 0.7], &[1.0, 0.0, 0.4]]);
        let r = mmd_linear(&x, &x, Estimator::Biased).unwrap();
        assert!(r.score.abs() < 1e-12);
        assert_eq!(r.kernel, "linear");
    }

    #[test]
    fn hand_computed_unbiased() {
        // x = {1, 3}, y = {0, 2}: within-x off-diagonal 2·3 = 6 → 6/2 = 3;
        // within-y 0; cross (0 + 2 + 0 + 6)/4 = 2 → 3 + 0 − 4 = −1
        let x = t(&[&[1.0], &[3.0]]);
        let y = t(&[&[0.0], &[2.0]]);
        assert_eq!(mmd_linear(&x, &y, Estimator::Unbiased).unwrap().score, -1.0);
        // biased = (mean x − mean y)² = 1
        assert_eq!(mmd_linear(&x, &y, Estimator::Biased).unwrap().score, 1.0);
    }

    #[test]
    fn input_validation() {
        let x = t(&[&[1.0, 2.0]]);
        let y = t(&[&[1.0, 2.0, 3.0]]);
        assert!(mmd_linear(&x, &y, Estimator::Biased).is_err());
        let empty = Tensor::new(vec![0, 2], vec![]).unwrap();
        assert!(mmd_linear(&empty, &x, Estimator::Biased).is_err());
        assert!(mmd_linear(&x, &x, Estimator::Unbiased).is_err());
    }

    #[test]
    fn shifting_mean_increases_score() {
        let base: Vec<&[f64]> = vec![&[0.2, 0.4], &[0.3, 0.1], &[0.6, 0.5]];
        let real = t(&base);
        let mut last = -1.0;
        for shift in [0.0, 0.1, 0.2, 0.4] {
            let gen = real.map(|v| v + shift);
            let s = mmd_linear(&real, &gen, Estimator::Unbiased).unwrap().score;
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn relative_improvement_cases() {
        assert_eq!(relative_improvement(0.3, 0.3).unwrap(), 0.0);
        assert!((relative_improvement(3e-4, 1e-4).unwrap() - 100.0).abs() < 1e-9);
        assert!(relative_improvement(0.0, 1.0).is_err());
        assert!(relative_improvement(1.0, -1.0).is_err());
    }

    #[test]
    fn rolling_mean_cases() {
        assert_eq!(rolling_mean(&[1.0, 5.0, 2.0], 1).unwrap(), vec![1.0, 5.0, 2.0]);
        assert_eq!(rolling_mean(&[4.0; 5], 3).unwrap(), vec![4.0; 5]);
        assert_eq!(rolling_mean(&[0.0, 2.0], 2).unwrap(), vec![0.0, 1.0]);
        assert_eq!(rolling_mean(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![1.0, 1.5, 2.5, 3.5]);
        assert!(rolling_mean(&[1.0], 0).is_err());
    }

    #[test]
    fn log_round_trip_and_format() {
        let recs = vec![
            EpochRecord {
                epoch: 0,
                mmd: 0.221,
                loss_d: -1.5,
                loss_g: 2.0 / 3.0,
                theta_frozen: false,
                executions: 0,
            },
            EpochRecord {
                epoch: 1,
                mmd: 4.74e-4,
                loss_d: 0.0,
                loss_g: 1e10,
                theta_frozen: true,
                executions: 0,
            },
        ];
        let text = write_log(&recs);
        assert!(text.starts_with("epoch,mmd,loss_d,loss_g,theta_frozen\n0,2.21000000e-1,"));
        assert!(text.contains(",6.66666667e-1,false\n"));
        let back = read_log(&text).unwrap();
        assert_eq!(write_log(&back), text);
        assert!(read_log("epoch,mmd\n").is_err());
        assert!(read_log(&format!("{LOG_HEADER}\n1,0,0,0,true\n0,0,0,0,true\n")).is_err());
    }

    proptest! {
        #[test]
        fn relative_improvement_antisymmetric_and_bounded(a in 1e-9f64..10.0, b in 1e-9f64..10.0) {
            let ab = relative_improvement(a, b).unwrap();
            let ba = relative_improvement(b, a).unwrap();
            prop_assert!((ab + ba).abs() < 1e-9);
            prop_assert!(ab > -200.0 && ab < 200.0);
        }
    }
}
