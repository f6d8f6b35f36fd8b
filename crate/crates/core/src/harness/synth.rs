//! Sparse synthetic classification data drawn from a tempered log-linear model.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetHeader, Record};
use crate::error::{arg_err, Result};
use crate::model::{LogLinear, ParamVector, SparseVec};

/// RNG streams, one per independent source of randomness.
const STREAM_ETA0: u64 = 0;
const STREAM_FEATURES: u64 = 1;
const STREAM_LABELS: u64 = 2;

/// `n` points log-spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Input dimension, including the constant coordinate.
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    /// Active coordinates per input besides the constant.
    pub nnz: usize,
    pub tau_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    pub seed: u64,
    /// Standard deviation of the generating weights.
    pub eta0_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 20,
            k: 10,
            n: 10_000,
            nnz: 5,
            tau_grid: log_grid(0.01, 100.0, 13),
            delta_grid: log_grid(0.01, 10.0, 12),
            seed: 0,
            eta0_scale: 1.0,
        }
    }
}

fn sorted_ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.k == 0 || self.n == 0 || self.nnz == 0 {
            return Err(arg_err("d ≥ 2, K ≥ 1, n ≥ 1 and nnz ≥ 1 are required"));
        }
        if self.nnz > self.d - 1 {
            return Err(arg_err(format!("nnz = {} exceeds the {} non-constant coordinates", self.nnz, self.d - 1)));
        }
        if !(self.eta0_scale.is_finite() && self.eta0_scale >= 0.0) {
            return Err(arg_err("eta0_scale must be finite and nonnegative"));
        }
        if self.tau_grid.is_empty() || !sorted_ascending(&self.tau_grid) {
            return Err(arg_err("tau_grid must be nonempty and strictly ascending"));
        }
        if self.tau_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(arg_err("temperatures must be finite and nonnegative"));
        }
        if self.delta_grid.is_empty() || !sorted_ascending(&self.delta_grid) {
            return Err(arg_err("delta_grid must be nonempty and strictly ascending"));
        }
        if self.delta_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(arg_err("δ values must be finite and positive"));
        }
        Ok(())
    }

    /// `sup ‖T(x, y)‖₂ = √(nnz + 1)`.
    pub fn radius(&self) -> f64 {
        ((self.nnz + 1) as f64).sqrt()
    }

    /// Class-conjunction model matching the generated inputs.
    pub fn model(&self) -> Result<LogLinear> {
        LogLinear::conjunction(self.d, self.k, self.radius())
    }

    /// Generating weights `η₀`, shared by every temperature.
    pub fn eta0(&self) -> Result<ParamVector> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(STREAM_ETA0);
        let values = (0..self.k * self.d)
            .map(|_| self.eta0_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ParamVector::from_values(self.k, self.d, values)
    }

    /// Inputs, shared by every temperature.
    pub fn inputs(&self) -> Vec<SparseVec> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(STREAM_FEATURES);
        (0..self.n)
            .map(|_| {
                let mut entries = vec![(0, 1.0)];
                entries.extend(sample(&mut rng, self.d - 1, self.nnz).into_iter().map(|j| (j + 1, 1.0)));
                SparseVec::new(self.d, entries).expect("indices below d")
            })
            .collect()
    }
}

/// Labels drawn by inverse CDF from `p_{τη₀}(·|x)`; deterministic in `(seed, τ)`.
pub fn generate_synthetic(cfg: &SynthConfig, tau: f64) -> Result<Dataset> {
    cfg.validate()?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(arg_err(format!("τ must be finite and nonnegative, got {tau}")));
    }
    let model = cfg.model()?;
    let eta = cfg.eta0()?.scaled(tau);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_LABELS);
    let records = cfg
        .inputs()
        .into_iter()
        .map(|x| {
            let u: f64 = rng.random();
            let cond = model.conditional(&x, &eta)?;
            let mut cum = 0.0;
            let mut y = cfg.k - 1;
            for (label, p) in cond.probs().enumerate() {
                cum += p;
                if u < cum {
                    y = label;
                    break;
                }
            }
            Ok(Record { x, y })
        })
        .collect::<Result<Vec<_>>>()?;
    let header = DatasetHeader::new(cfg.d, cfg.k, cfg.seed)
        .with("tau", tau)
        .with("n", cfg.n)
        .with("nnz", cfg.nnz)
        .with("eta0_scale", cfg.eta0_scale)
        .with("generator", "chacha20-inverse-cdf");
    Dataset::new(header, records)
}
