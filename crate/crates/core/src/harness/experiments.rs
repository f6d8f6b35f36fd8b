//! Likelihood-gap experiments over constraint levels and temperatures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{generate_synthetic, SynthConfig};
use crate::bounds::lgap_upper_bound;
use crate::dataset::Dataset;
use crate::error::{arg_err, Result};
use crate::estimation::{likelihood_gap, FitResult, PenaltyPath, TrainConfig};
use crate::geometry::GridConfig;
use crate::model::LogLinear;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "SELFNORM_THREADS";
pub const SOURCE_SYNTHETIC: &str = "synthetic";

/// One `(τ, δ)` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    /// Origin of the row; external measurements can be merged under another tag.
    pub source: String,
    pub tau: f64,
    pub delta: f64,
    pub loglik_mle: f64,
    pub loglik_constrained: f64,
    /// Per-sample likelihood gap.
    pub gap: f64,
    #[serde(rename = "sqrtV")]
    pub sqrt_v: f64,
    pub kl_uniform: f64,
    pub bound_thm1: f64,
    pub eta_hat_norm: f64,
    pub seed: u64,
    pub converged: bool,
    /// Penalty weight of the selected fit; empty for the MLE or a scaled witness.
    pub alpha: Option<f64>,
}

/// Everything an experiment run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Constraint level of the temperature sweep.
    pub kl_delta: f64,
    pub geometry: GridConfig,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            kl_delta: 0.1,
            geometry: GridConfig::default(),
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.geometry.grid()?;
        if !(self.kl_delta.is_finite() && self.kl_delta > 0.0) {
            return Err(arg_err(format!("kl_delta must be positive, got {}", self.kl_delta)));
        }
        if self.threads == Some(0) {
            return Err(arg_err("threads must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Worker count: the environment override, else `requested`, else rayon's default.
pub fn resolve_threads(requested: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(arg_err(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(requested),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (rayon's default when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| arg_err(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

struct Baseline {
    mle: FitResult,
    kl: f64,
    norm: f64,
    radius: f64,
}

fn row(ds: &Dataset, base: &Baseline, delta: f64, fit: Result<FitResult>) -> Result<ExperimentRow> {
    let bound = if base.norm > 0.0 { lgap_upper_bound(delta, base.radius, base.norm, base.kl)? } else { 0.0 };
    let mut r = ExperimentRow {
        source: SOURCE_SYNTHETIC.to_string(),
        tau: ds.header().tau().unwrap_or(f64::NAN),
        delta,
        loglik_mle: base.mle.loglik,
        loglik_constrained: f64::NAN,
        gap: f64::NAN,
        sqrt_v: f64::NAN,
        kl_uniform: base.kl,
        bound_thm1: bound,
        eta_hat_norm: base.norm,
        seed: ds.seed(),
        converged: false,
        alpha: None,
    };
    match fit {
        Ok(fit) => {
            r.loglik_constrained = fit.loglik;
            r.gap = likelihood_gap(&base.mle, &fit, ds.len())?;
            r.sqrt_v = fit.v.sqrt();
            r.converged = fit.converged && base.mle.converged;
            r.alpha = fit.alpha_penalty;
        }
        Err(e) => log::warn!("constrained fit failed at δ = {delta}: {e}"),
    }
    Ok(r)
}

/// Solves every level in `deltas` (ascending) on one penalty path.
fn solve_levels(model: &LogLinear, ds: &Dataset, deltas: &[f64], train: &TrainConfig) -> Result<Vec<ExperimentRow>> {
    let mut path = PenaltyPath::new(model, ds, train)?;
    let mle = path.mle().clone();
    if !(mle.converged || mle.stalled) {
        log::warn!("MLE did not converge on τ = {:?} (‖g‖ = {:?})", ds.header().tau(), mle.grad_norm);
    }
    let base = Baseline {
        kl: model.kl_to_uniform(ds, &mle.eta)?,
        norm: mle.eta.norm(),
        radius: model.features().radius(),
        mle,
    };
    deltas.iter().map(|&delta| row(ds, &base, delta, path.constrained(delta))).collect()
}

fn check_deltas(deltas: &[f64]) -> Result<()> {
    if deltas.is_empty() || deltas.windows(2).any(|w| w[0] >= w[1]) || deltas[0] <= 0.0 {
        return Err(arg_err("δ grid must be nonempty, positive and strictly ascending"));
    }
    Ok(())
}

/// One row per `δ`, solved in ascending order on a shared penalty path.
pub fn run_tradeoff(model: &LogLinear, ds: &Dataset, delta_grid: &[f64], train: &TrainConfig) -> Result<Vec<ExperimentRow>> {
    check_deltas(delta_grid)?;
    solve_levels(model, ds, delta_grid, train)
}

/// One row per `τ` at a fixed `δ`; temperatures run concurrently, rows in grid order.
pub fn run_kl_sweep(cfg: &SynthConfig, fixed_delta: f64, train: &TrainConfig) -> Result<Vec<ExperimentRow>> {
    Ok(run_suite(cfg, fixed_delta, train, false)?.klsweep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutput {
    /// Rows for every `(τ, δ)`, `τ`-major.
    pub tradeoff: Vec<ExperimentRow>,
    /// Rows at the sweep level, one per `τ`.
    pub klsweep: Vec<ExperimentRow>,
}

/// Tradeoff and temperature sweep together, sharing one penalty path per `τ`.
/// With `with_tradeoff = false` only the sweep level is solved.
pub fn run_suite(cfg: &SynthConfig, kl_delta: f64, train: &TrainConfig, with_tradeoff: bool) -> Result<SuiteOutput> {
    cfg.validate()?;
    train.validate()?;
    if !(kl_delta.is_finite() && kl_delta > 0.0) {
        return Err(arg_err(format!("sweep δ must be positive, got {kl_delta}")));
    }
    let model = cfg.model()?;
    let mut levels = if with_tradeoff { cfg.delta_grid.clone() } else { Vec::new() };
    if !levels.contains(&kl_delta) {
        levels.push(kl_delta);
        levels.sort_by(f64::total_cmp);
    }
    let sweep_index = levels.iter().position(|d| *d == kl_delta).expect("inserted");
    let per_tau = cfg
        .tau_grid
        .par_iter()
        .map(|&tau| {
            let ds = generate_synthetic(cfg, tau)?;
            solve_levels(&model, &ds, &levels, train)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = SuiteOutput { tradeoff: Vec::new(), klsweep: Vec::new() };
    for rows in per_tau {
        out.klsweep.push(rows[sweep_index].clone());
        if with_tradeoff {
            out.tradeoff.extend(rows.into_iter().filter(|r| cfg.delta_grid.contains(&r.delta)));
        }
    }
    Ok(out)
}

pub fn write_rows<W: std::io::Write>(w: W, rows: &[ExperimentRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            d: 6,
            k: 3,
            n: 300,
            nnz: 2,
            tau_grid: vec![0.01, 1.0, 10.0],
            delta_grid: vec![0.05, 0.2, 1.0, 5.0],
            seed: 3,
            eta0_scale: 1.0,
        }
    }

    #[test]
    fn tradeoff_rows_are_feasible_and_monotone() {
        let cfg = tiny();
        let ds = generate_synthetic(&cfg, 1.0).unwrap();
        let rows = run_tradeoff(&cfg.model().unwrap(), &ds, &cfg.delta_grid, &TrainConfig::default()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r.gap >= -1e-6 && r.sqrt_v <= r.delta + 1e-3, "{r:?}");
            assert!(r.gap <= r.bound_thm1 + 0.02, "{r:?}");
        }
        for w in rows.windows(2) {
            assert!(w[1].gap <= w[0].gap + 1e-3);
        }
        // the largest level exceeds √V(η̂)
        assert!(rows[3].gap.abs() < 1e-12);
    }

    #[test]
    fn suite_is_thread_independent() {
        let cfg = tiny();
        let run = |t| {
            with_threads(Some(t), || run_suite(&cfg, 0.1, &TrainConfig::default(), true).unwrap()).unwrap()
        };
        let (a, b) = (run(1), run(3));
        let csv = |rows: &[ExperimentRow]| {
            let mut buf = Vec::new();
            write_rows(&mut buf, rows).unwrap();
            buf
        };
        assert_eq!(csv(&a.tradeoff), csv(&b.tradeoff));
        assert_eq!(csv(&a.klsweep), csv(&b.klsweep));
        assert_eq!(a.tradeoff.len(), 12);
        assert_eq!(a.klsweep.len(), 3);
        assert!(a.klsweep.iter().all(|r| r.delta == 0.1));
        let only = run_kl_sweep(&cfg, 0.1, &TrainConfig::default()).unwrap();
        assert_eq!(only.len(), 3);
        assert!(only.iter().all(|r| r.sqrt_v <= 0.1 + 1e-3));
    }

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_json(r#"{"kl_delta": -1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
