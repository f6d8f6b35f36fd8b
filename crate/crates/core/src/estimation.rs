//! Maximum-likelihood, penalized, and normalizer-constrained fitting.
//!
//! All objectives are per-sample and minimized:
//!
//! ```text
//! f(η) = −ℓ(η)/n + α·(1/n)Σᵢ (A(xᵢ, η) − c)² + λ‖η‖²
//! ```
//!
//! with `c` the configured center and `λ` a small ridge that keeps separable
//! data bounded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{arg_err, Result};
use crate::model::{LogLinear, ParamVector, Penalty};
use crate::optim::{Lbfgs, LineSearch};

/// Absolute slack on `V ≤ δ²`.
pub const FEASIBILITY_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the ℓ₂ norm of the per-sample gradient.
    pub gradient_tolerance: f64,
    /// Relative objective improvement over `history_size` iterations below which a fit stops early.
    pub value_tolerance: f64,
    pub line_search: LineSearch,
    pub history_size: usize,
    /// Optional cap on `‖η‖₂`, enforced by rescaling after the fit.
    #[serde(rename = "B")]
    pub b: Option<f64>,
    pub ridge: f64,
    /// Center of the normalizer mean-square `V`.
    pub center: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tolerance: 1e-8,
            value_tolerance: 1e-8,
            line_search: LineSearch::default(),
            history_size: 10,
            b: None,
            ridge: 1e-8,
            center: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver().validate()?;
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(arg_err(format!("ridge must be a finite nonnegative number, got {}", self.ridge)));
        }
        if !self.center.is_finite() {
            return Err(arg_err("center must be finite"));
        }
        if let Some(b) = self.b {
            if !(b > 0.0 && b.is_finite()) {
                return Err(arg_err(format!("B must be positive, got {b}")));
            }
        }
        Ok(())
    }

    fn solver(&self) -> Lbfgs {
        Lbfgs {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            value_tolerance: self.value_tolerance,
            history: self.history_size,
            line_search: self.line_search,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub eta: ParamVector,
    pub loglik: f64,
    /// Mean square of `A − center` over the dataset.
    #[serde(rename = "V")]
    pub v: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The optimizer stopped on the value tolerance before reaching the gradient tolerance.
    #[serde(default)]
    pub stalled: bool,
    pub alpha_penalty: Option<f64>,
    pub dataset_hash: String,
    /// Per-sample gradient norm of the objective at the returned point.
    pub grad_norm: Option<f64>,
    /// `‖η‖` exceeded ten times the configured cap and was rescaled.
    pub diverged: bool,
}

impl FitResult {
    /// Scores an arbitrary parameter vector as a (non-optimized) fit.
    pub fn evaluate(model: &LogLinear, ds: &Dataset, eta: ParamVector, center: f64) -> Result<Self> {
        let loglik = model.log_likelihood(ds, &eta)?;
        let v = model.normalizer_stats(ds, &eta, center)?.v;
        Ok(Self {
            eta,
            loglik,
            v,
            iterations: 0,
            converged: true,
            stalled: false,
            alpha_penalty: None,
            dataset_hash: ds.content_hash().to_string(),
            grad_norm: None,
            diverged: false,
        })
    }
}

/// Unconstrained maximum likelihood from `η = 0`.
pub fn fit_mle(model: &LogLinear, ds: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    let mut fit = fit_from(model, ds, 0.0, cfg, model.zero_params())?;
    fit.alpha_penalty = None;
    Ok(fit)
}

/// Penalized fit from `η = 0`.
pub fn fit_penalized(model: &LogLinear, ds: &Dataset, alpha: f64, cfg: &TrainConfig) -> Result<FitResult> {
    fit_from(model, ds, alpha, cfg, model.zero_params())
}

/// Penalized fit warm-started at `init`.
pub fn fit_penalized_from(
    model: &LogLinear,
    ds: &Dataset,
    alpha: f64,
    cfg: &TrainConfig,
    init: ParamVector,
) -> Result<FitResult> {
    fit_from(model, ds, alpha, cfg, init)
}

fn fit_from(model: &LogLinear, ds: &Dataset, alpha: f64, cfg: &TrainConfig, init: ParamVector) -> Result<FitResult> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(arg_err(format!("penalty weight must be finite and nonnegative, got {alpha}")));
    }
    cfg.validate()?;
    model.check_dataset(ds)?;
    model.features().check_params(&init)?;
    let (blocks, block_len) = init.shape();
    let penalty = Penalty { alpha, center: cfg.center, ridge: cfg.ridge };
    let min = cfg
        .solver()
        .minimize(|eta, grad| model.penalized_objective(ds, eta, penalty, grad), init.into_values())?;
    let mut eta = ParamVector::from_values(blocks, block_len, min.x)?;
    let mut diverged = false;
    if let Some(b) = cfg.b {
        let norm = eta.norm();
        if norm > b {
            diverged = norm > 10.0 * b;
            if diverged {
                log::warn!("fit diverged: ‖η‖ = {norm:.3e} exceeds 10·B = {:.3e}", 10.0 * b);
            }
            eta = eta.scaled(b / norm);
        }
    }
    if alpha > 0.0 {
        eta = center_mean(model, ds, eta, cfg.center)?;
    }
    let mut fit = FitResult::evaluate(model, ds, eta, cfg.center)?;
    fit.iterations = min.iterations;
    fit.converged = min.converged;
    fit.stalled = min.stalled;
    fit.grad_norm = Some(min.grad_norm);
    fit.alpha_penalty = Some(alpha);
    fit.diverged = diverged;
    Ok(fit)
}

/// `α·η̂` with `α = min(1, δ / (R‖η̂‖₂))`.
pub fn scaled_feasible_param(eta_hat: &ParamVector, delta: f64, radius: f64) -> Result<ParamVector> {
    if !(delta > 0.0) {
        return Err(arg_err(format!("delta must be positive, got {delta}")));
    }
    if !(radius > 0.0) {
        return Err(arg_err(format!("R must be positive, got {radius}")));
    }
    let norm = eta_hat.norm();
    if norm == 0.0 {
        return Ok(eta_hat.clone());
    }
    Ok(eta_hat.scaled((delta / (radius * norm)).min(1.0)))
}

/// Moves `A` by `center − log μ(Y)` at every input by shifting each class's
/// constant-feature weight. Conditionals are unchanged. Returns `None` for
/// feature maps without a per-class constant coordinate.
pub fn recenter(model: &LogLinear, eta: &ParamVector, center: f64) -> Option<ParamVector> {
    if !model.features().is_class_conjunction() {
        return None;
    }
    let shift = center - model.labels().log_total_measure();
    let mut out = eta.clone();
    let len = out.block_len();
    for k in 0..out.blocks() {
        out.values_mut()[k * len] += shift;
    }
    Some(out)
}

/// Shifts every class's constant-feature weight so the dataset mean of `A` equals
/// `center`. Conditionals are unchanged and `V` can only drop. Other feature maps
/// are returned as is.
pub fn center_mean(model: &LogLinear, ds: &Dataset, eta: ParamVector, center: f64) -> Result<ParamVector> {
    if !model.features().is_class_conjunction() {
        return Ok(eta);
    }
    let shift = center - model.normalizer_stats(ds, &eta, center)?.mean_a;
    let mut out = eta;
    let len = out.block_len();
    for k in 0..out.blocks() {
        out.values_mut()[k * len] += shift;
    }
    Ok(out)
}

/// Per-sample `(ℓ(a) − ℓ(b)) / n`.
pub fn likelihood_gap(a: &FitResult, b: &FitResult, n: usize) -> Result<f64> {
    if a.dataset_hash != b.dataset_hash {
        return Err(arg_err("fits were computed on different datasets"));
    }
    if n == 0 {
        return Err(arg_err("n must be positive"));
    }
    Ok((a.loglik - b.loglik) / n as f64)
}

/// Bisection depth when landing `V` inside `[0.9, 1]·δ²`.
const MAX_BISECTIONS: usize = 40;
const ALPHA_START: f64 = 1e-3;
/// Per-sample likelihood difference across a bracket below which the search stops.
const GAP_RESOLUTION: f64 = 1e-5;
/// Relative width at which an `α` bracket counts as collapsed.
const ALPHA_RESOLUTION: f64 = 1e-3;
const ALPHA_MIN: f64 = 1e-9;
const ALPHA_MAX: f64 = 1e12;

/// Cache of penalized fits along `α`, shared across constraint levels on one dataset.
///
/// Every cached fit and every scaled witness is a candidate for each later
/// constraint level, so solving levels in ascending order gives gaps that are
/// non-increasing in `δ`.
pub struct PenaltyPath<'a> {
    model: &'a LogLinear,
    ds: &'a Dataset,
    cfg: TrainConfig,
    mle: FitResult,
    fits: BTreeMap<u64, FitResult>,
    witnesses: Vec<FitResult>,
    centered_mle: Option<FitResult>,
}

impl<'a> PenaltyPath<'a> {
    pub fn new(model: &'a LogLinear, ds: &'a Dataset, cfg: &TrainConfig) -> Result<Self> {
        let mle = fit_mle(model, ds, cfg)?;
        Ok(Self::with_mle(model, ds, cfg, mle))
    }

    pub fn with_mle(model: &'a LogLinear, ds: &'a Dataset, cfg: &TrainConfig, mle: FitResult) -> Self {
        Self { model, ds, cfg: cfg.clone(), mle, fits: BTreeMap::new(), witnesses: Vec::new(), centered_mle: None }
    }

    pub fn mle(&self) -> &FitResult {
        &self.mle
    }

    /// Cached penalized fits in increasing `α`.
    pub fn fits(&self) -> impl Iterator<Item = &FitResult> {
        self.fits.values()
    }

    /// Penalized fit at `alpha`, warm-started from the nearest cached `α` on a log scale.
    pub fn fit_at(&mut self, alpha: f64) -> Result<&FitResult> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(arg_err(format!("path penalty must be positive, got {alpha}")));
        }
        let key = alpha.to_bits();
        if !self.fits.contains_key(&key) {
            let below = self.fits.range(..key).next_back().map(|(_, f)| f);
            let above = self.fits.range(key..).next().map(|(_, f)| f);
            let dist = |f: &FitResult| (f.alpha_penalty.unwrap_or(0.0) / alpha).ln().abs();
            let init = match (below, above) {
                (Some(b), Some(a)) => if dist(a) < dist(b) { a } else { b },
                (Some(b), None) => b,
                (None, Some(a)) if dist(a) < (alpha / ALPHA_MIN).ln() => a,
                _ => &self.mle,
            };
            let init = init.eta.clone();
            let fit = fit_from(self.model, self.ds, alpha, &self.cfg, init)?;
            if !(fit.converged || fit.stalled) {
                log::warn!("penalized fit at α = {alpha:e} did not converge (‖g‖ = {:.2e})", fit.grad_norm.unwrap_or(f64::NAN));
            }
            self.fits.insert(key, fit);
        }
        Ok(&self.fits[&key])
    }

    /// Highest-likelihood candidate with `V ≤ δ² + 1e−6`.
    pub fn constrained(&mut self, delta: f64) -> Result<FitResult> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(arg_err(format!("delta must be positive, got {delta}")));
        }
        let target = delta * delta;
        let feasible = |f: &FitResult| f.v <= target + FEASIBILITY_SLACK;
        if feasible(&self.mle) {
            return Ok(self.mle.clone());
        }

        if self.centered_mle.is_none() {
            let eta = center_mean(self.model, self.ds, self.mle.eta.clone(), self.cfg.center)?;
            let mut c = FitResult::evaluate(self.model, self.ds, eta, self.cfg.center)?;
            c.iterations = self.mle.iterations;
            c.converged = self.mle.converged;
            c.stalled = self.mle.stalled;
            c.grad_norm = self.mle.grad_norm;
            self.centered_mle = Some(c);
        }
        let centered = self.centered_mle.clone().expect("set above");
        if feasible(&centered) {
            return Ok(centered);
        }
        self.add_witness(delta)?;
        if let Some((lo, hi)) = self.bracket(target)? {
            let (mut lo, mut hi) = (lo, hi);
            let (mut v_lo, mut v_hi) = (self.fit_at(lo)?.v, self.fit_at(hi)?.v);
            let goal = (0.95 * target).ln();
            for step in 0..MAX_BISECTIONS {
                // Log-log secant toward 0.95·δ², with a plain bisection every third step.
                let (llo, lhi) = (lo.ln(), hi.ln());
                let (a, b) = (v_lo.max(1e-300).ln(), v_hi.max(1e-300).ln());
                let t = if step % 3 == 2 || !(a > b) { 0.5 } else { ((a - goal) / (a - b)).clamp(0.05, 0.95) };
                let mid = (llo + t * (lhi - llo)).exp();
                if mid <= lo || mid >= hi || hi <= lo * (1.0 + ALPHA_RESOLUTION) {
                    break;
                }
                let v = self.fit_at(mid)?.v;
                if v > target + FEASIBILITY_SLACK {
                    lo = mid;
                    v_lo = v;
                } else if v >= 0.9 * target {
                    break;
                } else {
                    hi = mid;
                    v_hi = v;
                }
                // The gap is settled once the infeasible side is no better than the best feasible fit.
                let n = self.ds.len() as f64;
                if (self.fits[&lo.to_bits()].loglik - self.fits[&hi.to_bits()].loglik) / n <= GAP_RESOLUTION {
                    break;
                }
            }
        }

        let best = self
            .fits
            .values()
            .chain(&self.witnesses)
            .filter(|f| feasible(f))
            .fold(None::<&FitResult>, |best, f| match best {
                Some(b) if b.loglik >= f.loglik => Some(b),
                _ => Some(f),
            });
        best.cloned().ok_or_else(|| arg_err(format!("no feasible candidate found for δ = {delta}")))
    }

    /// `(infeasible α, feasible α)` bracketing the target, walking the decade grid.
    fn bracket(&mut self, target: f64) -> Result<Option<(f64, f64)>> {
        let feasible = |v: f64| v <= target + FEASIBILITY_SLACK;
        let mut alpha = ALPHA_START;
        if feasible(self.fit_at(alpha)?.v) {
            loop {
                let lower = alpha / 10.0;
                if lower < ALPHA_MIN {
                    return Ok(None);
                }
                if !feasible(self.fit_at(lower)?.v) {
                    return Ok(Some((lower, alpha)));
                }
                alpha = lower;
            }
        }
        loop {
            let upper = alpha * 10.0;
            if upper > ALPHA_MAX {
                return Ok(None);
            }
            if feasible(self.fit_at(upper)?.v) {
                return Ok(Some((alpha, upper)));
            }
            alpha = upper;
        }
    }

    fn add_witness(&mut self, delta: f64) -> Result<()> {
        let radius = self.model.features().radius();
        let scaled = scaled_feasible_param(&self.mle.eta, delta, radius)?;
        let eta = recenter(self.model, &scaled, self.cfg.center).unwrap_or(scaled);
        self.witnesses.push(FitResult::evaluate(self.model, self.ds, eta, self.cfg.center)?);
        Ok(())
    }
}

/// Variance-constrained fit: the best feasible candidate among the MLE, a
/// bisected penalty path, and the scaled MLE.
pub fn fit_constrained(model: &LogLinear, ds: &Dataset, delta: f64, cfg: &TrainConfig) -> Result<FitResult> {
    PenaltyPath::new(model, ds, cfg)?.constrained(delta)
}
