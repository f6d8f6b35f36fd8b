//! Normalizer variance up to parameter equivalence, computed exactly over
//! finite input distributions.
//!
//! Under class-conjunction features, adding the same `β ∈ R^d` to every class
//! block leaves all conditionals unchanged and moves `A(x, η)` by `β·x`. The
//! smallest achievable variance of `A` over that class is the residual of a
//! least-squares regression of centered `A` on centered inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::hypercube::{HypercubeDist, InputDist};
use crate::model::{dot, log_sum_exp, LogLinear, ParamVector, SparseVec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    /// `min_β Var[f(X) − β·X]`.
    pub residual_variance: f64,
    pub beta: Vec<f64>,
    /// `E[f] + β·(x − E[X])` per input, for distributions of at most [`FITTED_LIMIT`] points.
    pub fitted_values: Option<Vec<f64>>,
}

pub const FITTED_LIMIT: usize = 4096;

fn check_conjunction(model: &LogLinear, eta: &ParamVector, dist: &InputDist) -> Result<()> {
    if !model.features().is_class_conjunction() {
        return Err(config_err("variance analysis needs class-conjunction features"));
    }
    model.features().check_params(eta)?;
    if dist.dim() != eta.block_len() {
        return Err(config_err(format!(
            "distribution dimension {} does not match parameter block length {}",
            dist.dim(),
            eta.block_len()
        )));
    }
    Ok(())
}

/// Adds `β` to every class block.
pub fn equivalence_shift(eta: &ParamVector, beta: &[f64]) -> Result<ParamVector> {
    if beta.len() != eta.block_len() {
        return Err(config_err(format!("shift length {} does not match block length {}", beta.len(), eta.block_len())));
    }
    let mut out = eta.clone();
    let len = eta.block_len();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        *v += beta[i % len];
    }
    Ok(out)
}

/// `max_k η_k·x` for class-blocked parameters.
pub fn e_infinity(x: &SparseVec, eta: &ParamVector) -> Result<f64> {
    if x.dim() != eta.block_len() {
        return Err(config_err(format!("input dimension {} does not match block length {}", x.dim(), eta.block_len())));
    }
    Ok((0..eta.blocks()).map(|k| x.dot(eta.block(k))).fold(f64::NEG_INFINITY, f64::max))
}

/// Variance of `A` minimized over the equivalence class of `η`.
pub fn optimal_variance(model: &LogLinear, eta: &ParamVector, dist: &InputDist) -> Result<ProjectionResult> {
    check_conjunction(model, eta, dist)?;
    project(dist, |x| model.log_partition(x, eta))
}

/// Variance of `E∞` minimized over the equivalence class of `η`.
pub fn optimal_einf_variance(eta: &ParamVector, dist: &InputDist) -> Result<ProjectionResult> {
    if dist.dim() != eta.block_len() {
        return Err(config_err("distribution dimension does not match parameter block length"));
    }
    project(dist, |x| e_infinity(x, eta))
}

/// Least-squares projection of centered `f(X)` onto centered coordinates.
pub fn project<F>(dist: &InputDist, f: F) -> Result<ProjectionResult>
where
    F: Fn(&SparseVec) -> Result<f64> + Sync,
{
    let d = dist.dim();
    // Raw moments: [E f, E f², E x (d), E x f (d), E x xᵀ (upper triangle)].
    let tri = d * (d + 1) / 2;
    let width = 2 + 2 * d + tri;
    let m = dist.expect(width, |x, out| {
        let v = f(x)?;
        out[0] = v;
        out[1] = v * v;
        let entries = x.entries();
        for &(j, xj) in entries {
            out[2 + j] = xj;
            out[2 + d + j] = xj * v;
        }
        for (a, &(i, xi)) in entries.iter().enumerate() {
            for &(j, xj) in &entries[a..] {
                out[2 + 2 * d + tri_index(d, i, j)] = xi * xj;
            }
        }
        Ok(())
    })?;
    let mean_f = m[0];
    let mean_x = &m[2..2 + d];
    let mut gram = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let c = m[2 + 2 * d + tri_index(d, i, j)] - mean_x[i] * mean_x[j];
            gram[(i, j)] = c;
            gram[(j, i)] = c;
        }
    }
    let rhs = DVector::from_iterator(d, (0..d).map(|j| m[2 + d + j] - mean_x[j] * mean_f));
    let beta = solve_normal_equations(gram, rhs);

    let residual = dist.expect(1, |x, out| {
        let r = f(x)? - mean_f - x.dot(&beta) + dot(mean_x, &beta);
        out[0] = r * r;
        Ok(())
    })?[0];

    let fitted_values = if dist.len() <= FITTED_LIMIT {
        Some(
            (0..dist.len())
                .map(|i| mean_f + dist.get(i).0.dot(&beta) - dot(mean_x, &beta))
                .collect(),
        )
    } else {
        None
    };
    Ok(ProjectionResult { residual_variance: residual.max(0.0), beta, fitted_values })
}

fn tri_index(d: usize, i: usize, j: usize) -> usize {
    // row-major upper triangle, i ≤ j
    i * d - i * (i + 1) / 2 + j
}

/// Cholesky solve, falling back to the minimum-norm pseudo-inverse solution.
fn solve_normal_equations(gram: DMatrix<f64>, rhs: DVector<f64>) -> Vec<f64> {
    let scale = gram.diagonal().iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if let Some(ch) = gram.clone().cholesky() {
        let diag_min = ch.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
        if diag_min > 1e-12 * scale {
            return ch.solve(&rhs).iter().copied().collect();
        }
    }
    log::warn!("centered Gram matrix is singular; using the minimum-norm least-squares solution");
    let pinv = gram
        .pseudo_inverse(1e-12 * scale)
        .expect("pseudo-inverse of a symmetric matrix with nonnegative tolerance");
    (pinv * rhs).iter().copied().collect()
}

/// The explicit two-class parameter whose whole equivalence class has large normalizer variance.
///
/// `η₁ = (−a, a/(d−1), …, a/(d−1))`, `η₂ = (a/(d(d−1)), …)`, remaining classes zero, `a = √(1 − 1/d)`.
pub fn hard_construction(d: usize, k: usize) -> Result<ParamVector> {
    if d < 2 {
        return Err(arg_err(format!("hard construction needs d ≥ 2, got {d}")));
    }
    if k < 2 {
        return Err(arg_err(format!("hard construction needs K ≥ 2, got {k}")));
    }
    let df = d as f64;
    let a = (1.0 - 1.0 / df).sqrt();
    let mut blocks = vec![vec![0.0; d]; k];
    blocks[0][0] = -a;
    for v in &mut blocks[0][1..] {
        *v = a / (df - 1.0);
    }
    blocks[1] = vec![a / (df * (df - 1.0)); d];
    let eta = ParamVector::from_blocks(blocks)?;
    let sq = dot(eta.values(), eta.values());
    if sq > 2.0 {
        return Err(config_err(format!("hard construction has ‖η‖² = {sq} > 2")));
    }
    Ok(eta)
}

/// `Δ = √(1 − 1/d) / (2(d − 1))`.
pub fn hard_margin(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(arg_err(format!("hard margin needs d ≥ 2, got {d}")));
    }
    let df = d as f64;
    Ok((1.0 - 1.0 / df).sqrt() / (2.0 * (df - 1.0)))
}

/// Lower bounds on `V*(α·η⁰)` for the hard construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceLowerBound {
    /// `‖η‖²/(32d(d−1)) − 4K e^{−a‖η‖/(2(d−1))} ‖η‖`.
    pub statement: f64,
    /// `‖η‖²/(64d(d−1)) − 4K e^{−a‖η‖/(2(d−1))} ‖η‖`, the weaker form.
    pub conservative: f64,
}

pub fn variance_lower_bound_thm(alpha: f64, d: usize, k: usize) -> Result<VarianceLowerBound> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(arg_err(format!("alpha must be positive, got {alpha}")));
    }
    let norm = hard_construction(d, k)?.norm() * alpha;
    let df = d as f64;
    let a = (1.0 - 1.0 / df).sqrt();
    let tail = 4.0 * k as f64 * (-a * norm / (2.0 * (df - 1.0))).exp() * norm;
    let denom = df * (df - 1.0);
    Ok(VarianceLowerBound {
        statement: norm * norm / (32.0 * denom) - tail,
        conservative: norm * norm / (64.0 * denom) - tail,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorollaryBound {
    /// `V_E*·α² − 2K e^{−Δα}(1 + V_E*)·α`.
    pub value: f64,
    /// `α > log(2K)/Δ`.
    pub valid: bool,
}

pub fn corollary_bound(v_e_star: f64, alpha: f64, k: usize, delta_margin: f64) -> Result<CorollaryBound> {
    if !(v_e_star >= 0.0) || !(alpha > 0.0) || !(delta_margin > 0.0) || k == 0 {
        return Err(arg_err("corollary bound needs V_E* ≥ 0, α > 0, Δ > 0 and K ≥ 1"));
    }
    let kf = k as f64;
    let value = v_e_star * alpha * alpha - 2.0 * kf * (-delta_margin * alpha).exp() * (1.0 + v_e_star) * alpha;
    Ok(CorollaryBound { value, valid: alpha > (2.0 * kf).ln() / delta_margin })
}

/// Gap between `A` and `E∞` at `α·η` over the inputs where the best class is unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    /// `sup |Ã − Ẽ∞|`, both centered over the included inputs.
    pub centered: f64,
    /// `sup |A − E∞|`.
    pub uncentered: f64,
    /// Smallest top-two score gap of `α·η` over the included inputs.
    pub margin: f64,
    /// `K e^{−margin}`, the per-point bound.
    pub uncentered_bound: f64,
    /// `2K e^{−margin}`.
    pub centered_bound: f64,
    /// Indices of inputs whose best score is tied.
    pub excluded: Vec<usize>,
}

pub fn a_einf_deviation(model: &LogLinear, eta: &ParamVector, alpha: f64, dist: &InputDist) -> Result<DeviationReport> {
    check_conjunction(model, eta, dist)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(arg_err(format!("alpha must be positive, got {alpha}")));
    }
    let scaled = eta.scaled(alpha);
    let points = dist.points();
    if model.num_labels() == 1 {
        return Ok(DeviationReport {
            centered: 0.0,
            uncentered: 0.0,
            margin: f64::INFINITY,
            uncentered_bound: 0.0,
            centered_bound: 0.0,
            excluded: Vec::new(),
        });
    }
    let margin = model.margin(&points, &scaled)?;
    let mut included = Vec::with_capacity(points.len());
    let mut weight = 0.0;
    let (mut mean_a, mut mean_e) = (0.0, 0.0);
    for (i, x) in points.iter().enumerate() {
        if margin.ties.contains(&i) {
            continue;
        }
        let a = model.log_partition(x, &scaled)?;
        let e = e_infinity(x, &scaled)?;
        let p = dist.get(i).1;
        weight += p;
        mean_a += p * a;
        mean_e += p * e;
        included.push((i, a, e));
    }
    if included.is_empty() {
        return Err(arg_err("every input has a tied best score"));
    }
    mean_a /= weight;
    mean_e /= weight;
    let mut centered = 0.0f64;
    let mut uncentered = 0.0f64;
    let mut gap = f64::INFINITY;
    for &(i, a, e) in &included {
        centered = centered.max(((a - mean_a) - (e - mean_e)).abs());
        uncentered = uncentered.max((a - e).abs());
        gap = gap.min(margin.gaps[i]);
    }
    let kf = model.num_labels() as f64;
    Ok(DeviationReport {
        centered,
        uncentered,
        margin: gap,
        uncentered_bound: kf * (-gap).exp(),
        centered_bound: 2.0 * kf * (-gap).exp(),
        excluded: margin.ties,
    })
}

/// `A` evaluated directly for class-blocked parameters under counting measure.
pub fn conjunction_log_partition(x: &SparseVec, eta: &ParamVector) -> f64 {
    let scores: Vec<f64> = (0..eta.blocks()).map(|k| x.dot(eta.block(k))).collect();
    log_sum_exp(&scores)
}

/// One row of a hard-construction variance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct VarianceRow {
    pub d: usize,
    pub K: usize,
    pub alpha: f64,
    /// `V*(α·η⁰)`.
    pub V_star: f64,
    /// `V_E*(α·η⁰) = α²·V_E*(η⁰)`.
    pub V_E_star: f64,
    /// Conservative lower bound (64-denominator form).
    pub thm_bound: f64,
    /// Lower bound with the 32-denominator constant.
    pub thm_bound_statement: f64,
    pub corollary_bound: f64,
    pub corollary_valid: bool,
    /// `Δ` of the construction.
    pub margin: f64,
    /// Centered `sup |Ã − Ẽ∞|` at `α·η⁰`.
    pub deviations: f64,
    pub deviation_bound: f64,
    pub excluded_inputs: usize,
}

/// Evaluates the hard construction on the `d`-cube for every `α`.
pub fn variance_report(d: usize, k: usize, alphas: &[f64]) -> Result<Vec<VarianceRow>> {
    let eta0 = hard_construction(d, k)?;
    let dist = InputDist::from(HypercubeDist::new(d)?);
    let model = LogLinear::conjunction(d, k, (d as f64).sqrt())?;
    let ve = optimal_einf_variance(&eta0, &dist)?.residual_variance;
    let delta = hard_margin(d)?;
    alphas
        .iter()
        .map(|&alpha| {
            let scaled = eta0.scaled(alpha);
            let v_star = optimal_variance(&model, &scaled, &dist)?.residual_variance;
            let thm = variance_lower_bound_thm(alpha, d, k)?;
            let cor = corollary_bound(ve, alpha, k, delta)?;
            let dev = a_einf_deviation(&model, &eta0, alpha, &dist)?;
            Ok(VarianceRow {
                d,
                K: k,
                alpha,
                V_star: v_star,
                V_E_star: ve * alpha * alpha,
                thm_bound: thm.conservative,
                thm_bound_statement: thm.statement,
                corollary_bound: cor.value,
                corollary_valid: cor.valid,
                margin: delta,
                deviations: dev.centered,
                deviation_bound: dev.centered_bound,
                excluded_inputs: dev.excluded.len(),
            })
        })
        .collect()
}

pub fn write_variance_report<W: std::io::Write>(w: W, rows: &[VarianceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
