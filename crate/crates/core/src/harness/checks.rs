//! End-to-end bound verification: every closed-form bound evaluated against
//! the quantity it controls, on seeded or enumerated instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::experiments::ExperimentRow;
use crate::bounds::{
    closeness, covariance_eigen_bound, feature_covariance_max_eig, mean_feature_covariance_max_eig,
    shrinkage_deviation, BoundCheck,
};
use crate::error::Result;
use crate::geometry::{levelset_input_space, max_abs_normalizer};
use crate::hypercube::{HypercubeDist, InputDist};
use crate::model::{LogLinear, ParamVector, SparseVec};
use crate::presets;
use crate::variance::{
    corollary_bound, equivalence_shift, hard_construction, hard_margin, optimal_einf_variance, optimal_variance,
    variance_lower_bound_thm,
};
use crate::contour::{BBox, Grid};

pub const EXACT_SLACK: f64 = 1e-12;
/// Additive slack on the likelihood-gap bound for finite-sample fits.
pub const GAP_SLACK: f64 = 0.02;
pub const PLANAR_RESOLUTION: usize = 512;
pub const PLANAR_HALF_WIDTH: f64 = 4.0;
pub const PLANAR_TOLERANCE: f64 = 1e-2;
pub const HALF_SPACE_TOLERANCE: f64 = 1e-6;
/// The per-input eigenvalue obeys the Gershgorin bound only up to this factor.
pub const PER_INPUT_FACTOR: f64 = 2.0;

pub const VARIANCE_DIMS: [usize; 4] = [3, 4, 5, 6];
pub const VARIANCE_CLASSES: [usize; 2] = [2, 4];
pub const VARIANCE_ALPHAS: [f64; 4] = [1.0, 5.0, 10.0, 20.0];

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(rng: &mut ChaCha20Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn cube_points(d: usize) -> Result<Vec<SparseVec>> {
    Ok(HypercubeDist::new(d)?.points().collect())
}

/// `log_partition` vanishes at both inputs of the first worked example.
pub fn example_one_check() -> Result<BoundCheck> {
    let (model, eta, inputs) = presets::example_one();
    let observed = max_abs_normalizer(&model, &inputs, &eta)?;
    Ok(BoundCheck::upper("example_one_max_abs_A", &eta.values(), 0.0, observed, EXACT_SLACK))
}

/// `‖η‖ = δ/R` keeps `A` within `δ` of `log μ(Y)`; the row reports the worst `dev/δ`.
pub fn shrinkage_check(seed: u64, instances: usize) -> Result<BoundCheck> {
    let mut r = rng(seed, 10);
    let mut worst = 0.0f64;
    let mut draws = Vec::with_capacity(instances);
    for _ in 0..instances {
        let d = r.random_range(2..=6);
        let k = r.random_range(2..=5);
        let radius = (d as f64).sqrt();
        let delta = 10f64.powf(r.random_range(-2.0..0.5));
        let raw = gaussian(&mut r, k * d);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let eta = ParamVector::from_values(k, d, raw.iter().map(|v| v * delta / (radius * norm)).collect())?;
        let model = LogLinear::conjunction(d, k, radius)?;
        let dev = shrinkage_deviation(&model, &eta, &cube_points(d)?)?;
        worst = worst.max(dev / delta);
        draws.push((d, k, delta));
    }
    Ok(BoundCheck::upper("shrinkage_max_dev_over_delta", &draws, 1.0, worst, EXACT_SLACK))
}

/// Shared shifts leave conditionals unchanged and move `A` by `β·x`.
pub fn equivalence_checks(seed: u64, instances: usize) -> Result<Vec<BoundCheck>> {
    let mut r = rng(seed, 11);
    let (mut prob_err, mut shift_err) = (0.0f64, 0.0f64);
    let mut draws = Vec::with_capacity(instances);
    for _ in 0..instances {
        let d = r.random_range(2..=6);
        let k = r.random_range(2..=5);
        let model = LogLinear::conjunction(d, k, (d as f64).sqrt())?;
        let eta = ParamVector::from_values(k, d, gaussian(&mut r, k * d))?;
        let beta = gaussian(&mut r, d);
        let shifted = equivalence_shift(&eta, &beta)?;
        for x in HypercubeDist::new(d)?.points() {
            let a = model.conditional(&x, &eta)?;
            let b = model.conditional(&x, &shifted)?;
            for (p, q) in a.probs().zip(b.probs()) {
                prob_err = prob_err.max((p - q).abs());
            }
            shift_err = shift_err.max((b.log_partition - a.log_partition - x.dot(&beta)).abs());
        }
        draws.push((d, k, beta));
    }
    Ok(vec![
        BoundCheck::upper("equivalence_max_prob_change", &draws, 0.0, prob_err, EXACT_SLACK),
        BoundCheck::upper("equivalence_max_shift_error", &draws, 0.0, shift_err, EXACT_SLACK),
    ])
}

/// `1/(32d(d−1)) ≤ V_E*(η⁰) ≤ 1` on the `d`-cube.
pub fn sandwich_checks(dims: impl IntoIterator<Item = usize>) -> Result<Vec<BoundCheck>> {
    let mut rows = Vec::new();
    for d in dims {
        let eta = hard_construction(d, 2)?;
        let ve = optimal_einf_variance(&eta, &InputDist::from(HypercubeDist::new(d)?))?.residual_variance;
        let lower = 1.0 / (32.0 * (d * (d - 1)) as f64);
        rows.push(BoundCheck::lower("sandwich_lower", &d, lower, ve, 0.0));
        rows.push(BoundCheck::upper("sandwich_upper", &d, 1.0, ve, 0.0));
    }
    Ok(rows)
}

/// Variance lower bounds on `α·η⁰`: the theorem in both constant forms and,
/// where `α` clears the margin condition, the corollary.
pub fn variance_bound_checks(dims: &[usize], classes: &[usize], alphas: &[f64]) -> Result<Vec<BoundCheck>> {
    let mut rows = Vec::new();
    for &d in dims {
        let dist = InputDist::from(HypercubeDist::new(d)?);
        let margin = hard_margin(d)?;
        for &k in classes {
            let eta0 = hard_construction(d, k)?;
            let model = LogLinear::conjunction(d, k, (d as f64).sqrt())?;
            let ve = optimal_einf_variance(&eta0, &dist)?.residual_variance;
            for &alpha in alphas {
                let key = (d, k, alpha);
                let v = optimal_variance(&model, &eta0.scaled(alpha), &dist)?.residual_variance;
                let thm = variance_lower_bound_thm(alpha, d, k)?;
                rows.push(BoundCheck::lower("variance_lb_conservative", &key, thm.conservative.max(0.0), v, 0.0));
                rows.push(BoundCheck::lower("variance_lb_statement", &key, thm.statement.max(0.0), v, 0.0));
                let cor = corollary_bound(ve, alpha, k, margin)?;
                if cor.valid {
                    rows.push(BoundCheck::lower("corollary", &key, cor.value, v, 0.0));
                }
            }
        }
    }
    Ok(rows)
}

/// Covariance eigenvalues against `q(k−1)e^{−m}` with `m` the score margin over
/// the nonzero cube points, on hard constructions and seeded random parameters.
/// The averaged covariance must satisfy the bound; the per-input eigenvalue
/// within [`PER_INPUT_FACTOR`] of it.
pub fn covariance_checks(seed: u64, random_per_scale: usize) -> Result<Vec<BoundCheck>> {
    let mut r = rng(seed, 12);
    let mut rows = Vec::new();
    for d in 2..=6 {
        let all = cube_points(d)?;
        let nonzero = &all[1..];
        for k in [2usize, 3, 4] {
            let model = LogLinear::conjunction(d, k, (d as f64).sqrt())?;
            let mut etas: Vec<ParamVector> =
                VARIANCE_ALPHAS.iter().map(|&a| Ok(hard_construction(d, k)?.scaled(a))).collect::<Result<_>>()?;
            for scale in [0.5, 1.0, 3.0, 10.0] {
                for _ in 0..random_per_scale {
                    let vals = (0..k * d).map(|_| scale * r.random_range(-1.0..1.0)).collect();
                    etas.push(ParamVector::from_values(k, d, vals)?);
                }
            }
            let (mut avg_ratio, mut per_ratio, mut count) = (0.0f64, 0.0f64, 0usize);
            for eta in &etas {
                let m = model.margin(nonzero, eta)?.value;
                if !(m > 0.0) {
                    continue;
                }
                count += 1;
                let norm = eta.norm();
                let bound = covariance_eigen_bound(d, k, m / norm, norm)?;
                let avg = mean_feature_covariance_max_eig(&model, &all, eta)?;
                let per = nonzero
                    .iter()
                    .map(|x| feature_covariance_max_eig(&model, x, eta))
                    .try_fold(0.0f64, |acc, v| v.map(|v| acc.max(v)))?;
                avg_ratio = avg_ratio.max(avg / bound);
                per_ratio = per_ratio.max(per / bound);
            }
            if count == 0 {
                continue;
            }
            let key = (d, k, count);
            rows.push(BoundCheck::upper("covariance_mean_eig_ratio", &key, 1.0, avg_ratio, 0.0));
            rows.push(BoundCheck::upper("covariance_per_input_eig_ratio", &key, PER_INPUT_FACTOR, per_ratio, 0.0));
        }
    }
    Ok(rows)
}

/// Inputs at a common distance `D` from an exactly normalized pair satisfy `√V ≤ ‖η‖·D`.
pub fn closeness_checks(seed: u64, instances: usize) -> Result<Vec<BoundCheck>> {
    let mut r = rng(seed, 13);
    let (_, eta, anchors) = presets::example_one();
    let anchor_raw: Vec<Vec<f64>> = anchors.iter().map(|x| x.to_dense()).collect();
    let mut rows = Vec::new();
    for _ in 0..instances {
        let dist = r.random_range(0.01..1.0);
        let raw: Vec<Vec<f64>> = anchor_raw
            .iter()
            .map(|a| vec![1.0, a[1] + if r.random::<bool>() { dist } else { -dist }])
            .collect();
        let table: Vec<Vec<f64>> = anchor_raw.iter().chain(&raw).cloned().collect();
        let model = presets::xy_one_model(&table)?;
        let inputs: Vec<SparseVec> = raw.iter().map(|x| SparseVec::from_dense(x)).collect();
        let d = closeness(&model, &inputs, &anchors)?;
        let sq = inputs.iter().map(|x| Ok(model.log_partition(x, &eta)?.powi(2))).sum::<Result<f64>>()?;
        let root_v = (sq / inputs.len() as f64).sqrt();
        rows.push(BoundCheck::upper("closeness_root_v", &raw, eta.norm() * d, root_v, EXACT_SLACK));
    }
    Ok(rows)
}

/// Zero level set of the two-class planar example: `|A| ≤ 1e−2` at every
/// vertex and every vertex inside `{x : η_k·x ≤ 0}`.
pub fn planar_checks() -> Result<Vec<BoundCheck>> {
    let bbox = BBox::square(PLANAR_HALF_WIDTH)?;
    let grid = Grid::new(bbox, PLANAR_RESOLUTION)?;
    let model = presets::shared_plane_model(bbox.corner_norm())?;
    let eta = presets::planar_params();
    let contour = levelset_input_space(&model, &eta, grid, 0.0)?;
    let (mut worst_a, mut worst_half) = (0.0f64, f64::NEG_INFINITY);
    for v in contour.vertices() {
        let x = SparseVec::from_dense(&v.point);
        worst_a = worst_a.max(model.log_partition(&x, &eta)?.abs());
        for k in 0..eta.blocks() {
            worst_half = worst_half.max(x.dot(eta.block(k)));
        }
    }
    let key = (PLANAR_RESOLUTION, contour.num_vertices());
    let nonempty = contour.num_vertices() > 0;
    Ok(vec![
        BoundCheck::new("planar_max_abs_A", &key, PLANAR_TOLERANCE, worst_a, nonempty && worst_a <= PLANAR_TOLERANCE),
        BoundCheck::new(
            "planar_half_space",
            &key,
            HALF_SPACE_TOLERANCE,
            worst_half,
            nonempty && worst_half <= HALF_SPACE_TOLERANCE,
        ),
    ])
}

/// The likelihood-gap bound, with [`GAP_SLACK`], on experiment rows.
pub fn gap_checks(rows: &[ExperimentRow]) -> Vec<BoundCheck> {
    rows.iter()
        .map(|r| BoundCheck::upper("lgap_bound", &(r.tau, r.delta, r.seed), r.bound_thm1, r.gap, GAP_SLACK))
        .collect()
}

/// Every check that needs no training, seeded by `seed`.
pub fn analytic_checks(seed: u64) -> Result<Vec<BoundCheck>> {
    let mut rows = vec![example_one_check()?, shrinkage_check(seed, 100)?];
    rows.extend(equivalence_checks(seed, 50)?);
    rows.extend(closeness_checks(seed, 20)?);
    rows.extend(sandwich_checks(3..=8)?);
    rows.extend(variance_bound_checks(&VARIANCE_DIMS, &VARIANCE_CLASSES, &VARIANCE_ALPHAS)?);
    rows.extend(covariance_checks(seed, 20)?);
    rows.extend(planar_checks()?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_checks_pass() {
        let rows = analytic_checks(0).unwrap();
        let failed: Vec<_> = rows.iter().filter(|r| !r.satisfied).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        for name in ["sandwich_lower", "variance_lb_conservative", "corollary", "covariance_mean_eig_ratio", "planar_half_space"] {
            assert!(rows.iter().any(|r| r.bound_name == name), "{name}");
        }
    }

    #[test]
    fn checks_are_seeded() {
        assert_eq!(shrinkage_check(4, 10).unwrap(), shrinkage_check(4, 10).unwrap());
        assert_ne!(shrinkage_check(4, 10).unwrap().inputs_hash, shrinkage_check(5, 10).unwrap().inputs_hash);
    }

    #[test]
    fn gap_rows_flag_violations() {
        let mut row = ExperimentRow {
            source: "synthetic".into(),
            tau: 1.0,
            delta: 0.1,
            loglik_mle: 0.0,
            loglik_constrained: 0.0,
            gap: 0.1,
            sqrt_v: 0.1,
            kl_uniform: 1.0,
            bound_thm1: 0.05,
            eta_hat_norm: 1.0,
            seed: 0,
            converged: true,
            alpha: None,
        };
        assert!(!gap_checks(std::slice::from_ref(&row))[0].satisfied);
        row.gap = 0.06;
        assert!(gap_checks(&[row])[0].satisfied);
    }
}
