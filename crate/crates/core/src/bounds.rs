//! Closed-form likelihood-gap, normalization, and covariance bounds, plus the
//! observed quantities they are checked against.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg_err, Error, Result};
use crate::model::{LogLinear, ParamVector, SparseVec};

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(arg_err(format!("{name} must be finite and nonnegative, got {v}")));
    }
    Ok(())
}

fn check_pos(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(arg_err(format!("{name} must be finite and positive, got {v}")));
    }
    Ok(())
}

/// `(1 − δ/(R‖η̂‖))₊ · KL`, with the factor clamped to `[0, 1]`.
pub fn lgap_upper_bound(delta: f64, radius: f64, eta_hat_norm: f64, expected_kl: f64) -> Result<f64> {
    check_nonneg("delta", delta)?;
    check_pos("R", radius)?;
    check_pos("‖η̂‖", eta_hat_norm)?;
    check_nonneg("expected KL", expected_kl)?;
    let factor = (1.0 - delta / (radius * eta_hat_norm)).clamp(0.0, 1.0);
    Ok(factor * expected_kl)
}

/// `b (‖η‖ − δ/R)² exp(−cδ/R)` for `δ ≤ R‖η‖`, else 0.
pub fn strong_lgap_bound(eta_norm: f64, delta: f64, radius: f64, b: f64, c: f64) -> Result<f64> {
    check_nonneg("‖η‖", eta_norm)?;
    check_nonneg("delta", delta)?;
    check_pos("R", radius)?;
    check_pos("b", b)?;
    check_pos("c", c)?;
    let s = delta / radius;
    if s >= eta_norm {
        return Ok(0.0);
    }
    Ok(b * (eta_norm - s).powi(2) * (-c * s).exp())
}

/// `max_x |A(x, η) − log μ(Y)|` over `inputs`.
pub fn shrinkage_deviation(model: &LogLinear, eta: &ParamVector, inputs: &[SparseVec]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(arg_err("inputs must be nonempty"));
    }
    let log_mu = model.labels().log_total_measure();
    let mut worst = 0.0f64;
    for x in inputs {
        worst = worst.max((model.log_partition(x, eta)? - log_mu).abs());
    }
    Ok(worst)
}

/// `(1/n) Σᵢ min_{s ∈ S} max_y ‖T(xᵢ, y) − T(s, y)‖₂`.
pub fn closeness(model: &LogLinear, inputs: &[SparseVec], set: &[SparseVec]) -> Result<f64> {
    if set.is_empty() {
        return Err(arg_err("candidate set must be nonempty"));
    }
    if inputs.is_empty() {
        return Err(arg_err("inputs must be nonempty"));
    }
    let k = model.num_labels();
    let fm = model.features();
    let features = |x: &SparseVec| -> Result<Vec<Vec<f64>>> { (0..k).map(|y| fm.feature(x, y)).collect() };
    let set_features: Vec<_> = set.iter().map(features).collect::<Result<_>>()?;
    let mut total = 0.0;
    for x in inputs {
        let tx = features(x)?;
        let nearest = set_features
            .iter()
            .map(|ts| {
                tx.iter()
                    .zip(ts)
                    .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        total += nearest;
    }
    Ok(total / inputs.len() as f64)
}

/// A bound value together with the reading under which it was derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualifiedBound {
    pub value: f64,
    pub caveats: Vec<String>,
}

/// `B·D`: the approximate-normalizability level for inputs `D`-close to an
/// exactly normalized set.
pub fn closeness_normalizability_bound(d: f64, b: f64) -> Result<QualifiedBound> {
    check_nonneg("D", d)?;
    check_nonneg("B", b)?;
    Ok(QualifiedBound {
        value: b * d,
        caveats: vec![
            "B bounds the parameter norm ‖η‖₂, not the input norm".into(),
            "the reference set is {x : A(x, η) = 0}".into(),
            "√V ≤ B·D holds when every input lies at the same distance D; \
             with unequal distances only the mean of |A| is controlled"
                .into(),
        ],
    })
}

/// Gershgorin bound `q(k−1)e^{−c‖η‖}` on the largest feature-covariance eigenvalue.
pub fn covariance_eigen_bound(q: usize, k: usize, c: f64, eta_norm: f64) -> Result<f64> {
    if q == 0 || k < 2 {
        return Err(arg_err(format!("need q ≥ 1 and k ≥ 2, got q = {q}, k = {k}")));
    }
    check_pos("c", c)?;
    check_nonneg("‖η‖", eta_norm)?;
    Ok(q as f64 * (k - 1) as f64 * (-c * eta_norm).exp())
}

/// Per-entry bound `2(k−1)e^{−c‖η‖}` on the feature covariance.
pub fn covariance_entry_bound(k: usize, c: f64, eta_norm: f64) -> Result<f64> {
    if k < 2 {
        return Err(arg_err(format!("need k ≥ 2, got {k}")));
    }
    check_pos("c", c)?;
    check_nonneg("‖η‖", eta_norm)?;
    Ok(2.0 * (k - 1) as f64 * (-c * eta_norm).exp())
}

/// Largest dimension for which the covariance is assembled densely.
pub const DENSE_EIGEN_LIMIT: usize = 100;
const POWER_TOLERANCE: f64 = 1e-8;
const POWER_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenMethod {
    /// Dense up to [`DENSE_EIGEN_LIMIT`], power iteration above.
    #[default]
    Auto,
    Dense,
    Power,
}

/// Conditional feature moments at one input: `T(x, y)` rows and `p(y|x)`.
struct Moments {
    rows: Vec<Vec<f64>>,
    probs: Vec<f64>,
    mean: Vec<f64>,
}

impl Moments {
    fn new(model: &LogLinear, x: &SparseVec, eta: &ParamVector) -> Result<Self> {
        let probs: Vec<f64> = model.conditional(x, eta)?.probs().collect();
        let rows: Vec<Vec<f64>> = (0..probs.len())
            .map(|y| model.features().feature(x, y))
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0; eta.len()];
        for (row, p) in rows.iter().zip(&probs) {
            for (m, t) in mean.iter_mut().zip(row) {
                *m += p * t;
            }
        }
        Ok(Self { rows, probs, mean })
    }

    /// `acc += w · (E[TTᵀ] − E[T]E[T]ᵀ)`.
    fn add_dense(&self, w: f64, acc: &mut DMatrix<f64>) {
        for (row, p) in self.rows.iter().zip(&self.probs) {
            let t = DVector::from_column_slice(row);
            acc.ger(w * p, &t, &t, 1.0);
        }
        let m = DVector::from_column_slice(&self.mean);
        acc.ger(-w, &m, &m, 1.0);
    }

    /// `out += w · Cov · v`.
    fn add_apply(&self, w: f64, v: &[f64], out: &mut [f64]) {
        for (row, p) in self.rows.iter().zip(&self.probs) {
            let s = w * p * dot(row, v);
            for (o, t) in out.iter_mut().zip(row) {
                *o += s * t;
            }
        }
        let s = w * dot(&self.mean, v);
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o -= s * m;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest eigenvalue of `Cov[T(x, Y) | x]` under `p_η`.
pub fn feature_covariance_max_eig(model: &LogLinear, x: &SparseVec, eta: &ParamVector) -> Result<f64> {
    feature_covariance_max_eig_with(model, std::slice::from_ref(x), eta, EigenMethod::Auto)
}

/// Largest eigenvalue of the input-averaged covariance `(1/n)Σᵢ Cov[T | xᵢ]`.
pub fn mean_feature_covariance_max_eig(model: &LogLinear, inputs: &[SparseVec], eta: &ParamVector) -> Result<f64> {
    feature_covariance_max_eig_with(model, inputs, eta, EigenMethod::Auto)
}

/// Largest eigenvalue of the input-averaged covariance with an explicit method.
pub fn feature_covariance_max_eig_with(
    model: &LogLinear,
    inputs: &[SparseVec],
    eta: &ParamVector,
    method: EigenMethod,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(arg_err("inputs must be nonempty"));
    }
    let p = eta.len();
    let moments: Vec<Moments> = inputs.iter().map(|x| Moments::new(model, x, eta)).collect::<Result<_>>()?;
    let w = 1.0 / inputs.len() as f64;
    let dense = match method {
        EigenMethod::Auto => p <= DENSE_EIGEN_LIMIT,
        EigenMethod::Dense if p > DENSE_EIGEN_LIMIT => {
            return Err(Error::Capability(format!(
                "dense covariance of dimension {p} exceeds {DENSE_EIGEN_LIMIT}; use power iteration"
            )))
        }
        EigenMethod::Dense => true,
        EigenMethod::Power => false,
    };
    let value = if dense {
        let mut cov = DMatrix::zeros(p, p);
        for m in &moments {
            m.add_dense(w, &mut cov);
        }
        SymmetricEigen::new(cov).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        power_iteration(p, |v, out| {
            out.iter_mut().for_each(|o| *o = 0.0);
            for m in &moments {
                m.add_apply(w, v, out);
            }
        })?
    };
    Ok(value.max(0.0))
}

/// Dominant eigenvalue of a positive semidefinite operator.
fn power_iteration(p: usize, apply: impl Fn(&[f64], &mut [f64])) -> Result<f64> {
    // Deterministic start with no exact symmetry so it is not orthogonal to the top eigenvector.
    let mut v: Vec<f64> = (0..p).map(|i| 1.0 + 0.1 * ((i as f64) * 0.7548776662).fract()).collect();
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut av = vec![0.0; p];
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERATIONS {
        apply(&v, &mut av);
        let next = dot(&v, &av);
        let norm = dot(&av, &av).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        for (vi, ai) in v.iter_mut().zip(&av) {
            *vi = ai / norm;
        }
        if (next - lambda).abs() <= POWER_TOLERANCE * next.abs().max(1e-300) {
            return Ok(next);
        }
        lambda = next;
    }
    Err(Error::Capability(format!(
        "power iteration did not reach relative tolerance {POWER_TOLERANCE} in {POWER_MAX_ITERATIONS} steps"
    )))
}

/// One row of a bound-verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub bound_name: String,
    pub inputs_hash: String,
    pub bound_value: f64,
    pub observed_value: f64,
    pub satisfied: bool,
}

impl BoundCheck {
    /// Checks `observed ≤ bound + slack`.
    pub fn upper<I: Serialize>(name: &str, inputs: &I, bound: f64, observed: f64, slack: f64) -> Self {
        Self::new(name, inputs, bound, observed, observed <= bound + slack)
    }

    /// Checks `observed ≥ bound − slack`.
    pub fn lower<I: Serialize>(name: &str, inputs: &I, bound: f64, observed: f64, slack: f64) -> Self {
        Self::new(name, inputs, bound, observed, observed >= bound - slack)
    }

    pub fn new<I: Serialize>(name: &str, inputs: &I, bound: f64, observed: f64, satisfied: bool) -> Self {
        Self {
            bound_name: name.to_string(),
            inputs_hash: inputs_hash(inputs),
            bound_value: bound,
            observed_value: observed,
            satisfied: satisfied && bound.is_finite() && observed.is_finite(),
        }
    }
}

/// First 16 hex digits of the SHA-256 of the JSON encoding.
pub fn inputs_hash<I: Serialize>(inputs: &I) -> String {
    let bytes = serde_json::to_vec(inputs).expect("bound inputs serialize");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

pub fn write_bound_checks<W: std::io::Write>(w: W, rows: &[BoundCheck]) -> Result<()> {
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
    use crate::presets;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lgap_bound_values() {
        assert_abs_diff_eq!(lgap_upper_bound(1.0, 1.0, 2.0, 0.5).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(lgap_upper_bound(2.0, 1.0, 2.0, 0.5).unwrap(), 0.0);
        assert_eq!(lgap_upper_bound(0.0, 1.0, 2.0, 0.5).unwrap(), 0.5);
        assert_eq!(lgap_upper_bound(50.0, 1.0, 2.0, 0.5).unwrap(), 0.0);
        assert!(lgap_upper_bound(-1.0, 1.0, 2.0, 0.5).is_err());
        assert!(lgap_upper_bound(1.0, 0.0, 2.0, 0.5).is_err());
    }

    #[test]
    fn strong_bound_values() {
        let v = strong_lgap_bound(2.0, 1.0, 1.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(v, 2.0 * (-1f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.73576, epsilon = 1e-5);
        assert_eq!(strong_lgap_bound(2.0, 2.0, 1.0, 2.0, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(strong_lgap_bound(2.0, 0.0, 1.0, 3.0, 1.0).unwrap(), 12.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_bound_values() {
        let v = covariance_eigen_bound(3, 2, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(v, 3.0 * (-2f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.40601, epsilon = 1e-5);
        assert!(covariance_eigen_bound(3, 2, 1.0, 1e4).unwrap() < 1e-300);
        assert_abs_diff_eq!(covariance_entry_bound(2, 1.0, 2.0).unwrap(), 2.0 * (-2f64).exp(), epsilon = 1e-15);
        assert!(covariance_eigen_bound(0, 2, 1.0, 1.0).is_err());
        assert!(covariance_eigen_bound(1, 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn example_one_shrinkage() {
        let (model, eta, inputs) = presets::example_one();
        let dev = shrinkage_deviation(&model, &eta, &inputs).unwrap();
        assert_abs_diff_eq!(dev, 2f64.ln(), epsilon = 1e-12);
        assert!(eta.norm() * model.features().radius() >= dev);
        assert_eq!(shrinkage_deviation(&model, &model.zero_params(), &inputs).unwrap(), 0.0);
    }

    #[test]
    fn closeness_values() {
        let model = LogLinear::conjunction(2, 2, 10.0).unwrap();
        let a = SparseVec::from_dense(&[1.0, 0.0]);
        let b = SparseVec::from_dense(&[1.0, 0.3]);
        assert_eq!(closeness(&model, &[a.clone()], &[a.clone(), b.clone()]).unwrap(), 0.0);
        assert_abs_diff_eq!(closeness(&model, &[b], &[a]).unwrap(), 0.3, epsilon = 1e-15);
        assert!(closeness(&model, &[], &[SparseVec::from_dense(&[1.0, 0.0])]).is_err());
    }

    #[test]
    fn normalizability_product() {
        assert_eq!(closeness_normalizability_bound(0.0, 3.0).unwrap().value, 0.0);
        let q = closeness_normalizability_bound(0.1, 2.0).unwrap();
        assert_abs_diff_eq!(q.value, 0.2, epsilon = 1e-15);
        assert!(!q.caveats.is_empty());
    }

    #[test]
    fn covariance_closed_forms() {
        // uniform two-class conditional on x = (1): diag(p) − ppᵀ = [[1/4, −1/4], [−1/4, 1/4]]
        let model = LogLinear::conjunction(1, 2, 1.0).unwrap();
        let x = SparseVec::from_dense(&[1.0]);
        let eig = feature_covariance_max_eig(&model, &x, &model.zero_params()).unwrap();
        assert_abs_diff_eq!(eig, 0.5, epsilon = 1e-12);
        let eta = ParamVector::from_values(2, 1, vec![800.0, 0.0]).unwrap();
        assert_abs_diff_eq!(feature_covariance_max_eig(&model, &x, &eta).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn power_iteration_matches_dense() {
        let model = LogLinear::conjunction(4, 3, 2.0).unwrap();
        let eta = ParamVector::from_values(3, 4, (0..12).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
        let inputs: Vec<SparseVec> = [[1.0, 0.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]
            .iter()
            .map(|x| SparseVec::from_dense(x))
            .collect();
        let dense = feature_covariance_max_eig_with(&model, &inputs, &eta, EigenMethod::Dense).unwrap();
        let power = feature_covariance_max_eig_with(&model, &inputs, &eta, EigenMethod::Power).unwrap();
        assert_abs_diff_eq!(dense, power, epsilon = 1e-6);
    }

    #[test]
    fn dense_capability_limit() {
        let model = LogLinear::conjunction(60, 2, 100.0).unwrap();
        let x = SparseVec::from_dense(&[1.0; 60]);
        let err = feature_covariance_max_eig_with(&model, &[x.clone()], &model.zero_params(), EigenMethod::Dense);
        assert!(matches!(err, Err(Error::Capability(_))));
        // fair two-class split over 60 active features: 2·(1/4)·60
        let auto = feature_covariance_max_eig(&model, &x, &model.zero_params()).unwrap();
        assert_abs_diff_eq!(auto, 30.0, epsilon = 1e-6);
    }

    #[test]
    fn bound_check_rows() {
        let row = BoundCheck::upper("demo", &(1.0, 2.0), 1.0, 1.0 + 1e-12, 1e-10);
        assert!(row.satisfied);
        assert_eq!(row.inputs_hash.len(), 16);
        assert!(!BoundCheck::lower("demo", &(1.0,), 2.0, 1.0, 0.0).satisfied);
        let mut buf = Vec::new();
        write_bound_checks(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bound_name,inputs_hash,bound_value,observed_value,satisfied\n"));
    }
}
