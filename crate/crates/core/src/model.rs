//! Log-linear models over finite label spaces.
//!
//! A model pairs a [`FeatureMap`] (the sufficient statistic `T(x, y)`) with a
//! [`LabelSpace`] (per-label base weights `h(y)·μ({y})`). For natural parameters
//! `η` the conditional is
//!
//! ```text
//! p(y | x; η) = w(y) · exp(η·T(x, y) − A(x, η)),   A(x, η) = log Σ_y w(y) exp(η·T(x, y))
//! ```
//!
//! All log-partitions are computed with the max-shift so scores of magnitude
//! up to ~1e6 stay finite.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{arg_err, config_err, Error, Result};

/// Sparse real vector with an explicit dimension. Indices are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVec {
    pub fn new(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(j, _)| j);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(config_err(format!("duplicate index {} in sparse vector", w[0].0)));
            }
        }
        if let Some(&(j, _)) = entries.last() {
            if j >= dim {
                return Err(config_err(format!("index {j} out of range for dimension {dim}")));
            }
        }
        if let Some(&(j, v)) = entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(config_err(format!("non-finite value {v} at index {j}")));
        }
        Ok(Self { dim, entries })
    }

    /// Builds a sparse vector from dense coordinates, dropping exact zeros.
    pub fn from_dense(values: &[f64]) -> Self {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, v)| (j, *v))
            .collect();
        Self { dim: values.len(), entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn get(&self, j: usize) -> f64 {
        match self.entries.binary_search_by_key(&j, |&(i, _)| i) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0.0,
        }
    }

    /// Dot product with a dense slice of length `dim`.
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(j, v)| v * dense[j]).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(j, v) in &self.entries {
            out[j] = v;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }
}

/// Finite label space with per-label base weights `h(y)·μ({y})`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    log_weights: Vec<f64>,
    log_total: f64,
}

impl LabelSpace {
    /// Counting measure with `h ≡ 1` on `k` labels.
    pub fn counting(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(arg_err("label space needs at least one label"));
        }
        Ok(Self { log_weights: vec![0.0; k], log_total: (k as f64).ln() })
    }

    pub fn with_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(arg_err("label space needs at least one label"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(arg_err(format!("base weights must be positive and finite, got {w}")));
        }
        let log_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let log_total = log_sum_exp(&log_weights);
        Ok(Self { log_weights, log_total })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weight(&self, y: usize) -> f64 {
        self.log_weights[y]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `log μ(Y)`, the log of the summed base weights.
    pub fn log_total_measure(&self) -> f64 {
        self.log_total
    }
}

/// Max-shifted `log Σ exp(v)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `t: X → R^d`, applied identically for every class.
pub type InputTransform = Arc<dyn Fn(&SparseVec) -> Vec<f64> + Send + Sync>;

/// Explicit table of `T(x, y)` for a small finite input set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    input_dim: usize,
    dim: usize,
    inputs: Vec<Vec<f64>>,
    rows: Vec<Vec<Vec<f64>>>,
}

impl FeatureTable {
    /// `entries[i] = (x_i, [T(x_i, 0), …, T(x_i, K−1)])`.
    pub fn new(entries: Vec<(Vec<f64>, Vec<Vec<f64>>)>) -> Result<Self> {
        let Some((x0, t0)) = entries.first() else {
            return Err(arg_err("feature table needs at least one input"));
        };
        let input_dim = x0.len();
        let k = t0.len();
        let dim = t0.first().map_or(0, Vec::len);
        if k == 0 || dim == 0 {
            return Err(arg_err("feature table needs at least one label and one feature"));
        }
        let mut inputs = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len());
        for (x, t) in entries {
            if x.len() != input_dim || t.len() != k || t.iter().any(|row| row.len() != dim) {
                return Err(config_err("ragged feature table"));
            }
            if inputs.contains(&x) {
                return Err(config_err(format!("input {x:?} tabulated twice")));
            }
            inputs.push(x);
            rows.push(t);
        }
        Ok(Self { input_dim, dim, inputs, rows })
    }

    /// Tabulates `f(x, y)` over the given inputs and `k` labels.
    pub fn from_fn(inputs: &[Vec<f64>], k: usize, f: impl Fn(&[f64], usize) -> Vec<f64>) -> Result<Self> {
        Self::new(
            inputs
                .iter()
                .map(|x| (x.clone(), (0..k).map(|y| f(x, y)).collect()))
                .collect(),
        )
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    fn lookup(&self, x: &SparseVec) -> Result<&[Vec<f64>]> {
        if x.dim() != self.input_dim {
            return Err(config_err(format!(
                "input dimension {} does not match table dimension {}",
                x.dim(),
                self.input_dim
            )));
        }
        let dense = x.to_dense();
        self.inputs
            .iter()
            .position(|xi| *xi == dense)
            .map(|i| self.rows[i].as_slice())
            .ok_or_else(|| config_err(format!("input {dense:?} is not in the feature table")))
    }

    fn max_norm(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// The sufficient-statistic map `T(x, y)` together with its declared norm bound `R`.
#[derive(Clone)]
pub enum FeatureMap {
    /// `T(k, x)_{k'j} = 1{k = k'}·x_j`: `K` blocks of `d` parameters.
    ClassConjunction { d: usize, k: usize, radius: f64 },
    /// Class conjunction applied to a transformed input `t(x) ∈ R^d`.
    SharedRepeated { input_dim: usize, d: usize, k: usize, transform: InputTransform, radius: f64 },
    /// Explicit `T(x, y)` for a small finite `X × Y`.
    Tabulated { table: FeatureTable, k: usize, radius: f64 },
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ClassConjunction { d, k, radius } => f
                .debug_struct("ClassConjunction")
                .field("d", d)
                .field("k", k)
                .field("radius", radius)
                .finish(),
            Self::SharedRepeated { input_dim, d, k, radius, .. } => f
                .debug_struct("SharedRepeated")
                .field("input_dim", input_dim)
                .field("d", d)
                .field("k", k)
                .field("radius", radius)
                .finish(),
            Self::Tabulated { table, k, radius } => f
                .debug_struct("Tabulated")
                .field("inputs", &table.inputs.len())
                .field("dim", &table.dim)
                .field("k", k)
                .field("radius", radius)
                .finish(),
        }
    }
}

impl FeatureMap {
    pub fn class_conjunction(d: usize, k: usize, radius: f64) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(arg_err("class conjunction needs d ≥ 1 and K ≥ 1"));
        }
        check_radius(radius)?;
        Ok(Self::ClassConjunction { d, k, radius })
    }

    pub fn shared_repeated(
        input_dim: usize,
        d: usize,
        k: usize,
        transform: InputTransform,
        radius: f64,
    ) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(arg_err("shared features need d ≥ 1 and K ≥ 1"));
        }
        check_radius(radius)?;
        Ok(Self::SharedRepeated { input_dim, d, k, transform, radius })
    }

    /// The identity transform `t(x) = x`, so `η·T(x, y) = η_y·x`.
    pub fn shared_identity(d: usize, k: usize, radius: f64) -> Result<Self> {
        Self::shared_repeated(d, d, k, Arc::new(SparseVec::to_dense), radius)
    }

    /// Tabulated features. `radius` defaults to the largest tabulated norm when `None`.
    pub fn tabulated(table: FeatureTable, radius: Option<f64>) -> Result<Self> {
        let k = table.rows[0].len();
        let max_norm = table.max_norm();
        let radius = radius.unwrap_or(max_norm);
        check_radius(radius)?;
        if max_norm > radius * (1.0 + 1e-12) {
            return Err(config_err(format!("tabulated feature norm {max_norm} exceeds declared R = {radius}")));
        }
        Ok(Self::Tabulated { table, k, radius })
    }

    pub fn num_labels(&self) -> usize {
        match self {
            Self::ClassConjunction { k, .. } | Self::SharedRepeated { k, .. } | Self::Tabulated { k, .. } => *k,
        }
    }

    /// `(blocks, block_len)` of the parameter layout.
    pub fn param_shape(&self) -> (usize, usize) {
        match self {
            Self::ClassConjunction { d, k, .. } | Self::SharedRepeated { d, k, .. } => (*k, *d),
            Self::Tabulated { table, .. } => (1, table.dim),
        }
    }

    pub fn param_len(&self) -> usize {
        let (b, l) = self.param_shape();
        b * l
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::ClassConjunction { d, .. } => *d,
            Self::SharedRepeated { input_dim, .. } => *input_dim,
            Self::Tabulated { table, .. } => table.input_dim,
        }
    }

    /// Declared upper bound `R` on `‖T(x, y)‖₂`.
    pub fn radius(&self) -> f64 {
        match self {
            Self::ClassConjunction { radius, .. }
            | Self::SharedRepeated { radius, .. }
            | Self::Tabulated { radius, .. } => *radius,
        }
    }

    pub fn is_class_conjunction(&self) -> bool {
        matches!(self, Self::ClassConjunction { .. })
    }

    /// Resolves the features of one input, validating dimensions (and `R` in debug builds).
    pub fn at<'a>(&'a self, x: &'a SparseVec) -> Result<InputFeatures<'a>> {
        let resolved = self.resolve(x)?;
        if cfg!(debug_assertions) {
            self.check_radius_of(&resolved)?;
        }
        Ok(resolved)
    }

    fn check_radius_of(&self, f: &InputFeatures<'_>) -> Result<()> {
        let r = self.radius();
        let worst = f.max_feature_norm();
        if worst > r * (1.0 + 1e-12) + 1e-12 {
            return Err(config_err(format!("feature norm {worst} exceeds declared R = {r}")));
        }
        Ok(())
    }

    /// Like [`FeatureMap::at`] without the radius check.
    pub(crate) fn resolve<'a>(&'a self, x: &'a SparseVec) -> Result<InputFeatures<'a>> {
        let resolved = match self {
            Self::ClassConjunction { d, k, .. } => {
                if x.dim() != *d {
                    return Err(config_err(format!("input dimension {} does not match d = {d}", x.dim())));
                }
                InputFeatures::Conjunction { x, d: *d, k: *k }
            }
            Self::SharedRepeated { input_dim, d, k, transform, .. } => {
                if x.dim() != *input_dim {
                    return Err(config_err(format!(
                        "input dimension {} does not match {input_dim}",
                        x.dim()
                    )));
                }
                let t = transform(x);
                if t.len() != *d {
                    return Err(config_err(format!("transform produced {} features, expected {d}", t.len())));
                }
                InputFeatures::Shared { t, k: *k }
            }
            Self::Tabulated { table, .. } => InputFeatures::Table { rows: table.lookup(x)? },
        };
        Ok(resolved)
    }

    /// Dense `T(x, y)`.
    pub fn feature(&self, x: &SparseVec, y: usize) -> Result<Vec<f64>> {
        let f = self.at(x)?;
        let mut out = vec![0.0; self.param_len()];
        f.add_feature(y, 1.0, &mut out);
        Ok(out)
    }

    /// Smallest gap between the best and second-best raw score `η·T(x, y)` over `inputs`.
    pub fn margin(&self, inputs: &[SparseVec], eta: &ParamVector) -> Result<Margin> {
        let k = self.num_labels();
        if k < 2 {
            return Err(arg_err("margin needs at least two labels"));
        }
        self.check_params(eta)?;
        let mut scores = vec![0.0; k];
        let mut gaps = Vec::with_capacity(inputs.len());
        let mut argmax = Vec::with_capacity(inputs.len());
        let mut ties = Vec::new();
        for (i, x) in inputs.iter().enumerate() {
            self.at(x)?.scores(eta.values(), &mut scores);
            let (top, gap) = top_two(&scores);
            if gap == 0.0 {
                ties.push(i);
            }
            gaps.push(gap);
            argmax.push(top);
        }
        let value = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Margin { value: if value.is_finite() { value } else { 0.0 }, gaps, argmax, ties })
    }

    pub(crate) fn check_params(&self, eta: &ParamVector) -> Result<()> {
        if eta.shape() != self.param_shape() {
            return Err(config_err(format!(
                "parameter shape {:?} does not match feature map shape {:?}",
                eta.shape(),
                self.param_shape()
            )));
        }
        Ok(())
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(arg_err(format!("declared R must be positive and finite, got {radius}")));
    }
    Ok(())
}

/// Index of the largest entry (lowest index on ties) and its gap to the runner-up.
fn top_two(scores: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    let second = scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != best)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    (best, scores[best] - second)
}

/// Features of a single resolved input.
pub enum InputFeatures<'a> {
    Conjunction { x: &'a SparseVec, d: usize, k: usize },
    Shared { t: Vec<f64>, k: usize },
    Table { rows: &'a [Vec<f64>] },
}

impl InputFeatures<'_> {
    pub fn num_labels(&self) -> usize {
        match self {
            Self::Conjunction { k, .. } | Self::Shared { k, .. } => *k,
            Self::Table { rows } => rows.len(),
        }
    }

    /// Writes `η·T(x, y)` for every label into `out`.
    pub fn scores(&self, eta: &[f64], out: &mut [f64]) {
        match self {
            Self::Conjunction { x, d, .. } => {
                for (y, s) in out.iter_mut().enumerate() {
                    let block = &eta[y * d..(y + 1) * d];
                    *s = x.dot(block);
                }
            }
            Self::Shared { t, .. } => {
                let d = t.len();
                for (y, s) in out.iter_mut().enumerate() {
                    *s = dot(&eta[y * d..(y + 1) * d], t);
                }
            }
            Self::Table { rows } => {
                for (s, row) in out.iter_mut().zip(rows.iter()) {
                    *s = dot(eta, row);
                }
            }
        }
    }

    /// `acc += coef · T(x, y)`.
    pub fn add_feature(&self, y: usize, coef: f64, acc: &mut [f64]) {
        match self {
            Self::Conjunction { x, d, .. } => {
                let block = &mut acc[y * d..(y + 1) * d];
                for &(j, v) in x.entries() {
                    block[j] += coef * v;
                }
            }
            Self::Shared { t, .. } => {
                let d = t.len();
                for (a, v) in acc[y * d..(y + 1) * d].iter_mut().zip(t) {
                    *a += coef * v;
                }
            }
            Self::Table { rows } => {
                for (a, v) in acc.iter_mut().zip(&rows[y]) {
                    *a += coef * v;
                }
            }
        }
    }

    fn max_feature_norm(&self) -> f64 {
        match self {
            Self::Conjunction { x, .. } => x.entries().iter().fold(0.0f64, |acc, (_, v)| acc.hypot(*v)),
            Self::Shared { t, .. } => t.iter().fold(0.0f64, |acc, v| acc.hypot(*v)),
            Self::Table { rows } => rows
                .iter()
                .map(|r| r.iter().fold(0.0f64, |acc, v| acc.hypot(*v)))
                .fold(0.0, f64::max),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Natural parameters `η`, laid out as `blocks × block_len` (class `k`, coordinate `j`).
/// Serialized as an array of blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct ParamVector {
    blocks: usize,
    block_len: usize,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(blocks: usize, block_len: usize) -> Self {
        Self { blocks, block_len, values: vec![0.0; blocks * block_len] }
    }

    pub fn zeros_for(features: &FeatureMap) -> Self {
        let (b, l) = features.param_shape();
        Self::zeros(b, l)
    }

    pub fn from_values(blocks: usize, block_len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != blocks * block_len {
            return Err(config_err(format!(
                "expected {} parameter values for shape ({blocks}, {block_len}), got {}",
                blocks * block_len,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(arg_err(format!("parameters must be finite, got {v}")));
        }
        Ok(Self { blocks, block_len, values })
    }

    pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Result<Self> {
        let n = blocks.len();
        let len = blocks.first().map_or(0, Vec::len);
        if blocks.iter().any(|b| b.len() != len) {
            return Err(config_err("ragged parameter blocks"));
        }
        Self::from_values(n, len, blocks.concat())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.blocks, self.block_len)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.values[k * self.block_len..(k + 1) * self.block_len]
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.block_len + j]
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            blocks: self.blocks,
            block_len: self.block_len,
            values: self.values.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl From<ParamVector> for Vec<Vec<f64>> {
    fn from(p: ParamVector) -> Self {
        (0..p.blocks).map(|k| p.block(k).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for ParamVector {
    type Error = Error;

    fn try_from(blocks: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_blocks(blocks)
    }
}

/// Log-partition and conditional log-probabilities at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub log_partition: f64,
    pub log_probs: Vec<f64>,
}

impl Conditional {
    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_probs.iter().map(|l| l.exp())
    }
}

/// Normalizer statistics over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    /// Mean squared deviation of `A` about the requested center.
    pub v: f64,
    /// Variance of `A`.
    pub var: f64,
    pub mean_a: f64,
}

/// Score margins over a set of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Margin {
    /// Minimum top-vs-runner-up gap; 0 when any input ties.
    pub value: f64,
    pub gaps: Vec<f64>,
    /// Best label per input, lowest index on ties.
    pub argmax: Vec<usize>,
    /// Inputs whose best score is not unique.
    pub ties: Vec<usize>,
}

/// A log-linear model: feature map plus label space.
#[derive(Debug, Clone)]
pub struct LogLinear {
    features: FeatureMap,
    labels: LabelSpace,
}

impl LogLinear {
    pub fn new(features: FeatureMap, labels: LabelSpace) -> Result<Self> {
        if features.num_labels() != labels.len() {
            return Err(config_err(format!(
                "feature map has {} labels but label space has {}",
                features.num_labels(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    /// Class-conjunction model with counting measure.
    pub fn conjunction(d: usize, k: usize, radius: f64) -> Result<Self> {
        Self::new(FeatureMap::class_conjunction(d, k, radius)?, LabelSpace::counting(k)?)
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros_for(&self.features)
    }

    /// Scores, log-partition and log-probabilities at `x`.
    pub fn conditional(&self, x: &SparseVec, eta: &ParamVector) -> Result<Conditional> {
        self.features.check_params(eta)?;
        let f = self.features.at(x)?;
        let mut shifted = vec![0.0; self.num_labels()];
        self.shifted_scores(&f, eta.values(), &mut shifted)?;
        let log_partition = log_sum_exp(&shifted);
        let log_probs = shifted.iter().map(|s| s - log_partition).collect();
        Ok(Conditional { log_partition, log_probs })
    }

    /// `log w(y) + η·T(x, y)` for every label, rejecting non-finite scores.
    fn shifted_scores(&self, f: &InputFeatures<'_>, eta: &[f64], out: &mut [f64]) -> Result<()> {
        f.scores(eta, out);
        for (y, s) in out.iter_mut().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite { label: y, value: *s });
            }
            *s += self.labels.log_weight(y);
        }
        Ok(())
    }

    pub fn log_partition(&self, x: &SparseVec, eta: &ParamVector) -> Result<f64> {
        Ok(self.conditional(x, eta)?.log_partition)
    }

    pub fn log_prob(&self, x: &SparseVec, y: usize, eta: &ParamVector) -> Result<f64> {
        if y >= self.num_labels() {
            return Err(arg_err(format!("label {y} out of range for K = {}", self.num_labels())));
        }
        Ok(self.conditional(x, eta)?.log_probs[y])
    }

    /// `Σ_i log p(y_i | x_i; η)`.
    pub fn log_likelihood(&self, ds: &Dataset, eta: &ParamVector) -> Result<f64> {
        self.check_dataset(ds)?;
        let mut total = 0.0;
        for r in ds.records() {
            total += self.conditional(&r.x, eta)?.log_probs[r.y];
        }
        Ok(total)
    }

    /// Score of the log-likelihood: `Σ_i [T(x_i, y_i) − E_{p_η(·|x_i)} T(x_i, Y)]`.
    pub fn grad_log_likelihood(&self, ds: &Dataset, eta: &ParamVector) -> Result<Vec<f64>> {
        self.check_dataset(ds)?;
        self.features.check_params(eta)?;
        let mut grad = vec![0.0; eta.len()];
        let mut shifted = vec![0.0; self.num_labels()];
        for r in ds.records() {
            let f = self.features.at(&r.x)?;
            self.shifted_scores(&f, eta.values(), &mut shifted)?;
            let a = log_sum_exp(&shifted);
            f.add_feature(r.y, 1.0, &mut grad);
            for (y, s) in shifted.iter().enumerate() {
                f.add_feature(y, -(s - a).exp(), &mut grad);
            }
        }
        Ok(grad)
    }

    /// `E_{p_η(·|x)} T(x, Y)`.
    pub fn expected_features(&self, x: &SparseVec, eta: &ParamVector) -> Result<Vec<f64>> {
        let c = self.conditional(x, eta)?;
        let f = self.features.at(x)?;
        let mut out = vec![0.0; eta.len()];
        for (y, p) in c.probs().enumerate() {
            f.add_feature(y, p, &mut out);
        }
        Ok(out)
    }

    /// Mean square of `A(x_i, η) − center`, plus the variance and mean of `A`.
    pub fn normalizer_stats(&self, ds: &Dataset, eta: &ParamVector, center: f64) -> Result<NormalizerStats> {
        if !center.is_finite() {
            return Err(arg_err(format!("center must be finite, got {center}")));
        }
        self.check_dataset(ds)?;
        let a: Vec<f64> = ds
            .records()
            .iter()
            .map(|r| self.log_partition(&r.x, eta))
            .collect::<Result<_>>()?;
        let n = a.len() as f64;
        let mean_a = a.iter().sum::<f64>() / n;
        let v = a.iter().map(|ai| (ai - center).powi(2)).sum::<f64>() / n;
        let var = a.iter().map(|ai| (ai - mean_a).powi(2)).sum::<f64>() / n;
        Ok(NormalizerStats { v, var, mean_a })
    }

    /// `(1/n) Σ_i Σ_y p(y|x_i) (log p(y|x_i) + log μ(Y))`.
    pub fn kl_to_uniform(&self, ds: &Dataset, eta: &ParamVector) -> Result<f64> {
        self.check_dataset(ds)?;
        let log_mu = self.labels.log_total_measure();
        let mut total = 0.0;
        for r in ds.records() {
            let c = self.conditional(&r.x, eta)?;
            total += c
                .log_probs
                .iter()
                .map(|&lp| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp + log_mu) })
                .sum::<f64>();
        }
        Ok((total / ds.len() as f64).max(0.0))
    }

    pub fn margin(&self, inputs: &[SparseVec], eta: &ParamVector) -> Result<Margin> {
        self.features.margin(inputs, eta)
    }

    pub(crate) fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.k() != self.num_labels() {
            return Err(config_err(format!(
                "dataset has K = {} but model has {} labels",
                ds.k(),
                self.num_labels()
            )));
        }
        if ds.d() != self.features.input_dim() {
            return Err(config_err(format!(
                "dataset has d = {} but model expects inputs of dimension {}",
                ds.d(),
                self.features.input_dim()
            )));
        }
        if cfg!(debug_assertions) {
            for r in ds.records() {
                self.features.at(&r.x)?;
            }
        }
        Ok(())
    }

    /// Per-sample penalized objective (negated for minimization) and its gradient:
    ///
    /// `f(η) = −(1/n)Σ log p(y_i|x_i) + α(1/n)Σ (A_i − c)² + λ‖η‖²`.
    pub(crate) fn penalized_objective(
        &self,
        ds: &Dataset,
        eta: &[f64],
        penalty: Penalty,
        grad: &mut [f64],
    ) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut shifted = vec![0.0; self.num_labels()];
        let mut weights = vec![0.0; self.num_labels()];
        let mut loss = 0.0;
        let mut pen = 0.0;
        for r in ds.records() {
            let f = self.features.resolve(&r.x)?;
            self.shifted_scores(&f, eta, &mut shifted)?;
            let m = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (w, s) in weights.iter_mut().zip(&shifted) {
                *w = (s - m).exp();
                total += *w;
            }
            let a = m + total.ln();
            let dev = a - penalty.center;
            loss += a - shifted[r.y];
            pen += dev * dev;
            f.add_feature(r.y, -1.0, grad);
            let coef = (1.0 + 2.0 * penalty.alpha * dev) / total;
            for (y, w) in weights.iter().enumerate() {
                f.add_feature(y, coef * w, grad);
            }
        }
        let n = ds.len() as f64;
        for (g, e) in grad.iter_mut().zip(eta) {
            *g = *g / n + 2.0 * penalty.ridge * e;
        }
        Ok(loss / n + penalty.alpha * pen / n + penalty.ridge * dot(eta, eta))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Penalty {
    pub alpha: f64,
    pub center: f64,
    pub ridge: f64,
}
