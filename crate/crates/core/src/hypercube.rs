//! Exactly enumerable input distributions and reproducible parallel sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::SparseVec;

/// Largest enumerable hypercube dimension.
pub const MAX_ENUM_DIM: usize = 20;

/// Uniform distribution on `{0,1}^d`, enumerated lexicographically with
/// `x₁` as the most significant bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypercubeDist {
    d: usize,
}

impl HypercubeDist {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(arg_err("hypercube dimension must be at least 1"));
        }
        if d > MAX_ENUM_DIM {
            return Err(Error::Capability(format!(
                "d = {d} exceeds the enumeration cap {MAX_ENUM_DIM}; use a sampled distribution"
            )));
        }
        Ok(Self { d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of points, `2^d`.
    pub fn len(&self) -> usize {
        1 << self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The `i`-th point in enumeration order.
    pub fn point(&self, i: usize) -> SparseVec {
        let entries = (0..self.d).filter(|j| (i >> (self.d - 1 - j)) & 1 == 1).map(|j| (j, 1.0)).collect();
        SparseVec::new(self.d, entries).expect("indices in range")
    }

    pub fn points(&self) -> impl Iterator<Item = SparseVec> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

/// A finite input distribution with explicit weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedInputs {
    points: Vec<SparseVec>,
    weights: Vec<f64>,
    /// `(seed, sample size)` when drawn from a hypercube.
    pub sampled_from: Option<(u64, usize)>,
}

impl WeightedInputs {
    /// Normalizes `weights` to sum to 1.
    pub fn new(points: Vec<SparseVec>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(arg_err("need a nonempty point set with one weight per point"));
        }
        let d = points[0].dim();
        if points.iter().any(|p| p.dim() != d) {
            return Err(arg_err("points have mixed dimensions"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(arg_err("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(arg_err("weights sum to zero"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { points, weights, sampled_from: None })
    }

    pub fn uniform(points: Vec<SparseVec>) -> Result<Self> {
        let w = vec![1.0; points.len()];
        Self::new(points, w)
    }

    /// `n` independent uniform draws from `{0,1}^d`, for dimensions beyond enumeration.
    pub fn sampled_hypercube(d: usize, n: usize, seed: u64) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(arg_err("sampled hypercube needs d ≥ 1 and n ≥ 1"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                let entries = (0..d).filter(|_| rng.random::<bool>()).map(|j| (j, 1.0)).collect();
                SparseVec::new(d, entries).expect("indices in range")
            })
            .collect();
        let mut out = Self::uniform(points)?;
        out.sampled_from = Some((seed, n));
        Ok(out)
    }

    pub fn points(&self) -> &[SparseVec] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputDist {
    Hypercube(HypercubeDist),
    Weighted(WeightedInputs),
}

impl From<HypercubeDist> for InputDist {
    fn from(h: HypercubeDist) -> Self {
        Self::Hypercube(h)
    }
}

impl From<WeightedInputs> for InputDist {
    fn from(w: WeightedInputs) -> Self {
        Self::Weighted(w)
    }
}

/// Points per leaf of the reduction tree.
const CHUNK: usize = 1024;

impl InputDist {
    pub fn dim(&self) -> usize {
        match self {
            Self::Hypercube(h) => h.dim(),
            Self::Weighted(w) => w.points[0].dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Hypercube(h) => h.len(),
            Self::Weighted(w) => w.points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `i`-th point and its probability.
    pub fn get(&self, i: usize) -> (SparseVec, f64) {
        match self {
            Self::Hypercube(h) => (h.point(i), 1.0 / h.len() as f64),
            Self::Weighted(w) => (w.points[i].clone(), w.weights[i]),
        }
    }

    /// All points in order.
    pub fn points(&self) -> Vec<SparseVec> {
        (0..self.len()).map(|i| self.get(i).0).collect()
    }

    /// `E[f(X)]` for vector-valued `f` of length `width`.
    ///
    /// Leaves of fixed size are summed sequentially and combined pairwise in a
    /// fixed tree, so the result does not depend on the thread count.
    pub fn expect<F>(&self, width: usize, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&SparseVec, &mut [f64]) -> Result<()> + Sync,
    {
        let n = self.len();
        let leaves: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; width];
                let mut buf = vec![0.0; width];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let (x, p) = self.get(i);
                    buf.iter_mut().for_each(|b| *b = 0.0);
                    f(&x, &mut buf)?;
                    for (a, b) in acc.iter_mut().zip(&buf) {
                        *a += p * b;
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        Ok(tree_sum(leaves))
    }
}

/// Pairwise reduction in a fixed order: `((l0 + l1) + (l2 + l3)) + …`.
pub fn tree_sum(mut level: Vec<Vec<f64>>) -> Vec<f64> {
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        level = next;
    }
    level.pop().unwrap_or_default()
}
