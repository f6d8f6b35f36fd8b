//! Small worked models used by the geometry reproductions, tests, and CLI.
//!
//! Binary label spaces `Y = {−1, 1}` use index 0 for `−1` and index 1 for `+1`.

use crate::error::Result;
use crate::model::{FeatureMap, FeatureTable, LabelSpace, LogLinear, ParamVector, SparseVec};

/// Index of a `±1` label.
pub fn label_index(y: f64) -> usize {
    usize::from(y > 0.0)
}

/// Value of a `±1` label index.
pub fn label_value(index: usize) -> f64 {
    if index == 0 {
        -1.0
    } else {
        1.0
    }
}

/// `T(x, y) = [x₁·y, 1]` over inputs `[1, x₁]`, `y ∈ {−1, 1}`.
pub fn xy_one_model(inputs: &[Vec<f64>]) -> Result<LogLinear> {
    let table = FeatureTable::from_fn(inputs, 2, |x, y| vec![x[1] * label_value(y), 1.0])?;
    LogLinear::new(FeatureMap::tabulated(table, None)?, LabelSpace::counting(2)?)
}

/// Inputs `±log 2` with `η = (1, log(2/5))`, which normalizes exactly at both.
pub fn example_one() -> (LogLinear, ParamVector, Vec<SparseVec>) {
    let ln2 = 2f64.ln();
    let raw = vec![vec![1.0, ln2], vec![1.0, -ln2]];
    let model = xy_one_model(&raw).expect("static table");
    let eta = ParamVector::from_values(1, 2, vec![1.0, (2.0f64 / 5.0).ln()]).expect("finite");
    let inputs = raw.iter().map(|x| SparseVec::from_dense(x)).collect();
    (model, eta, inputs)
}

/// `X = {(1,0), (0,1), (1,1)}`, `T(x, y) = (x₁y, x₂y, 1)`.
pub fn example_two() -> (LogLinear, Vec<SparseVec>) {
    let raw = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let table = FeatureTable::from_fn(&raw, 2, |x, y| {
        let s = label_value(y);
        vec![x[0] * s, x[1] * s, 1.0]
    })
    .expect("static table");
    let model = LogLinear::new(FeatureMap::tabulated(table, None).expect("static table"), LabelSpace::counting(2).unwrap())
        .expect("label counts agree");
    let inputs = raw.iter().map(|x| SparseVec::from_dense(x)).collect();
    (model, inputs)
}

/// Two classes with shared identity features on `R²`: `η·T(x, y) = η_y·x`.
/// `radius` must cover every input that will be evaluated.
pub fn shared_plane_model(radius: f64) -> Result<LogLinear> {
    LogLinear::new(FeatureMap::shared_identity(2, 2, radius)?, LabelSpace::counting(2)?)
}

/// `η = {(−1, 1), (−1, −2)}` for [`shared_plane_model`].
pub fn planar_params() -> ParamVector {
    ParamVector::from_blocks(vec![vec![-1.0, 1.0], vec![-1.0, -2.0]]).expect("finite")
}

/// `T(x, y) = (x + y, −x·y)`, `y ∈ {−1, 1}`, with `p(x)` uniform on `{1, 2}`.
pub fn two_point_model() -> (LogLinear, Vec<SparseVec>) {
    let raw = vec![vec![1.0], vec![2.0]];
    let table = FeatureTable::from_fn(&raw, 2, |x, y| {
        let s = label_value(y);
        vec![x[0] + s, -x[0] * s]
    })
    .expect("static table");
    let model = LogLinear::new(FeatureMap::tabulated(table, None).expect("static table"), LabelSpace::counting(2).unwrap())
        .expect("label counts agree");
    let inputs = raw.iter().map(|x| SparseVec::from_dense(x)).collect();
    (model, inputs)
}
