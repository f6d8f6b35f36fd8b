//! Two-dimensional level sets of the log-partition, in input space and in parameter space.

use serde::{Deserialize, Serialize};

use crate::contour::{marching_squares, sublevel_area, BBox, Contour, Grid};
use crate::error::{arg_err, config_err, Result};
use crate::hypercube::WeightedInputs;
use crate::model::{LogLinear, ParamVector, SparseVec};

pub const DEFAULT_HALF_WIDTH: f64 = 4.0;
pub const DEFAULT_RESOLUTION: usize = 512;

/// Grid settings for the 2-D reproductions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub bbox: BBox,
    pub resolution: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            bbox: BBox::square(DEFAULT_HALF_WIDTH).expect("static box"),
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl GridConfig {
    pub fn grid(&self) -> Result<Grid> {
        BBox::new(self.bbox.x_min, self.bbox.x_max, self.bbox.y_min, self.bbox.y_max)?;
        Grid::new(self.bbox, self.resolution)
    }
}

/// `{x ∈ bbox : A(x, η) = level}` for a model on `R²`.
pub fn levelset_input_space(model: &LogLinear, eta: &ParamVector, grid: Grid, level: f64) -> Result<Contour> {
    if model.features().input_dim() != 2 {
        return Err(config_err(format!(
            "input-space level sets need 2-D inputs, model has {}",
            model.features().input_dim()
        )));
    }
    model.features().check_params(eta)?;
    marching_squares(grid, level, |p| model.log_partition(&SparseVec::from_dense(&p), eta))
}

fn param_from_point(model: &LogLinear, p: [f64; 2]) -> Result<ParamVector> {
    let (blocks, len) = model.features().param_shape();
    if blocks * len != 2 {
        return Err(config_err(format!("parameter contours need 2 parameters, model has {}", blocks * len)));
    }
    ParamVector::from_values(blocks, len, p.to_vec())
}

/// `E[A(X, η)²]` under a weighted input set.
pub fn mean_square_normalizer(model: &LogLinear, inputs: &WeightedInputs, eta: &ParamVector) -> Result<f64> {
    inputs
        .points()
        .iter()
        .zip(inputs.weights())
        .map(|(x, w)| Ok(w * model.log_partition(x, eta)?.powi(2)))
        .sum()
}

/// `{η ∈ bbox : E[A(X, η)²] = δ²}` for a model with two parameters.
pub fn param_feasibility_contour(model: &LogLinear, inputs: &WeightedInputs, grid: Grid, delta: f64) -> Result<Contour> {
    check_delta(delta)?;
    param_from_point(model, [0.0, 0.0])?;
    marching_squares(grid, 0.0, |p| {
        Ok(mean_square_normalizer(model, inputs, &param_from_point(model, p)?)? - delta * delta)
    })
}

/// Area of `{η ∈ bbox : E[A²] ≤ δ²}` by node counting.
pub fn feasible_area(model: &LogLinear, inputs: &WeightedInputs, grid: Grid, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    param_from_point(model, [0.0, 0.0])?;
    let (_, area) = sublevel_area(grid, delta * delta, |p| {
        mean_square_normalizer(model, inputs, &param_from_point(model, p)?)
    })?;
    Ok(area)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(arg_err(format!("δ must be finite and nonnegative, got {delta}")));
    }
    Ok(())
}

/// `max_x |A(x, η)|`; zero certifies exact self-normalization on `points`.
pub fn max_abs_normalizer(model: &LogLinear, points: &[SparseVec], eta: &ParamVector) -> Result<f64> {
    if points.is_empty() {
        return Err(arg_err("need at least one point"));
    }
    points.iter().try_fold(0.0f64, |m, x| Ok(m.max(model.log_partition(x, eta)?.abs())))
}

/// `max_x A(x, η) − min_x A(x, η)`; zero when the normalizer is constant on `points`.
pub fn normalizer_spread(model: &LogLinear, points: &[SparseVec], eta: &ParamVector) -> Result<f64> {
    if points.is_empty() {
        return Err(arg_err("need at least one point"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in points {
        let a = model.log_partition(x, eta)?;
        lo = lo.min(a);
        hi = hi.max(a);
    }
    Ok(hi - lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeatureMap, LabelSpace};
    use crate::presets;
    use approx::assert_abs_diff_eq;

    fn small_grid(res: usize) -> Grid {
        Grid::new(BBox::square(4.0).unwrap(), res).unwrap()
    }

    #[test]
    fn planar_vertices_normalize() {
        let grid = small_grid(128);
        let model = presets::shared_plane_model(grid.bbox.corner_norm()).unwrap();
        let eta = presets::planar_params();
        let c = levelset_input_space(&model, &eta, grid, 0.0).unwrap();
        assert!(c.num_vertices() > 10);
        for v in c.vertices() {
            let x = SparseVec::from_dense(&v.point);
            assert!(model.log_partition(&x, &eta).unwrap().abs() <= 1e-2);
        }
    }

    #[test]
    fn zero_params_are_degenerate() {
        let grid = small_grid(32);
        let model = presets::shared_plane_model(grid.bbox.corner_norm()).unwrap();
        let eta = model.zero_params();
        assert!(levelset_input_space(&model, &eta, grid, 2f64.ln()).unwrap().degenerate);
        let c = levelset_input_space(&model, &eta, grid, 0.0).unwrap();
        assert!(c.polylines.is_empty());
    }

    #[test]
    fn single_class_gives_a_line() {
        let grid = small_grid(32);
        let fm = FeatureMap::shared_identity(2, 1, grid.bbox.corner_norm()).unwrap();
        let model = LogLinear::new(fm, LabelSpace::counting(1).unwrap()).unwrap();
        let eta = ParamVector::from_blocks(vec![vec![0.7, -1.3]]).unwrap();
        let c = levelset_input_space(&model, &eta, grid, 0.5).unwrap();
        assert_eq!(c.polylines.len(), 1);
        for v in c.vertices() {
            assert_abs_diff_eq!(0.7 * v.point[0] - 1.3 * v.point[1], 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn two_point_origin_value() {
        let (model, pts) = presets::two_point_model();
        let inputs = WeightedInputs::uniform(pts).unwrap();
        let v = mean_square_normalizer(&model, &inputs, &model.zero_params()).unwrap();
        assert_abs_diff_eq!(v, 2f64.ln().powi(2), epsilon = 1e-14);
    }

    #[test]
    fn examples_normalize() {
        let (model, eta, pts) = presets::example_one();
        assert!(max_abs_normalizer(&model, &pts, &eta).unwrap() <= 1e-12);
        let (model, pts) = presets::example_two();
        let zero = model.zero_params();
        assert_abs_diff_eq!(max_abs_normalizer(&model, &pts, &zero).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(normalizer_spread(&model, &pts, &zero).unwrap(), 0.0);
    }

    #[test]
    fn example_two_spread() {
        use rand::{Rng, SeedableRng};
        let (model, pts) = presets::example_two();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let dir: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            let r = rng.random_range(0.1..5.0);
            let eta = ParamVector::from_values(1, 3, dir.iter().map(|v| v * r / n).collect()).unwrap();
            assert!(normalizer_spread(&model, &pts, &eta).unwrap() > 0.0);
        }
        // weight only on the constant feature shifts A uniformly
        let eta = ParamVector::from_values(1, 3, vec![0.0, 0.0, 1.5]).unwrap();
        assert_abs_diff_eq!(normalizer_spread(&model, &pts, &eta).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(max_abs_normalizer(&model, &pts, &eta).unwrap(), 1.5 + 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn wrong_shapes_rejected() {
        let (model, pts) = presets::example_two();
        let inputs = WeightedInputs::uniform(pts).unwrap();
        assert!(param_feasibility_contour(&model, &inputs, small_grid(16), 0.5).is_err());
        let (m1, eta, _) = presets::example_one();
        assert!(levelset_input_space(&m1, &eta, small_grid(16), 0.0).is_err());
    }
}
