//! Self-normalized log-linear models: fitting under normalizer constraints,
//! closed-form bounds, exact hypercube analysis, and level-set geometry.

pub mod bounds;
pub mod contour;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod harness;
pub mod hypercube;
pub mod model;
pub mod optim;
pub mod presets;
pub mod variance;

pub use dataset::{Dataset, DatasetHeader, Record};
pub use error::{Error, Result};
pub use hypercube::{HypercubeDist, InputDist, WeightedInputs};
pub use estimation::{fit_constrained, fit_mle, fit_penalized, FitResult, PenaltyPath, TrainConfig};
pub use model::{FeatureMap, LabelSpace, LogLinear, ParamVector, SparseVec};
