//! Prototype-based long-tailed classifier head with semantic-diversity
//! learning.
//!
//! Raw relation features are projected into a space of unit-norm class
//! prototypes and classified by a softmax over negative distances. During
//! training each prototype also learns a per-coordinate variance through a
//! small network: Gaussian samples drawn around the prototype must reach
//! every feature of that class (a squared hinge at radius `R`), and an
//! orthogonality penalty keeps prototypes apart. At inference the learned
//! variances normalize the distances, which counteracts the pull of
//! frequent classes.
//!
//! Module map:
//!
//! * [`math`], [`rng`]: dense vectors, softmax, finite differences, the
//!   seeded xoshiro256++ stream.
//! * [`data`]: synthetic long-tailed generator, CSV and binary formats.
//! * [`model`]: parameters and forward passes.
//! * [`diversity`]: Gaussian samples, matching loss, orthogonal loss.
//! * [`objective`]: cross-entropy, composite loss, analytic gradients.
//! * [`trainer`]: SGD loop and checkpoints.
//! * [`inference`]: biased and variance-normalized prediction.
//! * [`metrics`]: recall metrics and mode comparison.
//! * [`gradcheck`], [`verify`]: built-in verification suites.

pub mod data;
pub mod diversity;
pub mod error;
pub mod gradcheck;
pub mod inference;
mod io_util;
pub mod math;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use data::{generate_synthetic, split, Dataset, GeneratorSpec, LabeledInstance};
pub use diversity::{LossBreakdown, SampleSet};
pub use error::{DplError, Result};
pub use inference::{InferenceMode, InferenceTrace};
pub use io_util::to_exact_json;
pub use math::{DenseMatrix, DenseVector};
pub use metrics::{ConfusionMatrix, MetricsReport, ModeComparison};
pub use model::{ModelDims, ModelState, ParamGroup};
pub use objective::{GradientBuffer, LossConfig};
pub use rng::SeededRng;
pub use trainer::{RunConfig, TrainHistory};
