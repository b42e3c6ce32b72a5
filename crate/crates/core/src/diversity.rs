//! Gaussian samples around prototypes, the sample matching hinge, and the
//! prototype orthogonality penalty.

use serde::{Deserialize, Serialize};

use crate::error::{DplError, Result};
use crate::math::{self, DenseMatrix};
use crate::model::{ModelState, PrototypeBank};
use crate::rng::SeededRng;

/// Default number of samples drawn per prototype.
pub const DEFAULT_NUM_SAMPLES: usize = 20;
/// Default matching radius.
pub const DEFAULT_RADIUS: f64 = 1.0;

/// `N` draws `s⁽ʲ⁾ = cᵢ + σᵢ ⊙ ε⁽ʲ⁾` for one class.
///
/// The noise rows are kept so the samples can be rebuilt from perturbed
/// parameters, which is what makes them differentiable.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub class_index: usize,
    pub samples: DenseMatrix,
    pub epsilons: DenseMatrix,
}

impl SampleSet {
    /// Build samples from an explicit mean, variance and noise matrix.
    pub fn from_parts(
        class_index: usize,
        mean: &[f64],
        variance: &[f64],
        epsilons: DenseMatrix,
    ) -> Result<Self> {
        let d = mean.len();
        if variance.len() != d || epsilons.cols() != d {
            return Err(DplError::Dimension {
                context: "sample set",
                expected: d,
                found: if variance.len() != d {
                    variance.len()
                } else {
                    epsilons.cols()
                },
            });
        }
        if epsilons.rows() == 0 {
            return Err(DplError::Config(
                "a sample set needs at least one sample".into(),
            ));
        }
        if variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(DplError::Numeric("negative or NaN variance".into()));
        }
        let sigma: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
        let mut samples = DenseMatrix::zeros(epsilons.rows(), d);
        for j in 0..epsilons.rows() {
            for (k, s) in samples.row_mut(j).iter_mut().enumerate() {
                *s = mean[k] + sigma[k] * epsilons.get(j, k);
            }
        }
        Ok(SampleSet {
            class_index,
            samples,
            epsilons,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    /// Index and distance of the sample closest to `z`; ties go to the
    /// lowest index.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, s) in self.samples.row_iter().enumerate() {
            let dist = math::euclidean_distance(z, s).unwrap_or(f64::INFINITY);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        best
    }
}

/// Draw `n` fresh standard-normal noise rows for class `i` and build its
/// sample set from the model's current prototype and variance.
pub fn draw_samples(
    model: &ModelState,
    i: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(DplError::Config(
            "number of samples must be at least 1".into(),
        ));
    }
    let c = model.class_prototype(i)?;
    let var = model.variance_of(i)?;
    let mut eps = DenseMatrix::zeros(n, model.dims.d);
    rng.fill_standard_normal(eps.values_mut());
    SampleSet::from_parts(i, c, &var, eps)
}

pub(crate) fn find_set(sets: &[SampleSet], class: usize) -> Result<&SampleSet> {
    sets.iter()
        .find(|s| s.class_index == class)
        .ok_or_else(|| DplError::Internal(format!("no sample set drawn for class {class}")))
}

/// Squared hinge on the distance from `z` to its nearest class sample.
pub fn matching_term(nearest_distance: f64, radius: f64) -> f64 {
    let h = (nearest_distance - radius).max(0.0);
    h * h
}

/// Batch mean of `(max(0, minⱼ ‖z − s_k⁽ʲ⁾‖ − R))²` with `k` the label of `z`.
pub fn matching_loss<Z: AsRef<[f64]>>(
    batch: &[(Z, usize)],
    sets: &[SampleSet],
    radius: f64,
) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(DplError::Config(format!(
            "matching radius must be positive, got {radius}"
        )));
    }
    if batch.is_empty() {
        return Err(DplError::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for (z, label) in batch {
        let (_, dist) = find_set(sets, *label)?.nearest(z.as_ref());
        total += matching_term(dist, radius);
    }
    Ok(total / batch.len() as f64)
}

/// Mean of `|cᵢ · cⱼ|` over ordered pairs `i ≠ j`.
pub fn orthogonal_loss(prototypes: &PrototypeBank) -> Result<f64> {
    let p = prototypes.len();
    if p < 2 {
        return Err(DplError::Config(format!(
            "orthogonal loss needs at least two prototypes, got {p}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..p {
        for j in (i + 1)..p {
            sum += math::dot(prototypes.get(i), prototypes.get(j)).abs();
        }
    }
    Ok(2.0 * sum / (p * (p - 1)) as f64)
}

/// Scalar loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ortho: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(ce: f64, ortho: f64, matching: f64, alpha: f64) -> Self {
        LossBreakdown {
            ce,
            ortho,
            matching,
            total: crate::objective::total_loss(ce, ortho, matching, alpha),
        }
    }
}
