//! Class probabilities from a projected feature.
//!
//! Biased scores are `−a‖z − cⱼ‖ + b`. Unbiased scores divide each offset
//! `z − cⱼ` elementwise by `σⱼ = √σⱼ²` before taking the norm, then rescale
//! the temperature to `a' = a · maxⱼ‖z − cⱼ‖ / maxⱼ‖(z − cⱼ) ⊘ σⱼ‖` so the
//! normalized distances live on the raw-distance scale.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diversity::draw_samples;
use crate::error::{DplError, Result};
use crate::io_util::{fmt_f64, write_atomic};
use crate::math::{self, DenseVector};
use crate::model::ModelState;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Biased,
    Unbiased,
}

impl std::str::FromStr for InferenceMode {
    type Err = DplError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biased" => Ok(InferenceMode::Biased),
            "unbiased" => Ok(InferenceMode::Unbiased),
            other => Err(DplError::Config(format!(
                "unknown inference mode `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            InferenceMode::Biased => "biased",
            InferenceMode::Unbiased => "unbiased",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub raw_distances: DenseVector,
    /// Equal to `raw_distances` in biased mode.
    pub normalized_distances: DenseVector,
    pub a_prime: f64,
    pub logits: DenseVector,
    pub probabilities: DenseVector,
}

impl InferenceTrace {
    pub fn predicted(&self) -> usize {
        predict(self)
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.predicted()]
    }
}

/// Argmax of the probabilities; ties resolve to the lowest class index.
pub fn predict(trace: &InferenceTrace) -> usize {
    argmax(&trace.probabilities)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn finish(
    raw: DenseVector,
    normalized: DenseVector,
    a_prime: f64,
    b: f64,
) -> Result<InferenceTrace> {
    let logits: DenseVector = normalized
        .iter()
        .map(|n| -a_prime * n + b)
        .collect::<Vec<_>>()
        .into();
    let probabilities = math::softmax(&logits)?;
    Ok(InferenceTrace {
        raw_distances: raw,
        normalized_distances: normalized,
        a_prime,
        logits,
        probabilities,
    })
}

pub fn biased_probabilities(z: &[f64], model: &ModelState) -> Result<InferenceTrace> {
    let raw = model.distances(z)?;
    finish(raw.clone(), raw, model.scales.a, model.scales.b)
}

/// Unbiased probabilities using the model's own class variances.
pub fn unbiased_probabilities(z: &[f64], model: &ModelState) -> Result<InferenceTrace> {
    let variances = model.class_variances()?;
    unbiased_with_variances(z, model, &variances)
}

/// Unbiased probabilities with the per-class variances `σⱼ²` supplied by the
/// caller. Evaluation code computes them once per model; tests use this to
/// pin `σ²` to chosen values.
pub fn unbiased_with_variances(
    z: &[f64],
    model: &ModelState,
    variances: &[DenseVector],
) -> Result<InferenceTrace> {
    let raw = model.distances(z)?;
    if variances.len() != raw.len() {
        return Err(DplError::Dimension {
            context: "class variance table",
            expected: raw.len(),
            found: variances.len(),
        });
    }
    let mut normalized = Vec::with_capacity(raw.len());
    for (j, var) in variances.iter().enumerate() {
        if var.len() != z.len() {
            return Err(DplError::Dimension {
                context: "class variance",
                expected: z.len(),
                found: var.len(),
            });
        }
        let c = model.prototypes.get(j);
        let mut sq = 0.0;
        for k in 0..z.len() {
            let scaled = (z[k] - c[k]) / var[k].sqrt();
            sq += scaled * scaled;
        }
        normalized.push(sq.sqrt());
    }
    let max_raw = raw.iter().copied().fold(0.0, f64::max);
    let max_norm = normalized.iter().copied().fold(0.0, f64::max);
    if max_raw == 0.0 || max_norm == 0.0 {
        return Err(DplError::Degenerate(
            "query coincides with every prototype; a' is undefined".into(),
        ));
    }
    if !max_norm.is_finite() {
        return Err(DplError::Numeric(
            "normalized distance is not finite".into(),
        ));
    }
    let a_prime = model.scales.a * max_raw / max_norm;
    finish(raw, normalized.into(), a_prime, model.scales.b)
}

/// Traces for every instance of `dataset` in the given mode.
pub fn infer_dataset(
    model: &ModelState,
    dataset: &Dataset,
    mode: InferenceMode,
) -> Result<Vec<InferenceTrace>> {
    if dataset.feature_dim() != model.dims.d_in {
        return Err(DplError::Dimension {
            context: "dataset features vs checkpoint input",
            expected: model.dims.d_in,
            found: dataset.feature_dim(),
        });
    }
    if dataset.num_classes() > model.dims.num_classes {
        return Err(DplError::Dimension {
            context: "dataset classes vs checkpoint classes",
            expected: model.dims.num_classes,
            found: dataset.num_classes(),
        });
    }
    let variances = match mode {
        InferenceMode::Biased => None,
        InferenceMode::Unbiased => Some(model.class_variances()?),
    };
    dataset
        .instances()
        .iter()
        .map(|inst| {
            let z = model.project(&inst.feature)?;
            match &variances {
                None => biased_probabilities(&z, model),
                Some(v) => unbiased_with_variances(&z, model, v),
            }
        })
        .collect()
}

/// CSV of prototypes (with σ), projected features (with both predictions)
/// and, when `samples_per_class > 0`, Gaussian samples around each
/// prototype drawn from `seed`.
///
/// Columns: `kind,class,label,pred_biased,pred_unbiased,v0..v{d-1},s0..s{d-1}`.
pub fn export_embeddings_string(
    model: &ModelState,
    dataset: &Dataset,
    samples_per_class: usize,
    seed: u64,
) -> Result<String> {
    let d = model.dims.d;
    let biased = infer_dataset(model, dataset, InferenceMode::Biased)?;
    let unbiased = infer_dataset(model, dataset, InferenceMode::Unbiased)?;

    let mut out = String::from("kind,class,label,pred_biased,pred_unbiased");
    for k in 0..d {
        let _ = write!(out, ",v{k}");
    }
    for k in 0..d {
        let _ = write!(out, ",s{k}");
    }
    out.push('\n');

    let push_values = |out: &mut String, v: &[f64]| {
        for x in v {
            out.push(',');
            out.push_str(&fmt_f64(*x));
        }
    };
    let empty_sigma = ",".repeat(d);

    for i in 0..model.dims.num_classes {
        let _ = write!(out, "prototype,{i},,,");
        push_values(&mut out, model.prototypes.get(i));
        let sigma: Vec<f64> = model.variance_of(i)?.iter().map(|v| v.sqrt()).collect();
        push_values(&mut out, &sigma);
        out.push('\n');
    }
    for ((inst, b), u) in dataset.instances().iter().zip(&biased).zip(&unbiased) {
        let z = model.project(&inst.feature)?;
        let _ = write!(out, "feature,,{},{},{}", inst.label, predict(b), predict(u));
        push_values(&mut out, &z);
        out.push_str(&empty_sigma);
        out.push('\n');
    }
    if samples_per_class > 0 {
        let mut rng = SeededRng::new(seed);
        for i in 0..model.dims.num_classes {
            let set = draw_samples(model, i, samples_per_class, &mut rng)?;
            for s in set.samples.row_iter() {
                let _ = write!(out, "sample,{i},,,");
                push_values(&mut out, s);
                out.push_str(&empty_sigma);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn export_embeddings(
    model: &ModelState,
    dataset: &Dataset,
    path: &Path,
    samples_per_class: usize,
    seed: u64,
) -> Result<()> {
    let text = export_embeddings_string(model, dataset, samples_per_class, seed)?;
    write_atomic(path, text.as_bytes())
}
