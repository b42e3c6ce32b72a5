//! Labeled feature datasets: synthetic generation, splitting, and file I/O.

mod binary;
mod csv;

pub use binary::{load_binary, save_binary, BINARY_MAGIC, BINARY_VERSION};
pub use csv::{load_csv, load_csv_with_classes, save_csv};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DplError, Result};
use crate::math::DenseVector;
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInstance {
    pub id: u64,
    /// Pseudo-scene id used by grouped top-K recall.
    pub group: u32,
    pub label: usize,
    pub feature: DenseVector,
    /// Generator cluster this instance came from. Never read by the model;
    /// not persisted by either file format.
    pub fine: Option<usize>,
}

impl LabeledInstance {
    /// Equality on the persisted fields only.
    pub fn same_record(&self, other: &LabeledInstance) -> bool {
        self.id == other.id
            && self.group == other.group
            && self.label == other.label
            && self.feature == other.feature
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    instances: Vec<LabeledInstance>,
    num_classes: usize,
    feature_dim: usize,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(instances: Vec<LabeledInstance>, num_classes: usize) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| DplError::Config("dataset has no instances".into()))?;
        let feature_dim = first.feature.len();
        if feature_dim == 0 {
            return Err(DplError::Config(
                "feature dimension must be at least 1".into(),
            ));
        }
        for (row, inst) in instances.iter().enumerate() {
            if inst.feature.len() != feature_dim {
                return Err(DplError::Dimension {
                    context: "instance feature",
                    expected: feature_dim,
                    found: inst.feature.len(),
                });
            }
            if inst.label >= num_classes {
                return Err(DplError::format_at(
                    row,
                    format!("label {} not below class count {num_classes}", inst.label),
                ));
            }
        }
        Ok(Dataset {
            instances,
            num_classes,
            feature_dim,
            class_names: None,
        })
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Same records with persisted fields only (provenance dropped).
    pub fn same_records(&self, other: &Dataset) -> bool {
        self.num_classes == other.num_classes
            && self.len() == other.len()
            && self
                .instances
                .iter()
                .zip(&other.instances)
                .all(|(a, b)| a.same_record(b))
    }
}

/// Parameters of the synthetic long-tailed generator.
///
/// Several fine clusters may share one coarse label; that is how one class
/// ends up covering distinct regions of feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub fine_means: Vec<Vec<f64>>,
    pub fine_stddev: Vec<f64>,
    pub fine_counts: Vec<usize>,
    pub fine_to_coarse: Vec<usize>,
    pub group_size: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

/// Input dimension of the desk-scale preset.
pub const DESK_FEATURE_DIM: usize = 64;
/// Fine cluster sizes of the desk-scale preset.
pub const DESK_FINE_COUNTS: [usize; 6] = [1500, 1500, 1500, 90, 60, 30];
/// Fine → coarse labels of the desk-scale preset.
pub const DESK_FINE_TO_COARSE: [usize; 6] = [0, 0, 0, 1, 2, 3];

const DESK_LAYOUT_SEED: u64 = 0x5EED_DE5C;

impl GeneratorSpec {
    /// Desk-scale preset: three head clusters sharing label 0, one tail
    /// cluster for each of labels 1..=3.
    ///
    /// The cluster centres are a fixed layout; `seed` only drives the noise.
    pub fn desk(seed: u64) -> Self {
        let dim = DESK_FEATURE_DIM;
        let mut layout = SeededRng::new(DESK_LAYOUT_SEED);
        let mut means = Vec::with_capacity(6);
        for _ in 0..6 {
            let mut m = vec![0.0; dim];
            layout.fill_standard_normal(&mut m);
            let n = crate::math::norm(&m);
            means.push(
                m.iter()
                    .map(|x| DESK_MEAN_RADIUS * x / n)
                    .collect::<Vec<_>>(),
            );
        }
        // Each tail cluster leans halfway toward one head cluster so the
        // classes overlap and the head dominates the shared region.
        for k in 3..6 {
            let (head, tail) = means.split_at_mut(3);
            for (t, h) in tail[k - 3].iter_mut().zip(&head[k - 3]) {
                *t = (1.0 - DESK_TAIL_PULL) * *t + DESK_TAIL_PULL * h;
            }
        }
        GeneratorSpec {
            fine_means: means,
            fine_stddev: vec![DESK_STDDEV; 6],
            fine_counts: DESK_FINE_COUNTS.to_vec(),
            fine_to_coarse: DESK_FINE_TO_COARSE.to_vec(),
            group_size: 16,
            seed,
            class_names: Some(
                ["head", "tail-a", "tail-b", "tail-c"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fine_to_coarse.iter().max().map_or(0, |m| m + 1)
    }

    pub fn feature_dim(&self) -> usize {
        self.fine_means.first().map_or(0, Vec::len)
    }

    /// Read a spec from JSON and validate it.
    pub fn load(path: &Path) -> Result<Self> {
        let spec: GeneratorSpec = serde_json::from_slice(&crate::io_util::read_file(path)?)
            .map_err(|e| DplError::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.fine_means.len();
        if k == 0 {
            return Err(DplError::Config(
                "generator needs at least one fine cluster".into(),
            ));
        }
        if self.fine_stddev.len() != k
            || self.fine_counts.len() != k
            || self.fine_to_coarse.len() != k
        {
            return Err(DplError::Config(format!(
                "generator lists disagree: {k} means, {} stddevs, {} counts, {} labels",
                self.fine_stddev.len(),
                self.fine_counts.len(),
                self.fine_to_coarse.len()
            )));
        }
        let dim = self.feature_dim();
        if dim == 0 {
            return Err(DplError::Config("cluster means must be non-empty".into()));
        }
        if let Some(bad) = self.fine_means.iter().position(|m| m.len() != dim) {
            return Err(DplError::Config(format!(
                "cluster {bad} mean has dimension {}, expected {dim}",
                self.fine_means[bad].len()
            )));
        }
        if self.fine_means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DplError::Config("cluster means must be finite".into()));
        }
        if self
            .fine_stddev
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(DplError::Config(
                "cluster stddevs must be finite and non-negative".into(),
            ));
        }
        if self.fine_counts.contains(&0) {
            return Err(DplError::Config(
                "every cluster count must be at least 1".into(),
            ));
        }
        let classes = self.num_classes();
        let mut covered = vec![false; classes];
        for &c in &self.fine_to_coarse {
            covered[c] = true;
        }
        if let Some(missing) = covered.iter().position(|c| !c) {
            return Err(DplError::Config(format!(
                "coarse label {missing} has no fine cluster mapped to it"
            )));
        }
        if self.group_size == 0 {
            return Err(DplError::Config("group size must be at least 1".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != classes {
                return Err(DplError::Config(format!(
                    "{} class names for {classes} classes",
                    names.len()
                )));
            }
        }
        Ok(())
    }
}

// Desk layout geometry.
// Features stay near unit norm; much larger inputs make the default
// learning rate unstable.
const DESK_MEAN_RADIUS: f64 = 1.0;
const DESK_STDDEV: f64 = 0.15;
const DESK_TAIL_PULL: f64 = 0.5;

/// Draw a dataset from `spec`.
///
/// Instances are emitted cluster by cluster, coordinates drawn in order from
/// one stream seeded with `spec.seed`. Groups are dealt round-robin over
/// `ceil(total / group_size)` groups so each pseudo-scene mixes clusters.
pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.feature_dim();
    let total: usize = spec.fine_counts.iter().sum();
    let num_groups = total.div_ceil(spec.group_size);
    let mut rng = SeededRng::new(spec.seed);
    let mut instances = Vec::with_capacity(total);
    for (k, mean) in spec.fine_means.iter().enumerate() {
        let sd = spec.fine_stddev[k];
        for _ in 0..spec.fine_counts[k] {
            let id = instances.len();
            let mut feature = vec![0.0; dim];
            for (f, m) in feature.iter_mut().zip(mean) {
                *f = m + sd * rng.standard_normal();
            }
            instances.push(LabeledInstance {
                id: id as u64,
                group: (id % num_groups) as u32,
                label: spec.fine_to_coarse[k],
                feature: feature.into(),
                fine: Some(k),
            });
        }
    }
    let mut ds = Dataset::new(instances, spec.num_classes())?;
    ds.class_names = spec.class_names.clone();
    Ok(ds)
}

/// Seeded shuffle, then the first `round(train_frac · n)` instances train.
pub fn split(dataset: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DplError::Config(format!(
            "train fraction must lie strictly between 0 and 1, got {train_frac}"
        )));
    }
    let n = dataset.len();
    let n_train = (train_frac * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DplError::Config(format!(
            "train fraction {train_frac} leaves an empty side for {n} instances"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let pick = |idx: &[usize]| -> Result<Dataset> {
        let inst = idx.iter().map(|&i| dataset.instances[i].clone()).collect();
        let mut d = Dataset::new(inst, dataset.num_classes)?;
        d.class_names = dataset.class_names.clone();
        Ok(d)
    };
    Ok((pick(&order[..n_train])?, pick(&order[n_train..])?))
}

/// Load by extension: `.csv` as text, anything else as the binary format.
pub fn load_any(path: &Path) -> Result<Dataset> {
    if is_csv(path) {
        load_csv(path)
    } else {
        load_binary(path)
    }
}

pub fn save_any(dataset: &Dataset, path: &Path) -> Result<()> {
    if is_csv(path) {
        save_csv(dataset, path)
    } else {
        save_binary(dataset, path)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}
