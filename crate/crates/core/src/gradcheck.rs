//! Finite-difference verification of the analytic gradients.
//!
//! Every loss term is re-evaluated through [`objective::evaluate`] with one
//! parameter nudged at a time; the analytic side comes from
//! [`objective::backward_components`].

use serde::Serialize;

use crate::diversity::{draw_samples, SampleSet};
use crate::error::Result;
use crate::math::finite_diff_grad;
use crate::model::{init_model, ModelDims, ModelState, ParamGroup, DEFAULT_SIGMA2_FLOOR};
use crate::objective::{self, BatchItem, GradientBuffer, LossConfig};
use crate::rng::SeededRng;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Shape of the seeded check problem.
#[derive(Clone, Copy, Debug)]
pub struct CheckShape {
    pub d_in: usize,
    pub d: usize,
    pub num_classes: usize,
    pub batch: usize,
    pub num_samples: usize,
}

impl Default for CheckShape {
    fn default() -> Self {
        CheckShape {
            d_in: 16,
            d: 8,
            num_classes: 5,
            batch: 16,
            num_samples: 4,
        }
    }
}

/// A fully materialized check problem: model, batch, and frozen noise.
pub struct CheckInstance {
    pub model: ModelState,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sets: Vec<SampleSet>,
    pub cfg: LossConfig,
}

impl CheckInstance {
    pub fn seeded(shape: CheckShape, seed: u64, cfg: LossConfig) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let model = init_model(
            ModelDims::new(shape.d_in, shape.d, shape.num_classes),
            DEFAULT_SIGMA2_FLOOR,
            &mut rng,
        )?;
        let mut features = Vec::with_capacity(shape.batch);
        let mut labels = Vec::with_capacity(shape.batch);
        for n in 0..shape.batch {
            let mut r = vec![0.0; shape.d_in];
            rng.fill_standard_normal(&mut r);
            features.push(r);
            labels.push(n % shape.num_classes);
        }
        let mut present: Vec<usize> = labels.clone();
        present.sort_unstable();
        present.dedup();
        let sets = present
            .into_iter()
            .map(|k| draw_samples(&model, k, shape.num_samples, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CheckInstance {
            model,
            features,
            labels,
            sets,
            cfg: LossConfig {
                num_samples: shape.num_samples,
                ..cfg
            },
        })
    }

    pub fn batch(&self) -> Vec<BatchItem<'_>> {
        self.features
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Ce,
    Ortho,
    WeightedMatch,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [
        LossTerm::Ce,
        LossTerm::Ortho,
        LossTerm::WeightedMatch,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Ortho => "ortho",
            LossTerm::WeightedMatch => "alpha*match",
            LossTerm::Total => "total",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub term: LossTerm,
    pub group: &'static str,
    pub params: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `|a − f| / max(1e-8, |a| + |f|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn term_value(inst: &CheckInstance, model: &ModelState, term: LossTerm) -> f64 {
    let batch = inst.batch();
    let Ok(b) = objective::evaluate(&batch, model, &inst.sets, &inst.cfg) else {
        return f64::NAN;
    };
    match term {
        LossTerm::Ce => b.ce,
        LossTerm::Ortho => b.ortho,
        LossTerm::WeightedMatch => inst.cfg.alpha * b.matching,
        LossTerm::Total => b.total,
    }
}

/// Compare analytic and finite-difference gradients of every loss term with
/// respect to every parameter group.
pub fn check_instance(inst: &CheckInstance, h: f64, tolerance: f64) -> Result<Vec<GradCheckEntry>> {
    let batch = inst.batch();
    let parts = objective::backward_components(&batch, &inst.model, &inst.sets, &inst.cfg)?;
    let mut weighted = GradientBuffer::zeros_like(&inst.model);
    weighted.add_scaled(inst.cfg.alpha, &parts.matching);
    let total = parts.total(inst.cfg.alpha);

    let mut entries = Vec::new();
    for term in LossTerm::ALL {
        let analytic = match term {
            LossTerm::Ce => &parts.ce,
            LossTerm::Ortho => &parts.ortho,
            LossTerm::WeightedMatch => &weighted,
            LossTerm::Total => &total,
        };
        for group in ParamGroup::ALL {
            let mut probe = inst.model.clone();
            let x0 = inst.model.param(group).to_vec();
            let numeric = finite_diff_grad(
                |x| {
                    probe.param_mut(group).copy_from_slice(x);
                    term_value(inst, &probe, term)
                },
                &x0,
                h,
            )?;
            let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
            for (a, f) in analytic.group(group).iter().zip(numeric.iter()) {
                max_rel = max_rel.max(relative_error(*a, *f));
                max_abs = max_abs.max((a - f).abs());
            }
            entries.push(GradCheckEntry {
                term,
                group: group.name(),
                params: x0.len(),
                max_rel_error: max_rel,
                max_abs_error: max_abs,
                passed: max_rel <= tolerance,
            });
        }
    }
    Ok(entries)
}

/// The standard seeded check: D_in=16, d=8, five classes, batch 16, N=4.
pub fn run_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let inst = CheckInstance::seeded(CheckShape::default(), seed, LossConfig::default())?;
    Ok(GradCheckReport {
        seed,
        step: GRADCHECK_STEP,
        tolerance: GRADCHECK_TOLERANCE,
        entries: check_instance(&inst, GRADCHECK_STEP, GRADCHECK_TOLERANCE)?,
    })
}
