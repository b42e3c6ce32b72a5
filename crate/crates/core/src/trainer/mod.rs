//! SGD training loop.
//!
//! Each step samples a batch uniformly with replacement, draws fresh Gaussian
//! samples for every class present in it, takes one SGD step and projects the
//! prototypes back onto the unit sphere. One RNG seeded from the config drives
//! initialization, batching and sampling, so a run is a pure function of
//! `(RunConfig, Dataset)`.

mod checkpoint;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_expecting, parse_checkpoint, save_checkpoint,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diversity::{draw_samples, LossBreakdown, DEFAULT_NUM_SAMPLES, DEFAULT_RADIUS};
use crate::error::{DplError, Result};
use crate::io_util::read_file;
use crate::model::{
    init_model, ModelDims, ModelState, ParamGroup, DEFAULT_EMBED_DIM, DEFAULT_SIGMA2_FLOOR,
};
use crate::objective::{self, BatchItem, GradientBuffer, LossConfig, DEFAULT_ALPHA};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_in: usize,
    pub d: usize,
    pub num_classes: usize,
    pub alpha: f64,
    pub num_samples: usize,
    pub radius: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub sigma2_floor: f64,
    pub detach_prototype_in_sampling: bool,
    pub log_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_in: crate::data::DESK_FEATURE_DIM,
            d: DEFAULT_EMBED_DIM,
            num_classes: 4,
            alpha: DEFAULT_ALPHA,
            num_samples: DEFAULT_NUM_SAMPLES,
            radius: DEFAULT_RADIUS,
            lr: 0.01,
            momentum: 0.0,
            batch_size: 3,
            steps: 60_000,
            seed: 0,
            sigma2_floor: DEFAULT_SIGMA2_FLOOR,
            detach_prototype_in_sampling: false,
            log_interval: 100,
        }
    }
}

impl RunConfig {
    /// Small preset for the desk-scale generator: d = 16, 5000 steps.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            d_in: crate::data::DESK_FEATURE_DIM,
            d: 16,
            num_classes: 4,
            steps: 5000,
            seed,
            ..RunConfig::default()
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.d_in, self.d, self.num_classes)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            radius: self.radius,
            detach_prototype_in_sampling: self.detach_prototype_in_sampling,
            num_samples: self.num_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        let bad = |m: &str| Err(DplError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if self.num_samples == 0 {
            return bad("num_samples must be at least 1");
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return bad("momentum must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.sigma2_floor > 0.0 && self.sigma2_floor.is_finite()) {
            return bad("sigma2_floor must be positive");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(&read_file(path)?)
            .map_err(|e| DplError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// SGD with optional heavy-ball momentum:
/// `v ← μ v + g`, `θ ← θ − lr v`, then prototype renormalization.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<GradientBuffer>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: None,
        }
    }

    /// Apply one update. The model is left untouched if any gradient entry is
    /// non-finite.
    pub fn step(&mut self, model: &mut ModelState, grads: &GradientBuffer) -> Result<()> {
        if let Some(group) = grads.first_non_finite() {
            return Err(DplError::NonFiniteGradient {
                step: model.step,
                group: group.name(),
                max_abs: grads.max_abs(group),
            });
        }
        let velocity = match &mut self.velocity {
            Some(v) => {
                for g in ParamGroup::ALL {
                    for (vi, gi) in v.group_mut(g).iter_mut().zip(grads.group(g)) {
                        *vi = self.momentum * *vi + gi;
                    }
                }
                v
            }
            slot @ None => slot.insert(grads.clone()),
        };
        let mut next = model.clone();
        for g in ParamGroup::ALL {
            for (p, v) in next.param_mut(g).iter_mut().zip(velocity.group(g)) {
                *p -= self.lr * v;
            }
        }
        next.renormalize_prototypes()?;
        next.step += 1;
        *model = next;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Zero-based index of the step whose loss this is.
    pub step: u64,
    pub loss: LossBreakdown,
    /// `maxᵢ |‖cᵢ‖ − 1|` after the step's update.
    pub prototype_norm_deviation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

/// A stopped run. `last_good` is the model before the failing step, or `None`
/// when setup failed before a model existed.
#[derive(Debug, thiserror::Error)]
#[error("training aborted: {error}")]
pub struct TrainAbort {
    pub error: DplError,
    pub last_good: Option<Box<ModelState>>,
    pub history: TrainHistory,
}

impl From<TrainAbort> for DplError {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

pub struct Trainer<'a> {
    config: RunConfig,
    loss_cfg: LossConfig,
    dataset: &'a Dataset,
    model: ModelState,
    optimizer: Sgd,
    rng: SeededRng,
    history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(DplError::Config("training set is empty".into()));
        }
        if dataset.num_classes() > config.num_classes {
            return Err(DplError::Config(format!(
                "dataset has {} classes but the model is configured for {}",
                dataset.num_classes(),
                config.num_classes
            )));
        }
        if dataset.feature_dim() != config.d_in {
            return Err(DplError::Dimension {
                context: "training features",
                expected: config.d_in,
                found: dataset.feature_dim(),
            });
        }
        let mut rng = SeededRng::new(config.seed);
        let model = init_model(config.dims(), config.sigma2_floor, &mut rng)?;
        Ok(Trainer {
            loss_cfg: config.loss_config(),
            optimizer: Sgd::new(config.lr, config.momentum),
            config,
            dataset,
            model,
            rng,
            history: TrainHistory::default(),
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    /// Run one optimization step and return its loss (before the update).
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let n = self.dataset.len();
        let instances = self.dataset.instances();
        let picks: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.below(n))
            .collect();
        let batch: Vec<BatchItem<'_>> = picks
            .iter()
            .map(|&i| (instances[i].feature.as_slice(), instances[i].label))
            .collect();

        let mut present: Vec<usize> = batch.iter().map(|&(_, y)| y).collect();
        present.sort_unstable();
        present.dedup();
        let sets = present
            .into_iter()
            .map(|k| draw_samples(&self.model, k, self.config.num_samples, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;

        let (loss, grads) = objective::backward(&batch, &self.model, &sets, &self.loss_cfg)?;
        if !loss.total.is_finite() {
            return Err(DplError::Numeric(format!(
                "loss became non-finite at step {} ({loss:?})",
                self.model.step
            )));
        }
        let index = self.model.step;
        self.optimizer.step(&mut self.model, &grads)?;
        if index % self.config.log_interval == 0 || index + 1 == self.config.steps {
            self.history.records.push(HistoryRecord {
                step: index,
                loss,
                prototype_norm_deviation: self.model.prototypes.max_norm_deviation(),
            });
        }
        Ok(loss)
    }

    /// Run the remaining configured steps.
    pub fn run(mut self) -> std::result::Result<(ModelState, TrainHistory), TrainAbort> {
        while self.model.step < self.config.steps {
            if let Err(error) = self.step() {
                return Err(TrainAbort {
                    error,
                    last_good: Some(Box::new(self.model)),
                    history: self.history,
                });
            }
        }
        Ok((self.model, self.history))
    }
}

/// Train a fresh model on `dataset`.
pub fn train(
    config: &RunConfig,
    dataset: &Dataset,
) -> std::result::Result<(ModelState, TrainHistory), TrainAbort> {
    let trainer = Trainer::new(config.clone(), dataset).map_err(|error| TrainAbort {
        error,
        last_good: None,
        history: TrainHistory::default(),
    })?;
    trainer.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorSpec};

    fn tiny_data() -> Dataset {
        let mut spec = GeneratorSpec::desk(1);
        spec.fine_counts = vec![30, 30, 30, 10, 8, 6];
        generate_synthetic(&spec).unwrap()
    }

    fn tiny_config(steps: u64) -> RunConfig {
        RunConfig {
            steps,
            log_interval: 1,
            ..RunConfig::desk(3)
        }
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.alpha, 10.0);
        assert_eq!(c.num_samples, 20);
        assert_eq!(c.radius, 1.0);
        assert_eq!(c.batch_size, 3);
        assert_eq!(c.steps, 60_000);
        assert_eq!(c.d, 128);
        assert_eq!(c.momentum, 0.0);
        assert!(!c.detach_prototype_in_sampling);
        let desk = RunConfig::desk(1);
        assert_eq!((desk.steps, desk.d, desk.d_in), (5000, 16, 64));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut rng = SeededRng::new(1);
        let mut m = init_model(ModelDims::new(2, 2, 2), 1e-3, &mut rng).unwrap();
        m.scales.a = 1.0;
        let mut g = GradientBuffer::zeros_like(&m);
        g.a = 0.5;
        let before = m.clone();
        Sgd::new(0.01, 0.0).step(&mut m, &g).unwrap();
        assert!((m.scales.a - 0.995).abs() < 1e-15);
        assert_eq!(m.step, 1);
        assert_eq!(m.projector, before.projector);

        let mut frozen = before.clone();
        let mut big = GradientBuffer::zeros_like(&frozen);
        big.projector_weight.values_mut().fill(3.0);
        big.prototypes.values_mut().fill(-2.0);
        Sgd::new(0.0, 0.0).step(&mut frozen, &big).unwrap();
        for grp in ParamGroup::ALL {
            for (x, y) in frozen.param(grp).iter().zip(before.param(grp)) {
                assert!((x - y).abs() < 1e-15, "{grp}");
            }
        }
    }

    #[test]
    fn plain_sgd_steps_add_up() {
        let mut rng = SeededRng::new(2);
        let m0 = init_model(ModelDims::new(3, 2, 2), 1e-3, &mut rng).unwrap();
        let mut g1 = GradientBuffer::zeros_like(&m0);
        let mut g2 = GradientBuffer::zeros_like(&m0);
        g1.projector_weight
            .values_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        g2.projector_weight
            .values_mut()
            .copy_from_slice(&[-0.5, 0.25, 0.0, 1.0, -2.0, 0.5]);
        g1.b = 0.3;
        g2.b = -0.1;
        let mut two = m0.clone();
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(&mut two, &g1).unwrap();
        opt.step(&mut two, &g2).unwrap();
        let mut sum = g1.clone();
        sum.add_scaled(1.0, &g2);
        let mut one = m0.clone();
        Sgd::new(0.1, 0.0).step(&mut one, &sum).unwrap();
        for (x, y) in two
            .projector
            .weight
            .values()
            .iter()
            .zip(one.projector.weight.values())
        {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((two.scales.b - one.scales.b).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = init_model(ModelDims::new(2, 2, 2), 1e-3, &mut SeededRng::new(1)).unwrap();
        let mut g = GradientBuffer::zeros_like(&m);
        g.b = 1.0;
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut m, &g).unwrap();
        opt.step(&mut m, &g).unwrap();
        // v₁ = 1, v₂ = 1.9 → b = −0.1 − 0.19
        assert!((m.scales.b + 0.29).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut m = init_model(ModelDims::new(2, 2, 2), 1e-3, &mut SeededRng::new(1)).unwrap();
        let before = m.clone();
        let mut g = GradientBuffer::zeros_like(&m);
        g.variance_w2.values_mut()[1] = f64::NAN;
        let err = Sgd::new(0.1, 0.0).step(&mut m, &g).unwrap_err();
        assert!(
            matches!(
                err,
                DplError::NonFiniteGradient {
                    group: "variance.w2",
                    ..
                }
            ),
            "{err}"
        );
        assert_eq!(m, before);
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let data = tiny_data();
        let cfg = tiny_config(0);
        let (m, h) = train(&cfg, &data).unwrap();
        let init = init_model(cfg.dims(), cfg.sigma2_floor, &mut SeededRng::new(cfg.seed)).unwrap();
        assert_eq!(m, init);
        assert!(h.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_keeps_unit_prototypes() {
        let data = tiny_data();
        let cfg = tiny_config(200);
        let (m1, h1) = train(&cfg, &data).unwrap();
        let (m2, h2) = train(&cfg, &data).unwrap();
        assert_eq!(
            checkpoint_bytes(&m1).unwrap(),
            checkpoint_bytes(&m2).unwrap()
        );
        assert_eq!(h1, h2);
        assert_eq!(h1.records.len(), 200);
        assert!(h1.records[0].loss.total.is_finite() && h1.records[0].loss.total > 0.0);
        assert!(h1.records.windows(2).all(|w| w[0].step < w[1].step));
        for r in &h1.records {
            assert!(r.prototype_norm_deviation <= 1e-9);
        }
        assert_eq!(m1.step, 200);
    }

    #[test]
    fn bad_inputs_rejected() {
        let data = tiny_data();
        let mut cfg = tiny_config(5);
        cfg.num_classes = 3;
        assert!(train(&cfg, &data).is_err());
        let mut cfg = tiny_config(5);
        cfg.d_in = 7;
        assert!(train(&cfg, &data).is_err());
        let mut cfg = tiny_config(5);
        cfg.batch_size = 0;
        assert!(matches!(
            train(&cfg, &data).unwrap_err().error,
            DplError::Config(_)
        ));
    }

    #[test]
    fn exploding_run_keeps_last_good_model() {
        let data = tiny_data();
        let cfg = RunConfig {
            lr: 1e200,
            ..tiny_config(50)
        };
        let abort = train(&cfg, &data).unwrap_err();
        assert!(abort.error.is_numeric(), "{}", abort.error);
        abort.last_good.expect("model existed").validate().unwrap();
    }
}
