//! Self-checks on exact identities of the model, losses and metrics.
//!
//! Every check is cheap and deterministic; [`run_verify`] runs them all and
//! reports one line each.

use std::collections::BTreeMap;

use crate::data::{generate_synthetic, Dataset, GeneratorSpec, LabeledInstance};
use crate::diversity::{matching_loss, orthogonal_loss, LossBreakdown, SampleSet};
use crate::error::{DplError, Result};
use crate::inference::{
    biased_probabilities, infer_dataset, predict, unbiased_probabilities, unbiased_with_variances,
    InferenceMode,
};
use crate::math::{self, DenseMatrix, DenseVector};
use crate::metrics::{
    harmonic_mean, metrics_json, recall_at_k_grouped, report_from_traces, MetricsReport,
};
use crate::model::{init_model, ModelDims, ModelState, PrototypeBank};
use crate::objective::{ce_loss, total_loss};
use crate::rng::SeededRng;
use crate::trainer::{train, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Agreement between two logit computations over a batch of queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Agreement {
    pub queries: usize,
    pub max_logit_gap: f64,
    pub argmax_mismatches: usize,
}

impl Agreement {
    pub fn within(&self, tol: f64) -> bool {
        self.max_logit_gap <= tol && self.argmax_mismatches == 0
    }
}

/// Small random model with non-trivial scales, used by the query checks.
pub fn query_model(seed: u64) -> Result<ModelState> {
    let mut rng = SeededRng::new(seed);
    let mut model = init_model(ModelDims::new(16, 8, 5), 1e-3, &mut rng)?;
    model.scales.a = 1.7;
    model.scales.b = 0.3;
    Ok(model)
}

fn random_queries(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::substream(seed, 1);
    (0..n)
        .map(|_| {
            let mut z = vec![0.0; d];
            rng.fill_standard_normal(&mut z);
            z
        })
        .collect()
}

fn compare_logits<F, G>(queries: &[Vec<f64>], mut lhs: F, mut rhs: G) -> Result<Agreement>
where
    F: FnMut(&[f64]) -> Result<crate::inference::InferenceTrace>,
    G: FnMut(&[f64]) -> Result<crate::inference::InferenceTrace>,
{
    let mut gap: f64 = 0.0;
    let mut mismatches = 0;
    for z in queries {
        let x = lhs(z)?;
        let y = rhs(z)?;
        for (p, q) in x.logits.iter().zip(y.logits.iter()) {
            gap = gap.max((p - q).abs());
        }
        if predict(&x) != predict(&y) {
            mismatches += 1;
        }
    }
    Ok(Agreement {
        queries: queries.len(),
        max_logit_gap: gap,
        argmax_mismatches: mismatches,
    })
}

/// Unbiased logits with every `σ²` pinned to 1 against biased logits.
pub fn reduction_agreement(queries: usize, seed: u64) -> Result<Agreement> {
    let model = query_model(seed)?;
    let ones = vec![DenseVector::from_vec(vec![1.0; model.dims.d]); model.dims.num_classes];
    let qs = random_queries(queries, model.dims.d, seed);
    compare_logits(
        &qs,
        |z| biased_probabilities(z, &model),
        |z| unbiased_with_variances(z, &model, &ones),
    )
}

/// Unbiased logits with every `σ` multiplied by `kappa` against the model's
/// own variances.
pub fn sigma_scaling_agreement(kappa: f64, queries: usize, seed: u64) -> Result<Agreement> {
    let model = query_model(seed)?;
    let scaled: Vec<DenseVector> = model
        .class_variances()?
        .into_iter()
        .map(|v| {
            v.iter()
                .map(|s| s * kappa * kappa)
                .collect::<Vec<_>>()
                .into()
        })
        .collect();
    let qs = random_queries(queries, model.dims.d, seed);
    compare_logits(
        &qs,
        |z| unbiased_probabilities(z, &model),
        |z| unbiased_with_variances(z, &model, &scaled),
    )
}

fn fail(message: String) -> DplError {
    DplError::Numeric(message)
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<()> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(fail(format!(
            "{name}: got {got}, want {want} (tol {tol:e})"
        )))
    }
}

/// A passing check yields a one-line summary; any error is a failure.
type Outcome = Result<String>;

fn softmax_identities() -> Outcome {
    let u = math::softmax(&[0.0, 0.0, 0.0])?;
    for p in u.iter() {
        close("uniform", *p, 1.0 / 3.0, 1e-15)?;
    }
    let v = math::softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()])?;
    for (i, p) in v.iter().enumerate() {
        close("log weights", *p, (i + 1) as f64 / 6.0, 1e-15)?;
    }
    let mut rng = SeededRng::new(3);
    for _ in 0..200 {
        let x: Vec<f64> = (0..7)
            .map(|_| (rng.next_f64() * 2.0 - 1.0) * 700.0)
            .collect();
        let s = math::softmax(&x)?;
        close("sum", s.iter().sum(), 1.0, 1e-12)?;
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.25).collect();
        let t = math::softmax(&shifted)?;
        for (a, b) in s.iter().zip(t.iter()) {
            close("shift", *a, *b, 1e-12)?;
        }
    }
    Ok("uniform, log-weight, sum and shift identities".into())
}

fn agreement_outcome(a: Agreement) -> Outcome {
    if a.within(1e-9) {
        Ok(format!(
            "{} queries, max logit gap {:.2e}",
            a.queries, a.max_logit_gap
        ))
    } else {
        Err(fail(format!(
            "max logit gap {:.3e}, {} argmax mismatches of {}",
            a.max_logit_gap, a.argmax_mismatches, a.queries
        )))
    }
}

fn reduction_identity() -> Outcome {
    agreement_outcome(reduction_agreement(1000, 11)?)
}

fn sigma_scaling() -> Outcome {
    let mut parts = Vec::new();
    for kappa in [0.1, 10.0] {
        parts.push(format!(
            "κ={kappa}: {}",
            agreement_outcome(sigma_scaling_agreement(kappa, 1000, 12)?)?
        ));
    }
    Ok(parts.join("; "))
}

fn a_prime_examples() -> Outcome {
    let mut model = init_model(ModelDims::new(2, 2, 2), 1e-3, &mut SeededRng::new(1))?;
    model.prototypes.centers = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?;
    model.scales.a = 1.0;
    let vars = vec![
        DenseVector::from_vec(vec![4.0, 4.0]),
        DenseVector::from_vec(vec![4.0, 4.0]),
    ];
    let t = unbiased_with_variances(&[3.0, 0.0], &model, &vars)?;
    close("normalized distance", t.normalized_distances[0], 1.0, 1e-15)?;
    close("raw distance", t.raw_distances[0], 2.0, 1e-15)?;
    // Raw maximum 4, normalized maximum 2.
    close("a'", t.a_prime, 2.0, 1e-15)?;
    let m = query_model(5)?;
    for z in random_queries(200, m.dims.d, 5) {
        let t = unbiased_probabilities(&z, &m)?;
        if !(t.a_prime > 0.0) {
            return Err(fail(format!("a' = {} is not positive", t.a_prime)));
        }
    }
    Ok("a' = 2 example and positivity on 200 queries".into())
}

fn loss_examples() -> Outcome {
    // Cross-entropy: distances (0.5, 1.5) give the same logits as (0, 1)
    // up to a shift, with a = 1 and b = 0.
    let mut m1 = init_model(ModelDims::new(1, 1, 2), 1e-3, &mut SeededRng::new(2))?;
    m1.prototypes.centers = DenseMatrix::from_rows(&[vec![1.0], vec![-1.0]])?;
    m1.scales.a = 1.0;
    m1.scales.b = 0.0;
    let ce = ce_loss(&[0.5], 0, &m1)?;
    close("ce example", ce, 0.3132616875182228, 1e-6)?;

    let mut four = init_model(ModelDims::new(4, 4, 4), 1e-3, &mut SeededRng::new(3))?;
    four.prototypes.centers = DenseMatrix::identity(4);
    close(
        "uniform ce",
        ce_loss(&[0.0; 4], 2, &four)?,
        4f64.ln(),
        1e-12,
    )?;

    // Orthogonal loss.
    let bank = |rows: Vec<Vec<f64>>| -> Result<PrototypeBank> {
        Ok(PrototypeBank {
            centers: DenseMatrix::from_rows(&rows)?,
        })
    };
    close(
        "ortho identity",
        orthogonal_loss(&bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]])?)?,
        0.0,
        1e-12,
    )?;
    close(
        "ortho duplicate",
        orthogonal_loss(&bank(vec![vec![1.0, 0.0], vec![1.0, 0.0]])?)?,
        1.0,
        1e-12,
    )?;
    let h = 3f64.sqrt() / 2.0;
    let tri = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.5, h, 0.0],
        vec![
            0.5,
            0.5 / (2.0 * h),
            (1.0 - 0.25 - 0.25 / (4.0 * h * h)).sqrt(),
        ],
    ];
    close("ortho 0.5", orthogonal_loss(&bank(tri)?)?, 0.5, 1e-12)?;

    // Matching loss with a single sample at the origin of class 0.
    let set = SampleSet::from_parts(0, &[0.0], &[0.0], DenseMatrix::zeros(1, 1))?;
    let sets = [set];
    let at = |x: f64| matching_loss(&[(vec![x], 0usize)], &sets, 1.0);
    close("match 0.5", at(0.5)?, 0.0, 1e-12)?;
    close("match 2.0", at(2.0)?, 1.0, 1e-12)?;
    close("match 1.3", at(1.3)?, 0.09, 1e-12)?;
    let pair = matching_loss(&[(vec![0.5], 0usize), (vec![1.3], 0usize)], &sets, 1.0)?;
    close("match mean", pair, 0.045, 1e-12)?;

    close("total", total_loss(1.0, 0.5, 0.2, 10.0), 3.5, 1e-12)?;
    let b = LossBreakdown::compose(0.7, 0.2, 0.05, 10.0);
    close("breakdown total", b.total, 0.7 + 0.2 + 10.0 * 0.05, 1e-12)?;
    Ok("cross-entropy, orthogonal, matching and total examples".into())
}

fn b_shift_invariance() -> Outcome {
    let mut model = query_model(21)?;
    for z in random_queries(100, model.dims.d, 21) {
        model.scales.b = 0.0;
        let base = ce_loss(&z, 1, &model)?;
        model.scales.b = 17.5;
        let shifted = ce_loss(&z, 1, &model)?;
        if base != shifted {
            return Err(fail(format!("ce changed from {base} to {shifted}")));
        }
        if base < 0.0 {
            return Err(fail(format!("negative ce {base}")));
        }
    }
    Ok("cross-entropy unchanged by b on 100 queries".into())
}

fn prototype_norms() -> Outcome {
    let spec = GeneratorSpec {
        fine_means: vec![
            vec![0.5, 0.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.0],
        ],
        fine_stddev: vec![0.2; 3],
        fine_counts: vec![60, 30, 10],
        fine_to_coarse: vec![0, 1, 2],
        group_size: 8,
        seed: 4,
        class_names: None,
    };
    let ds = generate_synthetic(&spec)?;
    let cfg = RunConfig {
        d_in: 4,
        d: 6,
        num_classes: 3,
        steps: 300,
        log_interval: 1,
        seed: 4,
        ..RunConfig::default()
    };
    let (model, history) = train(&cfg, &ds).map_err(DplError::from)?;
    let worst = history
        .records
        .iter()
        .map(|r| r.prototype_norm_deviation)
        .fold(model.prototypes.max_norm_deviation(), f64::max);
    if worst <= 1e-9 {
        Ok(format!(
            "{} logged steps, worst deviation {worst:.1e}",
            history.records.len()
        ))
    } else {
        Err(fail(format!("prototype norm deviation {worst:e}")))
    }
}

fn variance_floor() -> Outcome {
    let mut model = query_model(31)?;
    for v in model.variance_net.b2.iter_mut() {
        *v = -1e4;
    }
    for var in model.class_variances()? {
        for s in var.iter() {
            if !(*s > 0.0) {
                return Err(fail(format!("variance {s} not positive")));
            }
            close("floor", *s, model.variance_net.sigma2_floor, 1e-12)?;
        }
    }
    Ok("saturated variance sits on the floor".into())
}

fn harmonic_bounds() -> Outcome {
    let mut rng = SeededRng::new(41);
    for _ in 0..1000 {
        let x = rng.next_f64();
        let y = rng.next_f64();
        let f = harmonic_mean(x, y);
        if f > (x + y) / 2.0 + 1e-15 || f > (x * y).sqrt() + 1e-15 {
            return Err(fail(format!("F({x}, {y}) = {f} exceeds a mean")));
        }
        if (harmonic_mean(x, x) - x).abs() > 1e-15 {
            return Err(fail(format!("F({x}, {x}) != {x}")));
        }
    }
    Ok("F below arithmetic and geometric means on 1000 pairs".into())
}

fn grouped_recall_identity() -> Outcome {
    let model = query_model(51)?;
    let mut rng = SeededRng::new(52);
    let mut instances = Vec::new();
    for id in 0..60u64 {
        let mut f = vec![0.0; model.dims.d_in];
        rng.fill_standard_normal(&mut f);
        instances.push(LabeledInstance {
            id,
            group: (id % 7) as u32,
            label: rng.below(model.dims.num_classes),
            feature: f.into(),
            fine: None,
        });
    }
    let ds = Dataset::new(instances, model.dims.num_classes)?;
    let traces = infer_dataset(&model, &ds, InferenceMode::Unbiased)?;
    let mut per_group: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (inst, t) in ds.instances().iter().zip(&traces) {
        let e = per_group.entry(inst.group).or_default();
        e.0 += usize::from(predict(t) == inst.label);
        e.1 += 1;
    }
    let expected = per_group
        .values()
        .map(|&(h, n)| h as f64 / n as f64)
        .sum::<f64>()
        / per_group.len() as f64;
    let max_group = per_group.values().map(|v| v.1).max().unwrap_or(0);
    for k in [max_group, max_group + 5] {
        let got = recall_at_k_grouped(&ds, &traces, k)?;
        if got != expected {
            return Err(fail(format!("R@{k} = {got}, per-group micro {expected}")));
        }
    }
    let report = report_from_traces(
        &ds,
        &traces,
        model.dims.num_classes,
        InferenceMode::Unbiased,
        &[1, 3],
    )?;
    let bytes = metrics_json(&report)?;
    let back: MetricsReport = serde_json::from_slice(&bytes)
        .map_err(|e| DplError::Internal(format!("metrics re-read: {e}")))?;
    if back != report {
        return Err(fail("metrics JSON did not round-trip".into()));
    }
    Ok(format!(
        "R@K for K ≥ {max_group} equals per-group recall; JSON round-trips"
    ))
}

/// Runs every identity check.
pub fn run_verify() -> VerifyReport {
    let suite: [(&'static str, fn() -> Outcome); 10] = [
        ("softmax identities", softmax_identities),
        ("reduction identity (σ² = 1)", reduction_identity),
        ("σ-scaling invariance", sigma_scaling),
        ("a' examples and positivity", a_prime_examples),
        ("loss examples", loss_examples),
        ("b-shift invariance of cross-entropy", b_shift_invariance),
        ("prototype norms during training", prototype_norms),
        ("variance floor", variance_floor),
        ("harmonic mean bounds", harmonic_bounds),
        (
            "grouped recall and metrics round trip",
            grouped_recall_identity,
        ),
    ];
    let checks = suite
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            Check {
                name,
                passed,
                detail,
            }
        })
        .collect();
    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_identity_holds() {
        let report = run_verify();
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn scaled_variances_break_the_reduction() {
        // Sanity check that the agreement measure can fail at all.
        let model = query_model(3).unwrap();
        let qs = random_queries(50, model.dims.d, 3);
        let mut vars = model.class_variances().unwrap();
        vars[0] = vars[0].iter().map(|v| v * 100.0).collect::<Vec<_>>().into();
        let a = compare_logits(
            &qs,
            |z| unbiased_probabilities(z, &model),
            |z| unbiased_with_variances(z, &model, &vars),
        )
        .unwrap();
        assert!(!a.within(1e-9));
    }
}
