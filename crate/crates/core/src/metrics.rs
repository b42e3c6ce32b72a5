//! Recall-style metrics: micro recall, per-class and mean recall, their
//! harmonic mean, and top-K recall within pseudo-scene groups.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DplError, Result};
use crate::inference::{infer_dataset, predict, InferenceMode, InferenceTrace};
use crate::io_util::{read_file, to_exact_json, write_atomic};
use crate::model::ModelState;

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(DplError::Dimension {
            context: "predictions vs labels",
            expected: labels.len(),
            found: preds.len(),
        });
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= num_classes || t >= num_classes {
            return Err(DplError::Index {
                context: "confusion matrix",
                index: p.max(t),
                len: num_classes,
            });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: InferenceMode,
    pub micro_recall: f64,
    pub mean_recall: f64,
    pub harmonic_f: f64,
    /// `null` for classes with no instances in the evaluated set.
    pub per_class_recall: Vec<Option<f64>>,
    #[serde(default)]
    pub recall_at_k: BTreeMap<usize, f64>,
    pub present_classes: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

/// `2xy / (x + y)`, or 0 when both are 0.
pub fn harmonic_mean(x: f64, y: f64) -> f64 {
    if x + y > 0.0 {
        2.0 * x * y / (x + y)
    } else {
        0.0
    }
}

/// Summaries of a confusion matrix. Classes with an empty row are left out
/// of the mean recall.
pub fn metrics_report(cm: &ConfusionMatrix, mode: InferenceMode) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(DplError::Config(
            "cannot report metrics on an empty confusion matrix".into(),
        ));
    }
    let micro = cm.trace() as f64 / total as f64;
    let mut per_class = Vec::with_capacity(cm.num_classes());
    let mut present = Vec::new();
    for (i, row) in cm.counts.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n == 0 {
            per_class.push(None);
        } else {
            per_class.push(Some(row[i] as f64 / n as f64));
            present.push(i);
        }
    }
    let mean = per_class.iter().flatten().sum::<f64>() / present.len() as f64;
    Ok(MetricsReport {
        mode,
        micro_recall: micro,
        mean_recall: mean,
        harmonic_f: harmonic_mean(micro, mean),
        per_class_recall: per_class,
        recall_at_k: BTreeMap::new(),
        present_classes: present,
        confusion: cm.clone(),
    })
}

/// Within each group, keep the `k` most confident instances and count the
/// correct ones among them, divided by the group size; averaged over groups.
pub fn recall_at_k_grouped(dataset: &Dataset, traces: &[InferenceTrace], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(DplError::Config("K must be at least 1".into()));
    }
    if traces.len() != dataset.len() {
        return Err(DplError::Dimension {
            context: "traces vs instances",
            expected: dataset.len(),
            found: traces.len(),
        });
    }
    let mut groups: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    for (inst, t) in dataset.instances().iter().zip(traces) {
        let pred = predict(t);
        groups
            .entry(inst.group)
            .or_default()
            .push((t.probabilities[pred], pred == inst.label));
    }
    let mut sum = 0.0;
    for members in groups.values_mut() {
        // Stable sort keeps dataset order among equal confidences.
        members.sort_by(|a, b| b.0.total_cmp(&a.0));
        let hits = members.iter().take(k).filter(|m| m.1).count();
        sum += hits as f64 / members.len() as f64;
    }
    Ok(sum / groups.len() as f64)
}

/// Full report for one inference mode.
pub fn evaluate(
    model: &ModelState,
    dataset: &Dataset,
    mode: InferenceMode,
    ks: &[usize],
) -> Result<MetricsReport> {
    let traces = infer_dataset(model, dataset, mode)?;
    report_from_traces(dataset, &traces, model.dims.num_classes, mode, ks)
}

pub fn report_from_traces(
    dataset: &Dataset,
    traces: &[InferenceTrace],
    num_classes: usize,
    mode: InferenceMode,
    ks: &[usize],
) -> Result<MetricsReport> {
    let preds: Vec<usize> = traces.iter().map(predict).collect();
    let labels: Vec<usize> = dataset.instances().iter().map(|i| i.label).collect();
    let cm = confusion_matrix(&preds, &labels, num_classes)?;
    let mut report = metrics_report(&cm, mode)?;
    for &k in ks {
        report
            .recall_at_k
            .insert(k, recall_at_k_grouped(dataset, traces, k)?);
    }
    Ok(report)
}

/// Biased and unbiased reports on the same inputs, with per-class deltas
/// (unbiased − biased).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub biased: MetricsReport,
    pub unbiased: MetricsReport,
    pub per_class_recall_delta: Vec<Option<f64>>,
    pub micro_recall_delta: f64,
    pub mean_recall_delta: f64,
}

pub fn compare_modes(
    model: &ModelState,
    dataset: &Dataset,
    ks: &[usize],
) -> Result<ModeComparison> {
    let biased = evaluate(model, dataset, InferenceMode::Biased, ks)?;
    let unbiased = evaluate(model, dataset, InferenceMode::Unbiased, ks)?;
    Ok(compare_reports(biased, unbiased))
}

pub fn compare_reports(biased: MetricsReport, unbiased: MetricsReport) -> ModeComparison {
    let per_class_recall_delta = biased
        .per_class_recall
        .iter()
        .zip(&unbiased.per_class_recall)
        .map(|(b, u)| Some((*u)? - (*b)?))
        .collect();
    ModeComparison {
        micro_recall_delta: unbiased.micro_recall - biased.micro_recall,
        mean_recall_delta: unbiased.mean_recall - biased.mean_recall,
        per_class_recall_delta,
        biased,
        unbiased,
    }
}

pub fn metrics_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    to_exact_json(value)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_atomic(path, &to_exact_json(value)?)
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    serde_json::from_slice(&read_file(path)?)
        .map_err(|e| DplError::format(format!("bad metrics JSON: {e}")).with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledInstance;
    use crate::math::DenseVector;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let empty = confusion_matrix(&[], &[], 2).unwrap();
        assert_eq!(empty.total(), 0);
        let one = confusion_matrix(&[0], &[1], 2).unwrap();
        assert_eq!(one.counts, vec![vec![0, 0], vec![1, 0]]);
        assert!(confusion_matrix(&[0, 1], &[0], 2).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn perfect_and_majority_reports() {
        let cm = confusion_matrix(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        let r = metrics_report(&cm, InferenceMode::Biased).unwrap();
        assert_eq!(
            (r.micro_recall, r.mean_recall, r.harmonic_f),
            (1.0, 1.0, 1.0)
        );

        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let cm = confusion_matrix(&vec![0; 100], &labels, 2).unwrap();
        let r = metrics_report(&cm, InferenceMode::Biased).unwrap();
        assert!((r.micro_recall - 0.9).abs() < 1e-12);
        assert!((r.mean_recall - 0.5).abs() < 1e-12);
        assert!((r.harmonic_f - 0.642857).abs() < 1e-6);
        assert!(metrics_report(
            &confusion_matrix(&[], &[], 2).unwrap(),
            InferenceMode::Biased
        )
        .is_err());
    }

    #[test]
    fn absent_class_excluded() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 0, 1], 3).unwrap();
        let r = metrics_report(&cm, InferenceMode::Unbiased).unwrap();
        assert_eq!(r.per_class_recall, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.present_classes, vec![0, 1]);
        assert_eq!(r.mean_recall, 1.0);
    }

    fn grouped(
        n: usize,
        correct: impl Fn(usize) -> bool,
        conf: impl Fn(usize) -> f64,
    ) -> (Dataset, Vec<InferenceTrace>) {
        let inst = (0..n)
            .map(|i| LabeledInstance {
                id: i as u64,
                group: 0,
                label: 0,
                feature: vec![0.0].into(),
                fine: None,
            })
            .collect();
        let ds = Dataset::new(inst, 2).unwrap();
        let traces = (0..n)
            .map(|i| {
                let c = conf(i);
                let p = if correct(i) {
                    vec![c, 1.0 - c]
                } else {
                    vec![1.0 - c, c]
                };
                InferenceTrace {
                    raw_distances: DenseVector::zeros(2),
                    normalized_distances: DenseVector::zeros(2),
                    a_prime: 1.0,
                    logits: p.clone().into(),
                    probabilities: p.into(),
                }
            })
            .collect();
        (ds, traces)
    }

    #[test]
    fn grouped_recall_examples() {
        let (ds, t) = grouped(3, |_| true, |i| 0.6 + 0.1 * i as f64);
        assert_eq!(recall_at_k_grouped(&ds, &t, 5).unwrap(), 1.0);
        let (ds, t) = grouped(10, |_| true, |i| 0.55 + 0.01 * i as f64);
        assert_eq!(recall_at_k_grouped(&ds, &t, 5).unwrap(), 0.5);
        let (ds, t) = grouped(10, |_| false, |_| 0.9);
        assert_eq!(recall_at_k_grouped(&ds, &t, 5).unwrap(), 0.0);
        // The most confident instances are the wrong ones.
        let (ds, t) = grouped(4, |i| i < 2, |i| 0.6 + 0.1 * i as f64);
        assert_eq!(recall_at_k_grouped(&ds, &t, 2).unwrap(), 0.0);
        assert!(recall_at_k_grouped(&ds, &t, 0).is_err());
    }

    #[test]
    fn report_json_round_trips() {
        let cm = confusion_matrix(&[0, 1, 1, 0, 2], &[0, 1, 0, 0, 1], 3).unwrap();
        let mut r = metrics_report(&cm, InferenceMode::Unbiased).unwrap();
        r.recall_at_k.insert(5, 1.0 / 3.0);
        r.recall_at_k.insert(20, 0.1);
        let bytes = metrics_json(&r).unwrap();
        let back: MetricsReport = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, r);
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        for key in [
            "mode",
            "micro_recall",
            "mean_recall",
            "harmonic_f",
            "per_class_recall",
            "recall_at_k",
            "present_classes",
            "confusion",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["mode"], "unbiased");
        assert!(v["recall_at_k"].get("5").is_some());
    }

    proptest! {
        #[test]
        fn harmonic_below_arithmetic_and_geometric(x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            let h = harmonic_mean(x, y);
            prop_assert!(h <= (x + y) / 2.0 + 1e-15);
            prop_assert!(h <= (x * y).sqrt() + 1e-15);
            prop_assert!((harmonic_mean(x, x) - x).abs() < 1e-15);
        }

        #[test]
        fn recalls_in_unit_interval(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let cm = confusion_matrix(&preds, &labels, 4).unwrap();
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            let r = metrics_report(&cm, InferenceMode::Biased).unwrap();
            for v in [r.micro_recall, r.mean_recall, r.harmonic_f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
