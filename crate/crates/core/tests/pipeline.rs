use dpl_core::data::{load_any, save_any};
use dpl_core::inference::{export_embeddings_string, infer_dataset};
use dpl_core::metrics::{compare_modes, read_metrics, write_json};
use dpl_core::model::init_model;
use dpl_core::trainer::{load_checkpoint, save_checkpoint, train};
use dpl_core::{generate_synthetic, split, GeneratorSpec, InferenceMode, RunConfig, SeededRng};

fn small_spec(seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        fine_means: vec![
            vec![0.6, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.6, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.6, 0.0, 0.0],
        ],
        fine_stddev: vec![0.15; 3],
        fine_counts: vec![200, 40, 20],
        fine_to_coarse: vec![0, 1, 2],
        group_size: 8,
        seed,
        class_names: None,
    }
}

fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        d_in: 5,
        d: 6,
        num_classes: 3,
        steps: 400,
        log_interval: 50,
        seed,
        ..RunConfig::default()
    }
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let ds = generate_synthetic(&small_spec(1)).unwrap();
    let cfg = RunConfig {
        steps: 0,
        ..small_config(5)
    };
    let (model, history) = train(&cfg, &ds).unwrap();
    let fresh = init_model(cfg.dims(), cfg.sigma2_floor, &mut SeededRng::new(cfg.seed)).unwrap();
    assert_eq!(model, fresh);
    assert!(history.records.is_empty());
}

#[test]
fn training_lowers_the_loss_and_logs_monotone_steps() {
    let ds = generate_synthetic(&small_spec(2)).unwrap();
    let (_, history) = train(&small_config(2), &ds).unwrap();
    let first = history.records.first().unwrap();
    let last = history.records.last().unwrap();
    assert!(first.loss.total.is_finite() && first.loss.total > 0.0);
    assert!(last.loss.total < first.loss.total);
    assert_eq!(last.step, 399);
    assert!(history.records.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn checkpoint_files_reproduce_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small_spec(3)).unwrap();
    let (tr, te) = split(&ds, 0.7, 3).unwrap();
    let (model, _) = train(&small_config(3), &tr).unwrap();

    let ckpt = dir.path().join("model.json");
    save_checkpoint(&model, &ckpt).unwrap();
    let back = load_checkpoint(&ckpt).unwrap();
    assert_eq!(back, model);

    let data = dir.path().join("test.csv");
    save_any(&te, &data).unwrap();
    let te_back = load_any(&data).unwrap();
    for mode in [InferenceMode::Biased, InferenceMode::Unbiased] {
        assert_eq!(
            infer_dataset(&model, &te, mode).unwrap(),
            infer_dataset(&back, &te_back, mode).unwrap()
        );
    }
    assert_eq!(
        export_embeddings_string(&model, &te, 2, 9).unwrap(),
        export_embeddings_string(&back, &te_back, 2, 9).unwrap()
    );
}

#[test]
fn comparison_report_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small_spec(4)).unwrap();
    let (tr, te) = split(&ds, 0.7, 4).unwrap();
    let (model, _) = train(&small_config(4), &tr).unwrap();
    let cmp = compare_modes(&model, &te, &[1, 8]).unwrap();
    assert_eq!(
        cmp.mean_recall_delta,
        cmp.unbiased.mean_recall - cmp.biased.mean_recall
    );
    let path = dir.path().join("unbiased.json");
    write_json(&cmp.unbiased, &path).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), cmp.unbiased);
}

#[test]
fn divergent_runs_abort_with_the_last_good_model() {
    let ds = generate_synthetic(&small_spec(5)).unwrap();
    let cfg = RunConfig {
        lr: 1e6,
        ..small_config(5)
    };
    let abort = train(&cfg, &ds).unwrap_err();
    assert!(abort.error.is_numeric(), "{}", abort.error);
    if let Some(model) = abort.last_good {
        model.validate().unwrap();
    }
}
