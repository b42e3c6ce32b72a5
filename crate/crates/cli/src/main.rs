//! `dpl`: generate data, train, evaluate and self-check prototype models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure. No output file is written when a command fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dpl_core::data::{load_any, save_any};
use dpl_core::gradcheck::run_gradcheck;
use dpl_core::inference::export_embeddings;
use dpl_core::metrics::{compare_modes, evaluate, write_json};
use dpl_core::trainer::{load_checkpoint, save_checkpoint, train};
use dpl_core::verify::run_verify;
use dpl_core::{
    generate_synthetic, split, Dataset, DplError, GeneratorSpec, InferenceMode, ModelState, Result,
    RunConfig,
};

#[derive(Parser)]
#[command(
    name = "dpl",
    version,
    about = "Prototype-based classifier with diversity-aware inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Biased,
    Unbiased,
}

impl From<Mode> for InferenceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Biased => InferenceMode::Biased,
            Mode::Unbiased => InferenceMode::Unbiased,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset. The extension of --out picks CSV (.csv) or binary.
    GenData {
        /// Generator spec as JSON.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Noise seed for --preset.
        #[arg(long, default_value_t = 1, requires = "preset")]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also split: --out receives the training part, this path the rest.
        #[arg(long)]
        test_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7, requires = "test_out")]
        train_frac: f64,
        /// Split seed; defaults to the generator seed.
        #[arg(long, requires = "test_out")]
        split_seed: Option<u64>,
    },
    /// Train a model and write its checkpoint.
    Train {
        /// Run configuration as JSON.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 1, requires = "preset")]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the loss history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint in one inference mode.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Grouped top-K recall; repeat for several K.
        #[arg(long = "topk")]
        topk: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate both inference modes side by side.
    Compare {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "topk")]
        topk: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write prototypes, features and variance samples as CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variance samples drawn around each prototype.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in identity checks.
    Verify,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

/// Fail early when a checkpoint cannot score the dataset.
fn check_shapes(model: &ModelState, data: &Dataset, ckpt: &Path) -> Result<()> {
    if model.dims.d_in != data.feature_dim() || model.dims.num_classes < data.num_classes() {
        return Err(DplError::Checkpoint(format!(
            "{}: shape mismatch, model takes {} features and {} classes, data has {} features and {} classes",
            ckpt.display(),
            model.dims.d_in,
            model.dims.num_classes,
            data.feature_dim(),
            data.num_classes()
        )));
    }
    Ok(())
}

fn load_pair(ckpt: &Path, data: &Path) -> Result<(ModelState, Dataset)> {
    let model = load_checkpoint(ckpt)?;
    let ds = load_any(data)?;
    check_shapes(&model, &ds, ckpt)?;
    Ok((model, ds))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData {
            spec,
            preset,
            seed,
            out,
            test_out,
            train_frac,
            split_seed,
        } => {
            let spec = match (spec, preset) {
                (Some(path), _) => GeneratorSpec::load(&path)?,
                (None, Some(Preset::Desk)) => GeneratorSpec::desk(seed),
                (None, None) => unreachable!("clap requires --spec or --preset"),
            };
            let ds = generate_synthetic(&spec)?;
            match test_out {
                Some(test_path) => {
                    let (tr, te) = split(&ds, train_frac, split_seed.unwrap_or(spec.seed))?;
                    save_any(&tr, &out)?;
                    if let Err(e) = save_any(&te, &test_path) {
                        let _ = std::fs::remove_file(&out);
                        return Err(e);
                    }
                    println!(
                        "wrote {} training and {} test instances",
                        tr.len(),
                        te.len()
                    );
                }
                None => {
                    save_any(&ds, &out)?;
                    println!("wrote {} instances", ds.len());
                }
            }
        }
        Command::Train {
            config,
            preset,
            seed,
            data,
            out,
            history,
        } => {
            let cfg = match (config, preset) {
                (Some(path), _) => RunConfig::load(&path)?,
                (None, Some(Preset::Desk)) => RunConfig::desk(seed),
                (None, None) => unreachable!("clap requires --config or --preset"),
            };
            let ds = load_any(&data)?;
            let (model, hist) = train(&cfg, &ds).map_err(|abort| {
                if let Some(rec) = abort.history.records.last() {
                    eprintln!("last logged step {}: loss {:?}", rec.step, rec.loss);
                }
                DplError::from(abort)
            })?;
            save_checkpoint(&model, &out)?;
            if let Some(path) = history {
                if let Err(e) = write_json(&hist, &path) {
                    let _ = std::fs::remove_file(&out);
                    return Err(e);
                }
            }
            if let Some(last) = hist.records.last() {
                println!(
                    "trained {} steps, final loss {:.6}",
                    model.step, last.loss.total
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            mode,
            topk,
            out,
        } => {
            let (model, ds) = load_pair(&ckpt, &data)?;
            let report = evaluate(&model, &ds, mode.into(), &topk)?;
            write_json(&report, &out)?;
            println!(
                "{}: micro recall {:.4}, mean recall {:.4}, F {:.4}",
                report.mode, report.micro_recall, report.mean_recall, report.harmonic_f
            );
        }
        Command::Compare {
            ckpt,
            data,
            topk,
            out,
        } => {
            let (model, ds) = load_pair(&ckpt, &data)?;
            let cmp = compare_modes(&model, &ds, &topk)?;
            write_json(&cmp, &out)?;
            for r in [&cmp.biased, &cmp.unbiased] {
                println!(
                    "{:>8}: micro recall {:.4}, mean recall {:.4}",
                    r.mode, r.micro_recall, r.mean_recall
                );
            }
        }
        Command::ExportEmbeddings {
            ckpt,
            data,
            out,
            samples,
            seed,
        } => {
            let (model, ds) = load_pair(&ckpt, &data)?;
            export_embeddings(&model, &ds, &out, samples, seed)?;
        }
        Command::GradCheck { seed } => {
            let report = run_gradcheck(seed)?;
            for e in &report.entries {
                println!(
                    "{:<4} {:<12} {:<18} max rel err {:.3e}",
                    if e.passed { "ok" } else { "FAIL" },
                    e.term.name(),
                    e.group,
                    e.max_rel_error
                );
            }
            if !report.passed() {
                eprintln!("gradient check failed (tolerance {:e})", report.tolerance);
                return Ok(ExitCode::from(3));
            }
        }
        Command::Verify => {
            let report = run_verify();
            for c in &report.checks {
                println!(
                    "{:<4} {}: {}",
                    if c.passed { "ok" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if !report.passed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
