//! Train the desk preset and compare the two inference modes.
//!
//! `cargo run --release -p dpl-core --example desk -- [seed] [samples]`

use dpl_core::metrics::compare_modes;
use dpl_core::trainer::train;
use dpl_core::{generate_synthetic, split, GeneratorSpec, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let samples: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);

    let data = generate_synthetic(&GeneratorSpec::desk(seed))?;
    let (train_set, test_set) = split(&data, 0.7, seed)?;
    let cfg = RunConfig {
        num_samples: samples,
        ..RunConfig::desk(seed)
    };
    let (model, _) = train(&cfg, &train_set).map_err(|a| a.error)?;
    let cmp = compare_modes(&model, &test_set, &[])?;
    for r in [&cmp.biased, &cmp.unbiased] {
        let per_class: Vec<String> = r
            .per_class_recall
            .iter()
            .map(|x| x.map_or("-".into(), |v| format!("{v:.3}")))
            .collect();
        println!(
            "{:>8}  micro {:.4}  mean {:.4}  per class [{}]",
            r.mode,
            r.micro_recall,
            r.mean_recall,
            per_class.join(" ")
        );
    }
    let variances = model.class_variances()?;
    let avg: Vec<String> = variances
        .iter()
        .map(|v| format!("{:.4}", v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    println!("mean σ² per class [{}]", avg.join(" "));
    Ok(())
}
