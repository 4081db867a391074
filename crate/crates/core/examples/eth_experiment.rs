//! Synthetic ETH experiment: train seed-paired U-Nets with and without the echo-top channel on
//! events whose growth is visible only in ETH, then compare test MSE.
//!
//! ```text
//! cargo run --release --example eth_experiment -- [OUT_DIR] [N_SEEDS]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use ethcast::baselines::MotionParams;
use ethcast::experiment::{run_experiment, ExperimentPlan};
use ethcast::gridio::write_manifest;
use ethcast::sampler::{assign_folds, SamplerConfig};
use ethcast::synthgen::{gen_dataset, DatasetConfig, SynthConfig};
use ethcast::unet3d::{ModelConfig, TrainHyper};
use ethcast::verify::VerifyConfig;

fn main() -> ethcast::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "eth_experiment".into()));
    let n_seeds: u64 = args.next().map_or(4, |s| s.parse().expect("N_SEEDS must be an integer"));
    let started = Instant::now();

    let dataset = DatasetConfig {
        synth: SynthConfig { rows: 32, cols: 32, growth_onset: 3, ..SynthConfig::default() },
        n_events: 56,
        test_events: 8,
        seed: 2024,
        ..DatasetConfig::default()
    };
    let ds = gen_dataset(&dataset, out.join("data"))?;
    let folded = assign_folds(&ds.manifest, 7, &SamplerConfig::default())?;
    let manifest = out.join("data").join("folded.tsv");
    write_manifest(&folded, &manifest)?;

    let plan = ExperimentPlan {
        manifest,
        model: ModelConfig { levels: 2, base_channels: 4, rows: 32, cols: 32, ..ModelConfig::default() },
        hyper: TrainHyper { lr: 3e-3, batch: 4, max_epochs: 30, patience_early: 6, ..TrainHyper::default() },
        seeds: (1..=n_seeds).collect(),
        verify: VerifyConfig::default(),
        motion: MotionParams { block: 8, search_radius: 4 },
        out_dir: out.join("run"),
    };
    let outcome = run_experiment(&plan)?;
    for run in &outcome.runs {
        for m in &run.models {
            println!("{:<14} epochs {:>3} best validation MSE {:?}", m.name, m.epochs, m.best_val_mse);
        }
    }
    print!("{}", std::fs::read_to_string(plan.report_dir().join("summary.txt")).expect("summary written"));
    println!("report in {}, {:.0?}", plan.report_dir().display(), started.elapsed());
    Ok(())
}
