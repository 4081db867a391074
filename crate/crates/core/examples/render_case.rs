//! Render observation, model and ETH panels for one test sequence as PPM images.
//!
//! ```text
//! cargo run --release --example render_case -- [OUT_DIR] [CHECKPOINT]
//! ```
//! Without a checkpoint (for instance one written by `train_unet`) an untrained network is drawn.

use std::path::PathBuf;

use ethcast::experiment::{render_case, TestCase, CASE_LEADS};
use ethcast::gridio::Fold;
use ethcast::sampler::{assign_folds, SamplerConfig};
use ethcast::synthgen::{gen_dataset, DatasetConfig, SynthConfig};
use ethcast::unet3d::{read_checkpoint, ModelConfig, UNet3d};

fn main() -> ethcast::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "render_case".into()));
    let model = match args.next() {
        Some(p) => read_checkpoint(p)?.to_model()?,
        None => UNet3d::build(&ModelConfig { in_channels: 2, levels: 2, base_channels: 4, rows: 32, cols: 32, ..ModelConfig::default() })?,
    };
    let (rows, cols) = (model.config.rows, model.config.cols);
    let data = DatasetConfig {
        synth: SynthConfig { rows, cols, ..SynthConfig::default() },
        n_events: 8,
        test_events: 1,
        seed: 5,
        ..DatasetConfig::default()
    };
    let ds = gen_dataset(&data, out.join("data"))?;
    let manifest = assign_folds(&ds.manifest, 0, &SamplerConfig { n_folds: 4, ..SamplerConfig::default() })?;
    let case = TestCase::load(manifest.with_fold(Fold::Test).next().expect("one test sequence"))?;

    let panels = render_case(&case, &[("unet".to_string(), &model)], model.config.in_frames, &CASE_LEADS, out.join("case"))?;
    for p in panels {
        let lead = p.lead_min.map_or("input".to_string(), |l| format!("+{l} min"));
        println!("{:<24} {:>8} max {:>7.2} {:<4} {}", p.name, lead, p.max_value, p.unit, p.file.display());
    }
    Ok(())
}
