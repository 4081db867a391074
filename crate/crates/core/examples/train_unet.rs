//! Train one rain+ETH U-Net on a synthetic archive, save the best checkpoint and forecast a test sequence.
//!
//! ```text
//! cargo run --release --example train_unet -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use ethcast::gridio::{write_manifest, Fold};
use ethcast::sampler::{assign_folds, SamplerConfig};
use ethcast::synthgen::{gen_dataset, DatasetConfig, SynthConfig};
use ethcast::unet3d::{predict_sequence, read_checkpoint, train, write_checkpoint, write_training_log, ModelConfig, TrainHyper, UNet3d};
use ethcast::verify::pixel_metrics;

fn main() -> ethcast::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train_unet".into()));
    let data = DatasetConfig {
        synth: SynthConfig { rows: 32, cols: 32, growth_onset: 3, ..SynthConfig::default() },
        n_events: 24,
        test_events: 2,
        seed: 5,
        ..DatasetConfig::default()
    };
    let ds = gen_dataset(&data, out.join("data"))?;
    let manifest = assign_folds(&ds.manifest, 0, &SamplerConfig { n_folds: 4, ..SamplerConfig::default() })?;
    write_manifest(&manifest, out.join("data").join("folded.tsv"))?;

    let config = ModelConfig { in_channels: 2, levels: 2, base_channels: 4, rows: 32, cols: 32, seed: 1, ..ModelConfig::default() };
    let model = UNet3d::build(&config)?;
    println!("{} parameters", model.param_count());
    let hyper = TrainHyper { lr: 3e-3, batch: 4, max_epochs: 10, patience_early: 4, ..TrainHyper::default() };
    let outcome = train(model, &manifest, 0, &hyper)?;
    for r in &outcome.log {
        println!("epoch {:>2} train {:.4} val {:.4} lr {:.1e}", r.epoch, r.train_mse, r.val_mse, r.lr);
    }
    let path = out.join("model.unck");
    write_checkpoint(&outcome.checkpoint, &path)?;
    write_training_log(&outcome.log, out.join("model.log.csv"))?;
    println!("best validation MSE {:.4} after {} steps, saved {}", outcome.best_val_mse, outcome.steps, path.display());

    let ck = read_checkpoint(&path)?;
    let rec = manifest.with_fold(Fold::Test).next().expect("dataset has test sequences");
    let forecast = predict_sequence(&ck, rec)?;
    let obs: Vec<_> = rec.rain_paths[config.in_frames..].iter().map(ethcast::gridio::read_frame).collect::<ethcast::Result<_>>()?;
    for k in [0, 5, 11, 17] {
        println!("test {} +{} min MSE {}", rec.start_timestamp, (k + 1) * 5, pixel_metrics(&forecast[k], &obs[k])?.mse);
    }
    Ok(())
}
