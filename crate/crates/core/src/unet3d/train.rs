//! Mini-batch training with plateau learning-rate decay and early stopping on a validation fold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, ModelConfig, UNet3d};
use crate::autotensor::{adam_step, mse_loss_backward, mse_loss_forward, AdamConfig, AdamState, Real, Tensor};
use crate::error::{Error, Result};
use crate::gridio::{read_frame, Fold, SequenceManifest, SequenceRecord, Variable};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Validation rounds without improvement before stopping.
    pub patience_early: usize,
    /// Validation rounds without improvement before the learning rate is scaled.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Epochs between validation rounds.
    pub val_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { lr: 1e-3, batch: 2, max_epochs: 50, patience_early: 8, plateau_patience: 3, plateau_factor: 0.5, val_every: 1 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.val_every == 0 {
            return Err(Error::Config(format!(
                "lr, batch and val_every must be positive (lr={}, batch={}, val_every={})",
                self.lr, self.batch, self.val_every
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config(format!("plateau_factor must be in (0, 1], got {}", self.plateau_factor)));
        }
        if self.max_epochs < self.val_every {
            return Err(Error::Config("max_epochs allows no validation round".into()));
        }
        Ok(())
    }
}

/// One training example: normalised input `[1, C, T, H, W]` and target `[1, out_frames, H, W]` in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub start_timestamp: i64,
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRound {
    pub round: usize,
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the best validation round.
    pub checkpoint: Checkpoint,
    pub best_val_mse: f64,
    pub log: Vec<TrainRound>,
    pub steps: u64,
    /// Set when a numeric failure cut training short.
    pub aborted: Option<String>,
}

/// Reads input and target frames for each record.
pub fn load_samples<'a>(records: impl IntoIterator<Item = &'a SequenceRecord>, config: &ModelConfig) -> Result<Vec<Sample>> {
    let (n_in, n_out) = (config.in_frames, config.out_frames);
    records
        .into_iter()
        .map(|rec| {
            if rec.rain_paths.len() < n_in + n_out {
                return Err(Error::Data(format!("sequence {} is too short", rec.start_timestamp)));
            }
            let rain = rec.rain_paths[..n_in].iter().map(read_frame).collect::<Result<Vec<_>>>()?;
            let eth = if config.in_channels == 2 {
                Some(rec.eth_paths[..n_in].iter().map(read_frame).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            let input = config.assemble_input(&rain, eth.as_deref())?;
            let mut target = Vec::with_capacity(n_out * config.rows * config.cols);
            for p in &rec.rain_paths[n_in..n_in + n_out] {
                let f = read_frame(p)?;
                if f.variable != Variable::RainMmh || f.shape() != (config.rows, config.cols) {
                    return Err(Error::Data(format!("{}: unexpected target frame geometry", p.display())));
                }
                target.extend(f.values.iter().map(|&v| if f.is_nodata(v) { 0.0 } else { config.encode_rain(v as Real) }));
            }
            Ok(Sample {
                start_timestamp: rec.start_timestamp,
                input,
                target: Tensor::from_vec(&[1, n_out, config.rows, config.cols], target)?,
            })
        })
        .collect()
}

fn stack<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for t in parts {
        shape.get_or_insert_with(|| t.shape().to_vec());
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut shape = shape.ok_or_else(|| Error::Argument("empty batch".into()))?;
    shape[0] = n;
    Tensor::from_vec(&shape, data)
}

/// Mean per-sample MSE in model space.
pub(crate) fn validation_mse(model: &UNet3d, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let (pred, _) = model.forward_cached(&s.input)?;
        sum += mse_loss_forward(&pred, &s.target)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Trains on every non-test fold except `fold`, validating on `fold`.
pub fn train(model: UNet3d, manifest: &SequenceManifest, fold: u8, hyper: &TrainHyper) -> Result<TrainOutcome> {
    let train_recs: Vec<&SequenceRecord> = manifest.records.iter().filter(|r| matches!(r.fold, Fold::Index(i) if i != fold)).collect();
    let val_recs: Vec<&SequenceRecord> = manifest.with_fold(Fold::Index(fold)).collect();
    if val_recs.is_empty() {
        return Err(Error::Config(format!("validation fold {fold} is empty")));
    }
    let train_set = load_samples(train_recs, &model.config)?;
    let val_set = load_samples(val_recs, &model.config)?;
    train_on_samples(model, &train_set, &val_set, hyper)
}

pub fn train_on_samples(mut model: UNet3d, train_set: &[Sample], val_set: &[Sample], hyper: &TrainHyper) -> Result<TrainOutcome> {
    hyper.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "training needs samples in both splits (train {}, validation {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let adam_cfg = AdamConfig::default();
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = hyper.lr;
    let mut best: Option<(f64, Checkpoint)> = None;
    let (mut since_best, mut since_decay) = (0usize, 0usize);
    let mut log = Vec::new();
    let mut steps = 0u64;
    let mut aborted = None;

    'epochs: for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(hyper.batch) {
            let x = stack(chunk.iter().map(|&i| &train_set[i].input))?;
            let y = stack(chunk.iter().map(|&i| &train_set[i].target))?;
            model.zero_grad();
            let step = (|| -> Result<f64> {
                let (pred, cache) = model.forward_cached(&x)?;
                let loss = mse_loss_forward(&pred, &y)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("training loss {loss} at epoch {epoch}")));
                }
                let g = mse_loss_backward(&pred, &y)?;
                model.backward(&cache, &g)?;
                adam_step(&mut model.params, &mut adam, lr, &adam_cfg)?;
                Ok(loss)
            })();
            match step {
                Ok(loss) => {
                    loss_sum += loss * chunk.len() as f64;
                    seen += chunk.len();
                    steps += 1;
                }
                Err(Error::Numeric(m)) => {
                    aborted = Some(m);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if epoch % hyper.val_every != 0 {
            continue;
        }
        let val = match validation_mse(&model, val_set) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                aborted = Some(format!("validation loss {v} at epoch {epoch}"));
                break;
            }
            Err(Error::Numeric(m)) => {
                aborted = Some(m);
                break;
            }
            Err(e) => return Err(e),
        };
        log.push(TrainRound { round: log.len() + 1, epoch, train_mse: loss_sum / seen as f64, val_mse: val, lr });
        if best.as_ref().map_or(true, |(b, _)| val < *b) {
            best = Some((val, Checkpoint::from_model(&model, steps)));
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_decay >= hyper.plateau_patience.max(1) {
                lr *= hyper.plateau_factor;
                since_decay = 0;
            }
            if since_best >= hyper.patience_early.max(1) {
                break;
            }
        }
    }
    let (best_val_mse, checkpoint) =
        best.ok_or_else(|| Error::Numeric(aborted.clone().unwrap_or_else(|| "no validation round completed".into())))?;
    Ok(TrainOutcome { checkpoint, best_val_mse, log, steps, aborted })
}

/// CSV with columns `round,epoch,train_mse,val_mse,lr`.
pub fn write_training_log(log: &[TrainRound], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("round,epoch,train_mse,val_mse,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{}", r.round, r.epoch, r.train_mse, r.val_mse, r.lr);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
