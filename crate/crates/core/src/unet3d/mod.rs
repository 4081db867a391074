//! Single-pass 3D U-Net: four input frames in, eighteen lead times out.
//!
//! Encoder levels hold two 3×3×3 convolutions with ReLU each, doubling the
//! channel count per level, with 2×2 spatial max pooling in between (time is
//! never pooled). The decoder upsamples, concatenates the same-level encoder
//! output and applies two more convolutions. A head convolution with kernel
//! `(in_frames, 1, 1)` and no temporal padding collapses time and maps to the
//! output frames, followed by a ReLU so predictions are non-negative.

mod checkpoint;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autotensor::{
    concat_channels, conv3d_backward, conv3d_backward_padded, conv3d_forward, conv3d_forward_padded, gradcheck, maxpool2_spatial_backward,
    maxpool2_spatial_forward, mse_loss_backward, mse_loss_forward, relu_backward, relu_forward, split_channels, upsample2_nearest_backward,
    upsample2_nearest_forward, GradcheckReport, MaxPool, Parameter, Real, Tensor,
};
use crate::error::{Error, Result};
use crate::gridio::{GridFrame, Variable, CADENCE_S, ETH_MAX_KM};
use crate::sampler::OUTPUT_FRAMES;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, StoredParam, CHECKPOINT_MAGIC};
pub use train::{load_samples, train, train_on_samples, write_training_log, Sample, TrainHyper, TrainOutcome, TrainRound};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RainTransform {
    Raw,
    Log1p,
}

impl fmt::Display for RainTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RainTransform::Raw => "RAW",
            RainTransform::Log1p => "LOG1P",
        })
    }
}

impl FromStr for RainTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RAW" => Ok(RainTransform::Raw),
            "LOG1P" => Ok(RainTransform::Log1p),
            _ => Err(Error::Config(format!("unknown rain transform {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// 1 = rain only, 2 = rain + ETH.
    pub in_channels: usize,
    pub in_frames: usize,
    pub out_frames: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub seed: u64,
    pub rain_transform: RainTransform,
    pub eth_scale: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            in_frames: 4,
            out_frames: OUTPUT_FRAMES,
            levels: 3,
            base_channels: 8,
            kernel: 3,
            seed: 0,
            rain_transform: RainTransform::Raw,
            eth_scale: ETH_MAX_KM as f64,
            rows: 64,
            cols: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=2).contains(&self.in_channels) {
            return bad(format!("in_channels must be 1 or 2, got {}", self.in_channels));
        }
        if self.in_frames == 0 || self.out_frames == 0 {
            return bad("frame counts must be positive".into());
        }
        if self.levels == 0 || self.levels > 8 {
            return bad(format!("levels must be in 1..=8, got {}", self.levels));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.kernel != 3 {
            return bad(format!("only 3x3x3 kernels are supported, got {}", self.kernel));
        }
        if !(self.eth_scale > 0.0) {
            return bad(format!("eth_scale must be positive, got {}", self.eth_scale));
        }
        let div = 1usize << (self.levels - 1);
        if self.rows == 0 || self.cols == 0 || self.rows % div != 0 || self.cols % div != 0 {
            return bad(format!("{}x{} grid is not divisible by 2^{} for {} levels", self.rows, self.cols, self.levels - 1, self.levels));
        }
        Ok(())
    }

    /// Channel width of encoder/decoder level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `key=value` lines, as embedded in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "in_channels={}\nin_frames={}\nout_frames={}\nlevels={}\nbase_channels={}\nkernel={}\nseed={}\nrain_transform={}\neth_scale={}\nrows={}\ncols={}\n",
            self.in_channels,
            self.in_frames,
            self.out_frames,
            self.levels,
            self.base_channels,
            self.kernel,
            self.seed,
            self.rain_transform,
            self.eth_scale,
            self.rows,
            self.cols
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("model config line without '=': {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| v.parse::<usize>().map_err(|e| Error::Format(format!("{k}={v}: {e}")));
            match k {
                "in_channels" => cfg.in_channels = int(v)?,
                "in_frames" => cfg.in_frames = int(v)?,
                "out_frames" => cfg.out_frames = int(v)?,
                "levels" => cfg.levels = int(v)?,
                "base_channels" => cfg.base_channels = int(v)?,
                "kernel" => cfg.kernel = int(v)?,
                "rows" => cfg.rows = int(v)?,
                "cols" => cfg.cols = int(v)?,
                "seed" => cfg.seed = v.parse().map_err(|e| Error::Format(format!("seed={v}: {e}")))?,
                "rain_transform" => cfg.rain_transform = v.parse()?,
                "eth_scale" => cfg.eth_scale = v.parse().map_err(|e| Error::Format(format!("eth_scale={v}: {e}")))?,
                _ => return Err(Error::Format(format!("unknown model config key {k:?}"))),
            }
            seen.insert(k.to_string());
        }
        if seen.len() != 11 {
            return Err(Error::Format(format!("model config block has {} of 11 keys", seen.len())));
        }
        Ok(cfg)
    }

    /// Normalised `[1, C, in_frames, H, W]` input from the latest rain (and ETH) frames.
    pub fn assemble_input(&self, rain: &[GridFrame], eth: Option<&[GridFrame]>) -> Result<Tensor> {
        let c = self;
        match (c.in_channels, eth) {
            (1, Some(_)) => {
                return Err(Error::Argument("rain-only model was given ETH frames".into()));
            }
            (2, None) => return Err(Error::Argument("ETH model needs ETH frames".into())),
            _ => {}
        }
        let mut data = Vec::with_capacity(c.in_channels * c.in_frames * c.rows * c.cols);
        let mut push = |frames: &[GridFrame], var: Variable, map: &dyn Fn(f32) -> Real| -> Result<()> {
            if frames.len() != c.in_frames {
                return Err(Error::Argument(format!("expected {} {var} input frames, got {}", c.in_frames, frames.len())));
            }
            for f in frames {
                if f.variable != var || f.shape() != (c.rows, c.cols) {
                    return Err(Error::Argument(format!(
                        "input frame is {} {}x{}, model expects {var} {}x{}",
                        f.variable, f.rows, f.cols, c.rows, c.cols
                    )));
                }
                data.extend(f.values.iter().map(|&v| if f.is_nodata(v) { 0.0 } else { map(v) }));
            }
            Ok(())
        };
        push(rain, Variable::RainMmh, &|v| c.encode_rain(v as Real))?;
        if let Some(eth) = eth {
            let scale = c.eth_scale as Real;
            push(eth, Variable::EthKm, &|v| v as Real / scale)?;
        }
        Tensor::from_vec(&[1, c.in_channels, c.in_frames, c.rows, c.cols], data)
    }

    pub fn encode_rain(&self, v: Real) -> Real {
        match self.rain_transform {
            RainTransform::Raw => v,
            RainTransform::Log1p => v.ln_1p(),
        }
    }

    pub fn decode_rain(&self, v: Real) -> Real {
        match self.rain_transform {
            RainTransform::Raw => v,
            RainTransform::Log1p => v.exp_m1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

/// Built network: configuration plus parameters in a fixed layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet3d {
    pub config: ModelConfig,
    pub params: Vec<Parameter>,
    enc: Vec<[ConvSlot; 2]>,
    dec: Vec<[ConvSlot; 2]>,
    head: ConvSlot,
}

struct ConvRecord {
    input: Tensor,
    output: Tensor,
}

/// Activations kept by [`UNet3d::forward_cached`] for the backward pass.
pub struct ForwardCache {
    enc: Vec<[ConvRecord; 2]>,
    pools: Vec<MaxPool>,
    dec: Vec<Option<[ConvRecord; 2]>>,
    head_input: Tensor,
    head_output: Tensor,
}

impl UNet3d {
    /// Builds the network and draws He-uniform weights from the config seed; biases start at zero.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: [usize; 3], rng: &mut ChaCha8Rng| {
            let fan_in = cin * k[0] * k[1] * k[2];
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let n = cout * fan_in;
            let w: Vec<Real> = (0..n).map(|_| dist.sample(rng) as Real).collect();
            let slot = ConvSlot { weight: params.len(), bias: params.len() + 1 };
            params.push(Parameter::new(
                format!("{name}.weight"),
                Tensor::from_vec(&[cout, cin, k[0], k[1], k[2]], w).expect("conv weight shape"),
            ));
            params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])));
            slot
        };
        let k3 = [3, 3, 3];
        let mut enc = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let cin = if l == 0 { config.in_channels } else { config.channels(l - 1) };
            let c = config.channels(l);
            let a = conv(format!("enc{l}.conv1"), cin, c, k3, &mut rng);
            let b = conv(format!("enc{l}.conv2"), c, c, k3, &mut rng);
            enc.push([a, b]);
        }
        let mut dec = Vec::with_capacity(config.levels.saturating_sub(1));
        for l in 0..config.levels - 1 {
            let c = config.channels(l);
            let a = conv(format!("dec{l}.conv1"), config.channels(l + 1) + c, c, k3, &mut rng);
            let b = conv(format!("dec{l}.conv2"), c, c, k3, &mut rng);
            dec.push([a, b]);
        }
        let head = conv("head".into(), config.channels(0), config.out_frames, [config.in_frames, 1, 1], &mut rng);
        Ok(UNet3d { config: config.clone(), params, enc, dec, head })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn expected_input(&self, batch: usize) -> [usize; 5] {
        let c = &self.config;
        [batch, c.in_channels, c.in_frames, c.rows, c.cols]
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 5 || s[0] == 0 || s[1..] != self.expected_input(s[0])[1..] {
            return Err(Error::Argument(format!(
                "model expects input [B, {}, {}, {}, {}], got {:?}",
                self.config.in_channels, self.config.in_frames, self.config.rows, self.config.cols, s
            )));
        }
        Ok(s[0])
    }

    fn conv_relu(&self, x: Tensor, slot: ConvSlot) -> Result<ConvRecord> {
        let y = conv3d_forward(&x, &self.params[slot.weight].value, &self.params[slot.bias].value)?;
        Ok(ConvRecord { input: x, output: relu_forward(&y) })
    }

    /// Forward pass in the transformed rain space, keeping every activation for [`UNet3d::backward`].
    /// Output shape is `[B, out_frames, H, W]`.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let batch = self.check_input(x)?;
        let levels = self.config.levels;
        let mut enc: Vec<[ConvRecord; 2]> = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels - 1);
        for l in 0..levels {
            let input = if l == 0 {
                x.clone()
            } else {
                let pool = maxpool2_spatial_forward(&enc[l - 1][1].output)?;
                let out = pool.output.clone();
                pools.push(pool);
                out
            };
            let a = self.conv_relu(input, self.enc[l][0])?;
            let b = self.conv_relu(a.output.clone(), self.enc[l][1])?;
            enc.push([a, b]);
        }
        let mut h = enc[levels - 1][1].output.clone();
        let mut dec: Vec<Option<[ConvRecord; 2]>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
        for l in (0..levels - 1).rev() {
            let up = upsample2_nearest_forward(&h)?;
            let cat = concat_channels(&up, &enc[l][1].output)?;
            let a = self.conv_relu(cat, self.dec[l][0])?;
            let b = self.conv_relu(a.output.clone(), self.dec[l][1])?;
            h = b.output.clone();
            dec[l] = Some([a, b]);
        }
        let pre = conv3d_forward_padded(&h, &self.params[self.head.weight].value, &self.params[self.head.bias].value, [0, 0, 0])?;
        let head_output = relu_forward(&pre);
        let c = &self.config;
        let out = head_output.clone().reshape(&[batch, c.out_frames, c.rows, c.cols])?;
        out.ensure_finite("model output")?;
        Ok((out, ForwardCache { enc, pools, dec, head_input: h, head_output }))
    }

    /// Forward pass returning rain rates: the transformed-space output mapped back to mm/h.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (y, _) = self.forward_cached(x)?;
        Ok(match self.config.rain_transform {
            RainTransform::Raw => y,
            RainTransform::Log1p => y.map(|v| self.config.decode_rain(v)),
        })
    }

    fn conv_relu_backward(&mut self, g: &Tensor, rec: &ConvRecord, slot: ConvSlot) -> Result<Tensor> {
        let g = relu_backward(g, &rec.output);
        let grads = conv3d_backward(&g, &rec.input, &self.params[slot.weight].value)?;
        self.params[slot.weight].grad.add_assign(&grads.weight);
        self.params[slot.bias].grad.add_assign(&grads.bias);
        Ok(grads.input)
    }

    /// Accumulates parameter gradients for `grad_out` (shape of the forward output) and returns the input gradient.
    pub fn backward(&mut self, cache: &ForwardCache, grad_out: &Tensor) -> Result<Tensor> {
        let hs = cache.head_output.shape().to_vec();
        if grad_out.len() != cache.head_output.len() {
            return Err(Error::Argument(format!("output gradient {:?} does not match forward output", grad_out.shape())));
        }
        let g = grad_out.clone().reshape(&hs)?;
        let g = relu_backward(&g, &cache.head_output);
        let head = self.head;
        let hg = conv3d_backward_padded(&g, &cache.head_input, &self.params[head.weight].value, [0, 0, 0])?;
        self.params[head.weight].grad.add_assign(&hg.weight);
        self.params[head.bias].grad.add_assign(&hg.bias);
        let mut g = hg.input;

        let levels = self.config.levels;
        let mut skip: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
        for l in 0..levels - 1 {
            let [a, b] = cache.dec[l].as_ref().expect("decoder level cached");
            let slots = self.dec[l];
            g = self.conv_relu_backward(&g, b, slots[1])?;
            g = self.conv_relu_backward(&g, a, slots[0])?;
            let (g_up, g_skip) = split_channels(&g, self.config.channels(l + 1))?;
            skip[l] = Some(g_skip);
            g = upsample2_nearest_backward(&g_up)?;
        }
        for l in (0..levels).rev() {
            if let Some(s) = skip[l].take() {
                g.add_assign(&s);
            }
            let [a, b] = &cache.enc[l];
            let slots = self.enc[l];
            g = self.conv_relu_backward(&g, b, slots[1])?;
            g = self.conv_relu_backward(&g, a, slots[0])?;
            if l > 0 {
                g = maxpool2_spatial_backward(&g, &cache.pools[l - 1])?;
            }
        }
        Ok(g)
    }

    /// Normalised `[1, C, in_frames, H, W]` input from the latest rain (and ETH) frames.
    pub fn assemble_input(&self, rain: &[GridFrame], eth: Option<&[GridFrame]>) -> Result<Tensor> {
        self.config.assemble_input(rain, eth)
    }

    /// Nowcast frames for `k = 1..=out_frames`, stamped `last_input + 300·k`.
    pub fn predict_frames(&self, rain: &[GridFrame], eth: Option<&[GridFrame]>) -> Result<Vec<GridFrame>> {
        let x = self.assemble_input(rain, eth)?;
        let y = self.forward(&x)?;
        let last = rain.last().expect("validated non-empty");
        let plane = self.config.rows * self.config.cols;
        Ok((0..self.config.out_frames)
            .map(|k| GridFrame {
                variable: Variable::RainMmh,
                timestamp: last.timestamp + (k as i64 + 1) * CADENCE_S,
                values: y.data()[k * plane..][..plane].iter().map(|&v| v.max(0.0) as f32).collect(),
                ..last.clone()
            })
            .collect())
    }
}

/// Predicts the 18 frames following the first `in_frames` frames of `record`.
pub fn predict_sequence(checkpoint: &Checkpoint, record: &crate::gridio::SequenceRecord) -> Result<Vec<GridFrame>> {
    let model = checkpoint.to_model()?;
    let n = model.config.in_frames;
    let rain = record.rain_paths[..n].iter().map(crate::gridio::read_frame).collect::<Result<Vec<_>>>()?;
    let eth = if model.config.in_channels == 2 {
        Some(record.eth_paths[..n].iter().map(crate::gridio::read_frame).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    model.predict_frames(&rain, eth.as_deref())
}

/// Checks every parameter and input gradient of a freshly initialised model against central
/// differences, using an MSE loss on seeded uniform input in `[0, 1)` and a target within 0.01 of
/// the initial output. Biases are set to 0.05 so hidden units sit away from the ReLU kink.
pub fn gradcheck_model(config: &ModelConfig, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let model = UNet3d::build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| unit.sample(&mut rng) as Real).collect())
    };
    let x = random(&[1, config.in_channels, config.in_frames, config.rows, config.cols])?;
    let jitter = random(&[1, config.out_frames, config.rows, config.cols])?;
    let mut inputs: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|p| {
            let v = if p.name.ends_with("bias") { Tensor::full(p.value.shape(), 0.05) } else { p.value.clone() };
            (p.name.clone(), v)
        })
        .collect();
    inputs.push(("input".into(), x));
    let with = |ts: &[Tensor]| {
        let mut m = model.clone();
        for (p, t) in m.params.iter_mut().zip(ts) {
            p.value = t.clone();
        }
        m
    };
    // a target near the initial output keeps the loss, and with it the roundoff of each
    // loss evaluation, orders of magnitude below the gradients being checked
    let y0 = with(&inputs.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()).forward(&inputs[inputs.len() - 1].1)?;
    let target = Tensor::from_vec(y0.shape(), y0.data().iter().zip(jitter.data()).map(|(&y, &u)| y + 0.02 * (u - 0.5)).collect())?;
    let loss = |ts: &[Tensor]| {
        let (y, _) = with(ts).forward_cached(&ts[ts.len() - 1])?;
        mse_loss_forward(&y, &target)
    };
    let grads = |ts: &[Tensor]| {
        let mut m = with(ts);
        m.zero_grad();
        let (y, cache) = m.forward_cached(&ts[ts.len() - 1])?;
        let gx = m.backward(&cache, &mse_loss_backward(&y, &target)?)?;
        let mut out: Vec<Tensor> = m.params.iter().map(|p| p.grad.clone()).collect();
        out.push(gx);
        Ok(out)
    };
    gradcheck(&inputs, loss, grads, tolerance)
}

#[cfg(test)]
mod tests;
