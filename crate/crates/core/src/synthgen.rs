//! Synthetic storms whose future intensity change is visible only in echo top height.
//!
//! Each Gaussian cell grows or decays as `exp(g·t)`. The ETH field over the cell carries
//! `eth_base + eth_gain·g` plus noise, so `g` can be read from ETH at any single instant
//! but not from one rain frame.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridio::{self, GridFrame, SequenceManifest, Variable, CADENCE_S, ETH_MAX_KM, SEQUENCE_LEN};
use crate::preprocess::ZRParams;
use crate::sampler::{build_sequences, rain_event_weight, Candidate, FrameIndex};

/// Rain below this is set to zero.
pub const RAIN_FLOOR_MMH: f64 = 0.01;
/// ETH is only reported where rain exceeds this.
pub const ETH_RAIN_MIN_MMH: f64 = 0.1;

/// Ring radii as fractions of the shorter grid side, with the ETH cap applied inside each ring.
const RINGS: [(f64, f32); 3] = [(0.2, 2.0), (0.32, 4.0), (0.44, 6.0)];
const RING_HALF_WIDTH_PX: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCell {
    /// Centre at t = 0, in pixels.
    pub row: f64,
    pub col: f64,
    /// Pixels per frame step.
    pub v_row: f64,
    pub v_col: f64,
    /// Peak rain rate at t = 0 in mm/h.
    pub amplitude: f64,
    pub sigma: f64,
    /// Growth rate per frame step.
    pub growth: f64,
}

impl SynthCell {
    /// Rain at frame `t`; intensity changes only after frame `onset`.
    fn rain_at(&self, r: f64, c: f64, t: f64, onset: f64) -> f64 {
        let dr = r - self.row - self.v_row * t;
        let dc = c - self.col - self.v_col * t;
        let growth = (self.growth * (t - onset).max(0.0)).exp();
        self.amplitude * growth * (-(dr * dr + dc * dc) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Ranges from which random events are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub min_cells: usize,
    pub max_cells: usize,
    /// Growth rates are drawn from ±`growth_max`.
    pub growth_max: f64,
    /// Each velocity component is drawn from ±`speed_max` pixels per step.
    pub speed_max: f64,
    pub amplitude_range: (f64, f64),
    /// σ range as fractions of the shorter grid side.
    pub sigma_frac_range: (f64, f64),
    pub eth_base: f64,
    pub eth_gain: f64,
    pub eth_noise_sd: f64,
    /// Frame from which intensity follows the growth rate; before it cells keep their amplitude
    /// while ETH already shows the growth. 0 applies growth from the first frame.
    pub growth_onset: usize,
    pub artifact_rings: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 64,
            cols: 64,
            min_cells: 1,
            max_cells: 4,
            growth_max: 0.08,
            speed_max: 0.6,
            amplitude_range: (3.0, 15.0),
            sigma_frac_range: (0.06, 0.12),
            eth_base: 3.0,
            eth_gain: 60.0,
            eth_noise_sd: 0.3,
            growth_onset: 0,
            artifact_rings: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthgen: {m}")));
        if self.rows == 0 || self.cols == 0 {
            return bad("grid must be non-empty");
        }
        if self.min_cells == 0 || self.min_cells > self.max_cells {
            return bad("cell count range must satisfy 1 <= min_cells <= max_cells");
        }
        let (a0, a1) = self.amplitude_range;
        let (s0, s1) = self.sigma_frac_range;
        if !(a0 > 0.0 && a0 <= a1 && s0 > 0.0 && s0 <= s1) {
            return bad("amplitude and sigma ranges must be positive and ordered");
        }
        if !(self.growth_max >= 0.0 && self.speed_max >= 0.0 && self.eth_noise_sd >= 0.0) {
            return bad("growth_max, speed_max and eth_noise_sd must be non-negative");
        }
        Ok(())
    }
}

/// Everything needed to regenerate one event bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEventParams {
    pub seed: u64,
    pub start_timestamp: i64,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<SynthCell>,
    pub eth_base: f64,
    pub eth_gain: f64,
    pub eth_noise_sd: f64,
    pub frames: usize,
    pub growth_onset: usize,
    pub artifact_rings: bool,
}

impl SynthEventParams {
    /// Draws cells from `cfg` with a generator seeded by `seed`.
    pub fn random(seed: u64, start_timestamp: i64, cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = cfg.rows.min(cfg.cols) as f64;
        let n = rng.gen_range(cfg.min_cells..=cfg.max_cells);
        let mut span = |lo: f64, hi: f64| if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let cells = (0..n)
            .map(|_| SynthCell {
                row: span(0.2, 0.8) * cfg.rows as f64,
                col: span(0.2, 0.8) * cfg.cols as f64,
                v_row: span(-cfg.speed_max, cfg.speed_max),
                v_col: span(-cfg.speed_max, cfg.speed_max),
                amplitude: span(cfg.amplitude_range.0, cfg.amplitude_range.1),
                sigma: span(cfg.sigma_frac_range.0, cfg.sigma_frac_range.1) * side,
                growth: span(-cfg.growth_max, cfg.growth_max),
            })
            .collect();
        Ok(SynthEventParams {
            seed,
            start_timestamp,
            rows: cfg.rows,
            cols: cfg.cols,
            cells,
            eth_base: cfg.eth_base,
            eth_gain: cfg.eth_gain,
            eth_noise_sd: cfg.eth_noise_sd,
            frames: SEQUENCE_LEN,
            growth_onset: cfg.growth_onset,
            artifact_rings: cfg.artifact_rings,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.frames == 0 {
            return Err(Error::Config("synthetic event needs a non-empty grid and frame count".into()));
        }
        if let Some(c) = self.cells.iter().find(|c| !(c.sigma > 0.0 && c.amplitude > 0.0)) {
            return Err(Error::Config(format!("synthetic cell needs sigma > 0 and amplitude > 0, got {} and {}", c.sigma, c.amplitude)));
        }
        if !(self.eth_noise_sd >= 0.0) {
            return Err(Error::Config("eth_noise_sd must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEvent {
    pub rain: Vec<GridFrame>,
    pub eth: Vec<GridFrame>,
}

fn ring_cap(r: usize, c: usize, rows: usize, cols: usize) -> Option<f32> {
    let d = ((r as f64 + 0.5 - rows as f64 / 2.0).powi(2) + (c as f64 + 0.5 - cols as f64 / 2.0).powi(2)).sqrt();
    let side = rows.min(cols) as f64;
    RINGS.iter().find(|(frac, _)| (d - frac * side).abs() <= RING_HALF_WIDTH_PX).map(|&(_, cap)| cap)
}

/// Renders the rain and ETH frames of one event.
pub fn gen_event(params: &SynthEventParams) -> Result<SynthEvent> {
    params.validate()?;
    let (rows, cols) = (params.rows, params.cols);
    // separate stream so that ETH noise never perturbs anything else
    let mut noise_rng = ChaCha8Rng::seed_from_u64(params.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, params.eth_noise_sd).map_err(|e| Error::Config(format!("eth noise: {e}")))?;
    let mut rain = Vec::with_capacity(params.frames);
    let mut eth = Vec::with_capacity(params.frames);
    for k in 0..params.frames {
        let t = k as f64;
        let ts = params.start_timestamp + k as i64 * CADENCE_S;
        let mut rv = vec![0f32; rows * cols];
        let mut ev = vec![0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let (mut total, mut dominant, mut peak) = (0.0, None, 0.0);
                for cell in &params.cells {
                    let x = cell.rain_at(r as f64, c as f64, t, params.growth_onset as f64);
                    total += x;
                    if x > peak {
                        peak = x;
                        dominant = Some(cell);
                    }
                }
                let i = r * cols + c;
                if total >= RAIN_FLOOR_MMH {
                    rv[i] = total as f32;
                }
                // one draw per pixel keeps the noise stream aligned across events
                let n = noise.sample(&mut noise_rng);
                if let Some(cell) = dominant.filter(|_| total > ETH_RAIN_MIN_MMH) {
                    let mut h = (params.eth_base + params.eth_gain * cell.growth + n).clamp(0.0, ETH_MAX_KM as f64) as f32;
                    if params.artifact_rings {
                        if let Some(cap) = ring_cap(r, c, rows, cols) {
                            h = h.min(cap);
                        }
                    }
                    ev[i] = h;
                }
            }
        }
        rain.push(GridFrame::new(Variable::RainMmh, ts, rows, cols, rv)?);
        eth.push(GridFrame::new(Variable::EthKm, ts, rows, cols, ev)?);
    }
    Ok(SynthEvent { rain, eth })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub synth: SynthConfig,
    /// Training events, one per day from `first_day`.
    pub n_events: usize,
    /// Held-out events, one per day on the same calendar dates of the following year.
    pub test_events: usize,
    pub seed: u64,
    /// Unix time of the first event start.
    pub first_start: i64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            synth: SynthConfig::default(),
            n_events: 16,
            test_events: 4,
            seed: 0,
            first_start: Utc.with_ymd_and_hms(2021, 4, 1, 12, 0, 0).unwrap().timestamp(),
        }
    }
}

impl DatasetConfig {
    /// Start times: training events first, then test events one year later.
    pub fn starts(&self) -> Result<Vec<i64>> {
        let year = crate::sampler::year_of(self.first_start);
        let day = 86_400;
        let train: Vec<i64> = (0..self.n_events as i64).map(|i| self.first_start + i * day).collect();
        let test_first = Utc
            .timestamp_opt(self.first_start, 0)
            .single()
            .and_then(|d| d.with_year(year + 1))
            .ok_or_else(|| Error::Config("first_start cannot be moved one year ahead".into()))?
            .timestamp();
        let test: Vec<i64> = (0..self.test_events as i64).map(|i| test_first + i * day).collect();
        if let Some(&t) = train.last() {
            if crate::sampler::year_of(t) != year {
                return Err(Error::Config(format!("{} daily training events overflow calendar year {year}", self.n_events)));
            }
        }
        if let Some(&t) = test.last() {
            if crate::sampler::year_of(t) != year + 1 {
                return Err(Error::Config(format!("{} daily test events overflow calendar year {}", self.test_events, year + 1)));
            }
        }
        Ok(train.into_iter().chain(test).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub events: Vec<SynthEventParams>,
    pub index: FrameIndex,
    /// Fold labels are left unassigned.
    pub manifest: SequenceManifest,
    pub index_path: PathBuf,
    pub manifest_path: PathBuf,
}

pub const INDEX_FILE: &str = "index.tsv";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes `frames/{rain,eth}_<ts>.rfgd`, `index.tsv` and `manifest.tsv` under `out_dir`.
/// Event i uses seed `cfg.seed + i`.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<SynthDataset> {
    cfg.synth.validate()?;
    let out_dir = out_dir.as_ref();
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let starts = cfg.starts()?;
    let zr = ZRParams::default();
    let generated: Vec<(SynthEventParams, Vec<(i64, PathBuf, PathBuf)>, Candidate)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, &start)| {
            let params = SynthEventParams::random(cfg.seed.wrapping_add(i as u64), start, &cfg.synth)?;
            let event = gen_event(&params)?;
            let mut files = Vec::with_capacity(event.rain.len());
            for (r, e) in event.rain.iter().zip(&event.eth) {
                let rp = frames_dir.join(format!("rain_{}.rfgd", r.timestamp));
                let ep = frames_dir.join(format!("eth_{}.rfgd", e.timestamp));
                gridio::write_frame(r, &rp)?;
                gridio::write_frame(e, &ep)?;
                files.push((r.timestamp, rp, ep));
            }
            let weight = rain_event_weight(&event.rain[0], &zr)?;
            Ok((params, files, Candidate { timestamp: start, weight }))
        })
        .collect::<Result<_>>()?;
    let mut index = FrameIndex::default();
    let mut events = Vec::with_capacity(generated.len());
    let mut candidates = Vec::with_capacity(generated.len());
    for (params, files, cand) in generated {
        for (ts, r, e) in files {
            index.insert(ts, r, e);
        }
        events.push(params);
        candidates.push(cand);
    }
    let report = build_sequences(&candidates, &index);
    let index_path = out_dir.join(INDEX_FILE);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    index.write(&index_path)?;
    gridio::write_manifest(&report.manifest, &manifest_path)?;
    Ok(SynthDataset { events, index, manifest: report.manifest, index_path, manifest_path })
}

/// Pearson correlation of paired samples; `None` for fewer than two pairs or zero variance.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs[..n].iter().zip(&ys[..n]) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}
