//! Forecast verification: pixel errors, contingency scores, fractions skill score, joint histograms,
//! per-sample rankings and multi-model aggregation.
//!
//! Scores that cannot be computed are returned as [`Score::Undefined`] with a reason and are
//! skipped by every aggregate.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridio::GridFrame;
use crate::sampler::OUTPUT_FRAMES;

/// Lead index (1-based, 5 min steps) of the +30 min ranking.
pub const RANKING_LEAD: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Undefined {
    NoValidPixels,
    NoForecastEvents,
    NoObservedEvents,
    ZeroDenominator,
    NoSamples,
    TooFewModels,
}

impl Undefined {
    fn label(self) -> &'static str {
        match self {
            Undefined::NoValidPixels => "no_valid_pixels",
            Undefined::NoForecastEvents => "no_forecast_events",
            Undefined::NoObservedEvents => "no_observed_events",
            Undefined::ZeroDenominator => "zero_denominator",
            Undefined::NoSamples => "no_samples",
            Undefined::TooFewModels => "too_few_models",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Value(f64),
    Undefined(Undefined),
}

impl Score {
    pub fn value(self) -> Option<f64> {
        match self {
            Score::Value(v) => Some(v),
            Score::Undefined(_) => None,
        }
    }

    fn ratio(num: f64, den: f64, why: Undefined) -> Score {
        if den == 0.0 {
            Score::Undefined(why)
        } else {
            Score::Value(num / den)
        }
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::Value(v) => write!(f, "{v}"),
            Score::Undefined(u) => write!(f, "undefined:{}", u.label()),
        }
    }
}

impl FromStr for Score {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(reason) = s.strip_prefix("undefined:") {
            let all = [
                Undefined::NoValidPixels,
                Undefined::NoForecastEvents,
                Undefined::NoObservedEvents,
                Undefined::ZeroDenominator,
                Undefined::NoSamples,
                Undefined::TooFewModels,
            ];
            return all
                .into_iter()
                .find(|u| u.label() == reason)
                .map(Score::Undefined)
                .ok_or_else(|| format!("unknown undefined reason {reason:?}"));
        }
        s.parse::<f64>().map(Score::Value).map_err(|e| format!("bad score {s:?}: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub categorical_thresholds: Vec<f64>,
    pub fss_thresholds: Vec<f64>,
    pub fss_radii: Vec<usize>,
    /// Lead times in minutes reported as FSS matrices.
    pub fss_report_leads_min: Vec<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            categorical_thresholds: vec![0.1, 1.0, 2.5, 5.0],
            fss_thresholds: vec![0.1, 1.0, 2.5, 5.0, 10.0],
            fss_radii: vec![1, 4, 16],
            fss_report_leads_min: vec![20, 40, 60, 80],
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = |xs: &[f64]| xs.windows(2).all(|w| w[0] < w[1]) && xs.iter().all(|x| x.is_finite());
        if !increasing(&self.categorical_thresholds) || !increasing(&self.fss_thresholds) {
            return Err(Error::Config("verify thresholds must be finite and strictly increasing".into()));
        }
        if !self.fss_radii.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("verify.fss_radii must be strictly increasing".into()));
        }
        for &m in &self.fss_report_leads_min {
            if m == 0 || m % 5 != 0 || m / 5 > OUTPUT_FRAMES {
                return Err(Error::Config(format!("FSS report lead {m} min is not a multiple of 5 within the forecast horizon")));
            }
        }
        Ok(())
    }
}

fn check_pair(pred: &GridFrame, obs: &GridFrame) -> Result<()> {
    if pred.shape() != obs.shape() {
        return Err(Error::Argument(format!(
            "forecast {}x{} and observation {}x{} differ in shape",
            pred.rows, pred.cols, obs.rows, obs.cols
        )));
    }
    Ok(())
}

/// Pairs where neither side is nodata.
fn valid_pairs<'a>(pred: &'a GridFrame, obs: &'a GridFrame) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.values.iter().zip(&obs.values).filter(|(&p, &o)| !pred.is_nodata(p) && !obs.is_nodata(o)).map(|(&p, &o)| (p as f64, o as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub mae: Score,
    pub mse: Score,
    pub me: Score,
    pub n: usize,
}

pub fn pixel_metrics(pred: &GridFrame, obs: &GridFrame) -> Result<PixelMetrics> {
    check_pair(pred, obs)?;
    let (mut n, mut abs, mut sq, mut err) = (0usize, 0.0, 0.0, 0.0);
    for (p, o) in valid_pairs(pred, obs) {
        let d = p - o;
        n += 1;
        abs += d.abs();
        sq += d * d;
        err += d;
    }
    let nf = n as f64;
    Ok(PixelMetrics {
        mae: Score::ratio(abs, nf, Undefined::NoValidPixels),
        mse: Score::ratio(sq, nf, Undefined::NoValidPixels),
        me: Score::ratio(err, nf, Undefined::NoValidPixels),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContingencyTable {
    pub threshold: f64,
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyTable {
    pub fn empty(threshold: f64) -> Self {
        ContingencyTable { threshold, hits: 0, misses: 0, false_alarms: 0, correct_negatives: 0 }
    }

    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    /// Pools counts from another table at the same threshold.
    pub fn merge(&mut self, other: &ContingencyTable) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.false_alarms += other.false_alarms;
        self.correct_negatives += other.correct_negatives;
    }

    pub fn precision(&self) -> Score {
        Score::ratio(self.hits as f64, (self.hits + self.false_alarms) as f64, Undefined::NoForecastEvents)
    }

    pub fn recall(&self) -> Score {
        Score::ratio(self.hits as f64, (self.hits + self.misses) as f64, Undefined::NoObservedEvents)
    }

    /// (H − Hr) / (H + M + F − Hr) with Hr = (H + M)(H + F) / T.
    pub fn ets(&self) -> Score {
        let t = self.total() as f64;
        if t == 0.0 {
            return Score::Undefined(Undefined::NoValidPixels);
        }
        let (h, m, f) = (self.hits as f64, self.misses as f64, self.false_alarms as f64);
        let hr = (h + m) * (h + f) / t;
        Score::ratio(h - hr, h + m + f - hr, Undefined::ZeroDenominator)
    }
}

/// Events are values strictly above `threshold`; nodata pairs are skipped.
pub fn contingency(pred: &GridFrame, obs: &GridFrame, threshold: f64) -> Result<ContingencyTable> {
    check_pair(pred, obs)?;
    let mut t = ContingencyTable::empty(threshold);
    for (p, o) in valid_pairs(pred, obs) {
        match (p > threshold, o > threshold) {
            (true, true) => t.hits += 1,
            (false, true) => t.misses += 1,
            (true, false) => t.false_alarms += 1,
            (false, false) => t.correct_negatives += 1,
        }
    }
    Ok(t)
}

/// Numerator Σ(Pf − Po)² and denominator ΣPf² + ΣPo² of the fractions skill score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FssParts {
    pub threshold: f64,
    pub radius: usize,
    pub num: f64,
    pub den: f64,
}

impl FssParts {
    pub fn score(&self) -> Score {
        fss_from_sums(self.num, self.den)
    }
}

pub fn fss_from_sums(num: f64, den: f64) -> Score {
    if den == 0.0 {
        Score::Undefined(Undefined::NoForecastEvents)
    } else {
        Score::Value(1.0 - num / den)
    }
}

/// Summed-area table of the event indicator; nodata counts as no event.
fn event_table(frame: &GridFrame, threshold: f64) -> Vec<f64> {
    let (rows, cols) = frame.shape();
    let w = cols + 1;
    let mut sat = vec![0.0; (rows + 1) * w];
    for r in 0..rows {
        let mut run = 0.0;
        for c in 0..cols {
            let v = frame.values[r * cols + c];
            if !frame.is_nodata(v) && v as f64 > threshold {
                run += 1.0;
            }
            sat[(r + 1) * w + c + 1] = sat[r * w + c + 1] + run;
        }
    }
    sat
}

fn fractions_diff(sp: &[f64], so: &[f64], rows: usize, cols: usize, radius: usize) -> (f64, f64) {
    let w = cols + 1;
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..rows {
        let r0 = r.saturating_sub(radius);
        let r1 = (r + radius + 1).min(rows);
        for c in 0..cols {
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius + 1).min(cols);
            let area = ((r1 - r0) * (c1 - c0)) as f64;
            let window = |s: &[f64]| s[r1 * w + c1] - s[r0 * w + c1] - s[r1 * w + c0] + s[r0 * w + c0];
            let pf = window(sp) / area;
            let po = window(so) / area;
            num += (pf - po) * (pf - po);
            den += pf * pf + po * po;
        }
    }
    (num, den)
}

/// FSS sums for every threshold × radius, sharing one summed-area table per threshold.
pub fn fss_parts(pred: &GridFrame, obs: &GridFrame, thresholds: &[f64], radii: &[usize]) -> Result<Vec<FssParts>> {
    check_pair(pred, obs)?;
    let (rows, cols) = pred.shape();
    let mut out = Vec::with_capacity(thresholds.len() * radii.len());
    for &t in thresholds {
        let sp = event_table(pred, t);
        let so = event_table(obs, t);
        for &r in radii {
            let (num, den) = fractions_diff(&sp, &so, rows, cols, r);
            out.push(FssParts { threshold: t, radius: r, num, den });
        }
    }
    Ok(out)
}

/// Fractions skill score over (2r+1)² windows with border-clipped normalisation.
pub fn fss(pred: &GridFrame, obs: &GridFrame, threshold: f64, radius: usize) -> Result<Score> {
    Ok(fss_parts(pred, obs, &[threshold], &[radius])?[0].score())
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub edges_a: Vec<f64>,
    pub edges_b: Vec<f64>,
    /// Row-major (a bin, b bin) counts.
    pub counts: Vec<u64>,
    /// Valid pairs falling outside the edge range on either axis.
    pub overflow: u64,
}

impl JointHistogram {
    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * (self.edges_b.len() - 1) + j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Bin index with half-open bins, the last bin closed on the right.
fn bin_of(edges: &[f64], x: f64) -> Option<usize> {
    let last = *edges.last()?;
    if x < edges[0] || x > last || x.is_nan() {
        return None;
    }
    if x == last {
        return Some(edges.len() - 2);
    }
    Some(edges.partition_point(|&e| e <= x) - 1)
}

/// 2D co-occurrence counts of paired frames, e.g. reflectivity against echo top height.
pub fn joint_histogram(frames_a: &[GridFrame], frames_b: &[GridFrame], edges_a: &[f64], edges_b: &[f64]) -> Result<JointHistogram> {
    if frames_a.len() != frames_b.len() {
        return Err(Error::Argument(format!("joint histogram needs paired frames, got {} and {}", frames_a.len(), frames_b.len())));
    }
    for edges in [edges_a, edges_b] {
        if edges.len() < 2 || !edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Argument("histogram edges must be at least 2 strictly increasing values".into()));
        }
    }
    let nb = edges_b.len() - 1;
    let mut h =
        JointHistogram { edges_a: edges_a.to_vec(), edges_b: edges_b.to_vec(), counts: vec![0; (edges_a.len() - 1) * nb], overflow: 0 };
    for (a, b) in frames_a.iter().zip(frames_b) {
        check_pair(a, b)?;
        for (x, y) in valid_pairs(a, b) {
            match (bin_of(edges_a, x), bin_of(edges_b, y)) {
                (Some(i), Some(j)) => h.counts[i * nb + j] += 1,
                _ => h.overflow += 1,
            }
        }
    }
    Ok(h)
}

/// Edge header lines, then one comma-separated count row per `a` bin, then the overflow tally.
pub fn write_joint_histogram(h: &JointHistogram, path: impl AsRef<Path>) -> Result<()> {
    let join = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut text = format!("# edges_a,{}\n# edges_b,{}\n", join(&h.edges_a), join(&h.edges_b));
    for row in h.counts.chunks(h.edges_b.len() - 1) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    text.push_str(&format!("# overflow,{}\n", h.overflow));
    write_text(path, &text)
}

pub(crate) fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// All scores of one forecast lead for one test sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadScores {
    pub sample: i64,
    /// 1-based forecast step.
    pub lead: usize,
    pub pixel: PixelMetrics,
    pub obs_max: f64,
    pub obs_mean: f64,
    pub tables: Vec<ContingencyTable>,
    pub fss: Vec<FssParts>,
}

fn obs_summary(obs: &GridFrame) -> (f64, f64) {
    let (mut n, mut sum, mut max) = (0usize, 0.0, 0.0f64);
    for &v in obs.values.iter().filter(|&&v| !obs.is_nodata(v)) {
        n += 1;
        sum += v as f64;
        max = max.max(v as f64);
    }
    (max, if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Scores a forecast sequence against its observations, one entry per lead.
pub fn score_sequence(sample: i64, preds: &[GridFrame], obs: &[GridFrame], cfg: &VerifyConfig) -> Result<Vec<LeadScores>> {
    if preds.len() != obs.len() {
        return Err(Error::Data(format!("sample {sample}: {} forecast frames against {} observations", preds.len(), obs.len())));
    }
    preds
        .par_iter()
        .zip(obs)
        .enumerate()
        .map(|(i, (p, o))| {
            let (obs_max, obs_mean) = obs_summary(o);
            Ok(LeadScores {
                sample,
                lead: i + 1,
                pixel: pixel_metrics(p, o)?,
                obs_max,
                obs_mean,
                tables: cfg.categorical_thresholds.iter().map(|&t| contingency(p, o, t)).collect::<Result<_>>()?,
                fss: fss_parts(p, o, &cfg.fss_thresholds, &cfg.fss_radii)?,
            })
        })
        .collect()
}

const SCORE_HEADER: &str = "sample,lead,metric,threshold,scale,value";

/// Long-format per-sample scores: `sample,lead,metric,threshold,scale,value`.
pub fn write_scores(scores: &[LeadScores], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::from(SCORE_HEADER);
    text.push('\n');
    for s in scores {
        let mut row = |metric: &str, threshold: Option<f64>, scale: Option<usize>, value: String| {
            let t = threshold.map(|t| t.to_string()).unwrap_or_default();
            let r = scale.map(|r| r.to_string()).unwrap_or_default();
            text.push_str(&format!("{},{},{metric},{t},{r},{value}\n", s.sample, s.lead));
        };
        row("mae", None, None, s.pixel.mae.to_string());
        row("mse", None, None, s.pixel.mse.to_string());
        row("me", None, None, s.pixel.me.to_string());
        row("n_valid", None, None, s.pixel.n.to_string());
        row("obs_max", None, None, s.obs_max.to_string());
        row("obs_mean", None, None, s.obs_mean.to_string());
        for t in &s.tables {
            row("hits", Some(t.threshold), None, t.hits.to_string());
            row("misses", Some(t.threshold), None, t.misses.to_string());
            row("false_alarms", Some(t.threshold), None, t.false_alarms.to_string());
            row("correct_negatives", Some(t.threshold), None, t.correct_negatives.to_string());
        }
        for f in &s.fss {
            row("fss_num", Some(f.threshold), Some(f.radius), f.num.to_string());
            row("fss_den", Some(f.threshold), Some(f.radius), f.den.to_string());
        }
    }
    write_text(path, &text)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<LeadScores>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<LeadScores> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if i == 0 {
            if line != SCORE_HEADER {
                return Err(Error::Parse { line: 1, msg: format!("expected header {SCORE_HEADER:?}") });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(perr(format!("expected 6 fields, found {}", f.len())));
        }
        let sample: i64 = f[0].parse().map_err(|e| perr(format!("sample: {e}")))?;
        let lead: usize = f[1].parse().map_err(|e| perr(format!("lead: {e}")))?;
        let threshold = || f[3].parse::<f64>().map_err(|e| perr(format!("threshold: {e}")));
        let scale = || f[4].parse::<usize>().map_err(|e| perr(format!("scale: {e}")));
        let score = || f[5].parse::<Score>().map_err(&perr);
        let real = || f[5].parse::<f64>().map_err(|e| perr(format!("value: {e}")));
        let count = || f[5].parse::<u64>().map_err(|e| perr(format!("count: {e}")));
        if out.last().is_none_or(|s| (s.sample, s.lead) != (sample, lead)) {
            out.push(LeadScores {
                sample,
                lead,
                pixel: PixelMetrics {
                    mae: Score::Undefined(Undefined::NoSamples),
                    mse: Score::Undefined(Undefined::NoSamples),
                    me: Score::Undefined(Undefined::NoSamples),
                    n: 0,
                },
                obs_max: 0.0,
                obs_mean: 0.0,
                tables: Vec::new(),
                fss: Vec::new(),
            });
        }
        let s = out.last_mut().expect("pushed above");
        let table = |s: &mut LeadScores, t: f64| -> usize {
            match s.tables.iter().position(|x| x.threshold == t) {
                Some(i) => i,
                None => {
                    s.tables.push(ContingencyTable::empty(t));
                    s.tables.len() - 1
                }
            }
        };
        let parts = |s: &mut LeadScores, t: f64, r: usize| -> usize {
            match s.fss.iter().position(|x| x.threshold == t && x.radius == r) {
                Some(i) => i,
                None => {
                    s.fss.push(FssParts { threshold: t, radius: r, num: 0.0, den: 0.0 });
                    s.fss.len() - 1
                }
            }
        };
        match f[2] {
            "mae" => s.pixel.mae = score()?,
            "mse" => s.pixel.mse = score()?,
            "me" => s.pixel.me = score()?,
            "n_valid" => s.pixel.n = count()? as usize,
            "obs_max" => s.obs_max = real()?,
            "obs_mean" => s.obs_mean = real()?,
            "hits" | "misses" | "false_alarms" | "correct_negatives" => {
                let i = table(s, threshold()?);
                let c = count()?;
                let t = &mut s.tables[i];
                match f[2] {
                    "hits" => t.hits = c,
                    "misses" => t.misses = c,
                    "false_alarms" => t.false_alarms = c,
                    _ => t.correct_negatives = c,
                }
            }
            "fss_num" | "fss_den" => {
                let i = parts(s, threshold()?, scale()?);
                let v = real()?;
                if f[2] == "fss_num" {
                    s.fss[i].num = v;
                } else {
                    s.fss[i].den = v;
                }
            }
            other => return Err(perr(format!("unknown metric {other:?}"))),
        }
    }
    Ok(out)
}

/// Identifies one metric series.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveKey {
    pub metric: String,
    pub threshold: Option<f64>,
    /// FSS radius in pixels.
    pub scale: Option<usize>,
}

impl CurveKey {
    pub fn new(metric: &str, threshold: Option<f64>, scale: Option<usize>) -> Self {
        CurveKey { metric: metric.to_string(), threshold, scale }
    }

    /// File-name friendly label such as `fss_t2.5_r16`.
    pub fn label(&self) -> String {
        let mut s = self.metric.clone();
        if let Some(t) = self.threshold {
            s.push_str(&format!("_t{t}"));
        }
        if let Some(r) = self.scale {
            s.push_str(&format!("_r{r}"));
        }
        s
    }
}

/// One metric over leads 1..=18.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricCurve {
    pub key: CurveKey,
    pub values: Vec<Score>,
    /// Contributing samples (or models, for aggregates) per lead.
    pub n: Vec<usize>,
    pub undefined: Vec<usize>,
}

fn mean_of(values: impl Iterator<Item = Score>) -> (Score, usize, usize) {
    let (mut n, mut undefined, mut sum) = (0, 0, 0.0);
    for v in values {
        match v {
            Score::Value(x) => {
                n += 1;
                sum += x;
            }
            Score::Undefined(_) => undefined += 1,
        }
    }
    let mean = if n == 0 { Score::Undefined(Undefined::NoSamples) } else { Score::Value(sum / n as f64) };
    (mean, n, undefined)
}

/// Per-lead curves: sample-mean pixel errors, pooled and sample-mean contingency scores, pooled FSS.
pub fn build_curves(scores: &[LeadScores], cfg: &VerifyConfig) -> Result<Vec<MetricCurve>> {
    let mut by_lead: Vec<Vec<&LeadScores>> = vec![Vec::new(); OUTPUT_FRAMES];
    for s in scores {
        if s.lead == 0 || s.lead > OUTPUT_FRAMES {
            return Err(Error::Data(format!("sample {} has lead {} outside 1..={OUTPUT_FRAMES}", s.sample, s.lead)));
        }
        if s.tables.len() != cfg.categorical_thresholds.len() || s.fss.len() != cfg.fss_thresholds.len() * cfg.fss_radii.len() {
            return Err(Error::Data(format!("sample {} lead {} does not match the verify configuration", s.sample, s.lead)));
        }
        by_lead[s.lead - 1].push(s);
    }
    let curve = |key: CurveKey, f: &dyn Fn(&[&LeadScores]) -> (Score, usize, usize)| {
        let mut c = MetricCurve {
            key,
            values: Vec::with_capacity(OUTPUT_FRAMES),
            n: Vec::with_capacity(OUTPUT_FRAMES),
            undefined: Vec::with_capacity(OUTPUT_FRAMES),
        };
        for lead in &by_lead {
            let (v, n, u) = f(lead);
            c.values.push(v);
            c.n.push(n);
            c.undefined.push(u);
        }
        c
    };
    let pooled = |i: usize, lead: &[&LeadScores]| {
        let mut t = ContingencyTable::empty(cfg.categorical_thresholds[i]);
        for s in lead {
            t.merge(&s.tables[i]);
        }
        t
    };
    let undefined_if_empty = |score: Score, n: usize| {
        if n == 0 {
            (Score::Undefined(Undefined::NoSamples), 0, 0)
        } else {
            (score, n, usize::from(score.value().is_none()))
        }
    };
    let mut curves = vec![
        curve(CurveKey::new("mae", None, None), &|l| mean_of(l.iter().map(|s| s.pixel.mae))),
        curve(CurveKey::new("mse", None, None), &|l| mean_of(l.iter().map(|s| s.pixel.mse))),
        curve(CurveKey::new("me", None, None), &|l| mean_of(l.iter().map(|s| s.pixel.me))),
    ];
    for (i, &t) in cfg.categorical_thresholds.iter().enumerate() {
        curves.push(curve(CurveKey::new("precision", Some(t), None), &|l| undefined_if_empty(pooled(i, l).precision(), l.len())));
        curves.push(curve(CurveKey::new("recall", Some(t), None), &|l| undefined_if_empty(pooled(i, l).recall(), l.len())));
        curves.push(curve(CurveKey::new("ets", Some(t), None), &|l| undefined_if_empty(pooled(i, l).ets(), l.len())));
        curves.push(curve(CurveKey::new("ets_sample_mean", Some(t), None), &|l| mean_of(l.iter().map(|s| s.tables[i].ets()))));
    }
    for (k, f) in scores.first().map(|s| s.fss.clone()).unwrap_or_default().iter().enumerate() {
        curves.push(curve(CurveKey::new("fss", Some(f.threshold), Some(f.radius)), &|l| {
            let num: f64 = l.iter().map(|s| s.fss[k].num).sum();
            let den: f64 = l.iter().map(|s| s.fss[k].den).sum();
            undefined_if_empty(fss_from_sums(num, den), l.len())
        }));
    }
    Ok(curves)
}

/// Per-lead mean and sample standard deviation (divisor k − 1) across models, skipping undefined entries.
pub fn aggregate_models(curves: &[&MetricCurve]) -> Result<(MetricCurve, MetricCurve)> {
    let first = curves.first().ok_or_else(|| Error::Argument("aggregation needs at least one curve".into()))?;
    let leads = first.values.len();
    if let Some(bad) = curves.iter().find(|c| c.key != first.key || c.values.len() != leads) {
        return Err(Error::Argument(format!("cannot aggregate {} with {}", first.key.label(), bad.key.label())));
    }
    let mut mean = MetricCurve {
        key: first.key.clone(),
        values: Vec::with_capacity(leads),
        n: Vec::with_capacity(leads),
        undefined: Vec::with_capacity(leads),
    };
    let mut std = mean.clone();
    for i in 0..leads {
        let xs: Vec<f64> = curves.iter().filter_map(|c| c.values[i].value()).collect();
        let k = xs.len();
        let undefined = curves.len() - k;
        let (m, _, _) = mean_of(curves.iter().map(|c| c.values[i]));
        let s = match (m, k) {
            (Score::Value(m), k) if k >= 2 => Score::Value((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (k - 1) as f64).sqrt()),
            (Score::Value(_), _) => Score::Undefined(Undefined::TooFewModels),
            (u, _) => u,
        };
        for (c, v) in [(&mut mean, m), (&mut std, s)] {
            c.values.push(v);
            c.n.push(k);
            c.undefined.push(undefined);
        }
    }
    Ok((mean, std))
}

/// Observed intensity and per-model errors of one test sample at a fixed lead.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub sample: i64,
    pub max_rain: f64,
    pub mean_rain: f64,
    /// (mse, mae, me) per model, in input order.
    pub metrics: Vec<(Score, Score, Score)>,
}

/// One row per test sample at `lead`, in the sample order of the first model.
pub fn per_sample_ranking(models: &[(String, Vec<LeadScores>)], lead: usize) -> Result<Vec<RankingRow>> {
    let at_lead = |scores: &[LeadScores]| -> Vec<LeadScores> { scores.iter().filter(|s| s.lead == lead).cloned().collect() };
    let first = models.first().ok_or_else(|| Error::Argument("ranking needs at least one model".into()))?;
    let base = at_lead(&first.1);
    if base.is_empty() {
        return Err(Error::Data(format!("no scores at lead {lead}")));
    }
    let mut rows: Vec<RankingRow> = base
        .iter()
        .map(|s| RankingRow { sample: s.sample, max_rain: s.obs_max, mean_rain: s.obs_mean, metrics: Vec::with_capacity(models.len()) })
        .collect();
    for (name, scores) in models {
        let mine = at_lead(scores);
        if mine.len() != rows.len() {
            return Err(Error::Data(format!("model {name} has {} samples at lead {lead}, expected {}", mine.len(), rows.len())));
        }
        for (row, s) in rows.iter_mut().zip(mine) {
            if s.sample != row.sample {
                return Err(Error::Data(format!("model {name} scores sample {} where {} was expected", s.sample, row.sample)));
            }
            row.metrics.push((s.pixel.mse, s.pixel.mae, s.pixel.me));
        }
    }
    Ok(rows)
}

/// Row order by descending observed maximum, ties by sample.
pub fn rank_by_max(rows: &[RankingRow]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].max_rain.total_cmp(&rows[a].max_rain).then(rows[a].sample.cmp(&rows[b].sample)));
    order
}

pub fn write_ranking(rows: &[RankingRow], model_names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("sample,max_rain,mean_rain");
    for m in model_names {
        header.push_str(&format!(",{m}_mse,{m}_mae,{m}_me"));
    }
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        let mut line = format!("{},{},{}", r.sample, r.max_rain, r.mean_rain);
        for (mse, mae, me) in &r.metrics {
            line.push_str(&format!(",{mse},{mae},{me}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
