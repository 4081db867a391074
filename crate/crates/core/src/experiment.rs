//! Seed-paired comparison of models trained with and without the ETH channel.
//!
//! Directory layout under the experiment output directory:
//!
//! ```text
//! models/<model>.unck, models/<model>.log.csv
//! eval/<model>.csv                      per-sample scores (see verify::write_scores)
//! report/curves/*.csv                   per-lead mean and std per group
//! report/diffs/*.csv                    with-ETH minus without-ETH differences
//! report/fss/*.csv                      FSS matrices per report lead
//! report/cases/<timestamp>/*.ppm|.csv   rendered case study
//! report/summary.txt
//! ```
//!
//! Model `i` of either group uses seed `seeds[i]` and validation fold `i`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::{advection_nowcast, persistence, MotionParams};
use crate::error::{Error, Result};
use crate::gridio::{self, Fold, GridFrame, SequenceManifest, SequenceRecord, ETH_MAX_KM};
use crate::preprocess::{rain_to_dbz, ZRParams};
use crate::sampler::OUTPUT_FRAMES;
use crate::unet3d::{
    load_samples, read_checkpoint, train_on_samples, write_checkpoint, write_training_log, Checkpoint, ModelConfig, Sample, TrainHyper,
    UNet3d,
};
use crate::verify::{
    aggregate_models, build_curves, joint_histogram, per_sample_ranking, rank_by_max, read_scores, score_sequence, write_joint_histogram,
    write_ranking, write_scores, write_text, CurveKey, LeadScores, MetricCurve, Score, VerifyConfig, RANKING_LEAD,
};

/// Rain colour breakpoints in mm/h; values below the first are white.
pub const COLOR_BREAKPOINTS: [f64; 7] = [0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0];
const COLORS: [[u8; 3]; 8] =
    [[255, 255, 255], [200, 230, 255], [130, 190, 250], [40, 120, 230], [40, 180, 60], [250, 220, 40], [240, 120, 20], [200, 20, 40]];
/// Case-study leads (+30, +60, +90 min).
pub const CASE_LEADS: [usize; 3] = [6, 12, 18];
/// Best-model selection: FSS at this threshold, radius and lead.
pub const SELECTION_THRESHOLD: f64 = 2.5;
pub const SELECTION_RADIUS: usize = 16;
pub const SELECTION_LEAD: usize = 6;

pub const PERSISTENCE: &str = "persistence";
pub const ADVECTION: &str = "advection";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    WithEth,
    WithoutEth,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::WithEth, Group::WithoutEth];

    pub fn name(self) -> &'static str {
        match self {
            Group::WithEth => "with_eth",
            Group::WithoutEth => "without_eth",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Group::WithEth => 2,
            Group::WithoutEth => 1,
        }
    }

    pub fn model_name(self, i: usize) -> String {
        format!("{}_{i}", self.name())
    }

    /// Group and index of a model name such as `with_eth_3`.
    pub fn parse_model(name: &str) -> Option<(Group, usize)> {
        Group::ALL
            .into_iter()
            .find_map(|g| name.strip_prefix(g.name()).and_then(|rest| rest.strip_prefix('_')).and_then(|i| i.parse().ok()).map(|i| (g, i)))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown group {s:?}, expected with_eth or without_eth")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    /// Manifest with fold labels assigned.
    pub manifest: PathBuf,
    /// Template; `in_channels` and `seed` are set per model.
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub seeds: Vec<u64>,
    pub verify: VerifyConfig,
    pub motion: MotionParams,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("experiment seeds must be distinct".into()));
        }
        if self.seeds.len() > u8::MAX as usize {
            return Err(Error::Config("too many models for the fold labels".into()));
        }
        self.model.validate()?;
        self.hyper.validate()?;
        self.verify.validate()
    }

    pub fn n_models(&self) -> usize {
        self.seeds.len()
    }

    pub fn model_config(&self, group: Group, i: usize) -> ModelConfig {
        ModelConfig { in_channels: group.in_channels(), seed: self.seeds[i], ..self.model.clone() }
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }

    pub fn checkpoint_path(&self, group: Group, i: usize) -> PathBuf {
        self.models_dir().join(format!("{}.unck", group.model_name(i)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub name: String,
    pub index: usize,
    pub seed: u64,
    /// Written checkpoint; `None` when training failed numerically.
    pub checkpoint: Option<PathBuf>,
    pub best_val_mse: Option<f64>,
    pub epochs: usize,
    /// Numeric failure message, also set when training stopped early but kept a checkpoint.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRun {
    pub group: Group,
    pub models: Vec<ModelRun>,
}

impl GroupRun {
    pub fn survivors(&self) -> impl Iterator<Item = &ModelRun> {
        self.models.iter().filter(|m| m.checkpoint.is_some())
    }
}

/// Trains every model of `group`, writing checkpoints and logs under `models/`.
pub fn run_group(plan: &ExperimentPlan, group: Group) -> Result<GroupRun> {
    plan.validate()?;
    let manifest = gridio::read_manifest(&plan.manifest)?;
    run_group_on(plan, group, &manifest)
}

fn run_group_on(plan: &ExperimentPlan, group: Group, manifest: &SequenceManifest) -> Result<GroupRun> {
    let config = plan.model_config(group, 0);
    let mut by_fold: BTreeMap<u8, Vec<Sample>> = BTreeMap::new();
    let folded: Vec<&SequenceRecord> = manifest.records.iter().filter(|r| matches!(r.fold, Fold::Index(_))).collect();
    for (rec, sample) in folded.iter().zip(load_samples(folded.iter().copied(), &config)?) {
        if let Fold::Index(f) = rec.fold {
            by_fold.entry(f).or_default().push(sample);
        }
    }
    let dir = plan.models_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut models = Vec::with_capacity(plan.n_models());
    for i in 0..plan.n_models() {
        let fold = i as u8;
        let val: Vec<Sample> = by_fold.get(&fold).cloned().unwrap_or_default();
        if val.is_empty() {
            return Err(Error::Config(format!("validation fold {fold} for {} is empty", group.model_name(i))));
        }
        let train: Vec<Sample> = by_fold.iter().filter(|(f, _)| **f != fold).flat_map(|(_, s)| s.iter().cloned()).collect();
        let name = group.model_name(i);
        let model = UNet3d::build(&plan.model_config(group, i))?;
        let run = match train_on_samples(model, &train, &val, &plan.hyper) {
            Ok(out) => {
                let path = plan.checkpoint_path(group, i);
                write_checkpoint(&out.checkpoint, &path)?;
                write_training_log(&out.log, dir.join(format!("{name}.log.csv")))?;
                ModelRun {
                    name,
                    index: i,
                    seed: plan.seeds[i],
                    checkpoint: Some(path),
                    best_val_mse: Some(out.best_val_mse),
                    epochs: out.log.last().map_or(0, |r| r.epoch),
                    note: out.aborted,
                }
            }
            Err(Error::Numeric(m)) => {
                // a checkpoint left by an earlier run must not be evaluated as this one
                let stale = plan.checkpoint_path(group, i);
                if stale.exists() {
                    fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
                }
                ModelRun { name, index: i, seed: plan.seeds[i], checkpoint: None, best_val_mse: None, epochs: 0, note: Some(m) }
            }
            Err(e) => return Err(e),
        };
        models.push(run);
    }
    Ok(GroupRun { group, models })
}

/// Frames of one test sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub start: i64,
    pub rain: Vec<GridFrame>,
    pub eth: Vec<GridFrame>,
}

impl TestCase {
    pub fn load(rec: &SequenceRecord) -> Result<Self> {
        Ok(TestCase {
            start: rec.start_timestamp,
            rain: rec.rain_paths.iter().map(gridio::read_frame).collect::<Result<_>>()?,
            eth: rec.eth_paths.iter().map(gridio::read_frame).collect::<Result<_>>()?,
        })
    }

    /// Observed frames after the first `in_frames`.
    pub fn observations(&self, in_frames: usize) -> Result<&[GridFrame]> {
        if self.rain.len() < in_frames + OUTPUT_FRAMES {
            return Err(Error::Data(format!(
                "test sequence {} has {} frames, need {}",
                self.start,
                self.rain.len(),
                in_frames + OUTPUT_FRAMES
            )));
        }
        Ok(&self.rain[in_frames..in_frames + OUTPUT_FRAMES])
    }
}

pub fn load_test_cases(manifest: &SequenceManifest) -> Result<Vec<TestCase>> {
    manifest.with_fold(Fold::Test).map(TestCase::load).collect()
}

/// Anything that turns the input frames of a test case into 18 nowcast frames.
#[derive(Debug, Clone, Copy)]
pub enum Forecaster<'a> {
    Model(&'a UNet3d),
    Persistence,
    Advection(MotionParams),
    /// Returns the observations themselves.
    Truth,
}

impl Forecaster<'_> {
    pub fn forecast(&self, case: &TestCase, in_frames: usize) -> Result<Vec<GridFrame>> {
        let obs = case.observations(in_frames)?;
        let inputs = &case.rain[..in_frames];
        let last = inputs.last().ok_or_else(|| Error::Argument("forecast needs at least one input frame".into()))?;
        match self {
            Forecaster::Model(m) => {
                let eth = (m.config.in_channels == 2).then(|| &case.eth[..in_frames]);
                m.predict_frames(inputs, eth)
            }
            Forecaster::Persistence => Ok(persistence(last, OUTPUT_FRAMES)),
            Forecaster::Advection(p) => advection_nowcast(inputs, p, OUTPUT_FRAMES),
            Forecaster::Truth => Ok(obs.to_vec()),
        }
    }
}

/// Scores a forecaster on every test case.
pub fn evaluate(forecaster: Forecaster<'_>, cases: &[TestCase], in_frames: usize, cfg: &VerifyConfig) -> Result<Vec<LeadScores>> {
    let per_case: Vec<Vec<LeadScores>> = cases
        .par_iter()
        .map(|c| score_sequence(c.start, &forecaster.forecast(c, in_frames)?, c.observations(in_frames)?, cfg))
        .collect::<Result<_>>()?;
    Ok(per_case.into_iter().flatten().collect())
}

/// Scores every checkpoint on the test cases; all checkpoints must share grid and input geometry.
pub fn evaluate_group(
    checkpoints: &[(String, Checkpoint)],
    cases: &[TestCase],
    cfg: &VerifyConfig,
) -> Result<Vec<(String, Vec<LeadScores>)>> {
    let models: Vec<(String, UNet3d)> = checkpoints.iter().map(|(n, c)| Ok((n.clone(), c.to_model()?))).collect::<Result<_>>()?;
    if let Some((_, first)) = models.first() {
        let geometry = |m: &UNet3d| (m.config.rows, m.config.cols, m.config.in_frames, m.config.out_frames);
        let g0 = geometry(first);
        if let Some((name, _)) = models.iter().find(|(_, m)| geometry(m) != g0) {
            return Err(Error::Config(format!("checkpoint {name} differs in geometry from {}", models[0].0)));
        }
        if let Some(c) = cases.iter().find(|c| c.rain.first().is_some_and(|f| f.shape() != (g0.0, g0.1))) {
            return Err(Error::Config(format!("test sequence {} does not match the {}x{} model grid", c.start, g0.0, g0.1)));
        }
    }
    models.iter().map(|(n, m)| Ok((n.clone(), evaluate(Forecaster::Model(m), cases, m.config.in_frames, cfg)?))).collect()
}

/// Checkpoints named `<group>_<i>.unck` in `models_dir`, ordered by group then index.
pub fn list_checkpoints(models_dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let dir = models_dir.as_ref();
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".unck")) else {
            continue;
        };
        if let Some(key) = Group::parse_model(stem) {
            found.push((key, stem.to_string(), path.clone()));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, n, p)| (n, p)).collect())
}

/// Evaluates every checkpoint under `models/` and both baselines on the TEST sequences, writing
/// `eval/<name>.csv` and a dBZ/ETH joint histogram of the test inputs. Returns the evaluated names.
pub fn evaluate_plan(plan: &ExperimentPlan) -> Result<Vec<String>> {
    let manifest = gridio::read_manifest(&plan.manifest)?;
    let cases = load_test_cases(&manifest)?;
    if cases.is_empty() {
        return Err(Error::Config("manifest has no TEST sequences to evaluate".into()));
    }
    let dir = plan.eval_dir();
    let checkpoints: Vec<(String, Checkpoint)> =
        list_checkpoints(plan.models_dir())?.into_iter().map(|(n, p)| Ok((n, read_checkpoint(p)?))).collect::<Result<_>>()?;
    if checkpoints.is_empty() {
        return Err(Error::Data(format!("no checkpoints in {}", plan.models_dir().display())));
    }
    let mut names = Vec::new();
    for (name, scores) in evaluate_group(&checkpoints, &cases, &plan.verify)? {
        write_scores(&scores, dir.join(format!("{name}.csv")))?;
        names.push(name);
    }
    let n_in = plan.model.in_frames;
    for (name, f) in [(PERSISTENCE, Forecaster::Persistence), (ADVECTION, Forecaster::Advection(plan.motion))] {
        write_scores(&evaluate(f, &cases, n_in, &plan.verify)?, dir.join(format!("{name}.csv")))?;
        names.push(name.to_string());
    }
    let zr = ZRParams::default();
    let mut dbz = Vec::new();
    let mut eth = Vec::new();
    for c in &cases {
        for (r, e) in c.rain[..n_in].iter().zip(&c.eth[..n_in]) {
            dbz.push(rain_to_dbz(r, &zr)?);
            eth.push(e.clone());
        }
    }
    let dbz_edges: Vec<f64> = (0..=14).map(|i| i as f64 * 5.0).collect();
    let eth_edges: Vec<f64> = (0..=16).map(|i| i as f64).collect();
    write_joint_histogram(&joint_histogram(&dbz, &eth, &dbz_edges, &eth_edges)?, dir.join("joint_dbz_eth.hist.csv"))?;
    Ok(names)
}

fn list_eval(eval_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(eval_dir).map_err(|e| Error::io(eval_dir, e))? {
        let path = entry.map_err(|e| Error::io(eval_dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(stem) = name.strip_suffix(".csv").filter(|s| !s.contains('.')) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    // group members in index order, then baselines by name
    out.sort_by_key(|(n, _)| match Group::parse_model(n) {
        Some((g, i)) => (0, g, i, String::new()),
        None => (1, Group::WithEth, 0, n.clone()),
    });
    Ok(out)
}

/// Per-model scores from an `eval/` directory.
pub fn read_eval_dir(eval_dir: impl AsRef<Path>) -> Result<Vec<(String, Vec<LeadScores>)>> {
    list_eval(eval_dir.as_ref())?.into_iter().map(|(n, p)| Ok((n, read_scores(p)?))).collect()
}

fn curve_value(curves: &[MetricCurve], key: &CurveKey, lead: usize) -> Result<Score> {
    curves
        .iter()
        .find(|c| &c.key == key)
        .map(|c| c.values[lead - 1])
        .ok_or_else(|| Error::Config(format!("no {} curve available", key.label())))
}

/// Index of the model with the highest FSS at the selection threshold, radius and lead.
/// Undefined scores lose; the first maximum wins.
pub fn select_best(models: &[(String, Vec<MetricCurve>)]) -> Result<Option<usize>> {
    let key = CurveKey::new("fss", Some(SELECTION_THRESHOLD), Some(SELECTION_RADIUS));
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, curves)) in models.iter().enumerate() {
        let v = curve_value(curves, &key, SELECTION_LEAD)?.value().unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    Ok(best.map(|(i, _)| i))
}

/// Mean of the defined values of `curve` over leads `from..=to`.
pub fn lead_mean(curve: &MetricCurve, from: usize, to: usize) -> Score {
    let xs: Vec<f64> = curve.values[from - 1..to].iter().filter_map(|s| s.value()).collect();
    if xs.is_empty() {
        Score::Undefined(crate::verify::Undefined::NoSamples)
    } else {
        Score::Value(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Headline numbers of one model, as written to `curves/models.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHeadline {
    pub name: String,
    /// Mean MSE over +30..+90 min.
    pub mse_late: Score,
    /// Mean MSE over +5..+45 min.
    pub mse_early: Score,
    pub selection_fss: Score,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedPair {
    pub index: usize,
    pub with_eth: Score,
    pub without_eth: Score,
}

impl SeedPair {
    pub fn with_eth_better(&self) -> bool {
        matches!((self.with_eth, self.without_eth), (Score::Value(a), Score::Value(b)) if a < b)
    }
}

/// Everything the summary states, each value also present in a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub models: Vec<ModelHeadline>,
    pub pairs: Vec<SeedPair>,
    /// Mean over samples of (with − without) at +30 min for mse, mae, me.
    pub mean_sample_diff: Vec<(String, Score)>,
    pub best: Vec<(Group, String)>,
    /// Group-level mean of `mse_early`, including baselines by name.
    pub group_mse_early: Vec<(String, Score)>,
    pub group_mse_late: Vec<(String, Score)>,
}

fn curve_rows(name: &str, mean: &MetricCurve, std: &MetricCurve, out: &mut String) {
    for lead in 0..mean.values.len() {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{},{}",
            mean.key.metric,
            mean.key.threshold.map(|t| t.to_string()).unwrap_or_default(),
            mean.key.scale.map(|r| r.to_string()).unwrap_or_default(),
            (lead + 1) * 5,
            mean.values[lead],
            std.values[lead],
            mean.n[lead]
        );
    }
}

fn score_mean(xs: impl Iterator<Item = Score>) -> Score {
    let v: Vec<f64> = xs.filter_map(|s| s.value()).collect();
    if v.is_empty() {
        Score::Undefined(crate::verify::Undefined::NoSamples)
    } else {
        Score::Value(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn diff(a: Score, b: Score) -> Score {
    match (a, b) {
        (Score::Value(x), Score::Value(y)) => Score::Value(x - y),
        (Score::Undefined(u), _) | (_, Score::Undefined(u)) => Score::Undefined(u),
    }
}

/// Builds the report bundle (curves, diffs, FSS matrices, summary) from per-model score files.
pub fn compare_groups(eval_dir: impl AsRef<Path>, report_dir: impl AsRef<Path>, cfg: &VerifyConfig) -> Result<Report> {
    let report_dir = report_dir.as_ref();
    let scores = read_eval_dir(eval_dir)?;
    if scores.is_empty() {
        return Err(Error::Data("no evaluation files to compare".into()));
    }
    let curves: Vec<(String, Vec<MetricCurve>)> =
        scores.iter().map(|(n, s)| Ok((n.clone(), build_curves(s, cfg)?))).collect::<Result<_>>()?;
    let key_order: Vec<CurveKey> = curves[0].1.iter().map(|c| c.key.clone()).collect();
    for (name, c) in &curves {
        if c.iter().map(|c| &c.key).ne(key_order.iter()) {
            return Err(Error::Argument(format!("model {name} was scored with different metrics")));
        }
    }
    // groups: the two model groups plus each baseline on its own
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for g in Group::ALL {
        let members: Vec<usize> =
            curves.iter().enumerate().filter(|(_, (n, _))| Group::parse_model(n).is_some_and(|(mg, _)| mg == g)).map(|(i, _)| i).collect();
        if !members.is_empty() {
            groups.push((g.name().to_string(), members));
        }
    }
    for (i, (n, _)) in curves.iter().enumerate() {
        if Group::parse_model(n).is_none() {
            groups.push((n.clone(), vec![i]));
        }
    }

    let mut aggregated: BTreeMap<String, Vec<(MetricCurve, MetricCurve)>> = BTreeMap::new();
    let mut all_curves = String::from("group,metric,threshold,scale,lead_min,mean,std,n\n");
    for (gname, members) in &groups {
        let mut text = String::from("group,metric,threshold,scale,lead_min,mean,std,n\n");
        let mut agg = Vec::new();
        for k in 0..key_order.len() {
            let refs: Vec<&MetricCurve> = members.iter().map(|&i| &curves[i].1[k]).collect();
            let (mean, std) = aggregate_models(&refs)?;
            curve_rows(gname, &mean, &std, &mut text);
            agg.push((mean, std));
        }
        all_curves.push_str(&text[text.find('\n').unwrap() + 1..]);
        write_text(report_dir.join("curves").join(format!("{gname}.csv")), &text)?;
        aggregated.insert(gname.clone(), agg);
    }
    write_text(report_dir.join("curves").join("all.csv"), &all_curves)?;

    let mse_key = CurveKey::new("mse", None, None);
    let mse_index = key_order.iter().position(|k| k == &mse_key).expect("mse curve is always built");
    let models: Vec<ModelHeadline> = curves
        .iter()
        .map(|(n, c)| {
            Ok(ModelHeadline {
                name: n.clone(),
                mse_late: lead_mean(&c[mse_index], 6, OUTPUT_FRAMES),
                mse_early: lead_mean(&c[mse_index], 1, 9),
                selection_fss: curve_value(c, &CurveKey::new("fss", Some(SELECTION_THRESHOLD), Some(SELECTION_RADIUS)), SELECTION_LEAD)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::from("model,mse_30_90min,mse_5_45min,fss_t2.5_r16_30min\n");
    for m in &models {
        let _ = writeln!(text, "{},{},{},{}", m.name, m.mse_late, m.mse_early, m.selection_fss);
    }
    write_text(report_dir.join("curves").join("models.csv"), &text)?;

    let mut group_mse_early = Vec::new();
    let mut group_mse_late = Vec::new();
    let mut text = String::from("group,mse_30_90min,mse_5_45min\n");
    for (gname, members) in &groups {
        let late = score_mean(members.iter().map(|&i| models[i].mse_late));
        let early = score_mean(members.iter().map(|&i| models[i].mse_early));
        let _ = writeln!(text, "{gname},{late},{early}");
        group_mse_late.push((gname.clone(), late));
        group_mse_early.push((gname.clone(), early));
    }
    write_text(report_dir.join("curves").join("groups.csv"), &text)?;

    let index_of = |g: Group, i: usize| curves.iter().position(|(n, _)| n == &g.model_name(i));
    let mut pairs = Vec::new();
    let mut text = String::from("pair,with_eth_mse_30_90min,without_eth_mse_30_90min,with_eth_better\n");
    for i in 0.. {
        let (Some(a), Some(b)) = (index_of(Group::WithEth, i), index_of(Group::WithoutEth, i)) else {
            if curves.iter().any(|(n, _)| Group::parse_model(n).is_some_and(|(_, j)| j > i)) {
                continue;
            }
            break;
        };
        let p = SeedPair { index: i, with_eth: models[a].mse_late, without_eth: models[b].mse_late };
        let _ = writeln!(text, "{i},{},{},{}", p.with_eth, p.without_eth, p.with_eth_better());
        pairs.push(p);
    }
    write_text(report_dir.join("curves").join("pairs.csv"), &text)?;

    // per-sample differences at +30 min
    let with: Vec<&(String, Vec<LeadScores>)> =
        scores.iter().filter(|(n, _)| Group::parse_model(n).is_some_and(|(g, _)| g == Group::WithEth)).collect();
    let without: Vec<&(String, Vec<LeadScores>)> =
        scores.iter().filter(|(n, _)| Group::parse_model(n).is_some_and(|(g, _)| g == Group::WithoutEth)).collect();
    let mut mean_sample_diff = Vec::new();
    if !with.is_empty() && !without.is_empty() {
        let rows_of = |set: &[&(String, Vec<LeadScores>)]| {
            let owned: Vec<(String, Vec<LeadScores>)> = set.iter().map(|&x| x.clone()).collect();
            per_sample_ranking(&owned, RANKING_LEAD)
        };
        let rw = rows_of(&with)?;
        let ro = rows_of(&without)?;
        if rw.iter().map(|r| r.sample).ne(ro.iter().map(|r| r.sample)) {
            return Err(Error::Argument("groups were evaluated on different samples".into()));
        }
        let mut text = String::from("sample,max_rain,mean_rain,metric,with_eth,without_eth,diff\n");
        let names = ["mse", "mae", "me"];
        let mut sums: Vec<Vec<Score>> = vec![Vec::new(); 3];
        for (a, b) in rw.iter().zip(&ro) {
            for (k, name) in names.iter().enumerate() {
                let pick = |m: &(Score, Score, Score)| [m.0, m.1, m.2][k];
                let va = score_mean(a.metrics.iter().map(pick));
                let vb = score_mean(b.metrics.iter().map(pick));
                let d = diff(va, vb);
                sums[k].push(d);
                let _ = writeln!(text, "{},{},{},{name},{va},{vb},{d}", a.sample, a.max_rain, a.mean_rain);
            }
        }
        write_text(report_dir.join("diffs").join("per_sample_30min.csv"), &text)?;
        let mut text = String::from("metric,mean_diff,n_samples\n");
        for (k, name) in names.iter().enumerate() {
            let m = score_mean(sums[k].iter().copied());
            let _ = writeln!(text, "{name},{m},{}", sums[k].iter().filter(|s| s.value().is_some()).count());
            mean_sample_diff.push((name.to_string(), m));
        }
        write_text(report_dir.join("diffs").join("summary.csv"), &text)?;

        let (ga, gb) = (&aggregated[Group::WithEth.name()], &aggregated[Group::WithoutEth.name()]);
        let mut text = String::from("metric,threshold,scale,lead_min,with_eth,without_eth,diff\n");
        for (k, key) in key_order.iter().enumerate() {
            for lead in 0..OUTPUT_FRAMES {
                let (a, b) = (ga[k].0.values[lead], gb[k].0.values[lead]);
                let _ = writeln!(
                    text,
                    "{},{},{},{},{a},{b},{}",
                    key.metric,
                    key.threshold.map(|t| t.to_string()).unwrap_or_default(),
                    key.scale.map(|r| r.to_string()).unwrap_or_default(),
                    (lead + 1) * 5,
                    diff(a, b)
                );
            }
        }
        write_text(report_dir.join("diffs").join("by_lead.csv"), &text)?;
    }

    // every model's errors at +30 min, with observed intensity, for scatter plots
    let ranking = per_sample_ranking(&scores, RANKING_LEAD)?;
    let order = rank_by_max(&ranking);
    let sorted: Vec<_> = order.iter().map(|&i| ranking[i].clone()).collect();
    let names: Vec<String> = scores.iter().map(|(n, _)| n.clone()).collect();
    write_ranking(&sorted, &names, report_dir.join("diffs").join("ranking_30min.csv"))?;

    for (gname, agg) in &aggregated {
        for &lead_min in &cfg.fss_report_leads_min {
            let lead = lead_min / 5;
            let mut text = String::from("threshold");
            for r in &cfg.fss_radii {
                let _ = write!(text, ",r{r}_mean,r{r}_std");
            }
            text.push('\n');
            for &t in &cfg.fss_thresholds {
                text.push_str(&t.to_string());
                for &r in &cfg.fss_radii {
                    let k = key_order
                        .iter()
                        .position(|k| k == &CurveKey::new("fss", Some(t), Some(r)))
                        .ok_or_else(|| Error::Argument(format!("no FSS curve for {t} mm/h, r={r}")))?;
                    let _ = write!(text, ",{},{}", agg[k].0.values[lead - 1], agg[k].1.values[lead - 1]);
                }
                text.push('\n');
            }
            write_text(report_dir.join("fss").join(format!("{gname}_{lead_min}min.csv")), &text)?;
        }
    }

    let mut best = Vec::new();
    for g in Group::ALL {
        let members: Vec<(String, Vec<MetricCurve>)> =
            curves.iter().filter(|(n, _)| Group::parse_model(n).is_some_and(|(mg, _)| mg == g)).cloned().collect();
        if let Some(i) = select_best(&members)? {
            best.push((g, members[i].0.clone()));
        }
    }
    let mut text = String::from("group,model\n");
    for (g, m) in &best {
        let _ = writeln!(text, "{g},{m}");
    }
    write_text(report_dir.join("curves").join("best.csv"), &text)?;

    let report = Report { models, pairs, mean_sample_diff, best, group_mse_early, group_mse_late };
    write_text(report_dir.join("summary.txt"), &summary_text(&report))?;
    Ok(report)
}

fn summary_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Mean MSE per group (curves/groups.csv)");
    for ((g, late), (_, early)) in r.group_mse_late.iter().zip(&r.group_mse_early) {
        let _ = writeln!(s, "  {g:<12} +30..+90 min {late}   +5..+45 min {early}");
    }
    if !r.pairs.is_empty() {
        let wins = r.pairs.iter().filter(|p| p.with_eth_better()).count();
        let _ = writeln!(s, "\nSeed pairs, MSE over +30..+90 min (curves/pairs.csv)");
        for p in &r.pairs {
            let _ = writeln!(s, "  pair {}: with_eth {} without_eth {}", p.index, p.with_eth, p.without_eth);
        }
        let _ = writeln!(s, "  with_eth lower in {wins} of {} pairs", r.pairs.len());
    }
    if !r.mean_sample_diff.is_empty() {
        let _ = writeln!(s, "\nMean per-sample difference with_eth - without_eth at +30 min (diffs/summary.csv)");
        for (m, v) in &r.mean_sample_diff {
            let _ = writeln!(s, "  {m}: {v}");
        }
    }
    if !r.best.is_empty() {
        let _ = writeln!(s, "\nBest model by FSS at 2.5 mm/h, r=16, +30 min (curves/best.csv)");
        for (g, m) in &r.best {
            let _ = writeln!(s, "  {g}: {m}");
        }
    }
    s
}

pub fn rain_color(v: f32) -> [u8; 3] {
    let bin = COLOR_BREAKPOINTS.iter().filter(|&&b| v as f64 >= b).count();
    COLORS[bin]
}

/// Grey level with 0 km black and 16 km white.
pub fn eth_gray(h: f32) -> u8 {
    ((h / ETH_MAX_KM).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary portable pixmap (P6).
pub fn encode_ppm(rows: usize, cols: usize, pixel: impl Fn(usize) -> [u8; 3]) -> Vec<u8> {
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for i in 0..rows * cols {
        out.extend_from_slice(&pixel(i));
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn frame_max(f: &GridFrame) -> f64 {
    f.values.iter().filter(|&&v| !f.is_nodata(v)).fold(0f64, |m, &v| m.max(v as f64))
}

/// One rendered panel and the maximum it shows.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub name: String,
    pub lead_min: Option<usize>,
    pub max_value: f64,
    pub unit: &'static str,
    pub file: PathBuf,
}

/// Renders observation and model panels at `leads`, the last ETH and rain inputs, and `panels.csv`.
pub fn render_case(
    case: &TestCase,
    models: &[(String, &UNet3d)],
    in_frames: usize,
    leads: &[usize],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<Panel>> {
    let out_dir = out_dir.as_ref();
    let obs = case.observations(in_frames)?;
    if let Some(&bad) = leads.iter().find(|&&l| l == 0 || l > obs.len()) {
        return Err(Error::Data(format!("case {} has no frame for lead {bad}", case.start)));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut panels = Vec::new();
    let mut rain_panel = |name: &str, lead: Option<usize>, f: &GridFrame| -> Result<()> {
        let file = out_dir.join(match lead {
            Some(l) => format!("{name}_t+{}.ppm", l * 5),
            None => format!("{name}.ppm"),
        });
        write_bytes(&file, &encode_ppm(f.rows, f.cols, |i| rain_color(f.values[i])))?;
        panels.push(Panel { name: name.to_string(), lead_min: lead.map(|l| l * 5), max_value: frame_max(f), unit: "mm/h", file });
        Ok(())
    };
    rain_panel("rain_input", None, &case.rain[in_frames - 1])?;
    for &l in leads {
        rain_panel("observation", Some(l), &obs[l - 1])?;
    }
    for (name, m) in models {
        let pred = Forecaster::Model(m).forecast(case, in_frames)?;
        for &l in leads {
            rain_panel(name, Some(l), &pred[l - 1])?;
        }
    }
    let eth = &case.eth[in_frames - 1];
    let file = out_dir.join("eth_input.ppm");
    write_bytes(&file, &encode_ppm(eth.rows, eth.cols, |i| [eth_gray(eth.values[i]); 3]))?;
    panels.push(Panel { name: "eth_input".into(), lead_min: None, max_value: frame_max(eth), unit: "km", file });
    let mut text = String::from("panel,lead_min,max_value,unit,file\n");
    for p in &panels {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            p.name,
            p.lead_min.map(|l| l.to_string()).unwrap_or_default(),
            p.max_value,
            p.unit,
            p.file.file_name().and_then(|n| n.to_str()).unwrap_or_default()
        );
    }
    write_text(out_dir.join("panels.csv"), &text)?;
    Ok(panels)
}

/// Renders the `n_cases` test sequences with the highest observed maximum at +30 min, using the best
/// model of each group. Returns the case directories.
pub fn render_top_cases(
    manifest: &SequenceManifest,
    models_dir: &Path,
    eval_dir: &Path,
    report_dir: &Path,
    cfg: &VerifyConfig,
    n_cases: usize,
) -> Result<Vec<PathBuf>> {
    let scores = read_eval_dir(eval_dir)?;
    let mut chosen: Vec<(String, UNet3d)> = Vec::new();
    for g in Group::ALL {
        let members: Vec<(String, Vec<MetricCurve>)> = scores
            .iter()
            .filter(|(n, _)| Group::parse_model(n).is_some_and(|(mg, _)| mg == g))
            .map(|(n, s)| Ok((n.clone(), build_curves(s, cfg)?)))
            .collect::<Result<_>>()?;
        if let Some(i) = select_best(&members)? {
            let name = &members[i].0;
            let model = read_checkpoint(models_dir.join(format!("{name}.unck")))?.to_model()?;
            chosen.push((name.clone(), model));
        }
    }
    let in_frames = chosen.first().map_or(crate::gridio::SEQUENCE_LEN - OUTPUT_FRAMES, |(_, m)| m.config.in_frames);
    let ranking = per_sample_ranking(&scores, RANKING_LEAD)?;
    let order = rank_by_max(&ranking);
    let records: BTreeMap<i64, &SequenceRecord> = manifest.with_fold(Fold::Test).map(|r| (r.start_timestamp, r)).collect();
    let refs: Vec<(String, &UNet3d)> = chosen.iter().map(|(n, m)| (n.clone(), m)).collect();
    let mut dirs = Vec::new();
    for &i in order.iter().take(n_cases) {
        let ts = ranking[i].sample;
        let rec = records.get(&ts).ok_or_else(|| Error::Data(format!("scored sample {ts} is not a TEST sequence of the manifest")))?;
        let dir = report_dir.join("cases").join(ts.to_string());
        render_case(&TestCase::load(rec)?, &refs, in_frames, &CASE_LEADS, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub runs: Vec<GroupRun>,
    pub report: Report,
    pub cases: Vec<PathBuf>,
}

/// Trains both groups, evaluates models and baselines, then writes the report bundle with one case study.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let manifest = gridio::read_manifest(&plan.manifest)?;
    let runs: Vec<GroupRun> = Group::ALL.into_iter().map(|g| run_group_on(plan, g, &manifest)).collect::<Result<_>>()?;
    evaluate_plan(plan)?;
    let report = compare_groups(plan.eval_dir(), plan.report_dir(), &plan.verify)?;
    let cases = render_top_cases(&manifest, &plan.models_dir(), &plan.eval_dir(), &plan.report_dir(), &plan.verify, 1)?;
    Ok(ExperimentOutcome { runs, report, cases })
}
