//! Command-line front end: one binary, one subcommand per pipeline stage.
//!
//! Parameters come from a `key = value` config file (`--config`) overridden by `--set key=value`;
//! input and output locations are subcommand flags. Every key is listed by `ethcast --help`.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use crate::autotensor::{layer_gradchecks, GradcheckReport};
use crate::baselines::{advection_nowcast, persistence, MotionParams};
use crate::error::{Error, Result};
use crate::experiment::{self, compare_groups, evaluate_plan, render_top_cases, ExperimentPlan, Group};
use crate::gridio::{self, Fold};
use crate::preprocess::{preprocess_eth, preprocess_rain, ClutterParams, CropSpec, PreprocessConfig, StructuringElement, ZRParams};
use crate::sampler::{assign_folds, build_sequences, rank_candidates, FrameIndex, SamplerConfig, TestYear, OUTPUT_FRAMES};
use crate::synthgen::{gen_dataset, DatasetConfig};
use crate::unet3d::{gradcheck_model, predict_sequence, read_checkpoint, ModelConfig, RainTransform, TrainHyper};
use crate::verify::VerifyConfig;

/// Every configurable parameter, with defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub synth: DatasetConfig,
    pub zr: ZRParams,
    pub clutter: ClutterParams,
    /// 0 disables cropping.
    pub crop_rows: usize,
    pub crop_cols: usize,
    /// `None` centres the crop window.
    pub crop_row_offset: Option<usize>,
    pub crop_col_offset: Option<usize>,
    pub sampler: SamplerConfig,
    pub sampler_seed: u64,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub seeds: Vec<u64>,
    pub motion: MotionParams,
    pub verify: VerifyConfig,
    pub render_cases: usize,
    pub gradcheck_model: ModelConfig,
    pub gradcheck_seed: u64,
    pub gradcheck_tolerance: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            synth: DatasetConfig::default(),
            zr: ZRParams::default(),
            clutter: ClutterParams::default(),
            crop_rows: 0,
            crop_cols: 0,
            crop_row_offset: None,
            crop_col_offset: None,
            sampler: SamplerConfig::default(),
            sampler_seed: 0,
            model: ModelConfig::default(),
            train: TrainHyper::default(),
            seeds: (0..8).collect(),
            motion: MotionParams::default(),
            verify: VerifyConfig::default(),
            render_cases: 1,
            gradcheck_model: ModelConfig { in_channels: 2, levels: 2, base_channels: 4, rows: 8, cols: 8, ..ModelConfig::default() },
            gradcheck_seed: 0,
            gradcheck_tolerance: 1e-4,
        }
    }
}

impl Settings {
    pub fn preprocess(&self) -> Result<PreprocessConfig> {
        let crop = match (self.crop_rows, self.crop_cols) {
            (0, 0) => None,
            (0, _) | (_, 0) => return Err(Error::Config("preprocess.crop_rows and crop_cols must both be 0 or both positive".into())),
            (rows, cols) => Some(CropSpec {
                rows,
                cols,
                offsets: match (self.crop_row_offset, self.crop_col_offset) {
                    (None, None) => None,
                    (Some(r), Some(c)) => Some((r, c)),
                    _ => return Err(Error::Config("crop offsets must both be set or both be 'center'".into())),
                },
            }),
        };
        self.zr.validate()?;
        self.clutter.validate()?;
        Ok(PreprocessConfig { zr: self.zr, clutter: self.clutter, crop })
    }

    pub fn plan(&self, manifest: PathBuf, out_dir: PathBuf) -> ExperimentPlan {
        ExperimentPlan {
            manifest,
            model: self.model.clone(),
            hyper: self.train.clone(),
            seeds: self.seeds.clone(),
            verify: self.verify.clone(),
            motion: self.motion,
            out_dir,
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = KEYS.iter().find(|k| k.name == key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        (k.set)(self, value.trim()).map_err(|m| Error::Config(format!("{key}: {m}")))
    }

    /// Applies a config text; `origin` names it in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!("{at}: expected 'key = value', got {line:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{at}: key {key} given twice")));
            }
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{at}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Config text listing every key with its current value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for k in KEYS {
            let ns = k.name.split('.').next().unwrap_or("");
            if ns != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = ns;
            }
            let _ = writeln!(s, "# {}\n{} = {}", k.doc, k.name, (k.get)(self));
        }
        s
    }
}

/// Text form of one config value.
trait Value: Sized {
    fn render(&self) -> String;
    fn parse(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse {s:?}: {e}"))
            }
        }
    )*};
}
plain_value!(usize, u64, f64, bool);

impl<T: Value> Value for Vec<T> {
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|x| T::parse(x.trim())).collect()
    }
}

/// `center` or a pixel offset.
impl Value for Option<usize> {
    fn render(&self) -> String {
        self.map_or("center".into(), |v| v.to_string())
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "center" {
            Ok(None)
        } else {
            usize::parse(s).map(Some)
        }
    }
}

fn parse_time(s: &str) -> std::result::Result<i64, String> {
    if let Ok(t) = s.parse::<i64>() {
        return Ok(t);
    }
    DateTime::parse_from_rfc3339(s).map(|d| d.timestamp()).map_err(|e| format!("expected unix seconds or RFC 3339 time, got {s:?}: {e}"))
}

fn render_time(t: i64) -> String {
    Utc.timestamp_opt(t, 0).single().map_or(t.to_string(), |d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
}

/// Wrapper so times render as RFC 3339.
struct Time;
impl Time {
    fn render(t: &i64) -> String {
        render_time(*t)
    }
    fn parse(s: &str) -> std::result::Result<i64, String> {
        parse_time(s)
    }
}

struct Cutoff;
impl Cutoff {
    fn render(t: &Option<i64>) -> String {
        t.map_or("none".into(), render_time)
    }
    fn parse(s: &str) -> std::result::Result<Option<i64>, String> {
        if s == "none" {
            Ok(None)
        } else {
            parse_time(s).map(Some)
        }
    }
}

impl Value for TestYear {
    fn render(&self) -> String {
        match self {
            TestYear::Last => "last".into(),
            TestYear::Disabled => "none".into(),
            TestYear::Year(y) => y.to_string(),
        }
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "last" => Ok(TestYear::Last),
            "none" => Ok(TestYear::Disabled),
            y => y.parse().map(TestYear::Year).map_err(|_| format!("expected last, none or a year, got {s:?}")),
        }
    }
}

impl Value for StructuringElement {
    fn render(&self) -> String {
        match self {
            StructuringElement::Square3 => "square3".into(),
            StructuringElement::Cross3 => "cross3".into(),
        }
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "square3" => Ok(StructuringElement::Square3),
            "cross3" => Ok(StructuringElement::Cross3),
            _ => Err(format!("expected square3 or cross3, got {s:?}")),
        }
    }
}

impl Value for RainTransform {
    fn render(&self) -> String {
        self.to_string().to_ascii_lowercase()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
}

pub struct Key {
    pub name: &'static str,
    pub doc: &'static str,
    get: fn(&Settings) -> String,
    set: fn(&mut Settings, &str) -> std::result::Result<(), String>,
}

macro_rules! key {
    ($name:literal, $doc:literal, $($path:tt).+) => {
        key!($name, $doc, Value, $($path).+)
    };
    ($name:literal, $doc:literal, $codec:ident, $($path:tt).+) => {
        Key {
            name: $name,
            doc: $doc,
            get: |s| $codec::render(&s.$($path).+),
            set: |s, v| {
                s.$($path).+ = $codec::parse(v)?;
                Ok(())
            },
        }
    };
}

/// The complete set of config keys.
pub static KEYS: &[Key] = &[
    key!("synthgen.rows", "grid rows of generated frames", synth.synth.rows),
    key!("synthgen.cols", "grid columns of generated frames", synth.synth.cols),
    key!("synthgen.min_cells", "fewest rain cells per event", synth.synth.min_cells),
    key!("synthgen.max_cells", "most rain cells per event", synth.synth.max_cells),
    key!("synthgen.growth_max", "cell growth rates are drawn from +-growth_max per step", synth.synth.growth_max),
    key!("synthgen.speed_max", "cell velocity components are drawn from +-speed_max px per step", synth.synth.speed_max),
    key!("synthgen.amplitude_min", "smallest initial cell peak, mm/h", synth.synth.amplitude_range.0),
    key!("synthgen.amplitude_max", "largest initial cell peak, mm/h", synth.synth.amplitude_range.1),
    key!("synthgen.sigma_frac_min", "smallest cell width as a fraction of the short grid side", synth.synth.sigma_frac_range.0),
    key!("synthgen.sigma_frac_max", "largest cell width as a fraction of the short grid side", synth.synth.sigma_frac_range.1),
    key!("synthgen.eth_base", "echo-top height of non-growing rain, km", synth.synth.eth_base),
    key!("synthgen.eth_gain", "km of echo-top height per unit growth rate", synth.synth.eth_gain),
    key!("synthgen.eth_noise_sd", "standard deviation of echo-top noise, km", synth.synth.eth_noise_sd),
    key!(
        "synthgen.growth_onset",
        "frame from which rain intensity follows the growth rate (ETH shows it throughout)",
        synth.synth.growth_onset
    ),
    key!("synthgen.artifact_rings", "cap echo tops in three range rings", synth.synth.artifact_rings),
    key!("synthgen.n_events", "training events, one per day", synth.n_events),
    key!("synthgen.test_events", "test events, placed one year after the training events", synth.test_events),
    key!("synthgen.seed", "seed of event i is seed + i", synth.seed),
    key!("synthgen.first_start", "start of the first event (RFC 3339 or unix seconds)", Time, synth.first_start),
    key!("preprocess.zr_a", "Z-R coefficient a in Z = a R^b", zr.a),
    key!("preprocess.zr_b", "Z-R exponent b in Z = a R^b", zr.b),
    key!("preprocess.rain_threshold_mmh", "rain rate defining the clutter mask, mm/h", clutter.rain_threshold_mmh),
    key!("preprocess.erosion_iters", "erosions in the clutter opening", clutter.erosion_iters),
    key!("preprocess.dilation_iters", "dilations in the clutter opening", clutter.dilation_iters),
    key!("preprocess.structuring_element", "square3 or cross3", clutter.element),
    key!("preprocess.crop_rows", "rows of the crop window, 0 for no crop", crop_rows),
    key!("preprocess.crop_cols", "columns of the crop window, 0 for no crop", crop_cols),
    key!("preprocess.crop_row_offset", "first cropped row, or center", crop_row_offset),
    key!("preprocess.crop_col_offset", "first cropped column, or center", crop_col_offset),
    key!("sampler.top_k_per_year", "sequence starts kept per calendar year", sampler.top_k_per_year),
    key!("sampler.n_folds", "validation folds over training days", sampler.n_folds),
    key!("sampler.test_year", "held-out year: last, none or a year", sampler.test_year),
    key!("sampler.cutoff_start", "ignore starts before this time (RFC 3339, unix seconds or none)", Cutoff, sampler.cutoff_start),
    key!("sampler.seed", "seed of the day-to-fold shuffle", sampler_seed),
    key!("unet3d.levels", "encoder levels", model.levels),
    key!("unet3d.base_channels", "channels of the first level, doubled per level", model.base_channels),
    key!("unet3d.rain_transform", "raw or log1p rain scaling", model.rain_transform),
    key!("unet3d.eth_scale", "echo-top heights are divided by this, km", model.eth_scale),
    key!("unet3d.rows", "model grid rows", model.rows),
    key!("unet3d.cols", "model grid columns", model.cols),
    key!("train.lr", "initial Adam learning rate", train.lr),
    key!("train.batch", "sequences per mini-batch", train.batch),
    key!("train.max_epochs", "epoch limit", train.max_epochs),
    key!("train.patience_early", "validation rounds without improvement before stopping", train.patience_early),
    key!("train.plateau_patience", "validation rounds without improvement before decaying the rate", train.plateau_patience),
    key!("train.plateau_factor", "learning-rate decay factor", train.plateau_factor),
    key!("train.val_every", "epochs between validation rounds", train.val_every),
    key!("experiment.seeds", "one model per seed and group; model i validates on fold i", seeds),
    key!("baselines.block", "block-matching block size, px", motion.block),
    key!("baselines.search_radius", "block-matching search radius, px", motion.search_radius),
    key!("verify.categorical_thresholds", "precision/recall/ETS thresholds, mm/h", verify.categorical_thresholds),
    key!("verify.fss_thresholds", "FSS thresholds, mm/h", verify.fss_thresholds),
    key!("verify.fss_radii", "FSS neighbourhood radii, px", verify.fss_radii),
    key!("verify.fss_report_leads_min", "lead times reported as FSS matrices, min", verify.fss_report_leads_min),
    key!("render.cases", "test sequences rendered, highest observed maximum at +30 min first", render_cases),
    key!("gradcheck.levels", "levels of the checked model", gradcheck_model.levels),
    key!("gradcheck.base_channels", "base channels of the checked model", gradcheck_model.base_channels),
    key!("gradcheck.rows", "grid rows of the checked model", gradcheck_model.rows),
    key!("gradcheck.cols", "grid columns of the checked model", gradcheck_model.cols),
    key!("gradcheck.in_channels", "input channels of the checked model, 1 or 2", gradcheck_model.in_channels),
    key!("gradcheck.seed", "seed of the checked inputs", gradcheck_seed),
    key!("gradcheck.tolerance", "largest accepted relative error", gradcheck_tolerance),
];

/// Help section enumerating every key and its default.
pub fn keys_help() -> String {
    let defaults = Settings::default();
    let mut s = String::from("Config keys (`key = value` lines, `#` comments):\n");
    for k in KEYS {
        let _ = writeln!(s, "  {:<34} {} [default: {}]", k.name, k.doc, (k.get)(&defaults));
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "ethcast", version, about = "Radar nowcasting with an optional echo-top-height channel")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for data-parallel stages (outputs do not depend on it).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: frames/, index.tsv and manifest.tsv under --out.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert, declutter and crop every indexed frame into --out/frames, writing --out/index.tsv.
    Preprocess {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select top-weighted 22-frame sequences from an index and assign folds, writing a manifest.
    Sample {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every experiment seed for both groups into --run/models.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Train only this group (with_eth or without_eth).
        #[arg(long)]
        group: Option<Group>,
    },
    /// Write a checkpoint's forecasts as --out/<start>/rain_<valid time>.rfgd.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        target: ForecastTarget,
    },
    /// Write persistence or advection forecasts as --out/<start>/rain_<valid time>.rfgd.
    Baseline {
        /// persistence or advection
        #[arg(long)]
        method: String,
        #[command(flatten)]
        target: ForecastTarget,
    },
    /// Score every checkpoint in --run/models plus both baselines on the TEST sequences into --run/eval.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Aggregate --run/eval into the report bundle under --run/report.
    Compare {
        #[arg(long)]
        run: PathBuf,
    },
    /// Render case studies of the best model per group into --run/report/cases.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Check analytic gradients of every layer and of a small model against finite differences.
    Gradcheck,
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct ForecastTarget {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sequences to forecast: TEST or a fold number.
    #[arg(long, default_value = "TEST")]
    fold: String,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen { .. } => "synth-gen",
            Command::Preprocess { .. } => "preprocess",
            Command::Sample { .. } => "sample",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Baseline { .. } => "baseline",
            Command::Verify { .. } => "verify",
            Command::Compare { .. } => "compare",
            Command::Render { .. } => "render",
            Command::Gradcheck => "gradcheck",
            Command::ShowConfig => "show-config",
        }
    }
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(keys_help()).after_help(keys_help())
}

/// Settings from the optional config file and `--set` overrides, in that order.
pub fn load_settings(config: Option<&Path>, overrides: &[String]) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        s.apply_text(&text, &path.display().to_string())?;
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        s.set(k.trim(), v)?;
    }
    Ok(s)
}

/// Parses `args` (program name first), runs the subcommand and returns the process exit code.
/// Diagnostics go to standard error prefixed with the subcommand name.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ethcast {name}: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::Argument("--jobs must be positive".into()));
        }
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let settings = load_settings(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::SynthGen { out } => synth_gen(&settings, &out),
        Command::Preprocess { index, out } => preprocess(&settings, &index, &out),
        Command::Sample { index, out } => sample(&settings, &index, &out),
        Command::Train { manifest, run, group } => train(&settings, manifest, run, group),
        Command::Predict { checkpoint, target } => {
            let ck = read_checkpoint(&checkpoint)?;
            write_forecasts(&target, |rec| predict_sequence(&ck, rec))
        }
        Command::Baseline { method, target } => {
            let n_in = settings.model.in_frames;
            let motion = settings.motion;
            let inputs = |rec: &gridio::SequenceRecord| -> Result<Vec<gridio::GridFrame>> {
                rec.rain_paths[..n_in].iter().map(gridio::read_frame).collect()
            };
            match method.as_str() {
                experiment::PERSISTENCE => write_forecasts(&target, |rec| {
                    let frames = inputs(rec)?;
                    Ok(persistence(&frames[n_in - 1], OUTPUT_FRAMES))
                }),
                experiment::ADVECTION => write_forecasts(&target, |rec| advection_nowcast(&inputs(rec)?, &motion, OUTPUT_FRAMES)),
                other => Err(Error::Argument(format!("unknown baseline {other:?}, expected persistence or advection"))),
            }
        }
        Command::Verify { manifest, run } => {
            let names = evaluate_plan(&settings.plan(manifest, run.clone()))?;
            println!("scored {} forecasters into {}", names.len(), run.join("eval").display());
            Ok(())
        }
        Command::Compare { run } => {
            settings.verify.validate()?;
            let report = compare_groups(run.join("eval"), run.join("report"), &settings.verify)?;
            let text = fs::read_to_string(run.join("report").join("summary.txt")).map_err(|e| Error::io(run.join("report"), e))?;
            print!("{text}");
            if report.models.is_empty() {
                return Err(Error::Data("no models were compared".into()));
            }
            Ok(())
        }
        Command::Render { manifest, run } => {
            let m = gridio::read_manifest(&manifest)?;
            let dirs =
                render_top_cases(&m, &run.join("models"), &run.join("eval"), &run.join("report"), &settings.verify, settings.render_cases)?;
            for d in dirs {
                println!("{}", d.display());
            }
            Ok(())
        }
        Command::Gradcheck => gradcheck(&settings),
        Command::ShowConfig => {
            print!("{}", settings.to_text());
            Ok(())
        }
    }
}

fn synth_gen(s: &Settings, out: &Path) -> Result<()> {
    let ds = gen_dataset(&s.synth, out)?;
    println!(
        "{} events, {} frames, index {}, manifest {}",
        ds.events.len(),
        ds.index.len(),
        ds.index_path.display(),
        ds.manifest_path.display()
    );
    Ok(())
}

fn preprocess(s: &Settings, index: &Path, out: &Path) -> Result<()> {
    let cfg = s.preprocess()?;
    let input = FrameIndex::read(index)?;
    let frames = out.join("frames");
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    let entries: Vec<_> = input.entries.iter().collect();
    let written: Vec<(i64, PathBuf, PathBuf)> = entries
        .par_iter()
        .map(|(&ts, (rain, eth))| {
            let r = preprocess_rain(&gridio::read_frame(rain)?, &cfg)?;
            let e = preprocess_eth(&gridio::read_frame(eth)?, &cfg)?;
            let (rp, ep) = (frames.join(format!("rain_{ts}.rfgd")), frames.join(format!("eth_{ts}.rfgd")));
            gridio::write_frame(&r, &rp)?;
            gridio::write_frame(&e, &ep)?;
            Ok((ts, rp, ep))
        })
        .collect::<Result<_>>()?;
    let mut index_out = FrameIndex::default();
    for (ts, r, e) in written {
        index_out.insert(ts, r, e);
    }
    let path = out.join("index.tsv");
    index_out.write(&path)?;
    println!("{} frame pairs written, index {}", index_out.len(), path.display());
    Ok(())
}

fn sample(s: &Settings, index: &Path, out: &Path) -> Result<()> {
    s.sampler.validate()?;
    s.zr.validate()?;
    let idx = FrameIndex::read(index)?;
    let ranked = rank_candidates(&idx.weights(&s.zr)?, &s.sampler);
    let built = build_sequences(&ranked, &idx);
    let folded = assign_folds(&built.manifest, s.sampler_seed, &s.sampler)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    gridio::write_manifest(&folded, out)?;
    let test = folded.with_fold(Fold::Test).count();
    println!(
        "{} sequences ({} TEST), {} starts dropped as incomplete, {} overlapping",
        folded.len(),
        test,
        built.dropped,
        built.overlapping
    );
    Ok(())
}

fn train(s: &Settings, manifest: PathBuf, run: PathBuf, group: Option<Group>) -> Result<()> {
    let plan = s.plan(manifest, run);
    let groups: Vec<Group> = group.map_or(Group::ALL.to_vec(), |g| vec![g]);
    for g in groups {
        let result = experiment::run_group(&plan, g)?;
        for m in &result.models {
            match (&m.best_val_mse, &m.note) {
                (Some(v), None) => println!("{} seed {} epochs {} best_val_mse {v}", m.name, m.seed, m.epochs),
                (Some(v), Some(n)) => println!("{} seed {} epochs {} best_val_mse {v} (stopped: {n})", m.name, m.seed, m.epochs),
                (None, n) => eprintln!("ethcast train: {} seed {} failed: {}", m.name, m.seed, n.as_deref().unwrap_or("")),
            }
        }
        if result.survivors().next().is_none() {
            return Err(Error::Numeric(format!("every {g} model failed")));
        }
    }
    Ok(())
}

fn write_forecasts(
    target: &ForecastTarget,
    forecast: impl Fn(&gridio::SequenceRecord) -> Result<Vec<gridio::GridFrame>> + Sync,
) -> Result<()> {
    let fold: Fold = target.fold.parse().map_err(Error::Argument)?;
    let manifest = gridio::read_manifest(&target.manifest)?;
    let records: Vec<_> = manifest.with_fold(fold).collect();
    if records.is_empty() {
        return Err(Error::Data(format!("no sequences in fold {fold}")));
    }
    records.par_iter().try_for_each(|rec| {
        let dir = target.out.join(rec.start_timestamp.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in forecast(rec)? {
            gridio::write_frame(&f, dir.join(format!("rain_{}.rfgd", f.timestamp)))?;
        }
        Ok(())
    })?;
    println!("{} sequences forecast into {}", records.len(), target.out.display());
    Ok(())
}

fn gradcheck(s: &Settings) -> Result<()> {
    let tol = s.gradcheck_tolerance;
    let mut reports: Vec<(String, GradcheckReport)> = layer_gradchecks(s.gradcheck_seed, tol)?;
    let m = &s.gradcheck_model;
    let label = format!("unet3d {} levels, {} base channels, {}x{}x{}", m.levels, m.base_channels, m.in_frames, m.rows, m.cols);
    reports.push((label, gradcheck_model(m, s.gradcheck_seed, tol)?));
    let mut worst = 0f64;
    for (name, r) in &reports {
        println!("{name}: {} coordinates, max relative error {:.3e}", r.checked, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {tol:.1e})");
    for (_, r) in reports {
        r.into_result()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_lists_every_key() {
        let help = command().render_long_help().to_string();
        for k in KEYS {
            assert!(help.contains(k.name), "{} missing from --help", k.name);
        }
    }

    #[test]
    fn keys_are_unique_and_round_trip() {
        let names: BTreeSet<&str> = KEYS.iter().map(|k| k.name).collect();
        assert_eq!(names.len(), KEYS.len());
        let d = Settings::default();
        let mut s = Settings::default();
        s.apply_text(&d.to_text(), "defaults").unwrap();
        assert_eq!(s, d);
    }

    #[test]
    fn each_key_writes_its_own_field() {
        // changing one key changes exactly that key's rendered value
        let d = Settings::default();
        for k in KEYS {
            let mut s = d.clone();
            let probes = ["7", "0.375", "3,7", "true", "false", "cross3", "log1p", "2020", "2019-01-01T00:00:00Z"];
            let changed = probes.iter().any(|p| {
                s = d.clone();
                s.set(k.name, p).is_ok() && s != d
            });
            assert!(changed, "no probe value changes {}", k.name);
            for other in KEYS.iter().filter(|o| o.name != k.name) {
                assert_eq!((other.get)(&s), (other.get)(&d), "{} also changed {}", k.name, other.name);
            }
        }
    }

    #[test]
    fn config_text_errors() {
        let mut s = Settings::default();
        assert!(matches!(s.apply_text("unet3d.nope = 1", "t"), Err(Error::Config(_))));
        assert!(matches!(s.apply_text("unet3d.levels 2", "t"), Err(Error::Config(_))));
        assert!(matches!(s.apply_text("unet3d.levels = two", "t"), Err(Error::Config(_))));
        assert!(matches!(s.apply_text("train.lr = 1\ntrain.lr = 2", "t"), Err(Error::Config(_))));
        s.apply_text("# comment\n\nunet3d.levels = 2  # trailing\nverify.fss_radii = 1, 4", "t").unwrap();
        assert_eq!(s.model.levels, 2);
        assert_eq!(s.verify.fss_radii, vec![1, 4]);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cfg");
        fs::write(&p, "train.batch = 3\n").unwrap();
        let s = load_settings(Some(&p), &["train.batch=5".into()]).unwrap();
        assert_eq!(s.train.batch, 5);
        assert!(load_settings(Some(&p), &["train.batch".into()]).is_err());
    }

    #[test]
    fn crop_settings_are_checked() {
        let mut s = Settings::default();
        assert_eq!(s.preprocess().unwrap().crop, None);
        s.crop_rows = 8;
        assert!(s.preprocess().is_err());
        s.crop_cols = 8;
        assert_eq!(s.preprocess().unwrap().crop.unwrap().offsets, None);
        s.crop_row_offset = Some(1);
        assert!(s.preprocess().is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(run_args(["ethcast", "no-such-command"]), 1);
        assert_eq!(run_args(["ethcast", "show-config", "--set", "bogus.key=1"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.tsv");
        assert_eq!(
            run_args([
                "ethcast".as_ref(),
                "sample".as_ref(),
                "--index".as_ref(),
                missing.as_os_str(),
                "--out".as_ref(),
                dir.path().join("m.tsv").as_os_str()
            ]),
            2
        );
    }
}
