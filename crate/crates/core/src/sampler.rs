//! Event weighting, top-K start selection, sequence assembly and day-blocked fold assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridio::{self, Fold, GridFrame, SequenceManifest, SequenceRecord, Variable, CADENCE_S, SEQUENCE_LEN};
use crate::preprocess::{rain_to_dbz, ZRParams};

/// Frames predicted by the network.
pub const OUTPUT_FRAMES: usize = 18;
/// 2016-10-01T00:00:00Z
pub const DEFAULT_CUTOFF: i64 = 1_475_280_000;

/// Which calendar year is held out as the test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestYear {
    /// The latest year present among the sequences.
    Last,
    Year(i32),
    /// No test split; every sequence goes into a fold.
    Disabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub top_k_per_year: usize,
    pub input_frames: usize,
    pub n_folds: usize,
    pub test_year: TestYear,
    pub cutoff_start: Option<i64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k_per_year: 1000,
            input_frames: SEQUENCE_LEN - OUTPUT_FRAMES,
            n_folds: 8,
            test_year: TestYear::Last,
            cutoff_start: Some(DEFAULT_CUTOFF),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_frames + OUTPUT_FRAMES != SEQUENCE_LEN {
            return Err(Error::Config(format!(
                "input_frames ({}) + {OUTPUT_FRAMES} output frames must equal {SEQUENCE_LEN}",
                self.input_frames
            )));
        }
        if self.n_folds < 2 || self.n_folds > u8::MAX as usize {
            return Err(Error::Config(format!("n_folds must be in 2..=255, got {}", self.n_folds)));
        }
        Ok(())
    }
}

pub fn year_of(ts: i64) -> i32 {
    Utc.timestamp_opt(ts, 0).single().map(|d| d.year()).unwrap_or(1970)
}

/// Whole UTC days since the epoch.
pub fn day_of(ts: i64) -> i64 {
    ts.div_euclid(86_400)
}

/// Σ max(dBZ, 0)² over valid pixels.
pub fn event_weight(frame: &GridFrame) -> Result<f64> {
    if frame.variable != Variable::ReflectivityDbz {
        return Err(Error::Argument(format!("event weight needs a dBZ frame, got {}", frame.variable)));
    }
    Ok(frame
        .values
        .iter()
        .filter(|&&v| !frame.is_nodata(v))
        .map(|&v| {
            let d = (v as f64).max(0.0);
            d * d
        })
        .sum())
}

/// Event weight of a rain frame after conversion back to reflectivity.
pub fn rain_event_weight(frame: &GridFrame, zr: &ZRParams) -> Result<f64> {
    event_weight(&rain_to_dbz(frame, zr)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub timestamp: i64,
    pub weight: f64,
}

fn by_rank(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.weight.total_cmp(&a.weight).then(a.timestamp.cmp(&b.timestamp))
}

/// Top-K candidates per calendar year, heaviest first with earlier timestamps winning ties.
/// Years are emitted in ascending order; candidates before the cutoff are ignored.
pub fn rank_candidates(candidates: &[Candidate], cfg: &SamplerConfig) -> Vec<Candidate> {
    let mut by_year: BTreeMap<i32, Vec<Candidate>> = BTreeMap::new();
    for c in candidates {
        if cfg.cutoff_start.is_some_and(|cut| c.timestamp < cut) {
            continue;
        }
        by_year.entry(year_of(c.timestamp)).or_default().push(*c);
    }
    let k = cfg.top_k_per_year;
    let mut out = Vec::new();
    for (_, mut year) in by_year {
        if k == 0 {
            continue;
        }
        if year.len() > k {
            year.select_nth_unstable_by(k - 1, by_rank);
            year.truncate(k);
        }
        year.sort_by(by_rank);
        out.extend(year);
    }
    out
}

/// Timestamp → (rain path, ETH path).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameIndex {
    pub entries: BTreeMap<i64, (PathBuf, PathBuf)>,
}

impl FrameIndex {
    pub fn insert(&mut self, ts: i64, rain: PathBuf, eth: PathBuf) {
        self.entries.insert(ts, (rain, eth));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = gridio::parent_dir(path);
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (ts, (rain, eth)) in &self.entries {
            writeln!(w, "{ts}\t{}\t{}", gridio::relativize(rain, &base).display(), gridio::relativize(eth, &base).display())
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = gridio::parent_dir(path);
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut index = FrameIndex::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected 3 tab-separated fields, found {}", f.len()) });
            }
            let ts = f[0].parse::<i64>().map_err(|e| Error::Parse { line: i + 1, msg: format!("bad timestamp {:?}: {e}", f[0]) })?;
            index.insert(ts, gridio::resolve(f[1], &base), gridio::resolve(f[2], &base));
        }
        Ok(index)
    }

    /// Event weight of every indexed rain frame, in timestamp order.
    pub fn weights(&self, zr: &ZRParams) -> Result<Vec<Candidate>> {
        let entries: Vec<(&i64, &(PathBuf, PathBuf))> = self.entries.iter().collect();
        entries
            .par_iter()
            .map(|(ts, (rain, _))| {
                let frame = gridio::read_frame(rain)?;
                Ok(Candidate { timestamp: **ts, weight: rain_event_weight(&frame, zr)? })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub manifest: SequenceManifest,
    pub dropped: usize,
    /// Emitted sequences that share at least one frame with an earlier emitted sequence.
    pub overlapping: usize,
}

/// Emits every start whose 22 rain and ETH frames are all indexed; incomplete starts are dropped and counted.
pub fn build_sequences(starts: &[Candidate], index: &FrameIndex) -> BuildReport {
    let mut records = Vec::new();
    let mut dropped = 0;
    for c in starts {
        let mut rain_paths = Vec::with_capacity(SEQUENCE_LEN);
        let mut eth_paths = Vec::with_capacity(SEQUENCE_LEN);
        for k in 0..SEQUENCE_LEN as i64 {
            match index.entries.get(&(c.timestamp + k * CADENCE_S)) {
                Some((r, e)) => {
                    rain_paths.push(r.clone());
                    eth_paths.push(e.clone());
                }
                None => break,
            }
        }
        if rain_paths.len() < SEQUENCE_LEN {
            dropped += 1;
            continue;
        }
        records.push(SequenceRecord {
            start_timestamp: c.timestamp,
            event_weight: c.weight,
            rain_paths,
            eth_paths,
            fold: Fold::Unassigned,
        });
    }
    let span = (SEQUENCE_LEN as i64 - 1) * CADENCE_S;
    let mut starts_seen: BTreeSet<i64> = BTreeSet::new();
    let mut overlapping = 0;
    for r in &records {
        let t = r.start_timestamp;
        if starts_seen.range(t - span..=t + span).next().is_some() {
            overlapping += 1;
        }
        starts_seen.insert(t);
    }
    BuildReport { manifest: SequenceManifest { records }, dropped, overlapping }
}

/// Labels the test year, then deals the remaining calendar days round-robin into folds after a seeded shuffle.
pub fn assign_folds(manifest: &SequenceManifest, seed: u64, cfg: &SamplerConfig) -> Result<SequenceManifest> {
    cfg.validate()?;
    let test_year = match cfg.test_year {
        TestYear::Disabled => None,
        TestYear::Year(y) => Some(y),
        TestYear::Last => manifest.records.iter().map(|r| year_of(r.start_timestamp)).max(),
    };
    let is_test = |r: &SequenceRecord| test_year == Some(year_of(r.start_timestamp));
    let days: BTreeSet<i64> = manifest.records.iter().filter(|r| !is_test(r)).map(|r| day_of(r.start_timestamp)).collect();
    if days.len() < cfg.n_folds {
        return Err(Error::Config(format!("{} distinct training days cannot fill {} folds", days.len(), cfg.n_folds)));
    }
    let mut days: Vec<i64> = days.into_iter().collect();
    days.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of_day: BTreeMap<i64, u8> = days.iter().enumerate().map(|(i, &d)| (d, (i % cfg.n_folds) as u8)).collect();
    let records = manifest
        .records
        .iter()
        .map(|r| {
            let fold = if is_test(r) { Fold::Test } else { Fold::Index(fold_of_day[&day_of(r.start_timestamp)]) };
            SequenceRecord { fold, ..r.clone() }
        })
        .collect();
    Ok(SequenceManifest { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridio::DEFAULT_NODATA;
    use rand::Rng;

    const T2021: i64 = 1_609_459_200;

    #[test]
    fn weight_examples() {
        let all = GridFrame::filled(Variable::ReflectivityDbz, 0, 3, 3, DEFAULT_NODATA);
        assert_eq!(event_weight(&all).unwrap(), 0.0);
        let mut two = all.clone();
        two.values[0] = 10.0;
        two.values[4] = 20.0;
        assert_eq!(event_weight(&two).unwrap(), 500.0);
        let mut neg = two.clone();
        neg.values[8] = -15.0;
        assert_eq!(event_weight(&neg).unwrap(), 500.0);
        assert!(event_weight(&GridFrame::filled(Variable::RainMmh, 0, 1, 1, 0.0)).is_err());
    }

    fn cand(ts: i64, w: f64) -> Candidate {
        Candidate { timestamp: ts, weight: w }
    }

    #[test]
    fn ranking_examples() {
        let cfg = SamplerConfig { top_k_per_year: 2, ..Default::default() };
        let c = [cand(T2021, 5.0), cand(T2021 + 300, 9.0), cand(T2021 + 600, 1.0)];
        let ts: Vec<i64> = rank_candidates(&c, &cfg).iter().map(|c| c.timestamp).collect();
        assert_eq!(ts, vec![T2021 + 300, T2021]);

        let tie = [cand(T2021 + 900, 3.0), cand(T2021, 3.0)];
        let ts: Vec<i64> = rank_candidates(&tie, &cfg).iter().map(|c| c.timestamp).collect();
        assert_eq!(ts, vec![T2021, T2021 + 900]);
    }

    #[test]
    fn ranking_respects_cutoff_and_years() {
        let cfg = SamplerConfig { top_k_per_year: 1, ..Default::default() };
        let c = [cand(DEFAULT_CUTOFF - 300, 100.0), cand(DEFAULT_CUTOFF + 300, 1.0), cand(T2021 + 5, 2.0), cand(T2021 + 10, 7.0)];
        let ts: Vec<i64> = rank_candidates(&c, &cfg).iter().map(|c| c.timestamp).collect();
        assert_eq!(ts, vec![DEFAULT_CUTOFF + 300, T2021 + 10]);
    }

    #[test]
    fn ranking_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<Candidate> = (0..10_000).map(|i| cand(T2021 + i * 300, (rng.gen_range(0..500) as f64) * 0.5)).collect();
        let cfg = SamplerConfig { top_k_per_year: 1000, ..Default::default() };
        let mut oracle = c.clone();
        oracle.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap().then(a.timestamp.cmp(&b.timestamp)));
        oracle.truncate(1000);
        assert_eq!(rank_candidates(&c, &cfg), oracle);
    }

    fn dense_index(start: i64, n: usize) -> FrameIndex {
        let mut idx = FrameIndex::default();
        for k in 0..n as i64 {
            let ts = start + k * CADENCE_S;
            idx.insert(ts, format!("r{ts}").into(), format!("e{ts}").into());
        }
        idx
    }

    #[test]
    fn gap_drops_sequence() {
        let mut idx = dense_index(T2021, 30);
        idx.entries.remove(&(T2021 + 7 * CADENCE_S));
        let rep = build_sequences(&[cand(T2021, 1.0), cand(T2021 + 8 * CADENCE_S, 1.0)], &idx);
        assert_eq!(rep.dropped, 1);
        assert_eq!(rep.manifest.len(), 1);
    }

    #[test]
    fn overlapping_sequences_share_frames() {
        let idx = dense_index(T2021, 23);
        let rep = build_sequences(&[cand(T2021, 1.0), cand(T2021 + CADENCE_S, 1.0)], &idx);
        assert_eq!(rep.manifest.len(), 2);
        assert_eq!(rep.overlapping, 1);
        let (a, b) = (&rep.manifest.records[0], &rep.manifest.records[1]);
        let shared = a.rain_paths.iter().filter(|p| b.rain_paths.contains(p)).count();
        assert_eq!(shared, 21);
    }

    fn manifest_days(days: &[i64]) -> SequenceManifest {
        SequenceManifest {
            records: days
                .iter()
                .flat_map(|&d| {
                    (0..2).map(move |j| SequenceRecord {
                        start_timestamp: T2021 + d * 86_400 + j * 3600,
                        event_weight: 1.0,
                        rain_paths: vec![],
                        eth_paths: vec![],
                        fold: Fold::Unassigned,
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn folds_are_day_blocks() {
        let m = manifest_days(&(0..16).collect::<Vec<_>>());
        let cfg = SamplerConfig { test_year: TestYear::Disabled, ..Default::default() };
        let a = assign_folds(&m, 42, &cfg).unwrap();
        assert_eq!(a, assign_folds(&m, 42, &cfg).unwrap());
        let mut per_fold: BTreeMap<Fold, BTreeSet<i64>> = BTreeMap::new();
        let mut day_fold: BTreeMap<i64, Fold> = BTreeMap::new();
        for r in &a.records {
            let d = day_of(r.start_timestamp);
            per_fold.entry(r.fold).or_default().insert(d);
            assert_eq!(*day_fold.entry(d).or_insert(r.fold), r.fold);
        }
        assert_eq!(per_fold.len(), 8);
        assert!(per_fold.values().all(|d| d.len() == 2));
    }

    #[test]
    fn too_few_days_is_config_error() {
        let m = manifest_days(&[0, 1, 2, 3]);
        let cfg = SamplerConfig { test_year: TestYear::Disabled, ..Default::default() };
        assert!(matches!(assign_folds(&m, 1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn last_year_is_test() {
        let mut m = manifest_days(&(0..8).collect::<Vec<_>>());
        m.records.extend(manifest_days(&[400]).records);
        let a = assign_folds(&m, 0, &SamplerConfig::default()).unwrap();
        let test: Vec<_> = a.with_fold(Fold::Test).collect();
        assert_eq!(test.len(), 2);
        assert!(test.iter().all(|r| year_of(r.start_timestamp) == 2022));
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = FrameIndex::default();
        idx.insert(5, dir.path().join("a.rfgd"), dir.path().join("b.rfgd"));
        idx.insert(305, PathBuf::from("/abs/c.rfgd"), dir.path().join("sub/d.rfgd"));
        let p = dir.path().join("index.tsv");
        idx.write(&p).unwrap();
        assert_eq!(FrameIndex::read(&p).unwrap(), idx);
    }
}
