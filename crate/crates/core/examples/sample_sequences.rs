//! Rank candidate start times by event weight, assemble 22-frame sequences and deal day-blocked folds.

use std::collections::BTreeMap;

use ethcast::gridio::Fold;
use ethcast::preprocess::ZRParams;
use ethcast::sampler::{assign_folds, build_sequences, day_of, rank_candidates, FrameIndex, SamplerConfig, TestYear};
use ethcast::synthgen::{gen_dataset, DatasetConfig, SynthConfig};

fn main() -> ethcast::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sample_sequences".into());
    let cfg = DatasetConfig {
        synth: SynthConfig { rows: 16, cols: 16, ..SynthConfig::default() },
        n_events: 20,
        test_events: 4,
        ..DatasetConfig::default()
    };
    let ds = gen_dataset(&cfg, &out)?;
    let index = FrameIndex::read(&ds.index_path)?;

    let sampler = SamplerConfig { top_k_per_year: 300, n_folds: 5, test_year: TestYear::Last, ..SamplerConfig::default() };
    let ranked = rank_candidates(&index.weights(&ZRParams::default())?, &sampler);
    let built = build_sequences(&ranked, &index);
    println!(
        "{} candidates ranked, {} complete sequences, {} dropped, {} overlapping",
        ranked.len(),
        built.manifest.len(),
        built.dropped,
        built.overlapping
    );
    built.manifest.validate_cadence()?;

    let folded = assign_folds(&built.manifest, 1, &sampler)?;
    let mut per_fold: BTreeMap<String, (usize, Vec<i64>)> = BTreeMap::new();
    for r in &folded.records {
        let e = per_fold.entry(r.fold.to_string()).or_default();
        e.0 += 1;
        let d = day_of(r.start_timestamp);
        if !e.1.contains(&d) {
            e.1.push(d);
        }
    }
    for (fold, (n, days)) in per_fold {
        println!("fold {fold:>4}: {n:>3} sequences on {} days", days.len());
    }
    println!("TEST sequences: {}", folded.with_fold(Fold::Test).count());
    Ok(())
}
