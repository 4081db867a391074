use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ethcast");

fn config(name: &str) -> String {
    format!("{}/configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn ethcast(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn small_synth(out: &Path, n_events: usize) -> Output {
    ethcast(&[
        "synth-gen",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "synthgen.rows=16",
        "--set",
        "synthgen.cols=16",
        "--set",
        &format!("synthgen.n_events={n_events}"),
        "--set",
        "synthgen.test_events=1",
    ])
}

#[test]
fn too_few_days_for_the_folds_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    assert!(small_synth(&raw, 4).status.success());
    let out = ethcast(&[
        "sample",
        "--index",
        raw.join("index.tsv").to_str().unwrap(),
        "--out",
        tmp.path().join("m.tsv").to_str().unwrap(),
        "--set",
        "sampler.n_folds=8",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cannot fill 8 folds"), "{err}");
}

#[test]
fn gradcheck_reports_the_worst_error() {
    let out = ethcast(&["gradcheck", "--config", &config("tiny.cfg")]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}{}", String::from_utf8_lossy(&out.stderr));
    let last = text.lines().last().unwrap();
    let worst: f64 = last.strip_prefix("max relative error ").unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(worst < 1e-4, "{last}");
}

#[test]
fn repeated_runs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let raw = tmp.path().join(name).join("raw");
        assert!(small_synth(&raw, 10).status.success());
        let pre = tmp.path().join(name).join("pre");
        let out =
            ethcast(&["preprocess", "--index", raw.join("index.tsv").to_str().unwrap(), "--out", pre.to_str().unwrap(), "--jobs", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(pre.join("frames"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn unknown_key_is_a_usage_error() {
    let out = ethcast(&["show-config", "--set", "unet3d.depth=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unet3d.depth"));
}

#[test]
fn show_config_round_trips_through_a_file() {
    let tmp = tempfile::tempdir().unwrap();
    let first = ethcast(&["show-config", "--config", &config("demo.cfg")]);
    assert!(first.status.success());
    let path = tmp.path().join("dump.cfg");
    fs::write(&path, &first.stdout).unwrap();
    let second = ethcast(&["show-config", "--config", path.to_str().unwrap()]);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ethcast(&["compare", "--run", tmp.path().join("nothing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
