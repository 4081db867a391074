//! The command-line chain from synthetic data to report, driven in-process with the demo config.
//!
//! ```text
//! cargo run --release --example cli_demo -- [OUT_DIR]
//! ```
//! The same steps work with the `ethcast` binary in place of `run_args`.

use std::path::PathBuf;

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cli_demo".into()));
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/demo.cfg");
    let [raw, raw_index, pre, pre_index, manifest, run] =
        ["raw", "raw/index.tsv", "pre", "pre/index.tsv", "manifest.tsv", "run"].map(|s| out.join(s).display().to_string());
    let steps = [
        vec!["synth-gen", "--out", &raw],
        vec!["preprocess", "--index", &raw_index, "--out", &pre],
        vec!["sample", "--index", &pre_index, "--out", &manifest],
        vec!["train", "--manifest", &manifest, "--run", &run],
        vec!["verify", "--manifest", &manifest, "--run", &run],
        vec!["compare", "--run", &run],
        vec!["render", "--manifest", &manifest, "--run", &run],
    ];
    for step in steps {
        println!("$ ethcast {} --config demo.cfg", step.join(" "));
        let args = std::iter::once("ethcast").chain(step).chain(["--config", cfg]);
        let code = ethcast::cli::run_args(args);
        if code != 0 {
            std::process::exit(code);
        }
    }
}
