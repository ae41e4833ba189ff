// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn polysae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polysae"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn polysae")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    stdout(&o)
}

const SYNTH: &str = "rows = 3000\ninteraction_energy = 0.3\nseed = 11\n";
const RUN: &str = "d = 32\nd_sae = 48\nk = 6\nr1 = 32\nr2 = 6\nr3 = 4\n\
                   total_tokens = 7680\nbatch_size = 256\ncheckpoint_every = 10\nseed = 3\n";

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = polysae(&["inspect", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[usage]: "), "{err}");
    assert!(err.contains("Usage:"), "{err}");
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ok(polysae(&["--help"], dir.path())).contains("gen-synth"));
    assert!(ok(polysae(&["--version"], dir.path())).starts_with("polysae "));
}

#[test]
fn inspect_reports_gpt2_shape_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gpt2.toml");
    fs::write(&cfg, "d = 768\nd_sae = 16384\nk = 64\nr1 = 768\nr2 = 64\nr3 = 64\n").unwrap();
    let out = ok(polysae(&["inspect", "--config", "gpt2.toml"], dir.path()));
    assert!(out.contains("sae_params = 25,182,976\n"), "{out}");
    assert!(out.contains("extra = 688,130\n"), "{out}");
    assert!(out.contains("ratio = 2.73%\n"), "{out}");
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "d = 8\nd_sae = 4\nk = 9\nr1 = 8\nr2 = 0\nr3 = 0\n")
        .unwrap();
    let o = polysae(&["inspect", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[usage]: "));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), RUN).unwrap();
    let o = polysae(
        &["train", "--config", "run.toml", "--corpus", "absent.bin", "--out", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[data]: "));
}

fn pipeline(dir: &Path) -> Vec<String> {
    fs::write(dir.join("synth.toml"), SYNTH).unwrap();
    fs::write(dir.join("run.toml"), RUN).unwrap();
    ok(polysae(&["gen-synth", "--config", "synth.toml", "--out", "data"], dir));
    ok(polysae(
        &["train", "--config", "run.toml", "--corpus", "data/activations.bin", "--out", "run"],
        dir,
    ));
    let common = ["--checkpoint", "run/checkpoint", "--corpus", "data/activations.bin"];
    let mut outputs = Vec::new();
    let mut eval = vec!["eval"];
    eval.extend(common);
    eval.extend(["--labels", "data/labels.json", "--k-features", "1,5"]);
    outputs.push(ok(polysae(&eval, dir)));
    for what in ["pairs", "triples", "correlation"] {
        let mut a = vec!["analyze", what];
        a.extend(common);
        outputs.push(ok(polysae(&a, dir)));
    }
    outputs
}

#[test]
fn end_to_end_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = pipeline(a.path());
    let out_b = pipeline(b.path());
    assert_eq!(out_a, out_b);

    for file in [
        "data/activations.bin",
        "data/labels.json",
        "data/ground_truth.json",
        "run/checkpoint/manifest.json",
        "run/checkpoint/params.bin",
    ] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }

    let eval = &out_a[0];
    assert!(eval.contains("mse = "), "{eval}");
    assert!(eval.contains("f1_k1 = ") && eval.contains("f1_k5 = "), "{eval}");
    assert!(out_a[1].starts_with("i\tj\tstrength\tcooccurrence\tcovariance\n"));
    assert!(out_a[2].starts_with("i\tj\tk\tstrength\tcooccurrence\tcovariance\n"));
    assert!(out_a[3].contains("r_poly = "));

    let log = fs::read_to_string(a.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let inspect = ok(polysae(&["inspect", "--checkpoint", "run/checkpoint"], a.path()));
    assert!(inspect.contains("step = 30\n"), "{inspect}");
}

#[test]
fn eval_dimension_mismatch_names_both_dims() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("synth.toml"), SYNTH).unwrap();
    fs::write(p.join("run.toml"), RUN).unwrap();
    ok(polysae(&["gen-synth", "--config", "synth.toml", "--out", "data"], p));
    ok(polysae(
        &["train", "--config", "run.toml", "--corpus", "data/activations.bin", "--out", "run"],
        p,
    ));
    fs::write(p.join("narrow.toml"), "rows = 100\nd = 16\nm = 12\npairs = 3\ntriples = 1\n\
                                       boosted_noninteracting_pairs = 2\n")
        .unwrap();
    ok(polysae(&["gen-synth", "--config", "narrow.toml", "--out", "narrow"], p));
    let o = polysae(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint",
            "--corpus",
            "narrow/activations.bin",
            "--labels",
            "narrow/labels.json",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[data]: "), "{err}");
    assert!(err.contains("d = 16") && err.contains("d = 32"), "{err}");
}
