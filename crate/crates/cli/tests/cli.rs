use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagprompt"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

const GRAPH: [&str; 6] = ["--nodes", "g/nodes.tsv", "--edges", "g/edges.tsv", "--label-texts", "g/labels.tsv"];

fn with_graph<'a>(cmd: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(GRAPH);
    v.extend(rest);
    v
}

fn synth(dir: &Path) {
    let out = bin(dir, &["synth", "--classes", "3", "--nodes-per-class", "25", "--seed", "1", "--out", "g"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn small_class_exits_two_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = bin(dir.path(), &with_graph("tasks", &["--n-way", "3", "--k-shot", "20", "--out", "t.tsv"]));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("class 0"), "{err}");
    assert!(!dir.path().join("t.tsv").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(dir.path(), &["eval", "--no-such-flag"]).status.code(), Some(2));
    let missing = bin(dir.path(), &with_graph("tasks", &["--out", "t.tsv"]));
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nodes.tsv"));
}

#[test]
fn help_lists_defaults() {
    let out = bin(Path::new("."), &["eval", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for want in ["[default: q0.5]", "[default: q0.9]", "[default: 50]", "[default: 0]", "[default: mean]"] {
        assert!(text.contains(want), "missing {want}");
    }
    let out = bin(Path::new("."), &["pretrain", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for want in ["[default: 0.75]", "[default: 128]", "[default: 10]", "[default: 3]"] {
        assert!(text.contains(want), "missing {want}");
    }
}

#[test]
fn pipeline_is_reproducible_and_flags_beat_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("pre.cfg"), "steps = 6\nseq_len = 24\nhidden = 16\nlm_heads = 2\ngnn_heads = 2\n").unwrap();
    let out = bin(d, &with_graph("pretrain", &["--config", "pre.cfg", "--steps", "4", "--out", "ck"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ck/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["step"], 4);
    assert_eq!(manifest["config"]["seq_len"], 24);

    let out = bin(d, &with_graph("tasks", &["--n-way", "3", "--k-shot", "2", "--q-size", "3", "--groups", "2", "--tasks-per-group", "2", "--out", "t.tsv"]));
    assert!(out.status.success());
    for mode in ["lm", "gnn", "prompt"] {
        let mut reports = Vec::new();
        for run in 0..2 {
            let report = format!("{mode}{run}.tsv");
            let out = bin(d, &with_graph("eval", &["--tasks", "t.tsv", "--checkpoint", "ck", "--mode", mode, "--prompt-epochs", "3", "--report", &report]));
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            reports.push(fs::read_to_string(d.join(&report)).unwrap());
        }
        assert_eq!(reports[0], reports[1], "{mode}");
        assert!(reports[0].contains("overall\t"));
        assert!(d.join(format!("{mode}0.records.tsv")).exists());
        assert!(d.join(format!("{mode}0.manifest.json")).exists());
    }

    let out = bin(d, &with_graph("embed", &["--checkpoint", "ck", "--mode", "gnn", "--out", "emb.tsv"]));
    assert!(out.status.success());
    let emb = fs::read_to_string(d.join("emb.tsv")).unwrap();
    assert_eq!(emb.lines().count(), 75);
    assert_eq!(emb.lines().next().unwrap().split('\t').count(), 17);
}
