use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn chronicle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chronicle")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// synth then build-timelines into `root/data` and `root/tl`.
fn prepare(root: &Path) {
    let data = root.join("data");
    let out = chronicle(&["--seed", "2", "synth", "--patients", "60", "--concepts", "12", "-o", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tl = root.join("tl");
    let out = chronicle(&["build-timelines", "--data", s(&data), "--min-global", "1", "--min-patient", "1", "-o", s(&tl)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_every_subcommand() {
    let out = chronicle(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "build-timelines", "split", "train", "evaluate", "generate", "stats", "serve"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_errors_exit_two_and_data_errors_exit_one() {
    assert_eq!(chronicle(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(chronicle(&["synth", "-o", "x", "--chronic", "1.5"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.toml");
    fs::write(&bad_cfg, "[model]\nwidth = 3\n").unwrap();
    let out = chronicle(&["--config", s(&bad_cfg), "synth", "-o", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));

    let missing = dir.path().join("missing.jsonl");
    let out = chronicle(&["split", "--timelines", s(&missing), "-o", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_records_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let data = dir.path().join("data");
    for f in ["world.json", "ontology.tsv", "events.jsonl", "demographics.jsonl"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let m = manifest(&data);
    assert_eq!(m["subcommand"], "synth");
    assert_eq!(m["seed"], 2);
    assert_eq!(m["config"]["synth"]["n_patients"], 60);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert!(m["git_describe"].as_str().is_some_and(|g| !g.is_empty()));

    let tl = manifest(&dir.path().join("tl"));
    assert_eq!(tl["inputs"]["events"], s(&data.join("events.jsonl")));
    assert_eq!(tl["config"]["build"]["min_global_count"], 1);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 11\n[synth]\nn_patients = 7\nn_concepts = 9\n").unwrap();
    let a = dir.path().join("a");
    assert!(chronicle(&["--config", s(&cfg), "synth", "-o", s(&a)]).status.success());
    let m = manifest(&a);
    assert_eq!((m["seed"].as_u64(), m["config"]["synth"]["n_patients"].as_u64()), (Some(11), Some(7)));

    let b = dir.path().join("b");
    assert!(chronicle(&["--config", s(&cfg), "--seed", "12", "synth", "--patients", "3", "-o", s(&b)]).status.success());
    let m = manifest(&b);
    assert_eq!((m["seed"].as_u64(), m["config"]["synth"]["n_patients"].as_u64()), (Some(12), Some(3)));
    assert_eq!(m["config"]["synth"]["n_concepts"], 9);
}

#[test]
fn train_evaluate_generate_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root);
    let (split, model, eval) = (root.join("split"), root.join("model"), root.join("eval"));
    assert!(chronicle(&["split", "--timelines", s(&root.join("tl/timelines.jsonl")), "--test-fraction", "0.3", "-o", s(&split)])
        .status
        .success());
    let out = chronicle(&[
        "train", "--timelines", s(&split.join("train.jsonl")), "--layers", "1", "--dim", "16", "--ff", "32", "--epochs",
        "1", "-o", s(&model),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "vocab.json", "weights.bin", "history.json", "manifest.json"] {
        assert!(model.join(f).is_file(), "{f}");
    }

    let out = chronicle(&[
        "evaluate", "--model", s(&model), "--timelines", s(&split.join("test.jsonl")), "--events",
        s(&root.join("tl/filtered_events.jsonl")), "--ontology", s(&root.join("data/ontology.tsv")), "--reference", "-o",
        s(&eval),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("reference scorer agrees"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert!(report.is_object() || report.is_array());
    assert!(fs::read_to_string(eval.join("report.txt")).unwrap().contains("Disorders"));

    let out = chronicle(&["--seed", "3", "generate", "--model", s(&model), "--prompt", "AGE:43,ETH:Black,SEX:F", "--steps", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<String> = String::from_utf8_lossy(&out.stdout).lines().map(str::to_string).collect();
    assert_eq!(&lines[..3], ["  SEX:F", "  ETH:Black", "  AGE:43"]);
    assert!(lines[3..].iter().all(|l| l.starts_with('+')));
    let again = chronicle(&["--seed", "3", "generate", "--model", s(&model), "--prompt", "AGE:43,ETH:Black,SEX:F", "--steps", "5"]);
    assert_eq!(out.stdout, again.stdout);

    let out = chronicle(&["generate", "--model", s(&model), "--prompt", "SEX:F,C:not-a-concept"]);
    assert_eq!(out.status.code(), Some(2));

    let out = chronicle(&[
        "stats", "--timelines", s(&root.join("tl/timelines.jsonl")), "--demographics",
        s(&root.join("data/demographics.jsonl")), "--ontology", s(&root.join("data/ontology.tsv")),
    ]);
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(stats["total"]["patients"].as_u64().unwrap() > 0);
}
