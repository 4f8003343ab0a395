use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subdistill"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn error_doc(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"))
}

/// Three Gaussian blobs in four dimensions, or all-zero rows.
fn write_csv(path: &Path, zeros: bool) {
    let mut text = String::from("a,b,c,d,label\n");
    let mut state: u64 = 17;
    let mut noise = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.6
    };
    for i in 0..90 {
        let c = i % 3;
        let row: Vec<String> = (0..4)
            .map(|j| {
                if zeros {
                    "0".to_string()
                } else {
                    format!("{:.5}", if j == c { 2.0 } else { 0.0 } + noise())
                }
            })
            .collect();
        text.push_str(&format!("{},{c}\n", row.join(",")));
    }
    std::fs::write(path, text).unwrap();
}

fn write_config(dir: &Path, name: &str, data: &str, distill_extra: &str) {
    std::fs::write(dir.join("sub.toml"), "name = \"ab\"\nclass_ids = [0, 1]\n").unwrap();
    let cfg = format!(
        r#"output_dir = "{name}_out"
subtask = "sub.toml"

[dataset]
format = "csv_labeled"
path = "{data}"

[teacher]
checkpoint = "{name}_out/teacher.sdck"
hidden = [6, 6]

[teacher.training]
epochs = 10
batch_size = 8

[student]
hidden = [3, 3]

[distill]
epochs = 10
batch_size = 8
layers = [1, 2]
{distill_extra}
[suite]
seeds = [0, 1]
ablations = ["no_centering"]
layer_subsets = [[], [1]]
"#
    );
    std::fs::write(dir.join(format!("{name}.toml")), cfg).unwrap();
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    write_csv(&tmp.path().join("blobs.csv"), false);
    write_csv(&tmp.path().join("zeros.csv"), true);
    write_config(tmp.path(), "ok", "blobs.csv", "");
    write_config(tmp.path(), "zero", "zeros.csv", "");
    write_config(tmp.path(), "div", "blobs.csv", "learning_rate = 1000.0\n");
    write_config(tmp.path(), "missing", "nowhere.csv", "");
    tmp
}

#[test]
fn missing_dataset_exits_with_input_error() {
    let tmp = setup();
    let out = run(tmp.path(), &["train-teacher", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let doc = error_doc(&out);
    assert_eq!(doc["exit_code"], 2);
    assert!(doc["path"].as_str().unwrap().ends_with("nowhere.csv"), "{doc}");
}

#[test]
fn bad_config_and_arguments_exit_with_input_error() {
    let tmp = setup();
    std::fs::write(tmp.path().join("typo.toml"), "output_dir = \"x\"\n[distill]\nalpah = 1.0\n").unwrap();
    assert_eq!(run(tmp.path(), &["synth", "--config", "typo.toml"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["synth", "--config", "absent.toml"]).status.code(), Some(2));
    assert!(run(tmp.path(), &["train-teacher", "--config", "ok.toml"]).status.success());
    let out = run(tmp.path(), &["distill", "--config", "ok.toml", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(tmp.path(), &["distill", "--config", "ok.toml", "--layers", "1,x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn degenerate_responses_exit_with_code_three() {
    let tmp = setup();
    assert!(run(tmp.path(), &["train-teacher", "--config", "zero.toml"]).status.success());
    let out = run(tmp.path(), &["distill", "--config", "zero.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_doc(&out)["exit_code"], 3);
}

#[test]
fn divergence_exits_with_code_four() {
    let tmp = setup();
    assert!(run(tmp.path(), &["train-teacher", "--config", "div.toml"]).status.success());
    let out = run(tmp.path(), &["distill", "--config", "div.toml"]);
    assert_eq!(out.status.code(), Some(4));
    let doc = error_doc(&out);
    assert_eq!(doc["error"], "divergence");
    assert!(doc["epoch"].as_u64().is_some());
}

#[test]
fn report_rejects_empty_and_inconsistent_inputs() {
    let tmp = setup();
    std::fs::create_dir_all(tmp.path().join("empty")).unwrap();
    let out = run(tmp.path(), &["report", "empty", "--out", "rep"]);
    assert_eq!(out.status.code(), Some(2));

    assert!(run(tmp.path(), &["train-teacher", "--config", "ok.toml"]).status.success());
    assert!(run(tmp.path(), &["distill", "--config", "ok.toml", "--out", "runs/a"]).status.success());
    assert!(run(tmp.path(), &["distill", "--config", "ok.toml", "--seed", "1", "--out", "runs/b"]).status.success());
    assert!(run(tmp.path(), &["report", "runs", "--out", "rep"]).status.success());

    let path = tmp.path().join("runs/b/run.json");
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    doc["dataset_digest"] = Value::from("0000");
    std::fs::write(&path, doc.to_string()).unwrap();
    let out = run(tmp.path(), &["report", "runs", "--out", "rep2"]);
    assert_eq!(out.status.code(), Some(5));

    std::fs::write(&path, "{ not json").unwrap();
    let out = run(tmp.path(), &["report", "runs", "--out", "rep3"]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_doc(&out)["error"], "aggregation");
}

fn assert_well_formed_svg(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(doc.root_element().tag_name().name(), "svg");
}

#[test]
fn pipeline_outputs_are_well_formed_and_deterministic() {
    let tmp = setup();
    let dir = tmp.path();
    std::fs::write(
        dir.join("synth.toml"),
        "output_dir = \"syn\"\n[synth]\nn = 90\nseeds = [0]\nstudent_epochs = 100\n[synth.teacher]\nepochs = 100\n",
    )
    .unwrap();
    assert!(run(dir, &["train-teacher", "--config", "ok.toml"]).status.success());
    for out_dir in ["first", "second"] {
        let base = format!("{out_dir}/ablation");
        let out = run(dir, &["ablation", "--config", "ok.toml", "--deterministic", "--out", &base]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = run(dir, &["synth", "--config", "synth.toml", "--deterministic", "--out", &format!("{out_dir}/synth")]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = run(dir, &["report", out_dir, "--out", &format!("{out_dir}_report"), "--deterministic"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["summary.csv", "runs.csv"] {
        let a = std::fs::read(dir.join("first_report").join(name)).unwrap();
        let b = std::fs::read(dir.join("second_report").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
    for name in ["league.csv", "cells.csv"] {
        assert_eq!(
            std::fs::read(dir.join("first/ablation").join(name)).unwrap(),
            std::fs::read(dir.join("second/ablation").join(name)).unwrap()
        );
    }
    let league = std::fs::read_to_string(dir.join("first/ablation/league.csv")).unwrap();
    assert_eq!(league.lines().count(), 1 + 4, "{league}");
    for name in ["accuracy_vs_layers.svg", "accuracy_vs_fraction.svg", "kernels_0.svg"] {
        let path = dir.join("first_report").join(name);
        assert_well_formed_svg(&path);
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.join("second_report").join(name)).unwrap());
    }
    assert_well_formed_svg(&dir.join("first/synth/kernels.svg"));
    let resolved = std::fs::read_to_string(dir.join("first/ablation/config.resolved.toml")).unwrap();
    assert!(resolved.contains("[distill]"));
    let run_json: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("first/ablation/cells/subdistill_seed0/run.json")).unwrap())
            .unwrap();
    assert!(run_json["wall_clock_secs"].is_null());
}

#[test]
fn alpha_sweep_writes_selection() {
    let tmp = setup();
    let dir = tmp.path();
    assert!(run(dir, &["train-teacher", "--config", "ok.toml"]).status.success());
    let out = run(dir, &["distill", "--config", "ok.toml", "--alpha-sweep", "--epochs", "3", "--out", "sweep", "--deterministic"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(dir.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 6);
    let selected: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("sweep/selected.json")).unwrap()).unwrap();
    let alpha = selected["selected_alpha"].as_f64().unwrap();
    assert!([1e-2, 1e-1, 1.0, 1e1, 1e2].contains(&alpha));
}

#[test]
fn extracted_subspaces_feed_distillation() {
    let tmp = setup();
    let dir = tmp.path();
    assert!(run(dir, &["train-teacher", "--config", "ok.toml"]).status.success());
    let out = run(dir, &["extract-subspaces", "--config", "ok.toml", "--out", "subs"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("subs/subspace_l1.sdsu").is_file());
    assert!(dir.join("subs/subspaces.csv").is_file());
    let out = run(dir, &["distill", "--config", "ok.toml", "--subspaces", "subs", "--out", "r"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(dir, &["distill", "--config", "ok.toml", "--subspaces", "nowhere", "--out", "r2"]);
    assert_eq!(out.status.code(), Some(2));
}
