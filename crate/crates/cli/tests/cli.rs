use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3
output_dir = "out"

[paths]
data_root = "out/data"
checkpoint = "out/natural.ckpt"
robust_checkpoint = "out/robust.ckpt"
classifier = "out/classifier.ckpt"
labeled_root = "out/labeled"

[train]
epochs = 1
batch_size = 4
learning_rate = 0.01
holdout_fraction = 0.0

[classifier]
epochs = 1

[adversarial_attack]
norm = "linf"
epsilon = 0.03
steps = 2

[[eval.attacks]]
target = "x0"
spec = { norm = "linf", epsilon = 0.03, steps = 3 }

[[attacks]]
target = "both"
spec = { norm = "l2", epsilon = 0.5, steps = 2 }

[perceptual]
steps = 2
outer_iters = 1
inner_iters = 2

[histogram]
images = 3
attack = { norm = "linf", epsilon = 0.05, steps = 3 }

[synth]
train_triplets = 12
eval_triplets = 6
base_images = 4
labeled_per_class = 2
labeled_eval_per_class = 1
"#;

fn lpips(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpips"))
        .args(args)
        .current_dir(dir)
        .env_remove("LPIPS_OUTPUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn without_timestamps(mut v: serde_json::Value) -> serde_json::Value {
    if let Some(m) = v.get_mut("metadata") {
        m["timestamp"] = serde_json::Value::Null;
    }
    if let Some(obj) = v.as_object_mut() {
        obj.remove("wall_clock_seconds");
    }
    v
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = lpips(&["eval-2afc", "--config", "missing.file"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.file"));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = lpips(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = lpips(&["train", "--config", "x.toml", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train", "tune-adv", "attack", "eval-2afc", "histogram", "robust-acc", "synth-data"] {
        let out = lpips(&[sub, "--help"], dir.path());
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("--config"));
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "seed = 1\nlearning_rat = 3\n").unwrap();
    let out = lpips(&["synth-data", "-c", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn missing_checkpoint_fails_before_work() {
    let dir = workspace();
    ok(&lpips(&["synth-data", "-c", "run.toml"], dir.path()));
    let out = lpips(&["eval-2afc", "-c", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("natural.ckpt"));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = workspace();
    let p = dir.path();
    let out_dir = p.join("out");
    ok(&lpips(&["synth-data", "-c", "run.toml"], p));
    assert!(out_dir.join("data/train/manifest.json").is_file());
    assert!(out_dir.join("labeled/test").is_dir());
    ok(&lpips(&["train", "-c", "run.toml"], p));
    assert!(out_dir.join("natural.ckpt").is_file());
    ok(&lpips(&["eval-2afc", "-c", "run.toml"], p));
    let report = read_json(&out_dir.join("eval_report.json"));
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[0]["category"], "synthetic");
    assert_eq!(cells[0]["triplets"], 6);
    assert!(fs::read_to_string(out_dir.join("eval_report.csv")).unwrap().lines().count() == 3);
    ok(&lpips(&["tune-adv", "-c", "run.toml"], p));
    assert!(out_dir.join("robust.ckpt").is_file());
    ok(&lpips(&["attack", "-c", "run.toml"], p));
    assert!(out_dir.join("attacked/val-l2-both/manifest.json").is_file());
    assert_eq!(read_json(&out_dir.join("attack_traces.json")).as_array().unwrap().len(), 6);
    ok(&lpips(&["histogram", "-c", "run.toml"], p));
    let h = read_json(&out_dir.join("histogram.json"));
    assert_eq!(h["bin_edges"].as_array().unwrap().len(), 65);
    assert_eq!(h["threshold"], 0.5);
    ok(&lpips(&["train", "--classifier", "-c", "run.toml"], p));
    ok(&lpips(&["robust-acc", "-c", "run.toml"], p));
    let r = read_json(&out_dir.join("robust_accuracy.json"));
    assert_eq!(r["cells"].as_array().unwrap().len(), 4);
    let lines = fs::read_to_string(out_dir.join("robust_accuracy_outcomes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4 * 10);
}

#[test]
fn repeated_runs_match_modulo_timestamps() {
    let dir = workspace();
    let p = dir.path();
    ok(&lpips(&["synth-data", "-c", "run.toml"], p));
    ok(&lpips(&["train", "-c", "run.toml"], p));
    let first = fs::read(p.join("out/natural.ckpt")).unwrap();
    let first_train = without_timestamps(read_json(&p.join("out/train_report.json")));
    ok(&lpips(&["eval-2afc", "-c", "run.toml", "-o", "a"], p));
    ok(&lpips(&["eval-2afc", "-c", "run.toml", "-o", "b"], p));
    assert_eq!(
        without_timestamps(read_json(&p.join("a/eval_report.json"))),
        without_timestamps(read_json(&p.join("b/eval_report.json")))
    );
    assert_eq!(fs::read(p.join("a/eval_report.csv")).unwrap(), fs::read(p.join("b/eval_report.csv")).unwrap());
    ok(&lpips(&["train", "-c", "run.toml"], p));
    assert_eq!(fs::read(p.join("out/natural.ckpt")).unwrap(), first);
    assert_eq!(without_timestamps(read_json(&p.join("out/train_report.json"))), first_train);
}

#[test]
fn seed_override_changes_generated_data() {
    let dir = workspace();
    let p = dir.path();
    ok(&lpips(&["synth-data", "-c", "run.toml", "-o", "s3"], p));
    ok(&lpips(&["synth-data", "-c", "run.toml", "-o", "s4", "--seed", "4"], p));
    let a = fs::read(p.join("s3/data/train/synthetic/ref/000000.png")).unwrap();
    let b = fs::read(p.join("s4/data/train/synthetic/ref/000000.png")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn output_flag_beats_environment_beats_config() {
    let dir = workspace();
    let p = dir.path();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_lpips"));
        c.args(["synth-data", "-c", "run.toml"]).args(extra).current_dir(p);
        match env {
            Some(v) => c.env("LPIPS_OUTPUT", v),
            None => c.env_remove("LPIPS_OUTPUT"),
        };
        ok(&c.output().unwrap());
    };
    run(&[], Some("from_env"));
    assert!(p.join("from_env/data").is_dir());
    run(&["-o", "from_flag"], Some("from_env2"));
    assert!(p.join("from_flag/data").is_dir());
    assert!(!p.join("from_env2").exists());
    run(&[], None);
    assert!(p.join("out/data").is_dir());
}
