use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
train_size = 300
id_test_size = 120
ood_test_size = 120

[train]
epochs = 1
seeds = [0, 1]
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
        Env { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.dir.path().join("exp.toml");
        Command::new(env!("CARGO_BIN_EXE_debias-lab"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(self.out())
            .args(args)
            .env_remove("DEBIAS_LAB_OUT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed:\n{}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn digest(path: &Path) -> String {
    debias_core::io::digest_file(path).unwrap()
}

#[test]
fn generate_writes_splits_and_manifest_reproducibly() {
    let env = Env::new();
    env.ok(&["generate"]);
    let data = env.out().join("data");
    for f in [
        "train.jsonl",
        "id_test.jsonl",
        "ood_test.jsonl",
        "manifest.json",
    ] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    let first = digest(&data.join("train.jsonl"));
    let again = env.run(&["generate"]);
    assert!(stderr(&again).contains("generate: up to date"));

    let other = Env::new();
    other.ok(&["generate"]);
    assert_eq!(digest(&other.out().join("data/train.jsonl")), first);
}

#[test]
fn invalid_config_value_names_the_field() {
    let env = Env::new();
    let bad = env.dir.path().join("bad.toml");
    std::fs::write(&bad, "[data]\nbias_cooccurrence = 1.5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_debias-lab"))
        .args(["--config", bad.to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("data.bias_cooccurrence"),
        "{}",
        stderr(&out)
    );

    std::fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_debias-lab"))
        .args(["--config", bad.to_str().unwrap(), "show-config"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
}

#[test]
fn show_config_echoes_resolved_defaults() {
    let env = Env::new();
    let text = env.ok(&[
        "--loss",
        "poe",
        "--alpha",
        "0.3",
        "--seeds",
        "4,5",
        "show-config",
    ]);
    assert!(text.contains("variant = \"poe\""), "{text}");
    assert!(text.contains("alpha = 0.3"));
    assert!(text.contains("seeds = [4, 5]"));
    assert!(text.contains("peak_learning_rate"));
    assert!(text.contains("signal_noise"));
}

#[test]
fn full_pipeline_emits_report_and_is_resumable() {
    let env = Env::new();
    let table = env.ok(&["run-all"]);
    for label in ["ce", "poe", "poe_ce", "poe_sals"] {
        assert!(table.contains(&format!("| {label} ")), "{table}");
    }
    // Ties share the mark, so each column has at least one.
    assert!(table.matches("**").count() >= 4, "{table}");
    let rows = std::fs::read_to_string(env.out().join("report/rows.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    let history = env.out().join("runs/poe_sals/seed-0/history.jsonl");
    assert!(std::fs::read_to_string(history)
        .unwrap()
        .contains("mean_rho"));

    let before = digest(&env.out().join("runs/poe_sals/seed-1/model.json"));
    let rerun = env.run(&["run-all"]);
    assert!(rerun.status.success());
    assert_eq!(
        digest(&env.out().join("runs/poe_sals/seed-1/model.json")),
        before
    );
    assert_eq!(String::from_utf8(rerun.stdout).unwrap(), table);

    let single = env.ok(&["report", "ce"]);
    assert_eq!(single.lines().count(), 3, "{single}");
}

#[test]
fn stale_artifacts_are_refused() {
    let env = Env::new();
    env.ok(&["generate"]);
    env.ok(&["train-biased"]);
    env.ok(&["export-artifacts"]);
    env.ok(&["--seed", "9", "generate"]);
    let out = env.run(&["--seed", "9", "train-main"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("export-artifacts"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn tampered_checkpoint_is_refused() {
    let env = Env::new();
    env.ok(&["generate"]);
    env.ok(&["train-biased"]);
    let model = env.out().join("biased/model.json");
    let mut text = std::fs::read_to_string(&model).unwrap();
    text.push(' ');
    std::fs::write(&model, text).unwrap();
    let out = env.run(&["export-artifacts"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("train-biased"));
}

#[test]
fn cross_entropy_needs_no_artifacts() {
    let env = Env::new();
    env.ok(&["generate"]);
    let out = env.run(&["--loss", "poe_sals", "train-main"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    env.ok(&["--loss", "ce", "train-main"]);
    let line = env.ok(&["--loss", "ce", "evaluate"]);
    assert!(line.starts_with("ce: id "), "{line}");
}

#[test]
fn missing_inputs_and_incomplete_runs() {
    let env = Env::new();
    let out = env.run(&["train-biased"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("debias-lab generate"));

    env.ok(&["generate"]);
    env.ok(&["--loss", "ce", "train-main"]);
    let out = env.run(&["report", "ce"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("incomplete"), "{}", stderr(&out));
}

#[test]
fn environment_overrides_out_flag() {
    let env = Env::new();
    let target = env.dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_debias-lab"))
        .args(["--out", env.out().to_str().unwrap(), "--config"])
        .arg(env.dir.path().join("exp.toml"))
        .arg("generate")
        .env("DEBIAS_LAB_OUT", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(target.join("data/manifest.json").is_file());
    assert!(!env.out().exists());
}

#[test]
fn sweep_ranks_a_small_grid() {
    let env = Env::new();
    env.ok(&["generate"]);
    env.ok(&["train-biased"]);
    env.ok(&["export-artifacts", "--jobs", "2"]);
    let table = env.ok(&["sweep", "--alpha", "0.1,1", "--beta", "1", "--jobs", "2"]);
    assert_eq!(table.lines().count(), 4, "{table}");
    let cells = std::fs::read_to_string(env.out().join("sweep/cells.jsonl")).unwrap();
    assert_eq!(cells.lines().count(), 2);
    let out = env.run(&["train-main", "--alpha", "0.1,1"]);
    assert_eq!(out.status.code(), Some(2));
}
