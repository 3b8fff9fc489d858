//! The experiment as a chain of on-disk stages.
//!
//! Every stage directory holds a `manifest.json` recording the resolved
//! config it ran with and the SHA-256 of each file it read and wrote.
//! Consumers verify their upstream manifests before reading, so a modified
//! or stale file is refused instead of silently used, and re-running a stage
//! whose config and inputs are unchanged is a no-op.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::biaspipe::{self, BiasArtifact};
use crate::config::ExperimentConfig;
use crate::datagen::{self, LabeledExample, Split, SyntheticDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::LossVariant;
use crate::model::{ClassifierParams, ModelDims};
use crate::report::{render_table, ReportRow};
use crate::trainer::{self, EvalReport, SeedRun, TrainConfig, ViewKind};

pub const MANIFEST: &str = "manifest.json";

const DATA: &str = "data";
const BIASED: &str = "biased";
const ARTIFACTS: &str = "artifacts";
const SWEEP: &str = "sweep";
const REPORT: &str = "report";
const RUNS: &str = "runs";

pub const BIASED_MODEL: &str = "biased/model.json";
pub const ARTIFACT_FILE: &str = "artifacts/train.jsonl";

pub fn split_file(split: Split) -> String {
    format!("{DATA}/{}.jsonl", split.as_str())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage: String,
    /// CLI command that produces this stage.
    pub command: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

impl std::fmt::Display for StageStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageStatus::Ran => "done",
            StageStatus::UpToDate => "up to date",
        })
    }
}

/// Output directory of one experiment.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join(MANIFEST)
    }

    pub fn read_manifest(&self, stage: &str, command: &str) -> Result<StageManifest> {
        let path = self.manifest_path(stage);
        io::read_json(&path).map_err(|e| match e {
            Error::MissingFile { path, .. } => Error::MissingFile {
                path,
                hint: format!("run `debias-lab {command}` first"),
            },
            other => other,
        })
    }

    /// Checks that a stage's outputs are intact and its inputs unchanged.
    pub fn verify_stage(&self, stage: &str, command: &str) -> Result<StageManifest> {
        let manifest = self.read_manifest(stage, command)?;
        for (rel, expected) in &manifest.outputs {
            let path = self.path(rel);
            let found = io::digest_file(&path).map_err(|e| match e {
                Error::MissingFile { path, .. } => Error::MissingFile {
                    path,
                    hint: format!("re-run `debias-lab {command}`"),
                },
                other => other,
            })?;
            if &found != expected {
                return Err(Error::DigestMismatch {
                    path,
                    expected: expected.clone(),
                    found,
                    hint: format!(
                        "the file changed after `debias-lab {command}` wrote it; re-run it"
                    ),
                });
            }
        }
        for (rel, expected) in &manifest.inputs {
            let path = self.path(rel);
            let found = io::digest_file(&path)?;
            if &found != expected {
                return Err(Error::DigestMismatch {
                    path,
                    expected: expected.clone(),
                    found,
                    hint: format!(
                        "`{}` was built from an older version of this file and is stale; re-run `debias-lab {command}`",
                        manifest.stage
                    ),
                });
            }
        }
        Ok(manifest)
    }

    fn up_to_date(&self, stage: &str, config: &Value, inputs: &BTreeMap<String, String>) -> bool {
        let Ok(m) = io::read_json::<StageManifest>(&self.manifest_path(stage)) else {
            return false;
        };
        &m.config == config
            && &m.inputs == inputs
            && m.outputs
                .iter()
                .all(|(rel, d)| io::digest_file(&self.path(rel)).ok().as_ref() == Some(d))
    }

    /// Runs `body` unless the stage already ran with this config on these
    /// inputs. `upstream` names (stage, command, file) triples read by it.
    fn run_stage(
        &self,
        stage: &str,
        command: &str,
        config: Value,
        upstream: &[(&str, &str, String)],
        body: impl FnOnce() -> Result<Vec<(String, Vec<u8>)>>,
    ) -> Result<StageStatus> {
        let mut inputs = BTreeMap::new();
        let mut verified: BTreeMap<&str, StageManifest> = BTreeMap::new();
        for (up_stage, up_command, rel) in upstream {
            if !verified.contains_key(up_stage) {
                verified.insert(up_stage, self.verify_stage(up_stage, up_command)?);
            }
            let digest = verified[up_stage]
                .outputs
                .get(rel)
                .ok_or_else(|| Error::MissingFile {
                    path: self.path(rel),
                    hint: format!("not produced by `debias-lab {up_command}`; re-run it"),
                })?;
            inputs.insert(rel.clone(), digest.clone());
        }
        if self.up_to_date(stage, &config, &inputs) {
            return Ok(StageStatus::UpToDate);
        }
        let files = body()?;
        let mut outputs = BTreeMap::new();
        for (rel, bytes) in files {
            io::write_bytes(&self.path(&rel), &bytes)?;
            outputs.insert(rel, io::digest_bytes(&bytes));
        }
        let manifest = StageManifest {
            stage: stage.to_string(),
            command: command.to_string(),
            config,
            inputs,
            outputs,
        };
        io::write_json(&self.manifest_path(stage), &manifest)?;
        Ok(StageStatus::Ran)
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Serde(e.to_string()))
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Serde(e.to_string()))
}

/// Directory of a main-model run.
pub fn run_stage_dir(label: &str) -> String {
    format!("{RUNS}/{label}")
}

fn eval_stage_dir(label: &str) -> String {
    format!("{RUNS}/{label}/eval")
}

fn seed_model(label: &str, seed: u64) -> String {
    format!("{RUNS}/{label}/seed-{seed}/model.json")
}

fn seed_history(label: &str, seed: u64) -> String {
    format!("{RUNS}/{label}/seed-{seed}/history.jsonl")
}

fn eval_report_file(label: &str) -> String {
    format!("{RUNS}/{label}/eval/report.json")
}

/// The spec the on-disk dataset was generated from; must match `config`.
fn dataset_spec(ws: &Workspace, config: &ExperimentConfig) -> Result<SyntheticSpec> {
    let manifest = ws.read_manifest(DATA, "generate")?;
    let spec: SyntheticSpec = from_value(manifest.config)?;
    if spec != config.data {
        return Err(Error::config(
            "data",
            format!(
                "differs from the dataset in {}; re-run `debias-lab generate`",
                ws.path(DATA).display()
            ),
        ));
    }
    Ok(spec)
}

fn dims(config: &ExperimentConfig) -> ModelDims {
    config
        .train
        .dims(config.data.vocab_size, config.data.num_classes)
}

fn read_split(ws: &Workspace, split: Split) -> Result<Vec<LabeledExample>> {
    datagen::read_dataset(&ws.path(&split_file(split)))
}

fn read_all_splits(ws: &Workspace) -> Result<SyntheticDataset> {
    Ok(SyntheticDataset {
        train: read_split(ws, Split::Train)?,
        id_test: read_split(ws, Split::IdTest)?,
        ood_test: read_split(ws, Split::OodTest)?,
    })
}

fn data_input(split: Split) -> (&'static str, &'static str, String) {
    (DATA, "generate", split_file(split))
}

/// Fields of the training config that affect the biased model.
fn biased_config(train: &TrainConfig) -> Result<Value> {
    let mut cfg = train.clone();
    cfg.seeds = vec![train.biased_seed];
    cfg.loss = crate::losses::LossConfig::new(LossVariant::Ce);
    to_value(&cfg)
}

pub fn generate(ws: &Workspace, config: &ExperimentConfig) -> Result<StageStatus> {
    config.data.validate()?;
    ws.run_stage(DATA, "generate", to_value(&config.data)?, &[], || {
        let data = datagen::generate(&config.data)?;
        Split::ALL
            .iter()
            .map(|&s| Ok((split_file(s), datagen::to_bytes(data.split(s))?)))
            .collect()
    })
}

pub fn train_biased(ws: &Workspace, config: &ExperimentConfig) -> Result<StageStatus> {
    config.validate()?;
    dataset_spec(ws, config)?;
    ws.run_stage(
        BIASED,
        "train-biased",
        biased_config(&config.train)?,
        &[data_input(Split::Train)],
        || {
            let train = read_split(ws, Split::Train)?;
            let params = biaspipe::train_biased(&train, &config.train, dims(config))?;
            Ok(vec![(
                BIASED_MODEL.to_string(),
                params.to_checkpoint_bytes()?,
            )])
        },
    )
}

pub fn export_artifacts(
    ws: &Workspace,
    config: &ExperimentConfig,
    jobs: usize,
) -> Result<StageStatus> {
    dataset_spec(ws, config)?;
    ws.run_stage(
        ARTIFACTS,
        "export-artifacts",
        Value::Object(Default::default()),
        &[
            data_input(Split::Train),
            (BIASED, "train-biased", BIASED_MODEL.to_string()),
        ],
        || {
            let train = read_split(ws, Split::Train)?;
            let params = ClassifierParams::load(&ws.path(BIASED_MODEL))?;
            let artifacts = biaspipe::export_bias_artifacts(&params, &train, jobs)?;
            Ok(vec![(
                ARTIFACT_FILE.to_string(),
                io::to_jsonl_bytes(&artifacts)?,
            )])
        },
    )
}

fn artifact_input() -> (&'static str, &'static str, String) {
    (ARTIFACTS, "export-artifacts", ARTIFACT_FILE.to_string())
}

fn load_artifacts(ws: &Workspace, variant: LossVariant) -> Result<Option<Vec<BiasArtifact>>> {
    if variant.needs_artifacts() {
        biaspipe::read_artifacts(&ws.path(ARTIFACT_FILE)).map(Some)
    } else {
        Ok(None)
    }
}

/// Trains one model per seed under `config.train`; outputs go to
/// `runs/<label>/seed-<n>/`.
pub fn train_main(
    ws: &Workspace,
    config: &ExperimentConfig,
    label: &str,
    jobs: usize,
) -> Result<StageStatus> {
    config.validate()?;
    dataset_spec(ws, config)?;
    let variant = config.train.loss.variant;
    let mut upstream = vec![data_input(Split::Train), data_input(Split::IdTest)];
    if variant.needs_artifacts() {
        upstream.push(artifact_input());
    }
    ws.run_stage(
        &run_stage_dir(label),
        "train-main",
        to_value(&config.train)?,
        &upstream,
        || {
            let train = read_split(ws, Split::Train)?;
            let id_test = read_split(ws, Split::IdTest)?;
            let artifacts = load_artifacts(ws, variant)?;
            let results = trainer::run_parallel(&config.train.seeds, jobs, |&seed| {
                trainer::train_main(
                    &train,
                    artifacts.as_deref(),
                    &config.train,
                    dims(config),
                    seed,
                    Some(&id_test),
                )
                .map_err(|e| Error::Seed {
                    seed,
                    source: Box::new(e),
                })
            });
            let mut files = Vec::new();
            for (&seed, outcome) in config.train.seeds.iter().zip(results) {
                let outcome = outcome?;
                files.push((
                    seed_model(label, seed),
                    outcome.params.to_checkpoint_bytes()?,
                ));
                files.push((
                    seed_history(label, seed),
                    io::to_jsonl_bytes(&outcome.history)?,
                ));
            }
            Ok(files)
        },
    )
}

/// Scores every seed's checkpoint of run `label` on the ID and OOD splits.
pub fn evaluate(ws: &Workspace, config: &ExperimentConfig, label: &str) -> Result<StageStatus> {
    dataset_spec(ws, config)?;
    let run_dir = run_stage_dir(label);
    let run = ws.verify_stage(&run_dir, "train-main")?;
    let train_config: TrainConfig = from_value(run.config.clone())?;
    let mut upstream = vec![data_input(Split::IdTest), data_input(Split::OodTest)];
    for &seed in &train_config.seeds {
        upstream.push((run_dir.as_str(), "train-main", seed_model(label, seed)));
    }
    ws.run_stage(
        &eval_stage_dir(label),
        "evaluate",
        Value::Object(Default::default()),
        &upstream,
        || {
            let id_test = read_split(ws, Split::IdTest)?;
            let ood_test = read_split(ws, Split::OodTest)?;
            let runs = train_config
                .seeds
                .iter()
                .map(|&seed| {
                    let params = ClassifierParams::load(&ws.path(&seed_model(label, seed)))?;
                    let history = io::read_jsonl(&ws.path(&seed_history(label, seed)))?;
                    Ok(SeedRun {
                        seed,
                        id_acc: trainer::evaluate(&params, &id_test, ViewKind::Full)?,
                        ood_acc: trainer::evaluate(&params, &ood_test, ViewKind::Full)?,
                        outcome: trainer::TrainOutcome { params, history },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = EvalReport::from_runs(&train_config, &runs);
            let mut bytes =
                serde_json::to_vec_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
            bytes.push(b'\n');
            Ok(vec![(eval_report_file(label), bytes)])
        },
    )
}

pub fn read_eval_report(ws: &Workspace, label: &str) -> Result<EvalReport> {
    let stage = eval_stage_dir(label);
    let path = ws.manifest_path(&stage);
    if !path.exists() {
        return Err(Error::MissingFile {
            path,
            hint: format!(
                "run directory `{label}` is incomplete; run `debias-lab evaluate` for it"
            ),
        });
    }
    ws.verify_stage(&stage, "evaluate")?;
    io::read_json(&ws.path(&eval_report_file(label)))
}

/// alpha × beta grid of multi-seed runs, ranked by mean OOD accuracy.
pub fn sweep(ws: &Workspace, config: &ExperimentConfig, jobs: usize) -> Result<StageStatus> {
    config.validate()?;
    dataset_spec(ws, config)?;
    let upstream = vec![
        data_input(Split::Train),
        data_input(Split::IdTest),
        data_input(Split::OodTest),
        artifact_input(),
    ];
    let stage_config = to_value(&(&config.train, &config.sweep))?;
    ws.run_stage(SWEEP, "sweep", stage_config, &upstream, || {
        let data = read_all_splits(ws)?;
        let artifacts = load_artifacts(ws, config.train.loss.variant)?;
        let cells = trainer::sweep(
            &config.sweep.alphas,
            &config.sweep.betas,
            &config.train,
            &data,
            artifacts.as_deref(),
            dims(config),
            jobs,
        )?;
        let rows: Vec<ReportRow> = cells
            .iter()
            .map(|c| ReportRow::new(format!("alpha={} beta={}", c.alpha, c.beta), &c.report))
            .collect();
        Ok(vec![
            (format!("{SWEEP}/cells.jsonl"), io::to_jsonl_bytes(&cells)?),
            (
                format!("{SWEEP}/table.txt"),
                render_table(&rows)?.into_bytes(),
            ),
        ])
    })
}

/// Labels of every run directory under `runs/`, sorted.
pub fn run_labels(ws: &Workspace) -> Result<Vec<String>> {
    let dir = ws.path(RUNS);
    let entries = std::fs::read_dir(&dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: dir.clone(),
                hint: "run `debias-lab train-main` and `debias-lab evaluate` first".into(),
            }
        } else {
            Error::io(&dir, e)
        }
    })?;
    let mut labels = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().is_dir() {
            labels.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    labels.sort_by_key(|l| {
        let rank = LossVariant::ALL.iter().position(|v| v.as_str() == l);
        (rank.unwrap_or(usize::MAX), l.clone())
    });
    Ok(labels)
}

/// Renders the comparison table for `labels` and returns it.
pub fn report(ws: &Workspace, labels: &[String]) -> Result<String> {
    if labels.is_empty() {
        return Err(Error::config("report", "no run directories found"));
    }
    let mut upstream = Vec::new();
    let stages: Vec<String> = labels.iter().map(|l| eval_stage_dir(l)).collect();
    let mut rows = Vec::new();
    for (label, stage) in labels.iter().zip(&stages) {
        rows.push(ReportRow::new(label.clone(), &read_eval_report(ws, label)?));
        upstream.push((stage.as_str(), "evaluate", eval_report_file(label)));
    }
    let table = render_table(&rows)?;
    ws.run_stage(REPORT, "report", to_value(&labels)?, &upstream, || {
        Ok(vec![
            (format!("{REPORT}/table.txt"), table.clone().into_bytes()),
            (format!("{REPORT}/rows.jsonl"), io::to_jsonl_bytes(&rows)?),
        ])
    })?;
    Ok(table)
}

/// Every stage in order, training one run per loss variant.
pub fn run_all(ws: &Workspace, config: &ExperimentConfig, jobs: usize) -> Result<String> {
    generate(ws, config)?;
    train_biased(ws, config)?;
    export_artifacts(ws, config, jobs)?;
    let mut labels = Vec::new();
    for variant in LossVariant::ALL {
        let mut cfg = config.clone();
        cfg.train.loss.variant = variant;
        train_main(ws, &cfg, variant.as_str(), jobs)?;
        evaluate(ws, &cfg, variant.as_str())?;
        labels.push(variant.as_str().to_string());
    }
    report(ws, &labels)
}
