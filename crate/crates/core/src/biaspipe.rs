//! The biased model: training on the bias segment alone and exporting its
//! frozen per-example log-probabilities and saliencies.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{model_saliency, SaliencyTarget, SaliencyVector};
use crate::autodiff::Graph;
use crate::datagen::LabeledExample;
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{ce_loss, check_log_probs};
use crate::model::{ClassifierParams, ModelDims};
use crate::optim::GradAccumulator;
use crate::trainer::{fit, run_parallel, ExampleStats, TrainConfig};

/// Frozen biased-model outputs for one training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasArtifact {
    pub example_index: usize,
    pub log_probs: Vec<f64>,
    /// Over the example's bias-segment positions.
    pub saliency: SaliencyVector,
}

impl BiasArtifact {
    fn check(&self, example: &LabeledExample, num_classes: usize) -> Result<()> {
        if self.log_probs.len() != num_classes {
            return Err(Error::Alignment(format!(
                "artifact {} has {} log-probs, expected {num_classes}",
                self.example_index,
                self.log_probs.len()
            )));
        }
        check_log_probs(&self.log_probs)?;
        let segment = example.segment();
        if self.saliency.is_empty() || self.saliency.positions.iter().any(|p| !segment.contains(p))
        {
            return Err(Error::Alignment(format!(
                "artifact {} saliency positions {:?} are not within bias segment {segment:?}",
                self.example_index, self.saliency.positions
            )));
        }
        SaliencyVector::new(
            self.saliency.positions.clone(),
            self.saliency.scores.clone(),
        )?;
        Ok(())
    }
}

/// Verifies one artifact per example, in order, each well formed.
pub fn check_alignment(
    examples: &[LabeledExample],
    artifacts: &[BiasArtifact],
    num_classes: usize,
) -> Result<()> {
    if examples.len() != artifacts.len() {
        return Err(Error::Alignment(format!(
            "{} artifacts for {} examples",
            artifacts.len(),
            examples.len()
        )));
    }
    for (i, (ex, art)) in examples.iter().zip(artifacts).enumerate() {
        if art.example_index != i {
            return Err(Error::Alignment(format!(
                "artifact at row {i} carries example_index {}",
                art.example_index
            )));
        }
        art.check(ex, num_classes)?;
    }
    Ok(())
}

/// Trains the biased model with cross-entropy on bias-segment views.
pub fn train_biased(
    train: &[LabeledExample],
    config: &TrainConfig,
    dims: ModelDims,
) -> Result<ClassifierParams> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::DegenerateData("empty training set".into()))?
        .label;
    if train.iter().all(|ex| ex.label == first) {
        return Err(Error::DegenerateData(format!(
            "all {} training labels are class {first}; the biased model would learn nothing",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.biased_seed);
    let mut params = ClassifierParams::init(dims, &mut rng)?;
    let views = train
        .iter()
        .map(|ex| ex.bias_view())
        .collect::<Result<Vec<_>>>()?;

    let step =
        |p: &ClassifierParams, i: usize, acc: &mut GradAccumulator| -> Result<ExampleStats> {
            let mut g = Graph::new();
            let fv = p.build(&mut g, &views[i])?;
            let lp = g.log_softmax(fv.logits)?;
            let loss = ce_loss(&mut g, lp, train[i].label)?;
            let grads = g.backward(loss)?;
            acc.add(&grads, &fv.params);
            Ok(ExampleStats {
                loss: g.scalar_value(loss),
                ..Default::default()
            })
        };
    fit(&mut params, train.len(), config, &mut rng, step, |_| {
        Ok(None)
    })?;
    Ok(params)
}

fn artifact_for(
    params: &ClassifierParams,
    index: usize,
    ex: &LabeledExample,
) -> Result<BiasArtifact> {
    let view = ex.bias_view()?;
    let (logits, saliency) = model_saliency(
        params,
        &view,
        ex.label,
        SaliencyTarget::GoldLabel,
        &ex.bias_positions(),
    )?;
    let mut g = Graph::new();
    let l = g.constant(&logits);
    let lp = g.log_softmax(l)?;
    Ok(BiasArtifact {
        example_index: index,
        log_probs: g.value(lp).to_vec(),
        saliency,
    })
}

/// One artifact per example, index-aligned; `jobs > 1` computes in parallel.
pub fn export_bias_artifacts(
    params: &ClassifierParams,
    examples: &[LabeledExample],
    jobs: usize,
) -> Result<Vec<BiasArtifact>> {
    let indexed: Vec<(usize, &LabeledExample)> = examples.iter().enumerate().collect();
    run_parallel(&indexed, jobs, |&(i, ex)| artifact_for(params, i, ex))
        .into_iter()
        .collect()
}

pub fn write_artifacts(path: &Path, artifacts: &[BiasArtifact]) -> Result<()> {
    io::write_jsonl(path, artifacts)
}

pub fn read_artifacts(path: &Path) -> Result<Vec<BiasArtifact>> {
    io::read_jsonl(path)
}
