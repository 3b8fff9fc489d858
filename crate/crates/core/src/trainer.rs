//! Main-model training under the configured loss, evaluation, multi-seed
//! aggregation and the alpha/beta sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{cosine_similarity, saliency, SaliencyTarget};
use crate::autodiff::Graph;
use crate::biaspipe::{check_alignment, BiasArtifact};
use crate::datagen::{LabeledExample, SyntheticDataset};
use crate::error::{Error, Result};
use crate::losses::{example_loss, LossConfig};
use crate::model::{argmax, ClassifierParams, InputView, ModelDims};
use crate::optim::{Adam, AdamConfig, GradAccumulator, LinearSchedule};

fn d_epochs() -> usize {
    3
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    1e-2
}
fn d_warmup() -> f64 {
    0.1
}
fn d_seeds() -> Vec<u64> {
    (0..6).collect()
}
fn d_embed() -> usize {
    16
}
fn d_hidden() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub peak_learning_rate: f64,
    /// Fraction of all optimizer steps spent in linear warmup.
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Seed for the biased model's initialisation and shuffling.
    #[serde(default)]
    pub biased_seed: u64,
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub saliency_target: SaliencyTarget,
    #[serde(default)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            peak_learning_rate: d_lr(),
            warmup_fraction: d_warmup(),
            seeds: d_seeds(),
            biased_seed: 0,
            embed_dim: d_embed(),
            hidden_dim: d_hidden(),
            adam: AdamConfig::default(),
            saliency_target: SaliencyTarget::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.peak_learning_rate >= 0.0 && self.peak_learning_rate.is_finite()) {
            return Err(Error::config(
                "train.peak_learning_rate",
                "must be finite and >= 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("train.warmup_fraction", "must lie in [0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("train.seeds", "need at least one seed"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config(
                "train.embed_dim",
                "model sizes must be positive",
            ));
        }
        self.loss.validate().map_err(|e| match e {
            Error::Config { field, msg } => Error::Config {
                field: format!("train.{field}"),
                msg,
            },
            other => other,
        })
    }

    pub fn dims(&self, vocab_size: usize, num_classes: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_classes,
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_rho: Option<f64>,
    pub mean_rho_star: Option<f64>,
    pub id_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct ExampleStats {
    pub loss: f64,
    pub rho: Option<f64>,
    pub rho_star: Option<f64>,
}

/// Mini-batch Adam loop shared by the main and biased models.
///
/// `step` records one example's loss and adds its gradient into the
/// accumulator; the batch objective is the mean over examples.
pub(crate) fn fit(
    params: &mut ClassifierParams,
    n: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut(&ClassifierParams, usize, &mut GradAccumulator) -> Result<ExampleStats>,
    mut eval: impl FnMut(&ClassifierParams) -> Result<Option<f64>>,
) -> Result<Vec<EpochRecord>> {
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let schedule = LinearSchedule::new(
        config.peak_learning_rate,
        config.warmup_fraction,
        batches_per_epoch * config.epochs,
    );
    let mut adam = Adam::new(config.adam, params)?;
    let mut acc = GradAccumulator::new(params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut global_step = 0;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let (mut rho_sum, mut rho_star_sum, mut rho_count) = (0.0, 0.0, 0usize);

        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            acc.clear();
            for &i in chunk {
                let stats = step(params, i, &mut acc)?;
                if !stats.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch,
                        detail: format!(
                            "example {i}: loss {}, rho {:?}, rho* {:?}",
                            stats.loss, stats.rho, stats.rho_star
                        ),
                    });
                }
                loss_sum += stats.loss;
                if let (Some(r), Some(rs)) = (stats.rho, stats.rho_star) {
                    rho_sum += r;
                    rho_star_sum += rs;
                    rho_count += 1;
                }
            }
            acc.scale(1.0 / chunk.len() as f64);
            global_step += 1;
            adam.update(params, &acc, schedule.lr(global_step));
        }

        let mean = |s: f64| (rho_count > 0).then(|| s / rho_count as f64);
        history.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            mean_rho: mean(rho_sum),
            mean_rho_star: mean(rho_star_sum),
            id_acc: eval(params)?,
        });
    }
    Ok(history)
}

/// Trains the main model on full inputs with `config.loss`.
///
/// `dims` fixes the model shape; `id_eval`, if given,
/// is scored after every epoch for the history.
pub fn train_main(
    train: &[LabeledExample],
    artifacts: Option<&[BiasArtifact]>,
    config: &TrainConfig,
    dims: ModelDims,
    seed: u64,
    id_eval: Option<&[LabeledExample]>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::DegenerateData("empty training set".into()));
    }
    let variant = config.loss.variant;
    let artifacts = if variant.needs_artifacts() {
        let a = artifacts
            .ok_or_else(|| Error::Alignment(format!("loss `{variant}` requires bias artifacts")))?;
        check_alignment(train, a, dims.num_classes)?;
        Some(a)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ClassifierParams::init(dims, &mut rng)?;
    let views: Vec<InputView> = train
        .iter()
        .map(|ex| ex.full_view())
        .collect::<Result<_>>()?;

    let step =
        |p: &ClassifierParams, i: usize, acc: &mut GradAccumulator| -> Result<ExampleStats> {
            let ex = &train[i];
            let mut g = Graph::new();
            let fv = p.build(&mut g, &views[i])?;

            let rho = match artifacts {
                Some(arts) if variant.needs_similarity() => {
                    let target = match config.saliency_target {
                        SaliencyTarget::GoldLabel => ex.label,
                        SaliencyTarget::Predicted => argmax(g.value(fv.logits)),
                    };
                    let logit = g.pick(fv.logits, target)?;
                    let input_grad = g.backward(logit)?;
                    let main_sal = saliency(
                        &input_grad.get(fv.embedded),
                        &g.tensor(fv.embedded),
                        &arts[i].saliency.positions,
                    )?;
                    Some(cosine_similarity(&main_sal, &arts[i].saliency)?)
                }
                _ => None,
            };

            let log_probs = g.log_softmax(fv.logits)?;
            let biased = match artifacts {
                Some(arts) => {
                    Some(g.constant_values(vec![1, dims.num_classes], arts[i].log_probs.clone())?)
                }
                None => None,
            };
            let loss = example_loss(&mut g, log_probs, biased, rho, ex.label, &config.loss)?;
            let grads = g.backward(loss.total)?;
            acc.add(&grads, &fv.params);
            Ok(ExampleStats {
                loss: g.scalar_value(loss.total),
                rho: loss.rho,
                rho_star: loss.rho_star,
            })
        };
    let eval = |p: &ClassifierParams| match id_eval {
        Some(split) => evaluate(p, split, ViewKind::Full).map(Some),
        None => Ok(None),
    };

    let history = fit(&mut params, train.len(), config, &mut rng, step, eval)?;
    Ok(TrainOutcome { params, history })
}

/// Which part of each example the model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Full,
    BiasSegment,
}

pub(crate) fn view_of(ex: &LabeledExample, kind: ViewKind) -> Result<InputView> {
    match kind {
        ViewKind::Full => ex.full_view(),
        ViewKind::BiasSegment => ex.bias_view(),
    }
}

/// Argmax predictions (ties toward the lowest class index).
pub fn predictions(
    params: &ClassifierParams,
    split: &[LabeledExample],
    kind: ViewKind,
) -> Result<Vec<usize>> {
    split
        .iter()
        .map(|ex| params.predict(&view_of(ex, kind)?))
        .collect()
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(
    params: &ClassifierParams,
    split: &[LabeledExample],
    kind: ViewKind,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::DegenerateData(
            "cannot evaluate on an empty split".into(),
        ));
    }
    let preds = predictions(params, split, kind)?;
    let correct = preds
        .iter()
        .zip(split)
        .filter(|(p, ex)| **p == ex.label)
        .count();
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSummary {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single run.
    pub std: f64,
    pub raw: Vec<f64>,
}

impl SplitSummary {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let n = raw.len() as f64;
        if !raw.is_empty() && raw.windows(2).all(|w| w[0] == w[1]) {
            return SplitSummary {
                mean: raw[0],
                std: 0.0,
                raw,
            };
        }
        let mean = raw.iter().sum::<f64>() / n;
        let std = if raw.len() > 1 {
            (raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        SplitSummary { mean, std, raw }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub id_test: SplitSummary,
    pub ood_test: SplitSummary,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub id_acc: f64,
    pub ood_acc: f64,
}

impl EvalReport {
    pub fn from_runs(config: &TrainConfig, runs: &[SeedRun]) -> Self {
        EvalReport {
            config: config.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            id_test: SplitSummary::from_raw(runs.iter().map(|r| r.id_acc).collect()),
            ood_test: SplitSummary::from_raw(runs.iter().map(|r| r.ood_acc).collect()),
        }
    }
}

/// Runs `f` over `items` on up to `jobs` threads, preserving order.
pub(crate) fn run_parallel<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

/// Trains and scores one model per seed in `seeds` (any count ≥ 1).
pub fn train_seeds(
    data: &SyntheticDataset,
    artifacts: Option<&[BiasArtifact]>,
    config: &TrainConfig,
    dims: ModelDims,
    jobs: usize,
) -> Result<Vec<SeedRun>> {
    config.validate()?;
    let results = run_parallel(&config.seeds, jobs, |&seed| -> Result<SeedRun> {
        let outcome = train_main(
            &data.train,
            artifacts,
            config,
            dims,
            seed,
            Some(&data.id_test),
        )?;
        let id_acc = evaluate(&outcome.params, &data.id_test, ViewKind::Full)?;
        let ood_acc = evaluate(&outcome.params, &data.ood_test, ViewKind::Full)?;
        Ok(SeedRun {
            seed,
            outcome,
            id_acc,
            ood_acc,
        })
    });
    config
        .seeds
        .iter()
        .zip(results)
        .map(|(&seed, r)| {
            r.map_err(|e| Error::Seed {
                seed,
                source: Box::new(e),
            })
        })
        .collect()
}

/// `k ≥ 2` independent runs aggregated into mean ± sample std per split.
pub fn multi_seed_run(
    data: &SyntheticDataset,
    artifacts: Option<&[BiasArtifact]>,
    config: &TrainConfig,
    dims: ModelDims,
    jobs: usize,
) -> Result<(EvalReport, Vec<SeedRun>)> {
    if config.seeds.len() < 2 {
        return Err(Error::config(
            "train.seeds",
            "multi-seed runs need at least two seeds",
        ));
    }
    let runs = train_seeds(data, artifacts, config, dims, jobs)?;
    Ok((EvalReport::from_runs(config, &runs), runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub report: EvalReport,
}

/// Every (alpha, beta) pair as a multi-seed run, ranked by mean OOD
/// accuracy (best first; ties keep grid order).
pub fn sweep(
    alphas: &[f64],
    betas: &[f64],
    base: &TrainConfig,
    data: &SyntheticDataset,
    artifacts: Option<&[BiasArtifact]>,
    dims: ModelDims,
    jobs: usize,
) -> Result<Vec<SweepCell>> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::config(
            "sweep",
            "alpha and beta grids must be non-empty",
        ));
    }
    let mut cells = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let mut config = base.clone();
            config.loss.alpha = alpha;
            config.loss.beta = beta;
            let (report, _) = multi_seed_run(data, artifacts, &config, dims, jobs)?;
            cells.push(SweepCell {
                alpha,
                beta,
                report,
            });
        }
    }
    cells.sort_by(|a, b| b.report.ood_test.mean.total_cmp(&a.report.ood_test.mean));
    Ok(cells)
}
