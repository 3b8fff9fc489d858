use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use debias_core::config::ExperimentConfig;
use debias_core::losses::LossVariant;
use debias_core::pipeline::{self, StageStatus, Workspace};
use debias_core::Error;

/// Similarity-weighted product-of-experts debiasing on synthetic data.
#[derive(Debug, Parser)]
#[command(name = "debias-lab", version)]
struct Cli {
    /// Experiment config (TOML). Omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset and biased-model seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Main-model seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Loss variant: ce, poe, poe_ce or poe_sals.
    #[arg(long, global = true)]
    loss: Option<LossVariant>,
    /// Cross-entropy weight; a comma-separated grid for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Similarity sharpness; a comma-separated grid for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    /// Output directory. DEBIAS_LAB_OUT takes precedence when set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for seeds, sweep cells and artifact export.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the resolved config as TOML.
    ShowConfig,
    /// Write the train / ID / OOD splits.
    Generate,
    /// Train the biased model on the bias segment.
    TrainBiased,
    /// Freeze the biased model's log-probabilities and saliencies.
    ExportArtifacts,
    /// Train the main model for every configured seed.
    TrainMain {
        /// Run directory name under `runs/`; defaults to the loss name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Score a run's checkpoints on the ID and OOD splits.
    Evaluate {
        #[arg(long)]
        label: Option<String>,
    },
    /// Multi-seed runs over the alpha × beta grid.
    Sweep,
    /// Comparison table over evaluated runs (all runs if none given).
    Report { labels: Vec<String> },
    /// Every stage, with one run per loss variant, then the report.
    RunAll,
}

fn single(name: &str, values: &[f64]) -> Result<f64, Error> {
    match values {
        [v] => Ok(*v),
        _ => Err(Error::Config {
            field: name.into(),
            msg: "expects a single value outside `sweep`".into(),
        }),
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.train.biased_seed = seed;
    }
    if let Some(seeds) = &cli.seeds {
        cfg.train.seeds = seeds.clone();
    }
    if let Some(loss) = cli.loss {
        cfg.train.loss.variant = loss;
    }
    let is_sweep = matches!(cli.command, Command::Sweep);
    if let Some(alpha) = &cli.alpha {
        if is_sweep {
            cfg.sweep.alphas = alpha.clone();
        } else {
            cfg.train.loss.alpha = single("alpha", alpha)?;
        }
    }
    if let Some(beta) = &cli.beta {
        if is_sweep {
            cfg.sweep.betas = beta.clone();
        } else {
            cfg.train.loss.beta = single("beta", beta)?;
        }
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(out) = std::env::var_os("DEBIAS_LAB_OUT").filter(|v| !v.is_empty()) {
        cfg.out = PathBuf::from(out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Seed { source, .. } => exit_code(source),
        Error::Config { .. } | Error::Parse { .. } => 2,
        Error::MissingFile { .. } => 3,
        Error::DigestMismatch { .. } => 4,
        Error::Alignment(_) | Error::DegenerateData(_) | Error::NonFiniteLoss { .. } => 5,
        _ => 1,
    }
}

fn status(stage: &str, s: StageStatus) {
    eprintln!("{stage}: {s}");
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolve(&cli)?;
    let toml = cfg.to_toml()?;
    if let Command::ShowConfig = cli.command {
        print!("{toml}");
        return Ok(());
    }
    eprintln!("# resolved config\n{toml}");
    let ws = Workspace::new(&cfg.out);
    let jobs = cli.jobs.max(1);
    let label = |l: &Option<String>| {
        l.clone()
            .unwrap_or_else(|| cfg.train.loss.variant.as_str().to_string())
    };
    match &cli.command {
        Command::ShowConfig => {}
        Command::Generate => status("generate", pipeline::generate(&ws, &cfg)?),
        Command::TrainBiased => status("train-biased", pipeline::train_biased(&ws, &cfg)?),
        Command::ExportArtifacts => status(
            "export-artifacts",
            pipeline::export_artifacts(&ws, &cfg, jobs)?,
        ),
        Command::TrainMain { label: l } => {
            let l = label(l);
            status(
                &format!("train-main {l}"),
                pipeline::train_main(&ws, &cfg, &l, jobs)?,
            )
        }
        Command::Evaluate { label: l } => {
            let l = label(l);
            status(&format!("evaluate {l}"), pipeline::evaluate(&ws, &cfg, &l)?);
            let r = pipeline::read_eval_report(&ws, &l)?;
            println!(
                "{l}: id {:.2}±{:.2}  ood {:.2}±{:.2}",
                100.0 * r.id_test.mean,
                100.0 * r.id_test.std,
                100.0 * r.ood_test.mean,
                100.0 * r.ood_test.std
            );
        }
        Command::Sweep => {
            status("sweep", pipeline::sweep(&ws, &cfg, jobs)?);
            let table =
                std::fs::read_to_string(ws.path("sweep/table.txt")).map_err(|e| Error::Io {
                    path: ws.path("sweep/table.txt"),
                    source: e,
                })?;
            print!("{table}");
        }
        Command::Report { labels } => {
            let labels = if labels.is_empty() {
                pipeline::run_labels(&ws)?
            } else {
                labels.clone()
            };
            print!("{}", pipeline::report(&ws, &labels)?);
        }
        Command::RunAll => print!("{}", pipeline::run_all(&ws, &cfg, jobs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
