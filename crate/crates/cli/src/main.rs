mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use capsid::config::RunConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "capsid", version, about = "Speaker identification on emotional speech with capsule networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Global {
    /// Flat `section.key = value` file or a previous run.json
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on it)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log and skip unreadable clips instead of aborting
    #[arg(long, global = true)]
    skip_errors: bool,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Feature archive written by `extract`
    #[arg(long, global = true)]
    archive: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.batch_size=16`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: manifest.csv plus WAV files
    Synth {
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Extract MFCC feature matrices for every manifest entry
    Extract,
    /// Train and evaluate every trial of the protocol
    Train,
    /// Score a trained checkpoint on its test split
    Eval {
        /// Checkpoint directory (holding best.capw and config.json)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Split plan; defaults to split.json next to the checkpoint
        #[arg(long)]
        split: Option<PathBuf>,
        /// Also score white-noise distorted audio at this speech:noise ratio
        #[arg(long)]
        noise_ratio: Option<f64>,
    },
    /// Clean versus distorted evaluation of a trained checkpoint
    Noise {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        noise_ratio: Option<f64>,
    },
    /// Routing iterations 1..=5 × decoder on/off on one shared split
    Ablate,
    /// Average trial reports of runs; with two runs, compare them
    Report {
        /// Run directories written by `train`
        runs: Vec<PathBuf>,
    },
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    for s in &g.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| capsid::Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let mut flag = |k: &str, v: String| pairs.push((k.into(), v));
    if let Some(s) = g.seed {
        flag("run.seed", s.to_string());
    }
    if let Some(w) = g.workers {
        flag("run.workers", w.to_string());
    }
    if g.skip_errors {
        flag("run.skip_errors", "true".into());
    }
    let path = |p: &PathBuf| p.display().to_string();
    if let Some(p) = &g.out {
        flag("paths.out", path(p));
    }
    if let Some(p) = &g.manifest {
        flag("paths.manifest", path(p));
    }
    if let Some(p) = &g.archive {
        flag("paths.archive", path(p));
    }
    match &cli.command {
        Command::Synth {
            speakers,
            utterances,
            reps,
        } => {
            for (k, v) in [("synth.speakers", speakers), ("synth.utterances", utterances), ("synth.reps", reps)] {
                if let Some(v) = v {
                    flag(k, v.to_string());
                }
            }
        }
        Command::Eval {
            model,
            split,
            noise_ratio,
        }
        | Command::Noise {
            model,
            split,
            noise_ratio,
        } => {
            if let Some(p) = model {
                flag("paths.model", path(p));
            }
            if let Some(p) = split {
                flag("paths.split", path(p));
            }
            if let Some(r) = noise_ratio {
                flag("eval.noise", "true".into());
                flag("eval.noise_ratio", r.to_string());
            }
            if matches!(cli.command, Command::Noise { .. }) {
                flag("eval.noise", "true".into());
            }
        }
        Command::Report { runs } if !runs.is_empty() => {
            flag("paths.compare", runs.iter().map(path).collect::<Vec<_>>().join(","));
        }
        _ => {}
    }
    cfg.set_all(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers.max(1))
        .build_global()
        .context("starting the worker pool")?;
    match cli.command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::Extract => commands::extract(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval { .. } | Command::Noise { .. } => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Report { .. } => commands::report(&cfg),
    }
}

fn error_class(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<capsid::Error>())
        .map(capsid::Error::class)
        .unwrap_or("cli")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAPSID_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_class(&err));
            ExitCode::FAILURE
        }
    }
}
