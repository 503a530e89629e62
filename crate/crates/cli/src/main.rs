//! `teamcoach`: data generation, training, evaluation, coaching experiments
//! and the session service.
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 runtime.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use teamcoach::btil::LabelGranularity;
use teamcoach::domains::DomainKind;

use crate::config::{Coached, Config};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<teamcoach::Error> for CliError {
    fn from(e: teamcoach::Error) -> Self {
        use teamcoach::Error as E;
        match e {
            E::Config(_)
            | E::Dataset(_)
            | E::InvalidModel(_)
            | E::Dimension(_)
            | E::Domain(_)
            | E::UnreachableSubtask { .. }
            | E::InvalidState(_)
            | E::Json(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "teamcoach", version, about = "Team modelling, intent filtering and coaching experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file (or a manifest from an earlier run).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [env: TEAMCOACH_OUT] [default: teamcoach-out]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    domain: Option<DomainKind>,
    /// Domain layout file replacing the shipped default.
    #[arg(long, global = true)]
    domain_config: Option<PathBuf>,
    /// Probability that the synthetic human keeps its intent.
    #[arg(long, global = true)]
    stubbornness: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the synthetic team and write a partly labelled dataset.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long = "label-frac")]
        label_fraction: Option<f64>,
        #[arg(long, value_parser = parse_granularity)]
        granularity: Option<LabelGranularity>,
        #[arg(long)]
        member: Option<usize>,
    },
    /// Fit a behavior model to a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        prior_alpha: Option<f64>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        require_labels: bool,
    },
    /// Success / Wrong / Nowhere rates per intent.
    EvalModel {
        /// synthetic, scripted, trained or a model file.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Paired coached and uncoached trials with a permutation test.
    Experiment {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum)]
        coached: Option<Coached>,
        /// The coach's team model: synthetic, scripted, trained or a file.
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        coach: CoachFlags,
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Mean coached score over candidate thresholds.
    GridsearchDelta {
        /// Comma-separated candidates.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        coach: CoachFlags,
    },
    /// Run the session service.
    Serve {
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        persist_dir: Option<PathBuf>,
        /// Coach model file for the configured domain.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render a session log or a dataset episode.
    Replay {
        /// events.jsonl from a session, or a dataset file.
        input: PathBuf,
        /// Episode index when replaying a dataset.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Write one scene frame per step into this directory instead of printing.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct CoachFlags {
    #[arg(long)]
    cost: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Probability that a synthetic member adopts a recommendation.
    #[arg(long)]
    acceptance: Option<f64>,
    /// dp, mc or auto.
    #[arg(long)]
    mode: Option<String>,
    /// Monte Carlo rollouts per estimate.
    #[arg(long)]
    rollouts: Option<usize>,
}

fn parse_granularity(s: &str) -> Result<LabelGranularity, String> {
    match s {
        "trajectory" => Ok(LabelGranularity::Trajectory),
        "step" => Ok(LabelGranularity::Step),
        _ => Err(format!("expected trajectory or step, got {s:?}")),
    }
}

impl CoachFlags {
    fn apply(&self, cfg: &mut Config) -> Result<(), CliError> {
        use teamcoach::coach::ReturnMode;
        let mut c = cfg.coach();
        if let Some(v) = self.cost {
            c.cost = v;
        }
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if let Some(v) = self.acceptance {
            c.acceptance = v;
        }
        let n = self.rollouts.unwrap_or(match c.mode {
            ReturnMode::MonteCarlo { rollouts } | ReturnMode::Auto { rollouts, .. } => rollouts,
            ReturnMode::Dp => 200,
        });
        c.mode = match self.mode.as_deref() {
            None => match c.mode {
                ReturnMode::MonteCarlo { .. } => ReturnMode::MonteCarlo { rollouts: n },
                ReturnMode::Auto { work_cap, .. } => ReturnMode::Auto { rollouts: n, work_cap },
                ReturnMode::Dp => ReturnMode::Dp,
            },
            Some("dp") => ReturnMode::Dp,
            Some("mc") => ReturnMode::MonteCarlo { rollouts: n },
            Some("auto") => ReturnMode::Auto { rollouts: n, work_cap: 2e9 },
            Some(other) => return Err(CliError::Validation(format!("--mode: expected dp, mc or auto, got {other:?}"))),
        };
        cfg.experiment.coach = Some(c);
        Ok(())
    }
}

/// File values, then flags on top.
fn resolve(cli: &Cli) -> Result<Config, CliError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(v) = &c.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.domain {
        cfg.domain = Some(v);
    }
    if let Some(v) = &c.domain_config {
        cfg.domain_config = Some(v.clone());
    }
    if let Some(v) = c.stubbornness {
        cfg.human.stubbornness = v;
    }
    if let Some(v) = c.temperature {
        cfg.human.temperature = v;
    }
    match &cli.command {
        Command::GenData { episodes, label_fraction, granularity, member } => {
            let g = &mut cfg.gen_data;
            g.episodes = episodes.unwrap_or(g.episodes);
            g.label_fraction = label_fraction.unwrap_or(g.label_fraction);
            g.granularity = granularity.unwrap_or(g.granularity);
            g.member = member.unwrap_or(g.member);
        }
        Command::Train { dataset, prior_alpha, max_iterations, tol, require_labels } => {
            let t = &mut cfg.train;
            if dataset.is_some() {
                t.dataset = dataset.clone();
            }
            t.prior_alpha = prior_alpha.unwrap_or(t.prior_alpha);
            t.max_iterations = max_iterations.unwrap_or(t.max_iterations);
            t.tol = tol.unwrap_or(t.tol);
            t.require_labels |= require_labels;
        }
        Command::EvalModel { model, rollouts, window } => {
            let e = &mut cfg.eval_model;
            e.model = model.clone().unwrap_or_else(|| e.model.clone());
            e.rollouts = rollouts.unwrap_or(e.rollouts);
            e.window = window.unwrap_or(e.window);
        }
        Command::Experiment { trials, coached, model, coach, resamples } => {
            let e = &mut cfg.experiment;
            e.trials = trials.unwrap_or(e.trials);
            e.coached = coached.unwrap_or(e.coached);
            e.model = model.clone().unwrap_or_else(|| e.model.clone());
            e.resamples = resamples.unwrap_or(e.resamples);
            coach.apply(&mut cfg)?;
        }
        Command::GridsearchDelta { deltas, trials, model, coach } => {
            let g = &mut cfg.gridsearch;
            if let Some(d) = deltas {
                g.deltas = d.clone();
            }
            g.trials = trials.unwrap_or(g.trials);
            if let Some(m) = model {
                cfg.experiment.model = m.clone();
            }
            coach.apply(&mut cfg)?;
        }
        Command::Serve { addr, persist_dir, model } => {
            let s = &mut cfg.serve;
            s.addr = addr.clone().unwrap_or_else(|| s.addr.clone());
            if persist_dir.is_some() {
                s.persist_dir = persist_dir.clone();
            }
            if model.is_some() {
                s.model = model.clone();
            }
        }
        Command::Replay { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    let config_path = cli.common.config.clone();
    match cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg, config_path),
        Command::Train { .. } => commands::train(&cfg, config_path),
        Command::EvalModel { .. } => commands::eval_model(&cfg, config_path),
        Command::Experiment { .. } => commands::experiment(&cfg, config_path),
        Command::GridsearchDelta { .. } => commands::gridsearch(&cfg, config_path),
        Command::Serve { .. } => commands::serve(&cfg, config_path),
        Command::Replay { input, episode, frames } => commands::replay(&cfg, config_path, &input, episode, frames),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version print to stdout and succeed
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}
