//! One JSON file configures every subcommand. Flags override file values,
//! which override the defaults below.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teamcoach::btil::{BtilConfig, LabelGranularity};
use teamcoach::coach::{CoachConfig, ReturnMode};
use teamcoach::domains::DomainKind;
use teamcoach::team::SyntheticAgentConfig;

use crate::CliError;

pub const OUT_ENV: &str = "TEAMCOACH_OUT";
pub const DEFAULT_OUT: &str = "teamcoach-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Taken from the dataset header by `train` when unset; Movers otherwise.
    pub domain: Option<DomainKind>,
    pub domain_config: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub human: SyntheticAgentConfig,
    pub gen_data: GenData,
    pub train: Train,
    pub eval_model: EvalModel,
    pub experiment: Experiment,
    pub gridsearch: GridSearch,
    pub serve: Serve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenData {
    pub episodes: usize,
    pub label_fraction: f64,
    pub granularity: LabelGranularity,
    pub member: usize,
}

impl Default for GenData {
    fn default() -> Self {
        Self { episodes: 160, label_fraction: 0.3, granularity: LabelGranularity::Trajectory, member: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Train {
    /// Defaults to `dataset.jsonl` in the output directory.
    pub dataset: Option<PathBuf>,
    pub prior_alpha: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub require_labels: bool,
}

impl Default for Train {
    fn default() -> Self {
        let b = BtilConfig::default();
        Self { dataset: None, prior_alpha: b.prior_alpha, tol: b.tol, max_iterations: b.max_iterations, require_labels: b.require_labels }
    }
}

impl Train {
    pub fn btil(&self, seed: u64) -> BtilConfig {
        BtilConfig {
            prior_alpha: self.prior_alpha,
            tol: self.tol,
            max_iterations: self.max_iterations,
            require_labels: self.require_labels,
            seed,
        }
    }
}

/// Which team model a command reasons with: `synthetic`, `scripted`,
/// `trained` (the `model.json` in the output directory) or a file path.
pub type ModelSource = String;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalModel {
    pub model: ModelSource,
    pub rollouts: usize,
    pub window: usize,
}

impl Default for EvalModel {
    fn default() -> Self {
        Self { model: "trained".into(), rollouts: 1000, window: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Coached {
    Both,
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub trials: usize,
    pub coached: Coached,
    pub resamples: usize,
    /// The coach's model of the team; the simulated team is always synthetic.
    pub model: ModelSource,
    /// Defaults to the domain preset.
    pub coach: Option<CoachConfig>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self { trials: 300, coached: Coached::Both, resamples: 10_000, model: "synthetic".into(), coach: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSearch {
    pub deltas: Vec<f64>,
    pub trials: usize,
}

impl Default for GridSearch {
    fn default() -> Self {
        Self { deltas: vec![0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0], trials: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Serve {
    pub addr: String,
    pub persist_dir: Option<PathBuf>,
    /// Coach model file for the configured domain; synthetic otherwise.
    pub model: Option<PathBuf>,
    pub mode: ReturnMode,
}

impl Default for Serve {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), persist_dir: None, model: None, mode: ReturnMode::default() }
    }
}

/// A manifest written by an earlier run also works as a config file.
#[derive(Deserialize)]
struct ManifestConfig {
    config: Config,
}

impl Config {
    /// Reads a config (or a run manifest). Relative paths inside resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let parsed = if value.get("command").is_some() && value.get("config").is_some() {
            serde_json::from_value::<ManifestConfig>(value).map(|m| m.config)
        } else {
            serde_json::from_value::<Config>(value)
        };
        let mut cfg = parsed.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut cfg.domain_config);
        fix(&mut cfg.out);
        fix(&mut cfg.train.dataset);
        fix(&mut cfg.serve.persist_dir);
        fix(&mut cfg.serve.model);
        for m in [&mut cfg.eval_model.model, &mut cfg.experiment.model] {
            if !matches!(m.as_str(), "synthetic" | "scripted" | "trained") && Path::new(m.as_str()).is_relative() {
                *m = base.join(m.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn domain(&self) -> DomainKind {
        self.domain.unwrap_or(DomainKind::Movers)
    }

    /// Flag, then file, then `$TEAMCOACH_OUT`, then `teamcoach-out`.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn coach(&self) -> CoachConfig {
        self.experiment.coach.clone().unwrap_or_else(|| CoachConfig::preset(self.domain()))
    }

    /// Range checks, reported with the offending field's name.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: String| Err(CliError::Validation(format!("{field}: {why}")));
        if let Err(e) = self.human.validate() {
            return bad("human", e.to_string());
        }
        let g = &self.gen_data;
        if !(0.0..=1.0).contains(&g.label_fraction) {
            return bad("gen_data.label_fraction", format!("{} is outside [0, 1]", g.label_fraction));
        }
        if g.episodes == 0 {
            return bad("gen_data.episodes", "must be positive".into());
        }
        if g.member > 1 {
            return bad("gen_data.member", format!("member {} does not exist", g.member));
        }
        let t = &self.train;
        if !(t.prior_alpha >= 1.0) {
            return bad("train.prior_alpha", format!("{} is below 1", t.prior_alpha));
        }
        if !(t.tol > 0.0) {
            return bad("train.tol", "must be positive".into());
        }
        if t.max_iterations == 0 {
            return bad("train.max_iterations", "must be positive".into());
        }
        if self.eval_model.rollouts == 0 {
            return bad("eval_model.rollouts", "must be positive".into());
        }
        if self.eval_model.window == 0 {
            return bad("eval_model.window", "must be positive".into());
        }
        if self.experiment.trials < 2 {
            return bad("experiment.trials", format!("{} is below 2", self.experiment.trials));
        }
        if self.experiment.resamples == 0 {
            return bad("experiment.resamples", "must be positive".into());
        }
        if let Err(e) = self.coach().validate() {
            return bad("experiment.coach", e.to_string());
        }
        if self.gridsearch.deltas.is_empty() {
            return bad("gridsearch.deltas", "needs at least one candidate".into());
        }
        if let Some(d) = self.gridsearch.deltas.iter().find(|d| !(**d >= 0.0)) {
            return bad("gridsearch.deltas", format!("{d} is negative"));
        }
        if self.gridsearch.trials == 0 {
            return bad("gridsearch.trials", "must be positive".into());
        }
        if self.serve.addr.parse::<std::net::SocketAddr>().is_err() {
            return bad("serve.addr", format!("{:?} is not a socket address", self.serve.addr));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_means_defaults() {
        let cfg: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.gen_data.episodes, 160);
        assert_eq!(cfg.eval_model.window, 20);
        assert_eq!(cfg.coach(), CoachConfig::movers());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_named() {
        let err = serde_json::from_str::<Config>(r#"{"gen_data": {"episode": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("episode"));
    }

    #[test]
    fn range_errors_name_the_field() {
        let mut cfg = Config::default();
        cfg.gen_data.label_fraction = 1.5;
        let CliError::Validation(msg) = cfg.validate().unwrap_err() else { panic!() };
        assert!(msg.starts_with("gen_data.label_fraction"), "{msg}");
    }

    #[test]
    fn manifests_load_as_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default();
        cfg.seed = 9;
        cfg.train.dataset = Some("data.jsonl".into());
        let p = dir.path().join("m.json");
        fs::write(&p, serde_json::to_string(&serde_json::json!({ "command": "train", "config": cfg })).unwrap()).unwrap();
        let back = Config::load(&p).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.train.dataset, Some(dir.path().join("data.jsonl")));
    }
}
