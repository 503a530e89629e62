use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliError;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Written next to every command's outputs as `<command>.manifest.json`.
/// Passing it back through `--config` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
    /// Effective configuration after flags, with absolute paths.
    pub config: Config,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn write(
    command: &str,
    cfg: &Config,
    config_path: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: &[&str],
) -> Result<PathBuf, CliError> {
    let out = absolute(&cfg.out_dir());
    let mut config = cfg.clone();
    config.out = Some(out.clone());
    for p in [&mut config.domain_config, &mut config.train.dataset, &mut config.serve.persist_dir, &mut config.serve.model] {
        if let Some(v) = p.as_mut() {
            *v = absolute(v);
        }
    }
    for m in [&mut config.eval_model.model, &mut config.experiment.model] {
        if !matches!(m.as_str(), "synthetic" | "scripted" | "trained") {
            *m = absolute(Path::new(m.as_str())).to_string_lossy().into_owned();
        }
    }
    let manifest = RunManifest {
        command: command.into(),
        config_path,
        seed: cfg.seed,
        output_dir: out.clone(),
        version: VERSION.into(),
        inputs: inputs.iter().map(|p| absolute(p)).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config,
    };
    let path = out.join(format!("{command}.manifest.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}
