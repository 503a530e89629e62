//! JSON-lines file formats.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::btil::{Dataset, LabelGranularity};
use crate::error::{Error, Result};
use crate::task::{Trajectory, TrajectoryStep};

pub const DATASET_FORMAT: &str = "teamcoach.dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum DatasetRecord {
    Header {
        format: String,
        domain: String,
        member: usize,
        label_fraction: f64,
        granularity: LabelGranularity,
        episodes: usize,
    },
    Step {
        episode: usize,
        t: usize,
        s: usize,
        a: usize,
        x: Vec<Option<usize>>,
    },
    End {
        episode: usize,
        final_state: Option<usize>,
        terminal_reward_sum: f64,
    },
}

/// Serializes a dataset: a header, then one record per step, then one end
/// record per episode.
pub fn dataset_to_jsonl(domain: &str, ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    let mut push = |r: &DatasetRecord| -> Result<()> {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
        Ok(())
    };
    push(&DatasetRecord::Header {
        format: DATASET_FORMAT.into(),
        domain: domain.into(),
        member: ds.member,
        label_fraction: ds.label_fraction,
        granularity: ds.granularity,
        episodes: ds.trajectories.len(),
    })?;
    for (episode, traj) in ds.trajectories.iter().enumerate() {
        for st in &traj.steps {
            push(&DatasetRecord::Step { episode, t: st.t, s: st.s, a: st.a, x: st.x.clone() })?;
        }
        push(&DatasetRecord::End {
            episode,
            final_state: traj.final_state,
            terminal_reward_sum: traj.terminal_reward_sum,
        })?;
    }
    Ok(out)
}

/// Parses a dataset file, returning the domain name it was recorded on.
pub fn dataset_from_jsonl(text: &str) -> Result<(String, Dataset)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, msg: String| Error::Dataset(format!("line {}: {msg}", line + 1));
    let (n0, first) = lines.next().ok_or_else(|| Error::Dataset("empty dataset file".into()))?;
    let DatasetRecord::Header { format, domain, member, label_fraction, granularity, episodes } =
        serde_json::from_str(first).map_err(|e| bad(n0, e.to_string()))?
    else {
        return Err(bad(n0, "expected a header record".into()));
    };
    if format != DATASET_FORMAT {
        return Err(bad(n0, format!("unsupported format {format:?}")));
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut open = false;
    for (n, line) in lines {
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| bad(n, e.to_string()))?;
        match rec {
            DatasetRecord::Header { .. } => return Err(bad(n, "duplicate header".into())),
            DatasetRecord::Step { episode, t, s, a, x } => {
                if !open {
                    if episode != trajectories.len() {
                        return Err(bad(n, format!("episode {episode} out of order")));
                    }
                    trajectories.push(Trajectory { steps: Vec::new(), final_state: None, terminal_reward_sum: 0.0 });
                    open = true;
                } else if episode + 1 != trajectories.len() {
                    return Err(bad(n, format!("episode {episode} interleaved with another")));
                }
                trajectories.last_mut().expect("open episode").steps.push(TrajectoryStep { t, s, a, x });
            }
            DatasetRecord::End { episode, final_state, terminal_reward_sum } => {
                if !open {
                    if episode != trajectories.len() {
                        return Err(bad(n, format!("episode {episode} out of order")));
                    }
                    trajectories.push(Trajectory { steps: Vec::new(), final_state: None, terminal_reward_sum: 0.0 });
                } else if episode + 1 != trajectories.len() {
                    return Err(bad(n, format!("end record for episode {episode} does not close the open one")));
                }
                let t = trajectories.last_mut().expect("episode");
                t.final_state = final_state;
                t.terminal_reward_sum = terminal_reward_sum;
                open = false;
            }
        }
    }
    if open {
        return Err(Error::Dataset("last episode has no end record".into()));
    }
    if trajectories.len() != episodes {
        return Err(Error::Dataset(format!("header announces {episodes} episodes, found {}", trajectories.len())));
    }
    Ok((domain, Dataset { member, trajectories, label_fraction, granularity }))
}

pub fn write_dataset(path: &Path, domain: &str, ds: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_jsonl(domain, ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(String, Dataset)> {
    dataset_from_jsonl(&fs::read_to_string(path)?)
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
