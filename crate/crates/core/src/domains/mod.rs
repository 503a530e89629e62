//! Concrete collaborative environments.
//!
//! Each domain compiles its configuration into a tabular [`TaskModel`] and
//! carries the extra structure the rest of the system needs: intent labels,
//! sub-task planners for every intent, the cooperative intent-switching rule
//! used by scripted teammates, visibility, and scene frames for rendering.

pub mod movers;
mod planner;
pub mod rescue;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskModel;

pub use movers::{MoversConfig, MoversDomain, MoversState};
pub use rescue::{RescueConfig, RescueDomain, RescueState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Movers,
    Rescue,
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "movers" => Ok(DomainKind::Movers),
            "rescue" => Ok(DomainKind::Rescue),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainKind::Movers => "movers",
            DomainKind::Rescue => "rescue",
        })
    }
}

/// Ordered intent labels for one domain. The last index is always the
/// terminal "Done" intent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSpace {
    pub labels: Vec<String>,
}

impl IntentSpace {
    pub fn with_done(task_labels: &[&str]) -> Self {
        let mut labels: Vec<String> = task_labels.iter().map(|s| s.to_string()).collect();
        labels.push("Done".to_string());
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn done(&self) -> usize {
        self.labels.len() - 1
    }

    /// Intents other than the terminal one.
    pub fn task_intents(&self) -> std::ops::Range<usize> {
        0..self.done()
    }

    pub fn label(&self, x: usize) -> &str {
        &self.labels[x]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.eq_ignore_ascii_case(label))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRef {
    pub id: String,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Location {
    Cell { x: usize, y: usize },
    Node { node: usize, name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub kind: String,
    pub label: String,
    pub at: Location,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub name: String,
    pub role: String,
    pub landmark: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layout {
    Grid { width: usize, height: usize, walls: Vec<[usize; 2]> },
    Graph { nodes: Vec<GraphNode>, edges: Vec<[usize; 2]> },
}

/// What one member can currently see.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Visibility {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<usize>,
    /// Entity ids inside the member's view.
    pub entities: Vec<String>,
}

/// Renderable snapshot of one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub domain: DomainKind,
    pub layout: Layout,
    pub entities: Vec<Entity>,
    pub visibility: Vec<Visibility>,
}

/// Member-centric observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "lowercase")]
pub enum Observation {
    Movers {
        own_cell: [usize; 2],
        carrying: Option<usize>,
        teammate: Option<[usize; 2]>,
        visible_cells: Vec<[usize; 2]>,
        visible_boxes: Vec<(usize, String)>,
        truck_visible: bool,
    },
    Rescue {
        own_node: usize,
        site_victims: Option<u32>,
        teammate: Option<usize>,
    },
}

pub trait Domain: Send + Sync {
    fn kind(&self) -> DomainKind;

    fn task(&self) -> &TaskModel<f64>;

    fn intents(&self) -> &IntentSpace;

    fn start_state(&self) -> usize;

    fn n_members(&self) -> usize {
        self.task().n_members()
    }

    /// Expected steps to finish the intent's sub-task after taking each action,
    /// laid out `s * |A_j| + a`. The teammate is treated as static.
    fn subtask_costs(&self, member: usize, intent: usize) -> Result<Vec<f64>>;

    /// Cooperative intent-switching rule: the intent a rule-following member
    /// holds after the team reaches `next_state` via `joint_action`.
    fn rule_next_intent(&self, member: usize, next_state: usize, joint_action: usize, intent: usize)
        -> usize;

    /// The team's default target for this member in state `s`.
    fn convention_intent(&self, member: usize, s: usize) -> usize;

    /// Intents that still name an open sub-task in `s`.
    fn candidate_intents(&self, s: usize) -> Vec<usize>;

    /// Sub-tasks finished by the transition `s --a--> next`.
    fn completed_subtasks(&self, s: usize, a: usize, next: usize) -> Vec<usize>;

    /// A state from which the intent's sub-task can be attempted.
    fn intent_eval_start(&self, intent: usize) -> usize;

    fn observe(&self, s: usize, member: usize) -> Observation;

    fn scene(&self, s: usize) -> Scene;

    fn intent_entity(&self, intent: usize) -> Option<EntityRef>;

    /// `Err(reason)` if the action makes no sense for this member in `s`.
    fn check_action(&self, s: usize, member: usize, action: usize) -> std::result::Result<(), String>;

    /// Annotation mode: service actions only execute at the selected destination.
    fn destination_check(
        &self,
        s: usize,
        member: usize,
        action: usize,
        selected: Option<usize>,
    ) -> std::result::Result<(), String>;

    /// Monotone task-progress counter (boxes delivered, victims rescued).
    fn progress(&self, s: usize) -> u32;

    fn render_text(&self, s: usize) -> String;

    /// Bounds on the undiscounted episode reward.
    fn reward_bounds(&self) -> (f64, f64);

    fn member_name(&self, member: usize) -> &str {
        &self.task().members()[member].name
    }

    fn action_label(&self, member: usize, action: usize) -> &str {
        &self.task().members()[member].actions[action]
    }

    /// Deterministic successor (both shipped domains are deterministic).
    fn step(&self, s: usize, joint_action: usize) -> usize {
        self.task()
            .deterministic_successor(s, joint_action)
            .expect("deterministic domain dynamics")
    }
}

/// Builds a domain from its default configuration or from a JSON file.
pub fn load_domain(kind: DomainKind, config: Option<&Path>) -> Result<Arc<dyn Domain>> {
    Ok(match kind {
        DomainKind::Movers => {
            let cfg = match config {
                Some(p) => MoversConfig::from_path(p)?,
                None => MoversConfig::default(),
            };
            Arc::new(MoversDomain::new(cfg)?)
        }
        DomainKind::Rescue => {
            let cfg = match config {
                Some(p) => RescueConfig::from_path(p)?,
                None => RescueConfig::default(),
            };
            Arc::new(RescueDomain::new(cfg)?)
        }
    })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
