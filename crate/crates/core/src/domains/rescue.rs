//! Two vehicles rescuing victims across a road graph with two broken bridges.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::planner::{idle_costs, subtask_step_costs};
use super::{
    read_json, Domain, DomainKind, Entity, EntityRef, GraphNode, IntentSpace, Layout, Location,
    Observation, Scene, Visibility,
};
use crate::error::{Error, Result};
use crate::table::ProbTableBuilder;
use crate::task::{MemberSpec, TaskModel};

/// Intent indices.
pub const CITY_HALL: usize = 0;
pub const CAMPSITE: usize = 1;
pub const BRIDGE_1: usize = 2;
pub const BRIDGE_2: usize = 3;
pub const DONE: usize = 4;

/// Site indices into `RescueState::cleared`.
const SITE_CITY_HALL: usize = 0;
const SITE_CAMPSITE: usize = 1;
const SITE_MALL: usize = 2;

const DEFAULT_CONFIG: &str = include_str!("../../configs/rescue-default.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Depot,
    Route,
    CityHall,
    Campsite,
    Mall,
    Bridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescueNode {
    pub name: String,
    pub role: NodeRole,
    #[serde(default)]
    pub victims: u32,
    /// Overrides the role default (depots and sites are landmarks).
    #[serde(default)]
    pub landmark: Option<bool>,
}

impl RescueNode {
    pub fn is_landmark(&self) -> bool {
        self.landmark.unwrap_or(matches!(
            self.role,
            NodeRole::Depot | NodeRole::CityHall | NodeRole::Campsite | NodeRole::Mall
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescueConfig {
    #[serde(default)]
    pub version: String,
    pub nodes: Vec<RescueNode>,
    pub edges: Vec<[usize; 2]>,
    pub starts: Vec<usize>,
    #[serde(default = "default_members")]
    pub members: Vec<String>,
    /// Per member, the order in which it takes on "City Hall", "Campsite"
    /// and "Bridge" by default.
    pub plans: Vec<Vec<String>>,
    #[serde(default = "default_bridge")]
    pub default_bridge: String,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_members() -> Vec<String> {
    vec!["police".into(), "fire".into()]
}
fn default_bridge() -> String {
    "Bridge 1".into()
}
fn default_horizon() -> usize {
    30
}

impl Default for RescueConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("embedded rescue config")
    }
}

impl RescueConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RescueState {
    Active { nodes: [u8; 2], cleared: [bool; 3], repaired: [bool; 2] },
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PlanItem {
    CityHall,
    Campsite,
    Bridge,
}

pub struct RescueDomain {
    cfg: RescueConfig,
    adj: Vec<Vec<usize>>,
    max_degree: usize,
    /// Node ids of City Hall, Campsite, Mall.
    sites: [usize; 3],
    victims: [u32; 3],
    bridges: [usize; 2],
    default_bridge: usize,
    plans: Vec<Vec<PlanItem>>,
    states: Vec<RescueState>,
    index: HashMap<RescueState, usize>,
    task: TaskModel<f64>,
    intents: IntentSpace,
    start: usize,
    /// `[target][repaired mask]` -> per node, per action costs.
    /// Targets: City Hall, Campsite, Bridge 1 repair, Bridge 2 repair, Mall.
    costs: Vec<Vec<Vec<f64>>>,
}

impl RescueDomain {
    pub fn new(cfg: RescueConfig) -> Result<Self> {
        let n = cfg.nodes.len();
        if n == 0 || n > u8::MAX as usize {
            return Err(Error::Config(format!("{n} nodes is out of range")));
        }
        if cfg.starts.len() != 2 || cfg.members.len() != 2 || cfg.plans.len() != 2 {
            return Err(Error::Config("exactly 2 members, starts and plans required".into()));
        }
        if cfg.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let find_role = |role: NodeRole| -> Vec<usize> {
            cfg.nodes.iter().enumerate().filter(|(_, nd)| nd.role == role).map(|(i, _)| i).collect()
        };
        let single = |role: NodeRole, name: &str| -> Result<usize> {
            match find_role(role).as_slice() {
                [i] => Ok(*i),
                other => Err(Error::Config(format!("expected one {name} node, found {}", other.len()))),
            }
        };
        let sites = [
            single(NodeRole::CityHall, "city_hall")?,
            single(NodeRole::Campsite, "campsite")?,
            single(NodeRole::Mall, "mall")?,
        ];
        let victims = sites.map(|i| cfg.nodes[i].victims);
        let bridges: [usize; 2] = find_role(NodeRole::Bridge)
            .try_into()
            .map_err(|v: Vec<usize>| Error::Config(format!("expected two bridge nodes, found {}", v.len())))?;
        for &s in &cfg.starts {
            if s >= n {
                return Err(Error::Config(format!("start node {s} does not exist")));
            }
        }
        let mut adj = vec![Vec::new(); n];
        for &[u, v] in &cfg.edges {
            if u >= n || v >= n || u == v {
                return Err(Error::Config(format!("invalid edge [{u}, {v}]")));
            }
            if !adj[u].contains(&v) {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
        }
        for (k, &b) in bridges.iter().enumerate() {
            if !adj[b].contains(&sites[SITE_MALL]) {
                return Err(Error::Config(format!("bridge {} is not adjacent to the mall", k + 1)));
            }
        }
        let max_degree = adj.iter().map(Vec::len).max().unwrap_or(0);

        let default_bridge = match cfg.nodes.iter().position(|nd| nd.name == cfg.default_bridge) {
            Some(i) if i == bridges[0] => 0,
            Some(i) if i == bridges[1] => 1,
            _ => return Err(Error::Config(format!("default_bridge {:?} is not a bridge", cfg.default_bridge))),
        };
        let plans = cfg
            .plans
            .iter()
            .map(|p| {
                let items: Vec<PlanItem> = p
                    .iter()
                    .map(|label| match label.to_ascii_lowercase().as_str() {
                        "city hall" => Ok(PlanItem::CityHall),
                        "campsite" => Ok(PlanItem::Campsite),
                        "bridge" => Ok(PlanItem::Bridge),
                        other => Err(Error::Config(format!("unknown plan item {other:?}"))),
                    })
                    .collect::<Result<_>>()?;
                for item in [PlanItem::CityHall, PlanItem::Campsite, PlanItem::Bridge] {
                    if !items.contains(&item) {
                        return Err(Error::Config(format!("plan {p:?} omits {item:?}")));
                    }
                }
                Ok(items)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut states = Vec::new();
        for cl in 0..7u8 {
            let cleared = [cl & 1 != 0, cl & 2 != 0, cl & 4 != 0];
            for rp in 0..4u8 {
                let repaired = [rp & 1 != 0, rp & 2 != 0];
                for n0 in 0..n {
                    for n1 in 0..n {
                        states.push(RescueState::Active { nodes: [n0 as u8, n1 as u8], cleared, repaired });
                    }
                }
            }
        }
        states.push(RescueState::Done);
        let index: HashMap<RescueState, usize> = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let start = index[&RescueState::Active {
            nodes: [cfg.starts[0] as u8, cfg.starts[1] as u8],
            cleared: [false; 3],
            repaired: [false; 2],
        }];

        let mut dom = Self {
            adj,
            max_degree,
            sites,
            victims,
            bridges,
            default_bridge,
            plans,
            states,
            index,
            task: placeholder_task()?,
            intents: IntentSpace::with_done(&["City Hall", "Campsite", "Bridge 1", "Bridge 2"]),
            start,
            costs: Vec::new(),
            cfg,
        };
        dom.check_connectivity()?;
        dom.task = dom.build_task()?;
        dom.costs = dom.build_costs()?;
        Ok(dom)
    }

    pub fn config(&self) -> &RescueConfig {
        &self.cfg
    }

    pub fn state(&self, s: usize) -> &RescueState {
        &self.states[s]
    }

    pub fn state_index(&self, st: &RescueState) -> Option<usize> {
        self.index.get(st).copied()
    }

    pub fn n_actions(&self) -> usize {
        self.max_degree + 3
    }

    pub fn rescue_action(&self) -> usize {
        self.max_degree
    }

    pub fn repair_action(&self) -> usize {
        self.max_degree + 1
    }

    pub fn wait_action(&self) -> usize {
        self.max_degree + 2
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.cfg.nodes.iter().position(|n| n.name == name)
    }

    /// Action index that moves from `from` to the adjacent node `to`.
    pub fn move_action(&self, from: usize, to: usize) -> Option<usize> {
        self.adj[from].iter().position(|&v| v == to)
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adj[node]
    }

    fn gate(&self, u: usize, v: usize) -> Option<usize> {
        let mall = self.sites[SITE_MALL];
        (0..2).find(|&k| (u == self.bridges[k] && v == mall) || (v == self.bridges[k] && u == mall))
    }

    fn move_next(&self, node: usize, action: usize, repaired: [bool; 2]) -> usize {
        match self.adj[node].get(action) {
            Some(&v) => match self.gate(node, v) {
                Some(k) if !repaired[k] => node,
                _ => v,
            },
            None => node,
        }
    }

    fn site_at(&self, node: usize) -> Option<usize> {
        self.sites.iter().position(|&s| s == node)
    }

    fn bridge_at(&self, node: usize) -> Option<usize> {
        self.bridges.iter().position(|&b| b == node)
    }

    fn check_connectivity(&self) -> Result<()> {
        let mut reach = vec![false; self.adj.len()];
        let mut queue: VecDeque<usize> = self
            .cfg
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.role == NodeRole::Depot)
            .map(|(i, _)| i)
            .chain(self.cfg.starts.iter().copied())
            .collect();
        for &q in &queue {
            reach[q] = true;
        }
        while let Some(u) = queue.pop_front() {
            for &v in &self.adj[u] {
                if !reach[v] {
                    reach[v] = true;
                    queue.push_back(v);
                }
            }
        }
        for &node in self.sites.iter().chain(&self.bridges) {
            if !reach[node] {
                return Err(Error::Domain(format!(
                    "{} is disconnected from both depots",
                    self.cfg.nodes[node].name
                )));
            }
        }
        Ok(())
    }

    /// Joint dynamics; returns the successor and the victims rescued.
    pub fn transition(&self, st: &RescueState, a: [usize; 2]) -> (RescueState, u32) {
        let RescueState::Active { nodes, mut cleared, mut repaired } = *st else {
            return (RescueState::Done, 0);
        };
        let before = repaired;
        let mut reward = 0;
        for j in 0..2 {
            if a[j] == self.rescue_action() {
                if let Some(i) = self.site_at(nodes[j] as usize) {
                    if !cleared[i] {
                        cleared[i] = true;
                        reward += self.victims[i];
                    }
                }
            }
        }
        if a[0] == self.repair_action() && a[1] == self.repair_action() && nodes[0] == nodes[1] {
            if let Some(k) = self.bridge_at(nodes[0] as usize) {
                repaired[k] = true;
            }
        }
        let next = [0, 1].map(|j| self.move_next(nodes[j] as usize, a[j], before) as u8);
        if cleared.iter().all(|&c| c) {
            return (RescueState::Done, reward);
        }
        (RescueState::Active { nodes: next, cleared, repaired }, reward)
    }

    fn build_task(&self) -> Result<TaskModel<f64>> {
        let ns = self.states.len();
        let na = self.n_actions();
        let mut t = ProbTableBuilder::with_capacity(ns, ns * na * na);
        let mut reward = Vec::with_capacity(ns * na * na);
        for st in &self.states {
            for a0 in 0..na {
                for a1 in 0..na {
                    let (next, r) = self.transition(st, [a0, a1]);
                    t.push_one_hot(self.index[&next]);
                    reward.push(r as f64);
                }
            }
        }
        let mut actions: Vec<String> = (1..=self.max_degree).map(|k| format!("Move {k}")).collect();
        actions.extend(["Rescue", "Repair", "Wait"].map(String::from));
        let members = self
            .cfg
            .members
            .iter()
            .map(|name| MemberSpec { name: name.clone(), actions: actions.clone(), observations: vec!["view".into()] })
            .collect();
        TaskModel::new("rescue", ns, members, t.finish(), None, reward, 1.0, self.cfg.horizon)
    }

    fn build_costs(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        let n = self.adj.len();
        let na = self.n_actions();
        let starts = self.cfg.starts.clone();
        let targets = [
            (self.sites[SITE_CITY_HALL], self.rescue_action(), "City Hall"),
            (self.sites[SITE_CAMPSITE], self.rescue_action(), "Campsite"),
            (self.bridges[0], self.repair_action(), "Bridge 1"),
            (self.bridges[1], self.repair_action(), "Bridge 2"),
            (self.sites[SITE_MALL], self.rescue_action(), "Mall"),
        ];
        let mut out = Vec::new();
        for (ti, &(node, service, name)) in targets.iter().enumerate() {
            let mut per_mask = Vec::new();
            for mask in 0..4u8 {
                let repaired = [mask & 1 != 0, mask & 2 != 0];
                let must: &[usize] = if ti == 4 && mask == 0 { &[] } else { &starts };
                let c = subtask_step_costs(
                    n,
                    na,
                    |p, a| self.move_next(p, a, repaired),
                    node,
                    service,
                    self.wait_action(),
                    must,
                )
                .map_err(|e| Error::UnreachableSubtask { intent: name.into(), reason: e.to_string() })?;
                per_mask.push(c);
            }
            out.push(per_mask);
        }
        Ok(out)
    }

    fn next_plan_intent(&self, member: usize, cleared: [bool; 3], repaired: [bool; 2]) -> usize {
        for item in &self.plans[member] {
            match item {
                PlanItem::CityHall if !cleared[SITE_CITY_HALL] => return CITY_HALL,
                PlanItem::Campsite if !cleared[SITE_CAMPSITE] => return CAMPSITE,
                PlanItem::Bridge if !cleared[SITE_MALL] => {
                    return match repaired.iter().position(|&r| r) {
                        Some(k) => BRIDGE_1 + k,
                        None => BRIDGE_1 + self.default_bridge,
                    };
                }
                _ => {}
            }
        }
        DONE
    }

    fn intent_open(&self, x: usize, cleared: [bool; 3], repaired: [bool; 2]) -> bool {
        match x {
            CITY_HALL => !cleared[SITE_CITY_HALL],
            CAMPSITE => !cleared[SITE_CAMPSITE],
            BRIDGE_1 | BRIDGE_2 => {
                !cleared[SITE_MALL] && (repaired == [false; 2] || repaired[x - BRIDGE_1])
            }
            _ => false,
        }
    }

    fn cost_row(&self, member: usize, intent: usize, st: &RescueState) -> std::borrow::Cow<'_, [f64]> {
        let na = self.n_actions();
        let idle = || std::borrow::Cow::Owned(idle_costs(na, self.wait_action()));
        let RescueState::Active { nodes, cleared, repaired } = st else {
            return idle();
        };
        let mask = repaired[0] as usize | (repaired[1] as usize) << 1;
        let target = match intent {
            CITY_HALL if !cleared[SITE_CITY_HALL] => 0,
            CAMPSITE if !cleared[SITE_CAMPSITE] => 1,
            BRIDGE_1 | BRIDGE_2 if !cleared[SITE_MALL] => {
                let k = intent - BRIDGE_1;
                if repaired[k] {
                    4
                } else {
                    2 + k
                }
            }
            _ => return idle(),
        };
        let p = nodes[member] as usize;
        std::borrow::Cow::Borrowed(&self.costs[target][mask][p * na..(p + 1) * na])
    }

    fn teammate_visible(&self, nodes: [u8; 2], member: usize) -> bool {
        let mate = nodes[1 - member] as usize;
        nodes[0] == nodes[1] || self.cfg.nodes[mate].is_landmark()
    }

    fn node_name(&self, i: usize) -> &str {
        &self.cfg.nodes[i].name
    }

    fn vehicle_nodes(&self, st: &RescueState) -> [usize; 2] {
        match st {
            RescueState::Active { nodes, .. } => [nodes[0] as usize, nodes[1] as usize],
            RescueState::Done => [self.sites[SITE_MALL]; 2],
        }
    }
}

pub(super) fn placeholder_task() -> Result<TaskModel<f64>> {
    TaskModel::new(
        "empty",
        1,
        crate::task::simple_members(&[1]),
        crate::table::ProbTable::constant(1, 1, &[(0, 1.0)]),
        None,
        vec![0.0],
        1.0,
        1,
    )
}

impl Domain for RescueDomain {
    fn kind(&self) -> DomainKind {
        DomainKind::Rescue
    }

    fn task(&self) -> &TaskModel<f64> {
        &self.task
    }

    fn intents(&self) -> &IntentSpace {
        &self.intents
    }

    fn start_state(&self) -> usize {
        self.start
    }

    fn subtask_costs(&self, member: usize, intent: usize) -> Result<Vec<f64>> {
        if intent >= self.intents.len() || member >= 2 {
            return Err(Error::Domain(format!("no intent {intent} for member {member}")));
        }
        let mut out = Vec::with_capacity(self.states.len() * self.n_actions());
        for st in &self.states {
            out.extend_from_slice(&self.cost_row(member, intent, st));
        }
        Ok(out)
    }

    fn rule_next_intent(&self, member: usize, next_state: usize, _joint_action: usize, intent: usize) -> usize {
        let RescueState::Active { nodes, cleared, repaired } = self.states[next_state] else {
            return DONE;
        };
        let is_bridge = |x: usize| x == BRIDGE_1 || x == BRIDGE_2;
        if nodes[0] == nodes[1] && repaired == [false; 2] && is_bridge(intent) {
            if let Some(k) = self.bridge_at(nodes[member] as usize) {
                if intent != BRIDGE_1 + k {
                    return BRIDGE_1 + k;
                }
            }
        }
        if is_bridge(intent) && !cleared[SITE_MALL] {
            if let Some(k) = repaired.iter().position(|&r| r) {
                return BRIDGE_1 + k;
            }
        }
        if self.intent_open(intent, cleared, repaired) {
            intent
        } else {
            self.next_plan_intent(member, cleared, repaired)
        }
    }

    fn convention_intent(&self, member: usize, s: usize) -> usize {
        match self.states[s] {
            RescueState::Active { cleared, repaired, .. } => self.next_plan_intent(member, cleared, repaired),
            RescueState::Done => DONE,
        }
    }

    fn candidate_intents(&self, s: usize) -> Vec<usize> {
        match self.states[s] {
            RescueState::Done => vec![DONE],
            RescueState::Active { cleared, repaired, .. } => {
                let open: Vec<usize> = self
                    .intents
                    .task_intents()
                    .filter(|&x| self.intent_open(x, cleared, repaired))
                    .collect();
                if open.is_empty() {
                    vec![DONE]
                } else {
                    open
                }
            }
        }
    }

    fn completed_subtasks(&self, s: usize, _a: usize, next: usize) -> Vec<usize> {
        let RescueState::Active { cleared: c0, repaired: r0, .. } = self.states[s] else {
            return Vec::new();
        };
        let (c1, r1) = match self.states[next] {
            RescueState::Active { cleared, repaired, .. } => (cleared, repaired),
            RescueState::Done => ([true; 3], r0),
        };
        let mut out = Vec::new();
        if !c0[SITE_CITY_HALL] && c1[SITE_CITY_HALL] {
            out.push(CITY_HALL);
        }
        if !c0[SITE_CAMPSITE] && c1[SITE_CAMPSITE] {
            out.push(CAMPSITE);
        }
        for k in 0..2 {
            if !r0[k] && r1[k] {
                out.push(BRIDGE_1 + k);
            }
        }
        out
    }

    fn intent_eval_start(&self, _intent: usize) -> usize {
        self.start
    }

    fn observe(&self, s: usize, member: usize) -> Observation {
        let st = &self.states[s];
        let nodes = self.vehicle_nodes(st);
        let own = nodes[member];
        let site_victims = self.site_at(own).map(|i| match st {
            RescueState::Active { cleared, .. } if !cleared[i] => self.victims[i],
            _ => 0,
        });
        let teammate = self
            .teammate_visible([nodes[0] as u8, nodes[1] as u8], member)
            .then_some(nodes[1 - member]);
        Observation::Rescue { own_node: own, site_victims, teammate }
    }

    fn scene(&self, s: usize) -> Scene {
        let st = &self.states[s];
        let nodes = self.vehicle_nodes(st);
        let (cleared, repaired) = match st {
            RescueState::Active { cleared, repaired, .. } => (*cleared, *repaired),
            RescueState::Done => ([true; 3], [true; 2]),
        };
        let node_loc = |i: usize| Location::Node { node: i, name: self.node_name(i).to_string() };
        let mut entities = Vec::new();
        let mut at = Vec::new();
        for (i, &node) in self.sites.iter().enumerate() {
            let remaining = if cleared[i] { 0 } else { self.victims[i] };
            entities.push(Entity {
                id: slug(self.node_name(node)),
                kind: "site".into(),
                label: self.node_name(node).to_string(),
                at: node_loc(node),
                status: format!("{remaining} victims"),
            });
            at.push(node);
        }
        for (k, &node) in self.bridges.iter().enumerate() {
            entities.push(Entity {
                id: slug(self.node_name(node)),
                kind: "bridge".into(),
                label: self.node_name(node).to_string(),
                at: node_loc(node),
                status: if repaired[k] { "repaired".into() } else { "broken".into() },
            });
            at.push(node);
        }
        for (j, name) in self.cfg.members.iter().enumerate() {
            entities.push(Entity {
                id: format!("member-{j}"),
                kind: "vehicle".into(),
                label: name.clone(),
                at: node_loc(nodes[j]),
                status: "active".into(),
            });
            at.push(nodes[j]);
        }
        let visibility = (0..2)
            .map(|j| {
                let mate_seen = self.teammate_visible([nodes[0] as u8, nodes[1] as u8], j);
                let mut seen_nodes = vec![nodes[j]];
                if mate_seen && nodes[1 - j] != nodes[j] {
                    seen_nodes.push(nodes[1 - j]);
                }
                let ids = entities
                    .iter()
                    .zip(&at)
                    .filter(|(e, &n)| {
                        if e.id == format!("member-{}", 1 - j) {
                            mate_seen
                        } else {
                            e.id == format!("member-{j}") || n == nodes[j]
                        }
                    })
                    .map(|(e, _)| e.id.clone())
                    .collect();
                Visibility { cells: Vec::new(), nodes: seen_nodes, entities: ids }
            })
            .collect();
        let graph_nodes = self
            .cfg
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| GraphNode {
                id: i,
                name: n.name.clone(),
                role: serde_json::to_value(n.role).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                landmark: n.is_landmark(),
            })
            .collect();
        let mut edges: Vec<[usize; 2]> = Vec::new();
        for (u, vs) in self.adj.iter().enumerate() {
            for &v in vs {
                if u < v {
                    edges.push([u, v]);
                }
            }
        }
        Scene {
            domain: DomainKind::Rescue,
            layout: Layout::Graph { nodes: graph_nodes, edges },
            entities,
            visibility,
        }
    }

    fn intent_entity(&self, intent: usize) -> Option<EntityRef> {
        let node = match intent {
            CITY_HALL => self.sites[SITE_CITY_HALL],
            CAMPSITE => self.sites[SITE_CAMPSITE],
            BRIDGE_1 => self.bridges[0],
            BRIDGE_2 => self.bridges[1],
            _ => return None,
        };
        Some(EntityRef { id: slug(self.node_name(node)), name: self.node_name(node).to_string() })
    }

    fn check_action(&self, s: usize, member: usize, action: usize) -> std::result::Result<(), String> {
        if action >= self.n_actions() {
            return Err(format!("unknown action {action}"));
        }
        let RescueState::Active { nodes, cleared, repaired } = self.states[s] else {
            return if action == self.wait_action() { Ok(()) } else { Err("the task is complete".into()) };
        };
        let node = nodes[member] as usize;
        if action < self.max_degree {
            return match self.adj[node].get(action) {
                None => Err(format!("no road {} from {}", action + 1, self.node_name(node))),
                Some(&v) => match self.gate(node, v) {
                    Some(k) if !repaired[k] => Err(format!("{} is not repaired", self.node_name(self.bridges[k]))),
                    _ => Ok(()),
                },
            };
        }
        if action == self.rescue_action() {
            return match self.site_at(node) {
                Some(i) if !cleared[i] => Ok(()),
                _ => Err("no victims here".into()),
            };
        }
        if action == self.repair_action() {
            return match self.bridge_at(node) {
                Some(k) if repaired[k] => Err("bridge already repaired".into()),
                Some(_) => Ok(()),
                None => Err("no bridge here".into()),
            };
        }
        Ok(())
    }

    fn destination_check(
        &self,
        s: usize,
        member: usize,
        action: usize,
        selected: Option<usize>,
    ) -> std::result::Result<(), String> {
        let RescueState::Active { nodes, .. } = self.states[s] else {
            return Ok(());
        };
        let node = nodes[member] as usize;
        let ok = if action == self.rescue_action() {
            match self.site_at(node) {
                Some(SITE_CITY_HALL) => selected == Some(CITY_HALL),
                Some(SITE_CAMPSITE) => selected == Some(CAMPSITE),
                Some(_) => matches!(selected, Some(BRIDGE_1 | BRIDGE_2)),
                None => true,
            }
        } else if action == self.repair_action() {
            match self.bridge_at(node) {
                Some(k) => selected == Some(BRIDGE_1 + k),
                None => true,
            }
        } else {
            true
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{} is restricted to the selected destination", self.action_label(member, action)))
        }
    }

    fn progress(&self, s: usize) -> u32 {
        match self.states[s] {
            RescueState::Active { cleared, .. } => (0..3).filter(|&i| cleared[i]).map(|i| self.victims[i]).sum(),
            RescueState::Done => self.victims.iter().sum(),
        }
    }

    fn render_text(&self, s: usize) -> String {
        let st = &self.states[s];
        let nodes = self.vehicle_nodes(st);
        let mut out = String::new();
        for (j, name) in self.cfg.members.iter().enumerate() {
            out.push_str(&format!("{name}: {}\n", self.node_name(nodes[j])));
        }
        match st {
            RescueState::Active { cleared, repaired, .. } => {
                for (i, &node) in self.sites.iter().enumerate() {
                    let left = if cleared[i] { 0 } else { self.victims[i] };
                    out.push_str(&format!("{}: {left} victims\n", self.node_name(node)));
                }
                for (k, &node) in self.bridges.iter().enumerate() {
                    let status = if repaired[k] { "repaired" } else { "broken" };
                    out.push_str(&format!("{}: {status}\n", self.node_name(node)));
                }
            }
            RescueState::Done => out.push_str("all victims rescued\n"),
        }
        out.push_str(&format!("rescued {}\n", self.progress(s)));
        out
    }

    fn reward_bounds(&self) -> (f64, f64) {
        (0.0, self.victims.iter().sum::<u32>() as f64)
    }
}

fn slug(name: &str) -> String {
    name.to_ascii_lowercase().replace(' ', "-")
}
