//! Two members moving three boxes to a truck on a walled grid.
//!
//! Boxes need both members to lift and carry. The episode reward is the
//! number of steps left on the clock once every box is in the truck, realized
//! as a reward of one per step spent in the collapsed terminal state.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::planner::{idle_costs, subtask_step_costs};
use super::{
    read_json, Domain, DomainKind, Entity, EntityRef, IntentSpace, Layout, Location, Observation,
    Scene, Visibility,
};
use crate::error::{Error, Result};
use crate::task::{MemberSpec, TaskModel};

pub const STAY: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;
pub const PICK_UP: usize = 5;
pub const DROP: usize = 6;
pub const N_ACTIONS: usize = 7;
pub const ACTION_LABELS: [&str; N_ACTIONS] = ["Stay", "Up", "Down", "Left", "Right", "Pick Up", "Drop"];

pub const N_BOXES: usize = 3;
/// Intent indices.
pub const TRUCK: usize = 3;
pub const DONE: usize = 4;

const DEFAULT_CONFIG: &str = include_str!("../../configs/movers-default.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoversConfig {
    #[serde(default)]
    pub version: String,
    pub width: usize,
    pub height: usize,
    pub walls: Vec<[usize; 2]>,
    pub boxes: Vec<[usize; 2]>,
    pub truck: [usize; 2],
    pub starts: Vec<[usize; 2]>,
    #[serde(default = "default_members")]
    pub members: Vec<String>,
    #[serde(default = "default_radius")]
    pub visibility_radius: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_members() -> Vec<String> {
    vec!["human".into(), "robot".into()]
}
fn default_radius() -> usize {
    2
}
fn default_horizon() -> usize {
    150
}

impl Default for MoversConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("embedded movers config")
    }
}

impl MoversConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxStatus {
    AtOrigin,
    Carried,
    Delivered,
}

/// Positions are indices into the domain's free-cell list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MoversState {
    Active { pos: [u16; 2], boxes: [BoxStatus; N_BOXES] },
    Done,
}

impl MoversState {
    pub fn carried(&self) -> Option<usize> {
        match self {
            MoversState::Active { boxes, .. } => boxes.iter().position(|b| *b == BoxStatus::Carried),
            MoversState::Done => None,
        }
    }

    pub fn delivered(&self) -> u32 {
        match self {
            MoversState::Active { boxes, .. } => {
                boxes.iter().filter(|b| **b == BoxStatus::Delivered).count() as u32
            }
            MoversState::Done => N_BOXES as u32,
        }
    }
}

pub struct MoversDomain {
    cfg: MoversConfig,
    /// Free cell -> grid cell id (`y * width + x`).
    free: Vec<usize>,
    free_of: Vec<Option<u16>>,
    /// Per free cell, the successor free cell for each action when moving alone.
    moves: Vec<[u16; N_ACTIONS]>,
    states: Vec<MoversState>,
    index: HashMap<MoversState, usize>,
    task: TaskModel<f64>,
    intents: IntentSpace,
    start: usize,
    box_cells: [u16; N_BOXES],
    truck_cell: u16,
    /// Grid distance from each box origin to the truck.
    truck_dist: [u32; N_BOXES],
    /// Per intent, per free cell, per action: steps to finish alone.
    position_costs: Vec<Vec<f64>>,
}

impl MoversDomain {
    pub fn new(cfg: MoversConfig) -> Result<Self> {
        let (w, h) = (cfg.width, cfg.height);
        if w == 0 || h == 0 || w * h > u16::MAX as usize {
            return Err(Error::Config(format!("grid size {w}x{h} is out of range")));
        }
        if cfg.boxes.len() != N_BOXES {
            return Err(Error::Config(format!("exactly {N_BOXES} boxes required, got {}", cfg.boxes.len())));
        }
        if cfg.starts.len() != 2 || cfg.members.len() != 2 {
            return Err(Error::Config("exactly 2 members and 2 start cells required".into()));
        }
        if cfg.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let inside = |c: &[usize; 2]| c[0] < w && c[1] < h;
        let mut wall = vec![false; w * h];
        for c in &cfg.walls {
            if !inside(c) {
                return Err(Error::Config(format!("wall {c:?} lies outside the grid")));
            }
            wall[c[1] * w + c[0]] = true;
        }
        let named: Vec<(String, [usize; 2])> = cfg
            .boxes
            .iter()
            .enumerate()
            .map(|(k, c)| (format!("box {}", k + 1), *c))
            .chain(std::iter::once(("truck".to_string(), cfg.truck)))
            .chain(cfg.starts.iter().enumerate().map(|(j, c)| (format!("start of member {j}"), *c)))
            .collect();
        for (name, c) in &named {
            if !inside(c) || wall[c[1] * w + c[0]] {
                return Err(Error::Config(format!("{name} at {c:?} is not on a free cell")));
            }
        }
        for i in 0..=N_BOXES {
            for j in 0..i {
                if named[i].1 == named[j].1 {
                    return Err(Error::Config(format!("{} and {} share a cell", named[j].0, named[i].0)));
                }
            }
        }

        // Free cells are the component reachable from the first start.
        let s0 = cfg.starts[0][1] * w + cfg.starts[0][0];
        let dist = bfs(w, h, &wall, s0);
        for (name, c) in &named {
            if dist[c[1] * w + c[0]].is_none() {
                return Err(Error::Domain(format!("{name} at {c:?} is unreachable")));
            }
        }
        let free: Vec<usize> = (0..w * h).filter(|&c| dist[c].is_some()).collect();
        let mut free_of = vec![None; w * h];
        for (i, &c) in free.iter().enumerate() {
            free_of[c] = Some(i as u16);
        }
        let moves: Vec<[u16; N_ACTIONS]> = free
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut row = [i as u16; N_ACTIONS];
                for a in [UP, DOWN, LEFT, RIGHT] {
                    if let Some(n) = neighbor(w, h, c, a).and_then(|n| free_of[n]) {
                        row[a] = n;
                    }
                }
                row
            })
            .collect();
        let cell_free = |c: [usize; 2]| free_of[c[1] * w + c[0]].expect("checked reachable");
        let box_cells = [cell_free(cfg.boxes[0]), cell_free(cfg.boxes[1]), cell_free(cfg.boxes[2])];
        let truck_cell = cell_free(cfg.truck);
        let truck_bfs = bfs(w, h, &wall, free[truck_cell as usize]);
        let truck_dist = box_cells.map(|b| truck_bfs[free[b as usize]].expect("same component"));

        // Enumerate states.
        let nf = free.len();
        let mut states = Vec::new();
        for pattern in 0..3usize.pow(N_BOXES as u32) {
            let mut boxes = [BoxStatus::AtOrigin; N_BOXES];
            let mut p = pattern;
            for b in boxes.iter_mut() {
                *b = [BoxStatus::AtOrigin, BoxStatus::Carried, BoxStatus::Delivered][p % 3];
                p /= 3;
            }
            let n_carried = boxes.iter().filter(|b| **b == BoxStatus::Carried).count();
            if n_carried > 1 || boxes.iter().all(|b| *b == BoxStatus::Delivered) {
                continue;
            }
            for p0 in 0..nf {
                for p1 in 0..nf {
                    if n_carried == 1 && p0 != p1 {
                        continue;
                    }
                    states.push(MoversState::Active { pos: [p0 as u16, p1 as u16], boxes });
                }
            }
        }
        states.push(MoversState::Done);
        let index: HashMap<MoversState, usize> = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let start_state = MoversState::Active {
            pos: [cell_free(cfg.starts[0]), cell_free(cfg.starts[1])],
            boxes: [BoxStatus::AtOrigin; N_BOXES],
        };

        let mut dom = Self {
            intents: IntentSpace::with_done(&["Box 1", "Box 2", "Box 3", "Truck"]),
            start: index[&start_state],
            cfg,
            free,
            free_of,
            moves,
            states,
            index,
            task: super::rescue::placeholder_task()?,
            box_cells,
            truck_cell,
            truck_dist,
            position_costs: Vec::new(),
        };
        dom.task = dom.build_task()?;
        dom.position_costs = dom.build_position_costs()?;
        Ok(dom)
    }

    fn build_task(&self) -> Result<TaskModel<f64>> {
        let ns = self.states.len();
        let na = N_ACTIONS * N_ACTIONS;
        let mut t = crate::table::ProbTableBuilder::with_capacity(ns, ns * na);
        let mut reward = Vec::with_capacity(ns * na);
        for st in &self.states {
            let r = if *st == MoversState::Done { 1.0 } else { 0.0 };
            for a0 in 0..N_ACTIONS {
                for a1 in 0..N_ACTIONS {
                    let next = self.transition(st, [a0, a1]);
                    t.push_one_hot(self.index[&next]);
                    reward.push(r);
                }
            }
        }
        let members = self
            .cfg
            .members
            .iter()
            .map(|name| MemberSpec {
                name: name.clone(),
                actions: ACTION_LABELS.iter().map(|s| s.to_string()).collect(),
                observations: vec!["view".into()],
            })
            .collect();
        TaskModel::new("movers", ns, members, t.finish(), None, reward, 1.0, self.cfg.horizon)
    }

    fn build_position_costs(&self) -> Result<Vec<Vec<f64>>> {
        let nf = self.free.len();
        let next = |p: usize, a: usize| self.moves[p][a] as usize;
        let all: Vec<usize> = (0..nf).collect();
        let mut out = Vec::with_capacity(self.intents.len());
        for k in 0..N_BOXES {
            out.push(subtask_step_costs(nf, N_ACTIONS, next, self.box_cells[k] as usize, PICK_UP, STAY, &all).map_err(
                |e| Error::UnreachableSubtask { intent: self.intents.label(k).into(), reason: e.to_string() },
            )?);
        }
        out.push(subtask_step_costs(nf, N_ACTIONS, next, self.truck_cell as usize, DROP, STAY, &all).map_err(|e| {
            Error::UnreachableSubtask { intent: "Truck".into(), reason: e.to_string() }
        })?);
        out.push(idle_costs(N_ACTIONS, STAY).repeat(nf));
        Ok(out)
    }

    pub fn config(&self) -> &MoversConfig {
        &self.cfg
    }

    pub fn state(&self, s: usize) -> &MoversState {
        &self.states[s]
    }

    pub fn state_index(&self, st: &MoversState) -> Option<usize> {
        self.index.get(st).copied()
    }

    pub fn n_free_cells(&self) -> usize {
        self.free.len()
    }

    /// `[x, y]` of a free-cell index.
    pub fn cell(&self, p: u16) -> [usize; 2] {
        let c = self.free[p as usize];
        [c % self.cfg.width, c / self.cfg.width]
    }

    pub fn free_index(&self, cell: [usize; 2]) -> Option<u16> {
        if cell[0] >= self.cfg.width || cell[1] >= self.cfg.height {
            return None;
        }
        self.free_of[cell[1] * self.cfg.width + cell[0]]
    }

    pub fn box_cell(&self, k: usize) -> u16 {
        self.box_cells[k]
    }

    pub fn truck_cell(&self) -> u16 {
        self.truck_cell
    }

    pub fn truck_distance(&self, k: usize) -> u32 {
        self.truck_dist[k]
    }

    /// Successor cell when moving alone.
    pub fn move_target(&self, p: u16, action: usize) -> u16 {
        self.moves[p as usize][action]
    }

    fn visible(&self, a: u16, b: u16) -> bool {
        let (ca, cb) = (self.cell(a), self.cell(b));
        ca[0].abs_diff(cb[0]).max(ca[1].abs_diff(cb[1])) <= self.cfg.visibility_radius
    }

    /// Joint dynamics.
    pub fn transition(&self, st: &MoversState, a: [usize; 2]) -> MoversState {
        let MoversState::Active { pos, mut boxes } = *st else {
            return MoversState::Done;
        };
        if let Some(k) = st.carried() {
            let p = pos[0];
            if a[0] == a[1] && (UP..=RIGHT).contains(&a[0]) {
                let q = self.moves[p as usize][a[0]];
                return MoversState::Active { pos: [q, q], boxes };
            }
            if a[0] == DROP && a[1] == DROP && p == self.truck_cell {
                boxes[k] = BoxStatus::Delivered;
                if boxes.iter().all(|b| *b == BoxStatus::Delivered) {
                    return MoversState::Done;
                }
            }
            return MoversState::Active { pos, boxes };
        }
        if a[0] == PICK_UP && a[1] == PICK_UP && pos[0] == pos[1] {
            if let Some(k) = (0..N_BOXES).find(|&k| boxes[k] == BoxStatus::AtOrigin && self.box_cells[k] == pos[0]) {
                boxes[k] = BoxStatus::Carried;
                return MoversState::Active { pos, boxes };
            }
        }
        let pos = [self.moves[pos[0] as usize][a[0]], self.moves[pos[1] as usize][a[1]]];
        MoversState::Active { pos, boxes }
    }

    fn convention(&self, st: &MoversState) -> usize {
        match st {
            MoversState::Done => DONE,
            MoversState::Active { boxes, .. } => {
                if st.carried().is_some() {
                    return TRUCK;
                }
                (0..N_BOXES)
                    .filter(|&k| boxes[k] == BoxStatus::AtOrigin)
                    .min_by_key(|&k| (std::cmp::Reverse(self.truck_dist[k]), k))
                    .unwrap_or(DONE)
            }
        }
    }

    fn cost_row(&self, member: usize, intent: usize, st: &MoversState) -> &[f64] {
        let idle = &self.position_costs[DONE][..N_ACTIONS];
        let MoversState::Active { pos, boxes } = st else {
            return idle;
        };
        if intent < N_BOXES && boxes[intent] != BoxStatus::AtOrigin {
            return idle;
        }
        let p = pos[member] as usize;
        &self.position_costs[intent][p * N_ACTIONS..(p + 1) * N_ACTIONS]
    }

    fn visible_cells(&self, p: u16) -> Vec<[usize; 2]> {
        let c = self.cell(p);
        let r = self.cfg.visibility_radius;
        let mut out = Vec::new();
        for y in c[1].saturating_sub(r)..=(c[1] + r).min(self.cfg.height - 1) {
            for x in c[0].saturating_sub(r)..=(c[0] + r).min(self.cfg.width - 1) {
                out.push([x, y]);
            }
        }
        out
    }

    fn box_location(&self, st: &MoversState, k: usize) -> (Location, &'static str) {
        let loc = |p: u16| {
            let c = self.cell(p);
            Location::Cell { x: c[0], y: c[1] }
        };
        match st {
            MoversState::Done => (loc(self.truck_cell), "delivered"),
            MoversState::Active { pos, boxes } => match boxes[k] {
                BoxStatus::AtOrigin => (loc(self.box_cells[k]), "at_origin"),
                BoxStatus::Carried => (loc(pos[0]), "carried"),
                BoxStatus::Delivered => (loc(self.truck_cell), "delivered"),
            },
        }
    }

    fn member_positions(&self, st: &MoversState) -> [u16; 2] {
        match st {
            MoversState::Active { pos, .. } => *pos,
            MoversState::Done => [self.truck_cell; 2],
        }
    }
}

fn neighbor(w: usize, h: usize, c: usize, a: usize) -> Option<usize> {
    let (x, y) = (c % w, c / w);
    match a {
        UP if y > 0 => Some(c - w),
        DOWN if y + 1 < h => Some(c + w),
        LEFT if x > 0 => Some(c - 1),
        RIGHT if x + 1 < w => Some(c + 1),
        _ => None,
    }
}

fn bfs(w: usize, h: usize, wall: &[bool], from: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; w * h];
    dist[from] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(c) = queue.pop_front() {
        let d = dist[c].unwrap();
        for a in [UP, DOWN, LEFT, RIGHT] {
            if let Some(n) = neighbor(w, h, c, a) {
                if !wall[n] && dist[n].is_none() {
                    dist[n] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
    }
    dist
}

impl Domain for MoversDomain {
    fn kind(&self) -> DomainKind {
        DomainKind::Movers
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
        let mut out = Vec::with_capacity(self.states.len() * N_ACTIONS);
        for st in &self.states {
            out.extend_from_slice(self.cost_row(member, intent, st));
        }
        Ok(out)
    }

    fn rule_next_intent(&self, member: usize, next_state: usize, _joint_action: usize, intent: usize) -> usize {
        let st = &self.states[next_state];
        let MoversState::Active { pos, boxes } = st else {
            return DONE;
        };
        if st.carried().is_some() {
            return TRUCK;
        }
        let mate = 1 - member;
        if self.visible(pos[member], pos[mate]) {
            if let Some(j) = (0..N_BOXES).find(|&j| boxes[j] == BoxStatus::AtOrigin && self.box_cells[j] == pos[mate]) {
                let at_own_target = intent < N_BOXES && self.box_cells[intent] == pos[member];
                if intent != j && (!at_own_target || member > mate) {
                    return j;
                }
            }
        }
        if intent < N_BOXES && boxes[intent] == BoxStatus::AtOrigin {
            intent
        } else {
            self.convention(st)
        }
    }

    fn convention_intent(&self, _member: usize, s: usize) -> usize {
        self.convention(&self.states[s])
    }

    fn candidate_intents(&self, s: usize) -> Vec<usize> {
        let st = &self.states[s];
        match st {
            MoversState::Done => vec![DONE],
            MoversState::Active { boxes, .. } => {
                if st.carried().is_some() {
                    vec![TRUCK]
                } else {
                    (0..N_BOXES).filter(|&k| boxes[k] == BoxStatus::AtOrigin).collect()
                }
            }
        }
    }

    fn completed_subtasks(&self, s: usize, _a: usize, next: usize) -> Vec<usize> {
        let (before, after) = (&self.states[s], &self.states[next]);
        let MoversState::Active { boxes: b0, .. } = before else {
            return Vec::new();
        };
        let mut out = Vec::new();
        match after {
            MoversState::Done => {
                if before.carried().is_some() {
                    out.push(TRUCK);
                }
            }
            MoversState::Active { boxes: b1, .. } => {
                for k in 0..N_BOXES {
                    match (b0[k], b1[k]) {
                        (BoxStatus::AtOrigin, BoxStatus::Carried) => out.push(k),
                        (BoxStatus::Carried, BoxStatus::Delivered) => out.push(TRUCK),
                        _ => {}
                    }
                }
            }
        }
        out
    }

    fn intent_eval_start(&self, intent: usize) -> usize {
        if intent == TRUCK {
            let p = self.box_cells[0];
            let st = MoversState::Active {
                pos: [p, p],
                boxes: [BoxStatus::Carried, BoxStatus::AtOrigin, BoxStatus::AtOrigin],
            };
            self.index[&st]
        } else {
            self.start
        }
    }

    fn observe(&self, s: usize, member: usize) -> Observation {
        let st = &self.states[s];
        let pos = self.member_positions(st);
        let me = pos[member];
        let cells = self.visible_cells(me);
        let in_view = |p: u16| self.visible(me, p);
        let visible_boxes = (0..N_BOXES)
            .filter_map(|k| {
                let (loc, status) = self.box_location(st, k);
                let Location::Cell { x, y } = loc else { return None };
                let p = self.free_index([x, y])?;
                in_view(p).then(|| (k, status.to_string()))
            })
            .collect();
        Observation::Movers {
            own_cell: self.cell(me),
            carrying: st.carried(),
            teammate: in_view(pos[1 - member]).then(|| self.cell(pos[1 - member])),
            visible_cells: cells,
            visible_boxes,
            truck_visible: in_view(self.truck_cell),
        }
    }

    fn scene(&self, s: usize) -> Scene {
        let st = &self.states[s];
        let pos = self.member_positions(st);
        let mut entities = Vec::new();
        let mut positions = Vec::new();
        for k in 0..N_BOXES {
            let (at, status) = self.box_location(st, k);
            if let Location::Cell { x, y } = at {
                positions.push(self.free_index([x, y]).expect("free"));
            }
            entities.push(Entity {
                id: format!("box-{}", k + 1),
                kind: "box".into(),
                label: format!("Box {}", k + 1),
                at,
                status: status.into(),
            });
        }
        let tc = self.cell(self.truck_cell);
        entities.push(Entity {
            id: "truck".into(),
            kind: "truck".into(),
            label: "Truck".into(),
            at: Location::Cell { x: tc[0], y: tc[1] },
            status: format!("{} delivered", st.delivered()),
        });
        positions.push(self.truck_cell);
        for (j, name) in self.cfg.members.iter().enumerate() {
            let c = self.cell(pos[j]);
            entities.push(Entity {
                id: format!("member-{j}"),
                kind: "member".into(),
                label: name.clone(),
                at: Location::Cell { x: c[0], y: c[1] },
                status: if st.carried().is_some() { "carrying".into() } else { "free".into() },
            });
            positions.push(pos[j]);
        }
        let visibility = (0..2)
            .map(|j| Visibility {
                cells: self.visible_cells(pos[j]),
                nodes: Vec::new(),
                entities: entities
                    .iter()
                    .zip(&positions)
                    .filter(|(e, p)| e.id == format!("member-{j}") || self.visible(pos[j], **p))
                    .map(|(e, _)| e.id.clone())
                    .collect(),
            })
            .collect();
        let mut walls: Vec<[usize; 2]> = (0..self.cfg.width * self.cfg.height)
            .filter(|&c| self.free_of[c].is_none())
            .map(|c| [c % self.cfg.width, c / self.cfg.width])
            .collect();
        walls.sort_by_key(|c| (c[1], c[0]));
        Scene {
            domain: DomainKind::Movers,
            layout: Layout::Grid { width: self.cfg.width, height: self.cfg.height, walls },
            entities,
            visibility,
        }
    }

    fn intent_entity(&self, intent: usize) -> Option<EntityRef> {
        match intent {
            k if k < N_BOXES => Some(EntityRef { id: format!("box-{}", k + 1), name: format!("Box {}", k + 1) }),
            TRUCK => Some(EntityRef { id: "truck".into(), name: "Truck".into() }),
            _ => None,
        }
    }

    fn check_action(&self, s: usize, member: usize, action: usize) -> std::result::Result<(), String> {
        if action >= N_ACTIONS {
            return Err(format!("unknown action {action}"));
        }
        let st = &self.states[s];
        let MoversState::Active { pos, boxes } = st else {
            return if action == STAY { Ok(()) } else { Err("the task is complete".into()) };
        };
        let p = pos[member];
        match action {
            STAY => Ok(()),
            UP | DOWN | LEFT | RIGHT => {
                if self.moves[p as usize][action] == p {
                    Err(format!("{} is blocked", ACTION_LABELS[action]))
                } else {
                    Ok(())
                }
            }
            PICK_UP => {
                if st.carried().is_some() {
                    Err("already carrying a box".into())
                } else if (0..N_BOXES).any(|k| boxes[k] == BoxStatus::AtOrigin && self.box_cells[k] == p) {
                    Ok(())
                } else {
                    Err("no box here".into())
                }
            }
            _ => {
                if st.carried().is_none() {
                    Err("not carrying a box".into())
                } else {
                    Ok(())
                }
            }
        }
    }

    fn destination_check(
        &self,
        s: usize,
        member: usize,
        action: usize,
        selected: Option<usize>,
    ) -> std::result::Result<(), String> {
        let MoversState::Active { pos, .. } = &self.states[s] else {
            return Ok(());
        };
        let here = pos[member];
        let ok = match action {
            PICK_UP => matches!(selected, Some(k) if k < N_BOXES && self.box_cells[k] == here),
            DROP => selected == Some(TRUCK) && here == self.truck_cell,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{} is restricted to the selected destination", ACTION_LABELS[action]))
        }
    }

    fn progress(&self, s: usize) -> u32 {
        self.states[s].delivered()
    }

    fn render_text(&self, s: usize) -> String {
        let st = &self.states[s];
        let pos = self.member_positions(st);
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut grid: Vec<Vec<char>> = (0..h)
            .map(|y| (0..w).map(|x| if self.free_of[y * w + x].is_some() { '.' } else { '#' }).collect())
            .collect();
        let put = |g: &mut Vec<Vec<char>>, p: u16, ch: char| {
            let c = self.cell(p);
            g[c[1]][c[0]] = ch;
        };
        put(&mut grid, self.truck_cell, 'T');
        if let MoversState::Active { boxes, .. } = st {
            for k in 0..N_BOXES {
                if boxes[k] == BoxStatus::AtOrigin {
                    put(&mut grid, self.box_cells[k], char::from(b'1' + k as u8));
                }
            }
        }
        if pos[0] == pos[1] {
            put(&mut grid, pos[0], if st.carried().is_some() { '*' } else { '@' });
        } else {
            put(&mut grid, pos[0], 'A');
            put(&mut grid, pos[1], 'B');
        }
        let mut out: String = grid.into_iter().map(|r| r.into_iter().collect::<String>() + "\n").collect();
        out.push_str(&format!("delivered {}/{}", st.delivered(), N_BOXES));
        if let Some(k) = st.carried() {
            out.push_str(&format!(", carrying box {}", k + 1));
        }
        out.push('\n');
        out
    }

    fn reward_bounds(&self) -> (f64, f64) {
        (0.0, self.cfg.horizon as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dom() -> MoversDomain {
        MoversDomain::new(MoversConfig::default()).unwrap()
    }

    fn active(d: &MoversDomain, p0: [usize; 2], p1: [usize; 2], boxes: [BoxStatus; 3]) -> usize {
        let st = MoversState::Active { pos: [d.free_index(p0).unwrap(), d.free_index(p1).unwrap()], boxes };
        d.state_index(&st).unwrap()
    }

    #[test]
    fn state_count() {
        let d = dom();
        assert_eq!(d.n_free_cells(), 40);
        assert_eq!(d.task().n_states(), 7 * 40 * 40 + 12 * 40 + 1);
    }

    #[test]
    fn lone_pick_up_does_nothing() {
        let d = dom();
        let origin = [BoxStatus::AtOrigin; 3];
        let s = active(&d, [0, 0], [2, 3], origin);
        let a = d.task().joint().encode(&[PICK_UP, STAY]);
        assert_eq!(d.step(s, a), s);
    }

    #[test]
    fn joint_pick_up_and_carry() {
        let d = dom();
        let origin = [BoxStatus::AtOrigin; 3];
        let s = active(&d, [0, 6], [0, 6], origin);
        let s1 = d.step(s, d.task().joint().encode(&[PICK_UP, PICK_UP]));
        assert_eq!(d.state(s1).carried(), Some(2));
        assert_eq!(d.completed_subtasks(s, 0, s1), vec![2]);
        // mismatched directions keep the pair in place
        assert_eq!(d.step(s1, d.task().joint().encode(&[RIGHT, UP])), s1);
        let s2 = d.step(s1, d.task().joint().encode(&[RIGHT, RIGHT]));
        assert!(matches!(d.state(s2), MoversState::Active { pos, .. } if d.cell(pos[0]) == [1, 6] && pos[0] == pos[1]));
    }

    #[test]
    fn last_drop_reaches_done() {
        let d = dom();
        let s = active(&d, [3, 6], [3, 6], [BoxStatus::Delivered, BoxStatus::Carried, BoxStatus::Delivered]);
        let s1 = d.step(s, d.task().joint().encode(&[DROP, DROP]));
        assert_eq!(*d.state(s1), MoversState::Done);
        assert_eq!(d.completed_subtasks(s, 0, s1), vec![TRUCK]);
        assert_eq!(d.progress(s1), 3);
        assert_eq!(d.task().reward(s1, 0), 1.0);
        assert_eq!(d.task().reward(s, 0), 0.0);
    }

    #[test]
    fn convention_prefers_box_farthest_from_truck() {
        let d = dom();
        // boxes 1 and 2 are equally far; lowest index wins
        assert_eq!(d.truck_distance(0), d.truck_distance(1));
        assert!(d.truck_distance(2) < d.truck_distance(0));
        assert_eq!(d.convention_intent(0, d.start_state()), 0);
        let s = active(&d, [2, 3], [4, 3], [BoxStatus::Delivered, BoxStatus::AtOrigin, BoxStatus::AtOrigin]);
        assert_eq!(d.convention_intent(1, s), 1);
    }

    #[test]
    fn yielding_to_visible_teammate() {
        let d = dom();
        let origin = [BoxStatus::AtOrigin; 3];
        // member 1 stands on box 1, member 0 two cells away heading for box 3
        let s = active(&d, [2, 0], [0, 0], origin);
        assert_eq!(d.rule_next_intent(0, s, 0, 2), 0);
        // far apart: keep
        let s = active(&d, [4, 6], [0, 0], origin);
        assert_eq!(d.rule_next_intent(0, s, 0, 2), 2);
        // both standing on different boxes within view: only the higher index yields
        let mut cfg = MoversConfig::default();
        cfg.boxes = vec![[0, 0], [2, 0], [0, 6]];
        let d2 = MoversDomain::new(cfg).unwrap();
        let s = active(&d2, [0, 0], [2, 0], origin);
        assert_eq!(d2.rule_next_intent(0, s, 0, 0), 0);
        assert_eq!(d2.rule_next_intent(1, s, 0, 1), 0);
    }

    #[test]
    fn rule_targets_truck_when_carrying_and_done_at_end() {
        let d = dom();
        let s = active(&d, [0, 0], [0, 0], [BoxStatus::Carried, BoxStatus::AtOrigin, BoxStatus::AtOrigin]);
        assert_eq!(d.rule_next_intent(1, s, 0, 0), TRUCK);
        let done = d.state_index(&MoversState::Done).unwrap();
        assert_eq!(d.rule_next_intent(1, done, 0, 0), DONE);
    }

    #[test]
    fn visibility_radius() {
        let d = dom();
        let s = active(&d, [2, 3], [4, 3], [BoxStatus::AtOrigin; 3]);
        match d.observe(s, 0) {
            Observation::Movers { teammate, visible_cells, .. } => {
                assert_eq!(teammate, Some([4, 3]));
                assert_eq!(visible_cells.len(), 25);
            }
            _ => unreachable!(),
        }
        let s = active(&d, [0, 0], [4, 3], [BoxStatus::AtOrigin; 3]);
        match d.observe(s, 1) {
            Observation::Movers { teammate, .. } => assert_eq!(teammate, None),
            _ => unreachable!(),
        }
    }

    #[test]
    fn unreachable_box_is_rejected() {
        let mut cfg = MoversConfig::default();
        cfg.walls.extend([[1, 0], [0, 1]]);
        assert!(matches!(MoversDomain::new(cfg), Err(Error::Domain(_))));
        let mut cfg = MoversConfig::default();
        cfg.boxes[0] = [1, 1];
        assert!(matches!(MoversDomain::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn pick_up_cost_is_one_at_the_box() {
        let d = dom();
        let s = active(&d, [6, 0], [4, 3], [BoxStatus::AtOrigin; 3]);
        let c = d.subtask_costs(0, 1).unwrap();
        let row = &c[s * N_ACTIONS..(s + 1) * N_ACTIONS];
        assert_eq!(row[PICK_UP], 1.0);
        assert!(row.iter().enumerate().all(|(a, &v)| a == PICK_UP || v > 1.0));
    }

    #[test]
    fn destination_restriction() {
        let d = dom();
        let s = active(&d, [0, 0], [4, 3], [BoxStatus::AtOrigin; 3]);
        assert!(d.destination_check(s, 0, PICK_UP, Some(0)).is_ok());
        assert!(d.destination_check(s, 0, PICK_UP, Some(2)).is_err());
        assert!(d.destination_check(s, 0, UP, Some(2)).is_ok());
    }

    #[test]
    fn scene_lists_entities_and_view() {
        let d = dom();
        let sc = d.scene(d.start_state());
        assert_eq!(sc.entities.len(), 6);
        assert!(sc.visibility[0].entities.contains(&"member-1".to_string()));
        let text = serde_json::to_string(&sc).unwrap();
        assert!(text.contains("\"type\":\"grid\""));
    }
}
