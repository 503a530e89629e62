//! Intent-conditioned behavior models for each team member.
//!
//! A member is described by a policy `pi(a_j | s, x)`, intent dynamics
//! `zeta(x' | s', a, x)` over the joint action `a`, and an initial intent
//! distribution per state. Scripted robots, synthetic humans and learned
//! models all share this representation.

mod rollout;

use serde::{Deserialize, Serialize};

use crate::domains::{Domain, IntentSpace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::table::{ProbTable, ProbTableBuilder, Row};
use crate::task::TaskModel;

pub use rollout::{rollout_team, StepNoise, StepRecord, TeamStepper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberRole {
    /// Follows its recommendation whenever the coach intervenes.
    Scripted,
    Synthetic,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct AgentBehaviorModel<F> {
    pub name: String,
    pub role: MemberRole,
    /// Probability of adopting a recommended intent, when it differs from the
    /// coach's assumption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<f64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_joint_actions: usize,
    pub n_intents: usize,
    /// Rows `s * X + x`, columns member actions.
    pub policy: ProbTable<F>,
    /// Rows `(s' * |A| + a) * X + x`, columns next intents.
    pub intent_dynamics: ProbTable<F>,
    /// Rows `s`, columns intents.
    pub initial_intent: ProbTable<F>,
}

impl<F: Scalar> AgentBehaviorModel<F> {
    #[inline]
    pub fn policy_row(&self, s: usize, x: usize) -> Row<'_, F> {
        self.policy.row(s * self.n_intents + x)
    }

    #[inline]
    pub fn dynamics_row(&self, next_state: usize, joint_action: usize, x: usize) -> Row<'_, F> {
        self.intent_dynamics
            .row((next_state * self.n_joint_actions + joint_action) * self.n_intents + x)
    }

    #[inline]
    pub fn initial_row(&self, s: usize) -> Row<'_, F> {
        self.initial_intent.row(s)
    }

    /// Shape and normalization problems, one message per offending table.
    pub fn problems(&self, task: &TaskModel<F>, member: usize) -> Vec<String> {
        let mut out = Vec::new();
        let (ns, nx) = (self.n_states, self.n_intents);
        if ns != task.n_states() {
            out.push(format!("{} states, task has {}", ns, task.n_states()));
        }
        if member >= task.n_members() {
            out.push(format!("member {member} does not exist"));
            return out;
        }
        if self.n_actions != task.n_actions(member) || self.n_joint_actions != task.n_joint_actions() {
            out.push(format!(
                "action counts {}/{} do not match the task ({}/{})",
                self.n_actions,
                self.n_joint_actions,
                task.n_actions(member),
                task.n_joint_actions()
            ));
        }
        if nx == 0 {
            out.push("empty intent space".into());
        }
        let shapes = [
            ("policy", &self.policy, ns * nx, self.n_actions),
            ("intent_dynamics", &self.intent_dynamics, ns * self.n_joint_actions * nx, nx),
            ("initial_intent", &self.initial_intent, ns, nx),
        ];
        for (name, table, rows, cols) in shapes {
            if table.n_rows() != rows || table.n_cols() != cols {
                out.push(format!(
                    "{name} table is {}x{}, expected {rows}x{cols}",
                    table.n_rows(),
                    table.n_cols()
                ));
                continue;
            }
            if let Some(v) = table.row_violations(F::row_tolerance()).first() {
                out.push(format!("{name} row {}: {}", v.row, v.problem));
            }
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> AgentBehaviorModel<G> {
        AgentBehaviorModel {
            name: self.name.clone(),
            role: self.role,
            acceptance: self.acceptance,
            n_states: self.n_states,
            n_actions: self.n_actions,
            n_joint_actions: self.n_joint_actions,
            n_intents: self.n_intents,
            policy: self.policy.cast(),
            intent_dynamics: self.intent_dynamics.cast(),
            initial_intent: self.initial_intent.cast(),
        }
    }
}

pub const TEAM_FORMAT: &str = "teamcoach.team/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct TeamModel<F> {
    pub format: String,
    pub task: String,
    pub intents: IntentSpace,
    pub members: Vec<AgentBehaviorModel<F>>,
}

impl<F: Scalar> TeamModel<F> {
    pub fn new(task: &TaskModel<F>, intents: IntentSpace, members: Vec<AgentBehaviorModel<F>>) -> Result<Self> {
        let team = Self { format: TEAM_FORMAT.into(), task: task.name().into(), intents, members };
        team.validate(task)?;
        Ok(team)
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn n_intents(&self) -> usize {
        self.intents.len()
    }

    /// Size of the joint intent space, `|X|^n`.
    pub fn n_joint_intents(&self) -> usize {
        self.n_intents().pow(self.members.len() as u32)
    }

    /// Lexicographic joint-intent index (member 0 most significant).
    pub fn encode_intents(&self, x: &[usize]) -> usize {
        x.iter().fold(0, |acc, &xi| acc * self.n_intents() + xi)
    }

    pub fn decode_intents(&self, mut joint: usize) -> Vec<usize> {
        let nx = self.n_intents();
        let mut out = vec![0; self.members.len()];
        for slot in out.iter_mut().rev() {
            *slot = joint % nx;
            joint /= nx;
        }
        out
    }

    pub fn validate(&self, task: &TaskModel<F>) -> Result<()> {
        if self.format != TEAM_FORMAT {
            return Err(Error::InvalidModel(format!("unsupported team format {:?}", self.format)));
        }
        if self.members.len() != task.n_members() {
            return Err(Error::Dimension(format!(
                "{} member models for a {}-member task",
                self.members.len(),
                task.n_members()
            )));
        }
        for (j, m) in self.members.iter().enumerate() {
            if m.n_intents != self.intents.len() {
                return Err(Error::Dimension(format!(
                    "member {j} has {} intents, the team has {}",
                    m.n_intents,
                    self.intents.len()
                )));
            }
            if let Some(p) = m.problems(task, j).into_iter().next() {
                return Err(Error::InvalidModel(format!("member {j}: {p}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str, task: &TaskModel<F>) -> Result<Self> {
        let team: Self = serde_json::from_str(text)?;
        team.validate(task)?;
        Ok(team)
    }

    pub fn cast<G: Scalar>(&self) -> TeamModel<G> {
        TeamModel {
            format: self.format.clone(),
            task: self.task.clone(),
            intents: self.intents.clone(),
            members: self.members.iter().map(|m| m.cast()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAgentConfig {
    /// Probability of keeping the current intent instead of applying the
    /// cooperative switching rule.
    pub stubbornness: f64,
    /// Softmax temperature over step-cost regret.
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<f64>,
}

impl Default for SyntheticAgentConfig {
    fn default() -> Self {
        Self { stubbornness: 0.6, temperature: 0.2, acceptance: None }
    }
}

impl SyntheticAgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.stubbornness) {
            return Err(Error::Config(format!("stubbornness {} is outside [0, 1]", self.stubbornness)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if let Some(p) = self.acceptance {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("acceptance {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Extra regret charged to actions that tie the greedy action without being
/// it, so the zero-temperature limit is the planner's own tie-break.
const TIE_REGRET: f64 = 0.5;

fn greedy_action(costs: &[f64]) -> usize {
    let mut best = 0;
    for (a, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = a;
        }
    }
    best
}

fn softmax_row(costs: &[f64], temperature: f64) -> Vec<f64> {
    let g = greedy_action(costs);
    let min = costs[g];
    let mut w: Vec<f64> = costs
        .iter()
        .enumerate()
        .map(|(a, &c)| {
            if !c.is_finite() {
                return 0.0;
            }
            let mut regret = c - min;
            if a != g && regret <= 0.0 {
                regret += TIE_REGRET;
            }
            (-regret / temperature).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    for v in &mut w {
        *v /= z;
    }
    w
}

fn policy_table(
    domain: &dyn Domain,
    member: usize,
    row: impl Fn(&[f64]) -> Vec<(usize, f64)>,
) -> Result<ProbTable<f64>> {
    let task = domain.task();
    let (ns, nx, na) = (task.n_states(), domain.intents().len(), task.n_actions(member));
    let costs: Vec<Vec<f64>> = (0..nx).map(|x| domain.subtask_costs(member, x)).collect::<Result<_>>()?;
    let mut b = ProbTableBuilder::with_capacity(na, ns * nx);
    let mut cache = std::collections::HashMap::new();
    for s in 0..ns {
        for c in &costs {
            let key: Vec<u64> = c[s * na..(s + 1) * na].iter().map(|v| v.to_bits()).collect();
            let slot = *cache.entry(key).or_insert_with(|| b.intern(row(&c[s * na..(s + 1) * na])));
            b.push_slot(slot);
        }
    }
    Ok(b.finish())
}

/// `zeta` rows built from a per-`(s', x)` rule; the joint action is not
/// consulted by the shipped rules, so each row repeats across actions.
fn dynamics_table(
    domain: &dyn Domain,
    member: usize,
    row: impl Fn(usize, usize) -> Vec<(usize, f64)>,
) -> ProbTable<f64> {
    let task = domain.task();
    let (ns, nx, nja) = (task.n_states(), domain.intents().len(), task.n_joint_actions());
    let mut b = ProbTableBuilder::with_capacity(nx, ns * nja * nx);
    let mut slots = vec![0u32; nx];
    let _ = member;
    for s in 0..ns {
        for (x, slot) in slots.iter_mut().enumerate() {
            *slot = b.intern(row(s, x));
        }
        for _ in 0..nja {
            for &slot in &slots {
                b.push_slot(slot);
            }
        }
    }
    b.finish()
}

/// Scripted teammate: greedy sub-task planner per intent, the cooperative
/// switching rule, and the team convention as its first target.
pub fn make_robot_model(domain: &dyn Domain, member: usize) -> Result<AgentBehaviorModel<f64>> {
    let task = domain.task();
    let policy = policy_table(domain, member, |c| vec![(greedy_action(c), 1.0)])?;
    let intent_dynamics =
        dynamics_table(domain, member, |s, x| vec![(domain.rule_next_intent(member, s, 0, x), 1.0)]);
    let mut init = ProbTableBuilder::new(domain.intents().len());
    for s in 0..task.n_states() {
        init.push_one_hot(domain.convention_intent(member, s));
    }
    Ok(AgentBehaviorModel {
        name: domain.member_name(member).to_string(),
        role: MemberRole::Scripted,
        acceptance: None,
        n_states: task.n_states(),
        n_actions: task.n_actions(member),
        n_joint_actions: task.n_joint_actions(),
        n_intents: domain.intents().len(),
        policy,
        intent_dynamics,
        initial_intent: init.finish(),
    })
}

/// Noisy, partly stubborn stand-in for a human teammate.
pub fn make_synthetic_human(
    domain: &dyn Domain,
    member: usize,
    cfg: &SyntheticAgentConfig,
) -> Result<AgentBehaviorModel<f64>> {
    cfg.validate()?;
    let task = domain.task();
    let sigma = cfg.stubbornness;
    let policy = policy_table(domain, member, |c| softmax_row(c, cfg.temperature).into_iter().enumerate().collect())?;
    let intent_dynamics = dynamics_table(domain, member, |s, x| {
        vec![(domain.rule_next_intent(member, s, 0, x), 1.0 - sigma), (x, sigma)]
    });
    let nx = domain.intents().len();
    let mut init = ProbTableBuilder::new(nx);
    for s in 0..task.n_states() {
        let cands = domain.candidate_intents(s);
        let w = sigma / cands.len() as f64;
        let mut row: Vec<(usize, f64)> = cands.iter().map(|&x| (x, w)).collect();
        row.push((domain.convention_intent(member, s), 1.0 - sigma));
        init.push_row(row);
    }
    Ok(AgentBehaviorModel {
        name: domain.member_name(member).to_string(),
        role: MemberRole::Synthetic,
        acceptance: cfg.acceptance,
        n_states: task.n_states(),
        n_actions: task.n_actions(member),
        n_joint_actions: task.n_joint_actions(),
        n_intents: nx,
        policy,
        intent_dynamics,
        initial_intent: init.finish(),
    })
}

/// Synthetic human as member 0 and scripted robots for everyone else.
pub fn make_synthetic_team(domain: &dyn Domain, human: &SyntheticAgentConfig) -> Result<TeamModel<f64>> {
    let mut members = vec![make_synthetic_human(domain, 0, human)?];
    for j in 1..domain.n_members() {
        members.push(make_robot_model(domain, j)?);
    }
    TeamModel::new(domain.task(), domain.intents().clone(), members)
}

/// Every member scripted: a team that is aligned by construction.
pub fn make_scripted_team(domain: &dyn Domain) -> Result<TeamModel<f64>> {
    let members = (0..domain.n_members()).map(|j| make_robot_model(domain, j)).collect::<Result<_>>()?;
    TeamModel::new(domain.task(), domain.intents().clone(), members)
}
