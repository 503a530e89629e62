//! Tabular Dec-POMDP task models.

mod solve;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::table::{ProbTable, Row};

pub use solve::{
    evaluate_policy, greedy_member_policies, q_values, value_iteration, value_iteration_with,
    ValueIterationConfig, ValueSolution,
};

/// Per-member action and observation vocabularies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub name: String,
    pub actions: Vec<String>,
    pub observations: Vec<String>,
}

/// Mixed-radix encoding of joint actions; member 0 is the most significant digit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointActionSpace {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl JointActionSpace {
    pub fn new(sizes: Vec<usize>) -> Self {
        let mut strides = vec![1; sizes.len()];
        for j in (0..sizes.len().saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * sizes[j + 1];
        }
        let len = sizes.iter().product();
        Self { sizes, strides, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_members(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn stride(&self, member: usize) -> usize {
        self.strides[member]
    }

    pub fn encode(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.sizes.len());
        actions
            .iter()
            .zip(&self.strides)
            .map(|(a, s)| a * s)
            .sum()
    }

    pub fn decode(&self, joint: usize) -> Vec<usize> {
        (0..self.sizes.len()).map(|j| self.component(joint, j)).collect()
    }

    #[inline]
    pub fn component(&self, joint: usize, member: usize) -> usize {
        (joint / self.strides[member]) % self.sizes[member]
    }
}

/// A finite-horizon tabular Dec-POMDP `(n, S, A, Ω, T, O, R, γ, h)`.
///
/// Transition and reward tables are indexed by `s * |A| + a` with `a` a joint
/// action index. A missing observation table means each member has a single
/// uninformative observation.
#[derive(Clone, Debug)]
pub struct TaskModel<F> {
    name: String,
    n_states: usize,
    state_labels: Option<Vec<String>>,
    members: Vec<MemberSpec>,
    joint: JointActionSpace,
    transition: ProbTable<F>,
    observation: Option<ProbTable<F>>,
    reward: Vec<F>,
    gamma: F,
    horizon: usize,
    absorbing: Vec<Option<F>>,
}

impl<F: Scalar> TaskModel<F> {
    /// Assembles a model without checking probabilities; see [`validate_model`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n_states: usize,
        members: Vec<MemberSpec>,
        transition: ProbTable<F>,
        observation: Option<ProbTable<F>>,
        reward: Vec<F>,
        gamma: F,
        horizon: usize,
    ) -> Result<Self> {
        let joint = JointActionSpace::new(members.iter().map(|m| m.actions.len()).collect());
        let rows = n_states * joint.len();
        if transition.n_rows() != rows || transition.n_cols() != n_states {
            return Err(Error::Dimension(format!(
                "transition table is {}x{}, expected {}x{}",
                transition.n_rows(),
                transition.n_cols(),
                rows,
                n_states
            )));
        }
        if reward.len() != rows {
            return Err(Error::Dimension(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                rows
            )));
        }
        if let Some(o) = &observation {
            let n_obs: usize = members.iter().map(|m| m.observations.len()).product();
            if o.n_rows() != rows || o.n_cols() != n_obs {
                return Err(Error::Dimension(format!(
                    "observation table is {}x{}, expected {}x{}",
                    o.n_rows(),
                    o.n_cols(),
                    rows,
                    n_obs
                )));
            }
        }
        let mut model = Self {
            name: name.into(),
            n_states,
            state_labels: None,
            members,
            joint,
            transition,
            observation,
            reward,
            gamma,
            horizon,
            absorbing: Vec::new(),
        };
        model.absorbing = (0..n_states).map(|s| model.detect_absorbing(s)).collect();
        Ok(model)
    }

    pub fn with_state_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_states {
            return Err(Error::Dimension(format!(
                "{} state labels for {} states",
                labels.len(),
                self.n_states
            )));
        }
        self.state_labels = Some(labels);
        Ok(self)
    }

    /// Same dynamics under a different discount.
    pub fn with_gamma(&self, gamma: F) -> Self {
        let mut m = self.clone();
        m.gamma = gamma;
        m
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        let mut m = self.clone();
        m.horizon = horizon;
        m
    }

    fn detect_absorbing(&self, s: usize) -> Option<F> {
        let na = self.joint.len();
        let r0 = self.reward[s * na];
        for a in 0..na {
            let row = self.transition.row(s * na + a);
            if row.len() != 1 || row.cols[0] as usize != s || row.probs[0] != F::one() {
                return None;
            }
            if self.reward[s * na + a] != r0 {
                return None;
            }
        }
        Some(r0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[MemberSpec] {
        &self.members
    }

    pub fn n_actions(&self, member: usize) -> usize {
        self.members[member].actions.len()
    }

    pub fn joint(&self) -> &JointActionSpace {
        &self.joint
    }

    pub fn n_joint_actions(&self) -> usize {
        self.joint.len()
    }

    pub fn gamma(&self) -> F {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_label(&self, s: usize) -> String {
        match &self.state_labels {
            Some(l) => l[s].clone(),
            None => format!("s{s}"),
        }
    }

    pub fn state_labels(&self) -> Option<&[String]> {
        self.state_labels.as_deref()
    }

    pub fn transition_table(&self) -> &ProbTable<F> {
        &self.transition
    }

    pub fn observation_table(&self) -> Option<&ProbTable<F>> {
        self.observation.as_ref()
    }

    pub fn rewards(&self) -> &[F] {
        &self.reward
    }

    #[inline]
    pub fn transition(&self, s: usize, a: usize) -> Row<'_, F> {
        self.transition.row(s * self.joint.len() + a)
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> F {
        self.reward[s * self.joint.len() + a]
    }

    /// Reward per step if `s` is an absorbing state with action-independent reward.
    #[inline]
    pub fn absorbing_reward(&self, s: usize) -> Option<F> {
        self.absorbing[s]
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s].is_some()
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(Error::InvalidState(s))
        }
    }

    /// Successor for deterministic rows; `None` if the row is stochastic.
    pub fn deterministic_successor(&self, s: usize, a: usize) -> Option<usize> {
        let row = self.transition(s, a);
        (row.len() == 1).then(|| row.cols[0] as usize)
    }

    /// Undiscounted reward collected by sitting in an absorbing state for `steps` steps.
    pub fn absorbing_tail(&self, s: usize, steps: usize) -> F {
        self.absorbing[s]
            .map(|r| r * F::lit(steps as f64))
            .unwrap_or_else(F::zero)
    }

    pub fn cast<G: Scalar>(&self) -> TaskModel<G> {
        TaskModel {
            name: self.name.clone(),
            n_states: self.n_states,
            state_labels: self.state_labels.clone(),
            members: self.members.clone(),
            joint: self.joint.clone(),
            transition: self.transition.cast(),
            observation: self.observation.as_ref().map(|o| o.cast()),
            reward: self.reward.iter().map(|r| G::lit(r.as_f64())).collect(),
            gamma: G::lit(self.gamma.as_f64()),
            horizon: self.horizon,
            absorbing: self
                .absorbing
                .iter()
                .map(|a| a.map(|r| G::lit(r.as_f64())))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    TransitionRow { state: usize, action: usize, detail: String },
    ObservationRow { next_state: usize, action: usize, detail: String },
    GammaOutOfRange(f64),
    ZeroHorizon,
    NoMembers,
    NonFiniteReward { state: usize, action: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::TransitionRow { state, action, detail } => {
                write!(f, "transition row (s={state}, a={action}) {detail}")
            }
            Violation::ObservationRow { next_state, action, detail } => {
                write!(f, "observation row (s'={next_state}, a={action}) {detail}")
            }
            Violation::GammaOutOfRange(g) => write!(f, "gamma out of range: {g}"),
            Violation::ZeroHorizon => write!(f, "horizon must be at least 1"),
            Violation::NoMembers => write!(f, "model has no members"),
            Violation::NonFiniteReward { state, action } => {
                write!(f, "reward (s={state}, a={action}) is not finite")
            }
        }
    }
}

/// Lists every broken invariant; an empty list means the model is well formed.
pub fn validate_model<F: Scalar>(model: &TaskModel<F>) -> Vec<Violation> {
    let mut out = Vec::new();
    if model.members.is_empty() {
        out.push(Violation::NoMembers);
    }
    let g = model.gamma.as_f64();
    if !(g > 0.0 && g <= 1.0) {
        out.push(Violation::GammaOutOfRange(g));
    }
    if model.horizon == 0 {
        out.push(Violation::ZeroHorizon);
    }
    let na = model.joint.len().max(1);
    for v in model.transition.row_violations(F::row_tolerance()) {
        out.push(Violation::TransitionRow {
            state: v.row / na,
            action: v.row % na,
            detail: v.problem.to_string(),
        });
    }
    if let Some(o) = &model.observation {
        for v in o.row_violations(F::row_tolerance()) {
            out.push(Violation::ObservationRow {
                next_state: v.row / na,
                action: v.row % na,
                detail: v.problem.to_string(),
            });
        }
    }
    for (i, r) in model.reward.iter().enumerate() {
        if !r.is_finite() {
            out.push(Violation::NonFiniteReward { state: i / na, action: i % na });
        }
    }
    out
}

/// One recorded step: the state, the joint action taken there, and the
/// intents (when known) that drove it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub x: Vec<Option<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// State reached after the last recorded step.
    pub final_state: Option<usize>,
    /// Undiscounted episode reward, including any absorbing tail.
    pub terminal_reward_sum: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State at step `t`, or the final state when `t == len()`.
    pub fn state_at(&self, t: usize) -> Option<usize> {
        if t < self.steps.len() {
            Some(self.steps[t].s)
        } else if t == self.steps.len() {
            self.final_state
        } else {
            None
        }
    }

    /// Checks timestep ordering, horizon and label ranges.
    pub fn check(&self, horizon: usize, n_intents: &[usize]) -> Result<()> {
        if self.steps.len() > horizon {
            return Err(Error::Dataset(format!(
                "trajectory has {} steps, horizon is {horizon}",
                self.steps.len()
            )));
        }
        for (i, st) in self.steps.iter().enumerate() {
            if st.t != i {
                return Err(Error::Dataset(format!(
                    "timestep {} at position {i}; timesteps must run 0,1,2,...",
                    st.t
                )));
            }
            if st.x.len() > n_intents.len() {
                return Err(Error::Dataset(format!(
                    "step {i} carries {} intent slots for {} members",
                    st.x.len(),
                    n_intents.len()
                )));
            }
            for (j, x) in st.x.iter().enumerate() {
                if let Some(x) = x {
                    if *x >= n_intents[j] {
                        return Err(Error::Dataset(format!(
                            "step {i}: intent {x} out of range for member {j}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
struct TaskModelFile<F> {
    format: String,
    name: String,
    shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_labels: Option<Vec<String>>,
    members: Vec<MemberSpec>,
    gamma: F,
    horizon: usize,
    transition: ProbTable<F>,
    #[serde(default)]
    observation: Option<ProbTable<F>>,
    reward: Vec<F>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct Shape {
    n_members: usize,
    n_states: usize,
    n_joint_actions: usize,
    member_actions: Vec<usize>,
    member_observations: Vec<usize>,
}

pub const TASK_FORMAT: &str = "teamcoach.task/1";

impl<F: Scalar> Serialize for TaskModel<F> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TaskModelFile {
            format: TASK_FORMAT.to_string(),
            name: self.name.clone(),
            shape: Shape {
                n_members: self.members.len(),
                n_states: self.n_states,
                n_joint_actions: self.joint.len(),
                member_actions: self.members.iter().map(|m| m.actions.len()).collect(),
                member_observations: self.members.iter().map(|m| m.observations.len()).collect(),
            },
            state_labels: self.state_labels.clone(),
            members: self.members.clone(),
            gamma: self.gamma,
            horizon: self.horizon,
            transition: self.transition.clone(),
            observation: self.observation.clone(),
            reward: self.reward.clone(),
        }
        .serialize(s)
    }
}

impl<'de, F: Scalar> Deserialize<'de> for TaskModel<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let f = TaskModelFile::<F>::deserialize(d)?;
        if f.format != TASK_FORMAT {
            return Err(D::Error::custom(format!("unsupported task format {:?}", f.format)));
        }
        let shape = Shape {
            n_members: f.members.len(),
            n_states: f.shape.n_states,
            n_joint_actions: f.members.iter().map(|m| m.actions.len()).product(),
            member_actions: f.members.iter().map(|m| m.actions.len()).collect(),
            member_observations: f.members.iter().map(|m| m.observations.len()).collect(),
        };
        if shape != f.shape {
            return Err(D::Error::custom("shape metadata disagrees with member specs"));
        }
        let m = TaskModel::new(
            f.name,
            f.shape.n_states,
            f.members,
            f.transition,
            f.observation,
            f.reward,
            f.gamma,
            f.horizon,
        )
        .map_err(D::Error::custom)?;
        match f.state_labels {
            Some(l) => m.with_state_labels(l).map_err(D::Error::custom),
            None => Ok(m),
        }
    }
}

/// Convenience for small hand-built models: one member spec per action count.
pub fn simple_members(action_counts: &[usize]) -> Vec<MemberSpec> {
    action_counts
        .iter()
        .enumerate()
        .map(|(j, &n)| MemberSpec {
            name: format!("member-{j}"),
            actions: (0..n).map(|a| format!("a{a}")).collect(),
            observations: vec!["o".to_string()],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(row_mass: f64, gamma: f64) -> TaskModel<f64> {
        let mut t = ProbTable::builder(2);
        t.push_row([(0, row_mass)]);
        t.push_row([(1, 1.0)]);
        TaskModel::new("two", 2, simple_members(&[1]), t.finish(), None, vec![0.0, 1.0], gamma, 5)
            .unwrap()
    }

    #[test]
    fn well_formed_model_has_no_violations() {
        assert!(validate_model(&two_state(1.0, 0.9)).is_empty());
    }

    #[test]
    fn short_transition_row_is_named() {
        let v = validate_model(&two_state(0.9, 0.9));
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::TransitionRow { state: 0, action: 0, .. }));
        assert!(v[0].to_string().contains("(s=0, a=0)"));
    }

    #[test]
    fn gamma_above_one_is_reported() {
        let v = validate_model(&two_state(1.0, 1.2));
        assert_eq!(v, vec![Violation::GammaOutOfRange(1.2)]);
        assert!(v[0].to_string().starts_with("gamma out of range"));
    }

    #[test]
    fn joint_actions_round_trip() {
        let j = JointActionSpace::new(vec![3, 4, 2]);
        assert_eq!(j.len(), 24);
        for a in 0..j.len() {
            let parts = j.decode(a);
            assert_eq!(j.encode(&parts), a);
            for (m, &p) in parts.iter().enumerate() {
                assert_eq!(j.component(a, m), p);
            }
        }
        assert_eq!(j.encode(&[1, 0, 0]), 8);
    }

    #[test]
    fn absorbing_states_detected() {
        let m = two_state(1.0, 0.9);
        assert_eq!(m.absorbing_reward(0), Some(0.0));
        assert_eq!(m.absorbing_reward(1), Some(1.0));
        assert_eq!(m.absorbing_tail(1, 7), 7.0);
    }

    #[test]
    fn json_round_trip_preserves_model() {
        let m = two_state(1.0, 0.95);
        let json = serde_json::to_string(&m).unwrap();
        let back: TaskModel<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.transition_table(), m.transition_table());
        assert_eq!(back.rewards(), m.rewards());
        assert_eq!(back.gamma(), m.gamma());
    }

    #[test]
    fn trajectory_check_rejects_gaps() {
        let tr = Trajectory {
            steps: vec![
                TrajectoryStep { t: 0, s: 0, a: 0, x: vec![None] },
                TrajectoryStep { t: 2, s: 0, a: 0, x: vec![None] },
            ],
            final_state: Some(0),
            terminal_reward_sum: 0.0,
        };
        assert!(tr.check(10, &[2]).is_err());
    }
}
