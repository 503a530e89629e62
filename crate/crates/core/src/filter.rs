//! Online intent inference.
//!
//! The coach tracks one belief vector per member and folds in each observed
//! transition with the member's policy likelihood and intent dynamics. The
//! offline forward-backward pass used for review and learning lives here too.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::task::{TaskModel, Trajectory};
use crate::team::{AgentBehaviorModel, TeamModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct BeliefState<F> {
    pub beliefs: Vec<Vec<F>>,
    /// Timestep of the state the beliefs refer to.
    pub t: usize,
    /// Number of underflow resets so far.
    #[serde(default)]
    pub resets: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapIntent {
    pub intent: usize,
    pub confidence: f64,
}

fn underflow<F: Scalar>() -> F {
    F::lit(1e-300).max(F::min_positive_value())
}

pub fn init_belief<F: Scalar>(team: &TeamModel<F>, s0: usize) -> Result<BeliefState<F>> {
    let nx = team.n_intents();
    let beliefs = team
        .members
        .iter()
        .map(|m| {
            if s0 >= m.n_states {
                return Err(Error::InvalidState(s0));
            }
            Ok(m.initial_row(s0).to_dense(nx))
        })
        .collect::<Result<_>>()?;
    Ok(BeliefState { beliefs, t: 0, resets: 0 })
}

impl<F: Scalar> BeliefState<F> {
    pub fn one_hot(n_intents: usize, x: &[usize], t: usize) -> Self {
        let beliefs = x
            .iter()
            .map(|&xi| {
                let mut b = vec![F::zero(); n_intents];
                b[xi] = F::one();
                b
            })
            .collect();
        Self { beliefs, t, resets: 0 }
    }

    /// Bayes update for the transition `s --a--> next`:
    /// `b'(x') ∝ Σ_x b(x) π_j(a_j | s, x) ζ_j(x' | next, a, x)`.
    pub fn update(&mut self, task: &TaskModel<F>, team: &TeamModel<F>, s: usize, a: usize, next: usize) -> Result<()> {
        let nx = team.n_intents();
        if self.beliefs.len() != team.n_members() || self.beliefs.iter().any(|b| b.len() != nx) {
            return Err(Error::Dimension(format!(
                "belief of shape {}x{} for {} members and {} intents",
                self.beliefs.len(),
                self.beliefs.first().map_or(0, Vec::len),
                team.n_members(),
                nx
            )));
        }
        task.check_state(s)?;
        task.check_state(next)?;
        if a >= task.n_joint_actions() {
            return Err(Error::Dimension(format!("joint action {a} out of range")));
        }
        let mut fresh = vec![F::zero(); nx];
        for (j, m) in team.members.iter().enumerate() {
            let aj = task.joint().component(a, j);
            fresh.iter_mut().for_each(|v| *v = F::zero());
            for (x, &bx) in self.beliefs[j].iter().enumerate() {
                if bx == F::zero() {
                    continue;
                }
                let w = bx * m.policy_row(s, x).get(aj);
                if w == F::zero() {
                    continue;
                }
                for (xn, p) in m.dynamics_row(next, a, x).iter() {
                    fresh[xn] += w * p;
                }
            }
            let z: F = fresh.iter().copied().sum();
            if z < underflow::<F>() || !z.is_finite() {
                warn!("belief of member {j} underflowed at t={}; resetting to the prior", self.t + 1);
                self.resets += 1;
                self.beliefs[j] = m.initial_row(next).to_dense(nx);
            } else {
                for (dst, &v) in self.beliefs[j].iter_mut().zip(&fresh) {
                    *dst = v / z;
                }
            }
        }
        self.t += 1;
        Ok(())
    }

    /// Argmax per member, lowest index on ties.
    pub fn map_intent(&self) -> Vec<MapIntent> {
        self.beliefs
            .iter()
            .map(|b| {
                let mut best = 0;
                for (x, &p) in b.iter().enumerate() {
                    if p > b[best] {
                        best = x;
                    }
                }
                MapIntent { intent: best, confidence: b[best].as_f64() }
            })
            .collect()
    }
}

pub fn update_belief<F: Scalar>(
    belief: &BeliefState<F>,
    s: usize,
    a: usize,
    next: usize,
    task: &TaskModel<F>,
    team: &TeamModel<F>,
) -> Result<BeliefState<F>> {
    let mut b = belief.clone();
    b.update(task, team, s, a, next)?;
    Ok(b)
}

pub fn map_intent<F: Scalar>(belief: &BeliefState<F>) -> Vec<MapIntent> {
    belief.map_intent()
}

/// Marginal log-probability of a member's actions given the states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood {
    pub value: f64,
    /// First step at which the likelihood became zero.
    pub zero_step: Option<usize>,
}

/// Scaled forward-backward pass over one member's latent intent chain.
pub struct ChainPosterior<F> {
    /// `gamma[t][x] = P(x_t = x | trajectory)`.
    pub gamma: Vec<Vec<F>>,
    pub log_likelihood: LogLikelihood,
    alpha: Vec<Vec<F>>,
    beta: Vec<Vec<F>>,
    scale: Vec<F>,
    emission: Vec<Vec<F>>,
}

impl<F: Scalar> ChainPosterior<F> {
    /// Visits the expected transition counts
    /// `xi_t(x, x') = P(x_t = x, x_{t+1} = x' | trajectory)` for each step
    /// `t < T - 1`, as `f(t, x, x', weight)`.
    pub fn for_each_transition(
        &self,
        model: &AgentBehaviorModel<F>,
        traj: &Trajectory,
        mut f: impl FnMut(usize, usize, usize, F),
    ) {
        let n = self.gamma.len();
        for t in 0..n.saturating_sub(1) {
            let (a, next) = (traj.steps[t].a, traj.steps[t + 1].s);
            for (x, &ax) in self.alpha[t].iter().enumerate() {
                if ax == F::zero() {
                    continue;
                }
                for (xn, p) in model.dynamics_row(next, a, x).iter() {
                    let w = ax * p * self.emission[t + 1][xn] * self.beta[t + 1][xn] / self.scale[t + 1];
                    if w > F::zero() {
                        f(t, x, xn, w);
                    }
                }
            }
        }
    }
}

/// Runs forward-backward for `member` on `traj`. Steps carrying a label for
/// this member are clamped to it when `clamp` is set.
pub fn forward_backward<F: Scalar>(
    task: &TaskModel<F>,
    model: &AgentBehaviorModel<F>,
    member: usize,
    traj: &Trajectory,
    clamp: bool,
) -> Result<ChainPosterior<F>> {
    let nx = model.n_intents;
    let n = traj.steps.len();
    let joint = task.joint();
    for st in &traj.steps {
        task.check_state(st.s)?;
        if st.a >= task.n_joint_actions() {
            return Err(Error::Dimension(format!("joint action {} out of range", st.a)));
        }
    }
    let emission: Vec<Vec<F>> = traj
        .steps
        .iter()
        .map(|st| {
            let aj = joint.component(st.a, member);
            let label = if clamp { st.x.get(member).copied().flatten() } else { None };
            (0..nx)
                .map(|x| match label {
                    Some(l) if l != x => F::zero(),
                    _ => model.policy_row(st.s, x).get(aj),
                })
                .collect()
        })
        .collect();

    let mut alpha = vec![vec![F::zero(); nx]; n];
    let mut scale = vec![F::one(); n];
    let mut ll = 0.0;
    let mut zero_step = None;
    for t in 0..n {
        let (head, tail) = alpha.split_at_mut(t);
        let cur = &mut tail[0];
        if t == 0 {
            for (x, p) in model.initial_row(traj.steps[0].s).iter() {
                cur[x] = p;
            }
        } else {
            let (a, s) = (traj.steps[t - 1].a, traj.steps[t].s);
            for (x, &px) in head[t - 1].iter().enumerate() {
                if px == F::zero() {
                    continue;
                }
                for (xn, p) in model.dynamics_row(s, a, x).iter() {
                    cur[xn] += px * p;
                }
            }
        }
        for (v, e) in cur.iter_mut().zip(&emission[t]) {
            *v *= *e;
        }
        let c: F = cur.iter().copied().sum();
        if c <= F::zero() || !c.is_finite() {
            zero_step = Some(t);
            break;
        }
        for v in cur.iter_mut() {
            *v /= c;
        }
        scale[t] = c;
        ll += c.as_f64().ln();
    }
    if let Some(t) = zero_step {
        return Ok(ChainPosterior {
            gamma: Vec::new(),
            log_likelihood: LogLikelihood { value: f64::NEG_INFINITY, zero_step: Some(t) },
            alpha,
            beta: Vec::new(),
            scale,
            emission,
        });
    }

    let mut beta = vec![vec![F::one(); nx]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let (a, next) = (traj.steps[t].a, traj.steps[t + 1].s);
        for x in 0..nx {
            let mut acc = F::zero();
            for (xn, p) in model.dynamics_row(next, a, x).iter() {
                acc += p * emission[t + 1][xn] * beta[t + 1][xn];
            }
            beta[t][x] = acc / scale[t + 1];
        }
    }
    let gamma = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| {
            let mut g: Vec<F> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
            let z: F = g.iter().copied().sum();
            if z > F::zero() {
                g.iter_mut().for_each(|v| *v /= z);
            }
            g
        })
        .collect();
    Ok(ChainPosterior {
        gamma,
        log_likelihood: LogLikelihood { value: ll, zero_step: None },
        alpha,
        beta,
        scale,
        emission,
    })
}

/// Smoothed per-step intent posteriors for every member, for after-action
/// review.
pub fn smooth<F: Scalar>(task: &TaskModel<F>, team: &TeamModel<F>, traj: &Trajectory) -> Result<Vec<Vec<Vec<F>>>> {
    team.members
        .iter()
        .enumerate()
        .map(|(j, m)| forward_backward(task, m, j, traj, false).map(|p| p.gamma))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::ProbTable;
    use crate::task::{simple_members, TrajectoryStep};
    use crate::team::{MemberRole, TeamModel};
    use crate::domains::IntentSpace;

    fn task() -> TaskModel<f64> {
        let mut t = ProbTable::builder(2);
        for _ in 0..2 {
            for _ in 0..2 {
                t.push_row([(0, 0.5), (1, 0.5)]);
            }
        }
        TaskModel::new("t", 2, simple_members(&[2]), t.finish(), None, vec![0.0; 4], 1.0, 10).unwrap()
    }

    fn member(policy: ProbTable<f64>, zeta: ProbTable<f64>, init: ProbTable<f64>) -> AgentBehaviorModel<f64> {
        AgentBehaviorModel {
            name: "m".into(),
            role: MemberRole::Learned,
            acceptance: None,
            n_states: 2,
            n_actions: 2,
            n_joint_actions: 2,
            n_intents: 2,
            policy,
            intent_dynamics: zeta,
            initial_intent: init,
        }
    }

    fn identity_zeta() -> ProbTable<f64> {
        let mut b = ProbTable::builder(2);
        for _ in 0..4 {
            b.push_one_hot(0);
            b.push_one_hot(1);
        }
        b.finish()
    }

    #[test]
    fn deterministic_policy_collapses_belief() {
        let task = task();
        let mut p = ProbTable::builder(2);
        for _ in 0..2 {
            p.push_one_hot(0);
            p.push_one_hot(1);
        }
        let team = TeamModel::new(
            &task,
            IntentSpace::with_done(&["A"]),
            vec![member(p.finish(), identity_zeta(), ProbTable::uniform(2, 2))],
        )
        .unwrap();
        let mut b = init_belief(&team, 0).unwrap();
        assert_eq!(b.beliefs[0], vec![0.5, 0.5]);
        b.update(&task, &team, 0, 1, 1).unwrap();
        assert_eq!(b.beliefs[0], vec![0.0, 1.0]);
        assert_eq!(b.t, 1);
        assert_eq!(b.map_intent()[0], MapIntent { intent: 1, confidence: 1.0 });
    }

    #[test]
    fn uninformative_step_keeps_belief() {
        let task = task();
        let team = TeamModel::new(
            &task,
            IntentSpace::with_done(&["A"]),
            vec![member(ProbTable::uniform(4, 2), identity_zeta(), ProbTable::from_dense_rows(2, &[vec![0.3, 0.7], vec![0.3, 0.7]]))],
        )
        .unwrap();
        let b0 = init_belief(&team, 0).unwrap();
        let b1 = update_belief(&b0, 0, 0, 1, &task, &team).unwrap();
        for (x, y) in b0.beliefs[0].iter().zip(&b1.beliefs[0]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn map_ties_take_lowest() {
        let b = BeliefState { beliefs: vec![vec![0.5, 0.5], vec![0.2, 0.7, 0.1]], t: 0, resets: 0 };
        let m = b.map_intent();
        assert_eq!(m[0], MapIntent { intent: 0, confidence: 0.5 });
        assert_eq!(m[1].intent, 1);
    }

    #[test]
    fn impossible_action_resets_to_prior() {
        let task = task();
        let mut p = ProbTable::builder(2);
        for _ in 0..4 {
            p.push_one_hot(0);
        }
        let team = TeamModel::new(
            &task,
            IntentSpace::with_done(&["A"]),
            vec![member(p.finish(), identity_zeta(), ProbTable::uniform(2, 2))],
        )
        .unwrap();
        let mut b = init_belief(&team, 0).unwrap();
        b.update(&task, &team, 0, 1, 1).unwrap();
        assert_eq!(b.resets, 1);
        assert_eq!(b.beliefs[0], vec![0.5, 0.5]);
        let traj = Trajectory {
            steps: vec![
                TrajectoryStep { t: 0, s: 0, a: 0, x: vec![None] },
                TrajectoryStep { t: 1, s: 1, a: 1, x: vec![None] },
            ],
            final_state: Some(0),
            terminal_reward_sum: 0.0,
        };
        let post = forward_backward(&task, &team.members[0], 0, &traj, true).unwrap();
        assert_eq!(post.log_likelihood.zero_step, Some(1));
        assert_eq!(post.log_likelihood.value, f64::NEG_INFINITY);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let task = task();
        let team = TeamModel::new(
            &task,
            IntentSpace::with_done(&["A"]),
            vec![member(ProbTable::uniform(4, 2), identity_zeta(), ProbTable::uniform(2, 2))],
        )
        .unwrap();
        let mut b = BeliefState { beliefs: vec![vec![1.0, 0.0, 0.0]], t: 0, resets: 0 };
        assert!(matches!(b.update(&task, &team, 0, 0, 0), Err(Error::Dimension(_))));
    }
}
