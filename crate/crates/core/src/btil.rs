//! Semi-supervised learning of intent-conditioned behavior.
//!
//! Expectation-maximization over the latent intent chain of one member:
//! forward-backward gives expected counts (labeled steps clamped), and each
//! row is set to its Dirichlet MAP estimate.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domains::IntentSpace;
use crate::error::{Error, Result};
use crate::filter::{forward_backward, LogLikelihood};
use crate::scalar::Scalar;
use crate::table::{ProbTable, ProbTableBuilder};
use crate::task::{TaskModel, Trajectory};
use crate::team::{AgentBehaviorModel, MemberRole};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelGranularity {
    #[default]
    Trajectory,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Member whose behavior this dataset trains.
    pub member: usize,
    pub trajectories: Vec<Trajectory>,
    pub label_fraction: f64,
    #[serde(default)]
    pub granularity: LabelGranularity,
}

impl Dataset {
    /// Fraction of trajectories (or steps) carrying a label for the member.
    pub fn actual_label_fraction(&self) -> f64 {
        let has = |x: &Vec<Option<usize>>| x.get(self.member).copied().flatten().is_some();
        match self.granularity {
            LabelGranularity::Trajectory => {
                if self.trajectories.is_empty() {
                    return 0.0;
                }
                let n = self.trajectories.iter().filter(|t| t.steps.iter().any(|s| has(&s.x))).count();
                n as f64 / self.trajectories.len() as f64
            }
            LabelGranularity::Step => {
                let total: usize = self.trajectories.iter().map(|t| t.steps.len()).sum();
                if total == 0 {
                    return 0.0;
                }
                let n: usize = self.trajectories.iter().map(|t| t.steps.iter().filter(|s| has(&s.x)).count()).sum();
                n as f64 / total as f64
            }
        }
    }

    pub fn validate<F: Scalar>(&self, task: &TaskModel<F>, n_intents: usize) -> Result<()> {
        if self.member >= task.n_members() {
            return Err(Error::Dataset(format!("member {} does not exist", self.member)));
        }
        let sizes = vec![n_intents; task.n_members()];
        for (i, t) in self.trajectories.iter().enumerate() {
            t.check(task.horizon(), &sizes).map_err(|e| Error::Dataset(format!("trajectory {i}: {e}")))?;
            for st in &t.steps {
                if st.s >= task.n_states() || st.a >= task.n_joint_actions() {
                    return Err(Error::Dataset(format!("trajectory {i} step {}: index out of range", st.t)));
                }
            }
            if let Some(f) = t.final_state {
                if f >= task.n_states() {
                    return Err(Error::Dataset(format!("trajectory {i}: final state {f} out of range")));
                }
            }
        }
        let units = match self.granularity {
            LabelGranularity::Trajectory => self.trajectories.len(),
            LabelGranularity::Step => self.trajectories.iter().map(|t| t.steps.len()).sum(),
        };
        let slack = if units == 0 { 1.0 } else { 0.5 / units as f64 } + 1e-9;
        if !(0.0..=1.0).contains(&self.label_fraction)
            || (self.actual_label_fraction() - self.label_fraction).abs() > slack
        {
            return Err(Error::Dataset(format!(
                "label_fraction {} disagrees with the annotations ({:.4})",
                self.label_fraction,
                self.actual_label_fraction()
            )));
        }
        Ok(())
    }
}

/// Keeps intent labels on a random `fraction` of trajectories (or steps) and
/// strips them from the rest.
pub fn apply_label_fraction<R: Rng + ?Sized>(
    trajectories: &mut [Trajectory],
    fraction: f64,
    granularity: LabelGranularity,
    rng: &mut R,
) {
    match granularity {
        LabelGranularity::Trajectory => {
            let keep = (fraction * trajectories.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..trajectories.len()).collect();
            order.shuffle(rng);
            for &i in &order[keep.min(order.len())..] {
                for st in &mut trajectories[i].steps {
                    st.x.iter_mut().for_each(|x| *x = None);
                }
            }
        }
        LabelGranularity::Step => {
            let mut slots: Vec<(usize, usize)> = trajectories
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.steps.len()).map(move |k| (i, k)))
                .collect();
            let keep = (fraction * slots.len() as f64).round() as usize;
            slots.shuffle(rng);
            for &(i, k) in &slots[keep.min(slots.len())..] {
                trajectories[i].steps[k].x.iter_mut().for_each(|x| *x = None);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BtilConfig {
    /// Symmetric Dirichlet parameter; must be at least 1.
    pub prior_alpha: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub require_labels: bool,
    /// Seeds the random start used when no step carries a label.
    pub seed: u64,
}

impl Default for BtilConfig {
    fn default() -> Self {
        Self { prior_alpha: 1.1, tol: 1e-4, max_iterations: 200, require_labels: false, seed: 0 }
    }
}

/// Dirichlet counts over the rows that received any evidence. Rows absent
/// from the maps sit at the prior.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirichletModel {
    pub prior_alpha: f64,
    pub policy_counts: BTreeMap<usize, Vec<f64>>,
    pub dynamics_counts: BTreeMap<usize, Vec<f64>>,
    pub initial_counts: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Copy)]
struct Shape {
    n_states: usize,
    n_actions: usize,
    n_joint_actions: usize,
    n_intents: usize,
}

fn add(map: &mut BTreeMap<usize, Vec<f64>>, row: usize, width: usize, col: usize, w: f64) {
    map.entry(row).or_insert_with(|| vec![0.0; width])[col] += w;
}

fn map_row(counts: &[f64], alpha: f64) -> Vec<f64> {
    let mut row: Vec<f64> = counts.iter().map(|c| c + alpha - 1.0).collect();
    let z: f64 = row.iter().sum();
    if z > 0.0 {
        row.iter_mut().for_each(|v| *v /= z);
    } else {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
    }
    row
}

fn table<F: Scalar>(
    counts: &BTreeMap<usize, Vec<f64>>,
    n_rows: usize,
    width: usize,
    row: impl Fn(&[f64]) -> Vec<f64>,
) -> ProbTable<F> {
    let mut b = ProbTableBuilder::with_capacity(width, n_rows);
    let uniform = b.intern((0..width).map(|c| (c, F::lit(1.0 / width as f64))));
    let mut next = 0;
    for (&r, c) in counts {
        b.push_slot_repeat(uniform, r - next);
        b.push_dense(&row(c).into_iter().map(F::lit).collect::<Vec<_>>());
        next = r + 1;
    }
    b.push_slot_repeat(uniform, n_rows - next);
    b.finish()
}

impl DirichletModel {
    fn build<F: Scalar>(
        &self,
        shape: Shape,
        name: &str,
        row: impl Fn(&[f64]) -> Vec<f64> + Copy,
    ) -> AgentBehaviorModel<F> {
        let Shape { n_states, n_actions, n_joint_actions, n_intents } = shape;
        AgentBehaviorModel {
            name: name.to_string(),
            role: MemberRole::Learned,
            acceptance: None,
            n_states,
            n_actions,
            n_joint_actions,
            n_intents,
            policy: table(&self.policy_counts, n_states * n_intents, n_actions, row),
            intent_dynamics: table(&self.dynamics_counts, n_states * n_joint_actions * n_intents, n_intents, row),
            initial_intent: table(&self.initial_counts, n_states, n_intents, row),
        }
    }

    fn map_model<F: Scalar>(&self, shape: Shape, name: &str) -> AgentBehaviorModel<F> {
        let a = self.prior_alpha;
        self.build(shape, name, move |c| map_row(c, a))
    }

    /// Posterior-mean rows, `(alpha + counts) / sum`.
    fn mean_model<F: Scalar>(&self, shape: Shape, name: &str) -> AgentBehaviorModel<F> {
        let a = self.prior_alpha;
        self.build(shape, name, move |c| map_row(c, a + 1.0))
    }

    /// `sum (alpha - 1) ln(K theta_k)` over counted rows: the log prior up to
    /// a constant that uniform rows do not change.
    fn log_prior<F: Scalar>(&self, model: &AgentBehaviorModel<F>) -> f64 {
        let w = self.prior_alpha - 1.0;
        if w == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut sum_table = |map: &BTreeMap<usize, Vec<f64>>, t: &ProbTable<F>| {
            for &r in map.keys() {
                let k = t.n_cols() as f64;
                let row = t.row(r);
                for c in 0..t.n_cols() {
                    total += w * (k * row.get(c).as_f64()).ln();
                }
            }
        };
        sum_table(&self.policy_counts, &model.policy);
        sum_table(&self.dynamics_counts, &model.intent_dynamics);
        sum_table(&self.initial_counts, &model.initial_intent);
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Log posterior (up to a constant) of the model entering each iteration;
    /// non-decreasing.
    pub elbo: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_trajectories: usize,
    pub label_fraction: f64,
    /// Largest drop between consecutive ELBO values (0 when monotone).
    pub max_elbo_drop: f64,
}

pub fn log_likelihood<F: Scalar>(
    task: &TaskModel<F>,
    model: &AgentBehaviorModel<F>,
    member: usize,
    traj: &Trajectory,
) -> Result<LogLikelihood> {
    if member >= task.n_members() || model.n_states != task.n_states() {
        return Err(Error::Dimension("model does not match the task".into()));
    }
    Ok(forward_backward(task, model, member, traj, true)?.log_likelihood)
}

/// Fits one member's behavior model. Returns the MAP model together with the
/// per-iteration objective.
pub fn fit<F: Scalar>(
    dataset: &Dataset,
    task: &TaskModel<F>,
    intents: &IntentSpace,
    cfg: &BtilConfig,
) -> Result<(AgentBehaviorModel<F>, TrainingReport)> {
    fit_counts(dataset, task, intents, cfg).map(|(m, r, _)| (m, r))
}

/// As [`fit`], also returning the final Dirichlet counts and the
/// posterior-mean model they imply.
pub fn fit_counts<F: Scalar>(
    dataset: &Dataset,
    task: &TaskModel<F>,
    intents: &IntentSpace,
    cfg: &BtilConfig,
) -> Result<(AgentBehaviorModel<F>, TrainingReport, DirichletModel)> {
    if intents.is_empty() {
        return Err(Error::Config("empty intent space".into()));
    }
    if !(cfg.prior_alpha >= 1.0) || !cfg.prior_alpha.is_finite() {
        return Err(Error::Config(format!("prior_alpha {} must be at least 1", cfg.prior_alpha)));
    }
    dataset.validate(task, intents.len())?;
    let j = dataset.member;
    let nx = intents.len();
    let shape = Shape {
        n_states: task.n_states(),
        n_actions: task.n_actions(j),
        n_joint_actions: task.n_joint_actions(),
        n_intents: nx,
    };
    let name = task.members()[j].name.clone();
    let joint = task.joint();
    let label = |t: &Trajectory, k: usize| t.steps[k].x.get(j).copied().flatten();

    // Counts from labels alone seed the first model.
    let mut counts = DirichletModel { prior_alpha: cfg.prior_alpha, ..Default::default() };
    let mut any_label = false;
    for t in &dataset.trajectories {
        for k in 0..t.steps.len() {
            let Some(x) = label(t, k) else { continue };
            any_label = true;
            let st = &t.steps[k];
            add(&mut counts.policy_counts, st.s * nx + x, shape.n_actions, joint.component(st.a, j), 1.0);
            if k == 0 {
                add(&mut counts.initial_counts, st.s, nx, x, 1.0);
            }
            if k + 1 < t.steps.len() {
                if let Some(xn) = label(t, k + 1) {
                    let row = (t.steps[k + 1].s * shape.n_joint_actions + st.a) * nx + x;
                    add(&mut counts.dynamics_counts, row, nx, xn, 1.0);
                }
            }
        }
    }
    let has_unlabeled = dataset.trajectories.iter().any(|t| (0..t.steps.len()).any(|k| label(t, k).is_none()));
    if !any_label && cfg.require_labels && !dataset.trajectories.is_empty() {
        return Err(Error::Dataset("no intent labels present and the configuration requires them".into()));
    }
    if !any_label && has_unlabeled {
        // Break the symmetry between intents with a seeded random start.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for t in &dataset.trajectories {
            for st in &t.steps {
                for x in 0..nx {
                    let e = counts.policy_counts.entry(st.s * nx + x).or_insert_with(|| {
                        (0..shape.n_actions).map(|_| 0.0).collect()
                    });
                    if e.iter().all(|v| *v == 0.0) {
                        e.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
                    }
                }
            }
        }
    }
    let mut model: AgentBehaviorModel<F> = counts.map_model(shape, &name);
    if dataset.trajectories.is_empty() || !has_unlabeled {
        // Nothing latent: the labeled M-step is already the answer.
        let ll = total_loglik(task, &model, j, &dataset.trajectories)?;
        let report = TrainingReport {
            elbo: vec![ll + counts.log_prior(&model)],
            iterations: 0,
            converged: true,
            n_trajectories: dataset.trajectories.len(),
            label_fraction: dataset.actual_label_fraction(),
            max_elbo_drop: 0.0,
        };
        return Ok((model, report, counts));
    }

    let mut elbo: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut max_drop: f64 = 0.0;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        let mut next = DirichletModel { prior_alpha: cfg.prior_alpha, ..Default::default() };
        let mut ll = 0.0;
        for (i, t) in dataset.trajectories.iter().enumerate() {
            if t.steps.is_empty() {
                continue;
            }
            let post = forward_backward(task, &model, j, t, true)?;
            if let Some(k) = post.log_likelihood.zero_step {
                return Err(Error::Dataset(format!(
                    "trajectory {i} has zero likelihood at step {k} under the current model"
                )));
            }
            ll += post.log_likelihood.value;
            for (k, g) in post.gamma.iter().enumerate() {
                let st = &t.steps[k];
                let aj = joint.component(st.a, j);
                for (x, &w) in g.iter().enumerate() {
                    let w = w.as_f64();
                    if w > 0.0 {
                        add(&mut next.policy_counts, st.s * nx + x, shape.n_actions, aj, w);
                        if k == 0 {
                            add(&mut next.initial_counts, st.s, nx, x, w);
                        }
                    }
                }
            }
            post.for_each_transition(&model, t, |k, x, xn, w| {
                let row = (t.steps[k + 1].s * shape.n_joint_actions + t.steps[k].a) * nx + x;
                add(&mut next.dynamics_counts, row, nx, xn, w.as_f64());
            });
        }
        let objective = ll + counts.log_prior(&model);
        if let Some(&prev) = elbo.last() {
            let drop = prev - objective;
            if drop > 1e-8 {
                warn!("objective decreased by {drop:e} at iteration {it}");
            }
            max_drop = max_drop.max(drop);
            elbo.push(objective);
            if objective - prev < cfg.tol {
                converged = true;
                break;
            }
        } else {
            elbo.push(objective);
        }
        debug!("iteration {it}: objective {objective}");
        counts = next;
        model = counts.map_model(shape, &name);
    }
    let report = TrainingReport {
        elbo,
        iterations,
        converged,
        n_trajectories: dataset.trajectories.len(),
        label_fraction: dataset.actual_label_fraction(),
        max_elbo_drop: max_drop.max(0.0),
    };
    Ok((model, report, counts))
}

/// Posterior-mean model from fitted counts.
pub fn posterior_mean<F: Scalar>(task: &TaskModel<F>, member: usize, n_intents: usize, counts: &DirichletModel) -> AgentBehaviorModel<F> {
    let shape = Shape {
        n_states: task.n_states(),
        n_actions: task.n_actions(member),
        n_joint_actions: task.n_joint_actions(),
        n_intents,
    };
    counts.mean_model(shape, &task.members()[member].name)
}

fn total_loglik<F: Scalar>(
    task: &TaskModel<F>,
    model: &AgentBehaviorModel<F>,
    member: usize,
    trajectories: &[Trajectory],
) -> Result<f64> {
    let mut ll = 0.0;
    for t in trajectories {
        if !t.steps.is_empty() {
            ll += forward_backward(task, model, member, t, true)?.log_likelihood.value;
        }
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{simple_members, TrajectoryStep};

    fn task() -> TaskModel<f64> {
        let mut t = ProbTable::builder(2);
        for _ in 0..2 * 3 {
            t.push_row([(0, 0.5), (1, 0.5)]);
        }
        TaskModel::new("t", 2, simple_members(&[3]), t.finish(), None, vec![0.0; 6], 1.0, 10).unwrap()
    }

    fn traj(steps: &[(usize, usize, Option<usize>)]) -> Trajectory {
        Trajectory {
            steps: steps
                .iter()
                .enumerate()
                .map(|(t, &(s, a, x))| TrajectoryStep { t, s, a, x: vec![x] })
                .collect(),
            final_state: Some(0),
            terminal_reward_sum: 0.0,
        }
    }

    #[test]
    fn fully_labeled_flat_prior_counts_frequencies() {
        let task = task();
        let ds = Dataset {
            member: 0,
            trajectories: vec![
                traj(&[(0, 0, Some(0)), (0, 1, Some(0)), (1, 2, Some(1))]),
                traj(&[(0, 0, Some(0)), (0, 0, Some(0))]),
            ],
            label_fraction: 1.0,
            granularity: LabelGranularity::Trajectory,
        };
        let cfg = BtilConfig { prior_alpha: 1.0, ..Default::default() };
        let (m, report) = fit(&ds, &task, &IntentSpace::with_done(&["A"]), &cfg).unwrap();
        assert_eq!(m.policy_row(0, 0).to_dense(3), vec![0.75, 0.25, 0.0]);
        assert_eq!(m.policy_row(1, 1).to_dense(3), vec![0.0, 0.0, 1.0]);
        // unvisited rows at the prior mean
        assert_eq!(m.policy_row(1, 0).to_dense(3), vec![1.0 / 3.0; 3]);
        assert!(report.converged);
    }

    #[test]
    fn empty_dataset_gives_uniform_rows() {
        let task = task();
        let ds = Dataset { member: 0, trajectories: vec![], label_fraction: 0.0, granularity: LabelGranularity::Trajectory };
        let (m, _) = fit(&ds, &task, &IntentSpace::with_done(&["A"]), &BtilConfig::default()).unwrap();
        for r in 0..m.policy.n_rows() {
            assert_eq!(m.policy.row(r).to_dense(3), vec![1.0 / 3.0; 3]);
        }
        for r in 0..m.intent_dynamics.n_rows() {
            assert_eq!(m.intent_dynamics.row(r).to_dense(2), vec![0.5; 2]);
        }
    }

    #[test]
    fn errors() {
        let task = task();
        let ds = Dataset {
            member: 0,
            trajectories: vec![traj(&[(0, 0, None)])],
            label_fraction: 0.0,
            granularity: LabelGranularity::Trajectory,
        };
        let strict = BtilConfig { require_labels: true, ..Default::default() };
        assert!(matches!(fit(&ds, &task, &IntentSpace::with_done(&["A"]), &strict), Err(Error::Dataset(_))));
        let empty = IntentSpace { labels: vec![] };
        assert!(matches!(fit(&ds, &task, &empty, &BtilConfig::default()), Err(Error::Config(_))));
        let low = BtilConfig { prior_alpha: 0.5, ..Default::default() };
        assert!(fit(&ds, &task, &IntentSpace::with_done(&["A"]), &low).is_err());
        let lying = Dataset { label_fraction: 1.0, ..ds };
        assert!(matches!(fit(&lying, &task, &IntentSpace::with_done(&["A"]), &BtilConfig::default()), Err(Error::Dataset(_))));
    }

    #[test]
    fn label_fraction_is_exact() {
        let mut trajs: Vec<Trajectory> = (0..10).map(|_| traj(&[(0, 0, Some(0)), (1, 1, Some(1))])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        apply_label_fraction(&mut trajs, 0.3, LabelGranularity::Trajectory, &mut rng);
        let ds = Dataset { member: 0, trajectories: trajs, label_fraction: 0.3, granularity: LabelGranularity::Trajectory };
        assert!((ds.actual_label_fraction() - 0.3).abs() < 1e-12);
    }
}
