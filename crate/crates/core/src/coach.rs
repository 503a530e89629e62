//! Task-time intervention engine.
//!
//! `g(x|s)` is the expected return from state `s` when the team starts from
//! joint intent `x` and then follows its behavior model. The coach compares
//! the MAP joint intent against the best joint intent and recommends a switch
//! when the gain beats the intervention cost by a margin.

use std::sync::Arc;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::DomainKind;
use crate::error::{Error, Result};
use crate::filter::BeliefState;
use crate::scalar::Scalar;
use crate::task::TaskModel;
use crate::team::{MemberRole, TeamModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReturnMode {
    /// Exact backward induction over (state, joint intent).
    Dp,
    MonteCarlo { rollouts: usize },
    /// DP when its estimated work stays under `work_cap`, Monte Carlo otherwise.
    Auto { rollouts: usize, work_cap: f64 },
}

impl Default for ReturnMode {
    fn default() -> Self {
        ReturnMode::Auto { rollouts: 200, work_cap: 2e9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoachConfig {
    pub cost: f64,
    pub delta: f64,
    /// Probability that a simulated member adopts a recommendation.
    pub acceptance: f64,
    #[serde(default)]
    pub mode: ReturnMode,
    /// Only message members whose inferred intent differs from the recommendation.
    #[serde(default)]
    pub only_deviating: bool,
    /// Seeds Monte Carlo estimates.
    #[serde(default)]
    pub seed: u64,
}

impl CoachConfig {
    pub fn movers() -> Self {
        Self { cost: 1.0, delta: 5.0, acceptance: 0.9, mode: ReturnMode::default(), only_deviating: false, seed: 0 }
    }

    pub fn rescue() -> Self {
        Self { cost: 0.0, delta: 0.1, ..Self::movers() }
    }

    pub fn preset(kind: DomainKind) -> Self {
        match kind {
            DomainKind::Movers => Self::movers(),
            DomainKind::Rescue => Self::rescue(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, v: f64| Err(Error::Config(format!("{f} = {v} is out of range")));
        if !(self.cost >= 0.0) {
            return bad("cost", self.cost);
        }
        if !(self.delta >= 0.0) {
            return bad("delta", self.delta);
        }
        if !(0.0..=1.0).contains(&self.acceptance) {
            return bad("acceptance", self.acceptance);
        }
        match self.mode {
            ReturnMode::MonteCarlo { rollouts } | ReturnMode::Auto { rollouts, .. } if rollouts < 2 => {
                Err(Error::Config("Monte Carlo needs at least 2 rollouts".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnEstimate {
    pub value: f64,
    /// Zero for exact estimates.
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionDecision {
    pub t: usize,
    pub s: usize,
    pub intervene: bool,
    pub x_hat: Vec<usize>,
    pub confidence: Vec<f64>,
    pub x_star: Vec<usize>,
    pub g_hat: f64,
    pub g_star: f64,
    pub benefit: f64,
    /// Standard error of the benefit (zero in DP mode).
    pub std_error: f64,
    /// Members the recommendation is addressed to.
    pub recipients: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub t: usize,
    pub decision: InterventionDecision,
    /// Per member: whether it now holds its component of `x_star`.
    pub adopted: Vec<bool>,
    pub cost: f64,
}

/// `V_k(s, x)` for every remaining-step count `k = 0..=horizon`.
pub struct JointValueTable<F> {
    n_joint_intents: usize,
    layers: Vec<Vec<F>>,
}

impl<F: Scalar> JointValueTable<F> {
    pub fn build(task: &TaskModel<F>, team: &TeamModel<F>) -> Result<Self> {
        team.validate(task)?;
        let ns = task.n_states();
        let nxj = team.n_joint_intents();
        let gamma = task.gamma();
        let mut layers = vec![vec![F::zero(); ns * nxj]];
        for k in 1..=task.horizon() {
            let prev = &layers[k - 1];
            let mut cur = vec![F::zero(); ns * nxj];
            cur.par_chunks_mut(nxj).enumerate().for_each_init(
                || Scratch::default(),
                |scratch, (s, out)| {
                    if let Some(r) = task.absorbing_reward(s) {
                        let v = absorbing_value(r, gamma, k);
                        out.iter_mut().for_each(|o| *o = v);
                        return;
                    }
                    for (xj, o) in out.iter_mut().enumerate() {
                        *o = backup(task, team, prev, s, xj, scratch);
                    }
                },
            );
            layers.push(cur);
        }
        Ok(Self { n_joint_intents: nxj, layers })
    }

    pub fn horizon(&self) -> usize {
        self.layers.len() - 1
    }

    /// Value with `remaining` steps to go; `remaining` saturates at the horizon.
    pub fn value(&self, s: usize, joint_intent: usize, remaining: usize) -> F {
        self.layers[remaining.min(self.horizon())][s * self.n_joint_intents + joint_intent]
    }

    /// Estimated inner-loop operations of a build.
    pub fn estimated_work(task: &TaskModel<F>, team: &TeamModel<F>) -> f64 {
        let mut per = task.transition_table().mean_nnz().max(1.0);
        for m in &team.members {
            per *= m.policy.mean_nnz().max(1.0) * m.intent_dynamics.mean_nnz().max(1.0);
        }
        task.horizon() as f64 * task.n_states() as f64 * team.n_joint_intents() as f64 * per
    }
}

fn absorbing_value<F: Scalar>(r: F, gamma: F, k: usize) -> F {
    if gamma == F::one() {
        r * F::lit(k as f64)
    } else {
        r * (F::one() - gamma.powi(k as i32)) / (F::one() - gamma)
    }
}

#[derive(Default)]
struct Scratch<F> {
    x: Vec<usize>,
    acts: Vec<(usize, F)>,
    acts_next: Vec<(usize, F)>,
    xs: Vec<(usize, F)>,
    xs_next: Vec<(usize, F)>,
}

/// One Bellman backup of `V(s, x)` against the previous layer.
fn backup<F: Scalar>(task: &TaskModel<F>, team: &TeamModel<F>, prev: &[F], s: usize, xj: usize, sc: &mut Scratch<F>) -> F {
    let nx = team.n_intents();
    let nxj = team.n_joint_intents();
    let joint = task.joint();
    let gamma = task.gamma();
    sc.x.clear();
    sc.x.extend(team.decode_intents(xj));
    sc.acts.clear();
    sc.acts.push((0, F::one()));
    for (j, m) in team.members.iter().enumerate() {
        sc.acts_next.clear();
        let row = m.policy_row(s, sc.x[j]);
        for &(a, p) in &sc.acts {
            for (aj, pj) in row.iter() {
                sc.acts_next.push((a + aj * joint.stride(j), p * pj));
            }
        }
        std::mem::swap(&mut sc.acts, &mut sc.acts_next);
    }
    let mut total = F::zero();
    for ai in 0..sc.acts.len() {
        let (a, p) = sc.acts[ai];
        let mut cont = F::zero();
        for (next, q) in task.transition(s, a).iter() {
            sc.xs.clear();
            sc.xs.push((0, F::one()));
            for (j, m) in team.members.iter().enumerate() {
                sc.xs_next.clear();
                let row = m.dynamics_row(next, a, sc.x[j]);
                for &(acc, w) in &sc.xs {
                    for (xn, wn) in row.iter() {
                        sc.xs_next.push((acc * nx + xn, w * wn));
                    }
                }
                std::mem::swap(&mut sc.xs, &mut sc.xs_next);
            }
            let base = next * nxj;
            let inner: F = sc.xs.iter().map(|&(x, w)| w * prev[base + x]).sum();
            cont += q * inner;
        }
        total += p * (task.reward(s, a) + gamma * cont);
    }
    total
}

/// How a coach computes `g`; cheap to clone and share between coaches of
/// the same task and team.
#[derive(Clone)]
pub enum Estimator<F> {
    Dp(Arc<JointValueTable<F>>),
    MonteCarlo(usize),
}

/// Intervention engine bound to one task and one team model of it.
pub struct Coach<'a, F> {
    task: &'a TaskModel<F>,
    team: &'a TeamModel<F>,
    config: CoachConfig,
    estimator: Estimator<F>,
}

impl<'a, F: Scalar> Coach<'a, F> {
    pub fn new(task: &'a TaskModel<F>, team: &'a TeamModel<F>, config: CoachConfig) -> Result<Self> {
        config.validate()?;
        team.validate(task)?;
        let estimator = match config.mode {
            ReturnMode::Dp => Estimator::Dp(Arc::new(JointValueTable::build(task, team)?)),
            ReturnMode::MonteCarlo { rollouts } => Estimator::MonteCarlo(rollouts),
            ReturnMode::Auto { rollouts, work_cap } => {
                let work = JointValueTable::estimated_work(task, team);
                if work <= work_cap {
                    Estimator::Dp(Arc::new(JointValueTable::build(task, team)?))
                } else {
                    debug!("estimated DP work {work:e} exceeds the cap; using Monte Carlo");
                    Estimator::MonteCarlo(rollouts)
                }
            }
        };
        Ok(Self { task, team, config, estimator })
    }

    /// Reuses an estimator built for the same task and team.
    pub fn from_estimator(
        task: &'a TaskModel<F>,
        team: &'a TeamModel<F>,
        config: CoachConfig,
        estimator: Estimator<F>,
    ) -> Result<Self> {
        config.validate()?;
        if let Estimator::Dp(t) = &estimator {
            if t.n_joint_intents != team.n_joint_intents() || t.horizon() != task.horizon() {
                return Err(Error::Dimension("value table does not match the team".into()));
            }
        }
        Ok(Self { task, team, config, estimator })
    }

    pub fn estimator(&self) -> Estimator<F> {
        self.estimator.clone()
    }

    /// Same models and return estimator under different thresholds or costs.
    pub fn with_config(&self, config: CoachConfig) -> Result<Self> {
        config.validate()?;
        if config.mode != self.config.mode {
            return Self::new(self.task, self.team, config);
        }
        Ok(Self { task: self.task, team: self.team, config, estimator: self.estimator.clone() })
    }

    pub fn config(&self) -> &CoachConfig {
        &self.config
    }

    pub fn team(&self) -> &TeamModel<F> {
        self.team
    }

    pub fn task(&self) -> &TaskModel<F> {
        self.task
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.estimator, Estimator::Dp(_))
    }

    fn check(&self, s: usize, t: usize) -> Result<()> {
        self.task.check_state(s)?;
        if t > self.task.horizon() {
            return Err(Error::Domain(format!("timestep {t} is past the horizon")));
        }
        Ok(())
    }

    /// `g(x|s)` at timestep `t`.
    pub fn estimate_return(&self, s: usize, t: usize, x: &[usize]) -> Result<ReturnEstimate> {
        self.check(s, t)?;
        if x.len() != self.team.n_members() || x.iter().any(|&v| v >= self.team.n_intents()) {
            return Err(Error::Dimension(format!("joint intent {x:?} does not fit the team")));
        }
        let xj = self.team.encode_intents(x);
        Ok(match &self.estimator {
            Estimator::Dp(table) => {
                ReturnEstimate { value: table.value(s, xj, self.task.horizon() - t).as_f64(), std_error: 0.0 }
            }
            Estimator::MonteCarlo(n) => {
                let samples = self.mc_samples(s, t, &[xj], *n);
                mean_se(&samples[0])
            }
        })
    }

    /// `g` for every joint intent, in lexicographic order.
    pub fn all_returns(&self, s: usize, t: usize) -> Result<Vec<ReturnEstimate>> {
        self.check(s, t)?;
        let nxj = self.team.n_joint_intents();
        Ok(match &self.estimator {
            Estimator::Dp(table) => (0..nxj)
                .map(|xj| ReturnEstimate { value: table.value(s, xj, self.task.horizon() - t).as_f64(), std_error: 0.0 })
                .collect(),
            Estimator::MonteCarlo(n) => {
                let all: Vec<usize> = (0..nxj).collect();
                self.mc_samples(s, t, &all, *n).iter().map(|v| mean_se(v)).collect()
            }
        })
    }

    /// `x* = argmax_x g(x|s)`, lowest joint index on ties.
    pub fn best_aligned_intent(&self, s: usize, t: usize) -> Result<(Vec<usize>, f64)> {
        let g = self.all_returns(s, t)?;
        let best = argmax(&g);
        Ok((self.team.decode_intents(best), g[best].value))
    }

    pub fn decide(&self, belief: &BeliefState<F>, s: usize, t: usize) -> Result<InterventionDecision> {
        let map = belief.map_intent();
        let x_hat: Vec<usize> = map.iter().map(|m| m.intent).collect();
        let confidence = map.iter().map(|m| m.confidence).collect();
        let mut d = self.decide_for(&x_hat, s, t)?;
        d.confidence = confidence;
        Ok(d)
    }

    /// Decision for a given inferred joint intent.
    pub fn decide_for(&self, x_hat: &[usize], s: usize, t: usize) -> Result<InterventionDecision> {
        self.check(s, t)?;
        let nxj = self.team.n_joint_intents();
        let hat = self.team.encode_intents(x_hat);
        let (g, paired_se) = match &self.estimator {
            Estimator::Dp(_) => (self.all_returns(s, t)?, None),
            Estimator::MonteCarlo(n) => {
                let all: Vec<usize> = (0..nxj).collect();
                let samples = self.mc_samples(s, t, &all, *n);
                let g: Vec<ReturnEstimate> = samples.iter().map(|v| mean_se(v)).collect();
                let star = argmax(&g);
                let diff: Vec<f64> = samples[star].iter().zip(&samples[hat]).map(|(a, b)| a - b).collect();
                (g, Some(mean_se(&diff).std_error))
            }
        };
        let star = argmax(&g);
        let x_star = self.team.decode_intents(star);
        let benefit = g[star].value - g[hat].value;
        let intervene = benefit > self.config.cost + self.config.delta;
        let recipients = (0..self.team.n_members())
            .filter(|&j| !self.config.only_deviating || x_hat[j] != x_star[j])
            .collect();
        Ok(InterventionDecision {
            t,
            s,
            intervene,
            x_hat: x_hat.to_vec(),
            confidence: vec![1.0; x_hat.len()],
            x_star,
            g_hat: g[hat].value,
            g_star: g[star].value,
            benefit,
            std_error: paired_se.unwrap_or(0.0),
            recipients,
        })
    }

    /// Common-random-number rollouts: sample `i` uses the same uniforms for
    /// every joint intent.
    fn mc_samples(&self, s: usize, t: usize, joint_intents: &[usize], n: usize) -> Vec<Vec<f64>> {
        let remaining = self.task.horizon() - t;
        let nm = self.team.n_members();
        let call_seed = self.config.seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((t as u64) << 40);
        let per_sample: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(call_seed);
                rng.set_stream(1000 + i as u64);
                let draws: Vec<f64> = (0..remaining * (2 * nm + 1)).map(|_| rng.gen()).collect();
                joint_intents.iter().map(|&xj| self.mc_rollout(s, remaining, xj, &draws)).collect()
            })
            .collect();
        (0..joint_intents.len()).map(|k| per_sample.iter().map(|v| v[k]).collect()).collect()
    }

    fn mc_rollout(&self, s0: usize, remaining: usize, xj: usize, draws: &[f64]) -> f64 {
        let task = self.task;
        let joint = task.joint();
        let nm = self.team.n_members();
        let gamma = task.gamma().as_f64();
        let mut x = self.team.decode_intents(xj);
        let mut s = s0;
        let mut total = 0.0;
        let mut disc = 1.0;
        for k in 0..remaining {
            if let Some(r) = task.absorbing_reward(s) {
                total += disc * absorbing_value(r, task.gamma(), remaining - k).as_f64();
                break;
            }
            let u = &draws[k * (2 * nm + 1)..(k + 1) * (2 * nm + 1)];
            let mut a = 0;
            for (j, m) in self.team.members.iter().enumerate() {
                let aj = m.policy_row(s, x[j]).sample(u[j]).unwrap_or(0);
                a += aj * joint.stride(j);
            }
            total += disc * task.reward(s, a).as_f64();
            let next = task.transition(s, a).sample(u[2 * nm]).unwrap_or(s);
            for (j, m) in self.team.members.iter().enumerate() {
                x[j] = m.dynamics_row(next, a, x[j]).sample(u[nm + j]).unwrap_or(x[j]);
            }
            s = next;
            disc *= gamma;
        }
        total
    }

    /// Acceptance probability for member `j`: scripted members always comply.
    pub fn acceptance_of(&self, j: usize) -> f64 {
        let m = &self.team.members[j];
        if m.role == MemberRole::Scripted {
            1.0
        } else {
            m.acceptance.unwrap_or(self.config.acceptance)
        }
    }

    /// Delivers a recommendation to simulated members. Each recipient adopts
    /// its component of `x*` with its acceptance probability; the cost is
    /// charged regardless.
    pub fn apply_acceptance<R: Rng + ?Sized>(
        &self,
        decision: &InterventionDecision,
        intents: &mut [usize],
        rng: &mut R,
    ) -> InterventionRecord {
        // One draw per member keeps the stream aligned whoever is addressed.
        let draws: Vec<f64> = (0..intents.len()).map(|_| rng.gen()).collect();
        for &j in &decision.recipients {
            if draws[j] < self.acceptance_of(j) {
                intents[j] = decision.x_star[j];
            }
        }
        let adopted = intents.iter().zip(&decision.x_star).map(|(a, b)| a == b).collect();
        InterventionRecord { t: decision.t, decision: decision.clone(), adopted, cost: self.config.cost }
    }

    /// Belief after a recommendation went out: scripted recipients are known
    /// to comply, others comply with their acceptance probability.
    pub fn post_intervention_belief(&self, belief: &mut BeliefState<F>, decision: &InterventionDecision) {
        for &j in &decision.recipients {
            let p = F::lit(self.acceptance_of(j));
            let b = &mut belief.beliefs[j];
            for (x, v) in b.iter_mut().enumerate() {
                let hit = if x == decision.x_star[j] { F::one() } else { F::zero() };
                *v = p * hit + (F::one() - p) * *v;
            }
        }
    }
}

fn argmax(g: &[ReturnEstimate]) -> usize {
    let mut best = 0;
    for (i, e) in g.iter().enumerate() {
        if e.value > g[best].value {
            best = i;
        }
    }
    best
}

fn mean_se(v: &[f64]) -> ReturnEstimate {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return ReturnEstimate { value: mean, std_error: 0.0 };
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    ReturnEstimate { value: mean, std_error: (var / n).sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::IntentSpace;
    use crate::table::ProbTable;
    use crate::task::simple_members;
    use crate::team::AgentBehaviorModel;

    /// Two states, `1` absorbing with reward 1. From 0, action 1 reaches 1.
    /// Intent 0 picks action 1, intent 1 picks action 0. Intents persist.
    fn setup() -> (TaskModel<f64>, TeamModel<f64>) {
        let mut t = ProbTable::builder(2);
        t.push_one_hot(0);
        t.push_one_hot(1);
        t.push_one_hot(1);
        t.push_one_hot(1);
        let task = TaskModel::new("toy", 2, simple_members(&[2]), t.finish(), None, vec![0.0, 0.0, 1.0, 1.0], 1.0, 10)
            .unwrap();
        let mut pol = ProbTable::builder(2);
        for _s in 0..2 {
            pol.push_one_hot(1);
            pol.push_one_hot(0);
        }
        let mut dyn_ = ProbTable::builder(2);
        for _ in 0..2 * 2 {
            dyn_.push_one_hot(0);
            dyn_.push_one_hot(1);
        }
        let m = AgentBehaviorModel {
            name: "a".into(),
            role: MemberRole::Synthetic,
            acceptance: None,
            n_states: 2,
            n_actions: 2,
            n_joint_actions: 2,
            n_intents: 2,
            policy: pol.finish(),
            intent_dynamics: dyn_.finish(),
            initial_intent: ProbTable::uniform(2, 2),
        };
        let team = TeamModel::new(&task, IntentSpace { labels: vec!["go".into(), "stay".into()] }, vec![m]).unwrap();
        (task, team)
    }

    #[test]
    fn dp_values() {
        let (task, team) = setup();
        let coach = Coach::new(&task, &team, CoachConfig { mode: ReturnMode::Dp, ..CoachConfig::rescue() }).unwrap();
        assert_eq!(coach.estimate_return(0, 0, &[0]).unwrap().value, 9.0);
        assert_eq!(coach.estimate_return(0, 0, &[1]).unwrap().value, 0.0);
        assert_eq!(coach.estimate_return(1, 4, &[1]).unwrap().value, 6.0);
        assert_eq!(coach.estimate_return(0, 10, &[0]).unwrap().value, 0.0);
        let (x, g) = coach.best_aligned_intent(0, 0).unwrap();
        assert_eq!((x, g), (vec![0], 9.0));
        assert!(coach.estimate_return(5, 0, &[0]).is_err());
    }

    #[test]
    fn decision_threshold() {
        let (task, team) = setup();
        let mk = |delta| {
            Coach::new(&task, &team, CoachConfig { cost: 1.0, delta, mode: ReturnMode::Dp, ..CoachConfig::movers() })
                .unwrap()
        };
        // benefit at t=0 is 9
        assert!(mk(7.9).decide_for(&[1], 0, 0).unwrap().intervene);
        assert!(!mk(8.0).decide_for(&[1], 0, 0).unwrap().intervene);
        let d = mk(0.0).decide_for(&[0], 0, 0).unwrap();
        assert_eq!(d.benefit, 0.0);
        assert!(!d.intervene);
    }

    #[test]
    fn monte_carlo_matches_on_deterministic_team() {
        let (task, team) = setup();
        let cfg = CoachConfig { mode: ReturnMode::MonteCarlo { rollouts: 20 }, ..CoachConfig::rescue() };
        let coach = Coach::new(&task, &team, cfg).unwrap();
        let e = coach.estimate_return(0, 3, &[0]).unwrap();
        assert_eq!((e.value, e.std_error), (6.0, 0.0));
    }

    #[test]
    fn acceptance_boundaries() {
        let (task, team) = setup();
        let d = Coach::new(&task, &team, CoachConfig { mode: ReturnMode::Dp, ..CoachConfig::movers() })
            .unwrap()
            .decide_for(&[1], 0, 0)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (p, expect) in [(1.0, 0), (0.0, 1)] {
            let cfg = CoachConfig { acceptance: p, mode: ReturnMode::Dp, ..CoachConfig::movers() };
            let coach = Coach::new(&task, &team, cfg).unwrap();
            let mut x = vec![1];
            let rec = coach.apply_acceptance(&d, &mut x, &mut rng);
            assert_eq!(x, vec![expect]);
            assert_eq!(rec.cost, 1.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(CoachConfig { acceptance: 1.5, ..CoachConfig::movers() }.validate().is_err());
        assert!(CoachConfig { delta: -1.0, ..CoachConfig::movers() }.validate().is_err());
        assert!(CoachConfig::rescue().validate().is_ok());
    }
}
