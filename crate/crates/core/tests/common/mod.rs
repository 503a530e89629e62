//! Brute-force reference computations shared by the integration suites.
#![allow(dead_code)]

use std::collections::HashMap;

use teamcoach::task::TaskModel;
use teamcoach::team::{AgentBehaviorModel, TeamModel};

/// Every sequence in `{0..n}^len`, lexicographic.
pub fn sequences(n: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out
}

fn pi(m: &AgentBehaviorModel<f64>, s: usize, x: usize, a: usize) -> f64 {
    m.policy.prob(s * m.n_intents + x, a)
}

fn zeta(m: &AgentBehaviorModel<f64>, next: usize, a: usize, x: usize, xn: usize) -> f64 {
    m.intent_dynamics.prob((next * m.n_joint_actions + a) * m.n_intents + x, xn)
}

/// Unnormalized weight of an intent path `xs[0..=t]` for member `j` along
/// `states` and joint `actions` (`states.len() == actions.len() + 1`).
fn path_weight(
    task: &TaskModel<f64>,
    m: &AgentBehaviorModel<f64>,
    j: usize,
    states: &[usize],
    actions: &[usize],
    xs: &[usize],
    with_last_action: bool,
) -> f64 {
    let mut w = m.initial_intent.prob(states[0], xs[0]);
    for k in 0..xs.len() {
        if k < xs.len() - 1 || with_last_action {
            if k < actions.len() {
                w *= pi(m, states[k], xs[k], task.joint().component(actions[k], j));
            }
        }
        if k + 1 < xs.len() {
            w *= zeta(m, states[k + 1], actions[k], xs[k], xs[k + 1]);
        }
    }
    w
}

/// Filtered beliefs `P(x_t | s_0..s_t, a_0..a_{t-1})` for `t = 0..=T`.
pub fn filter_posteriors(
    task: &TaskModel<f64>,
    m: &AgentBehaviorModel<f64>,
    j: usize,
    states: &[usize],
    actions: &[usize],
) -> Vec<Vec<f64>> {
    let nx = m.n_intents;
    (0..states.len())
        .map(|t| {
            let mut b = vec![0.0; nx];
            for xs in sequences(nx, t + 1) {
                b[xs[t]] += path_weight(task, m, j, &states[..=t], &actions[..t], &xs, false);
            }
            let z: f64 = b.iter().sum();
            b.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// `ln P(a_0..a_{T-1} | s_0..s_{T-1})` with optional clamped intents.
pub fn log_likelihood(
    task: &TaskModel<f64>,
    m: &AgentBehaviorModel<f64>,
    j: usize,
    states: &[usize],
    actions: &[usize],
    labels: &[Option<usize>],
) -> f64 {
    let t = actions.len();
    let mut total = 0.0;
    for xs in sequences(m.n_intents, t) {
        if xs.iter().zip(labels).any(|(x, l)| l.is_some_and(|l| l != *x)) {
            continue;
        }
        total += path_weight(task, m, j, &states[..t], actions, &xs, true);
    }
    total.ln()
}

/// Smoothed posteriors `P(x_k | whole trajectory)`.
pub fn smoothed(
    task: &TaskModel<f64>,
    m: &AgentBehaviorModel<f64>,
    j: usize,
    states: &[usize],
    actions: &[usize],
    labels: &[Option<usize>],
) -> Vec<Vec<f64>> {
    let t = actions.len();
    let nx = m.n_intents;
    let mut out = vec![vec![0.0; nx]; t];
    let mut z = 0.0;
    for xs in sequences(nx, t) {
        if xs.iter().zip(labels).any(|(x, l)| l.is_some_and(|l| l != *x)) {
            continue;
        }
        let w = path_weight(task, m, j, &states[..t], actions, &xs, true);
        z += w;
        for (k, &x) in xs.iter().enumerate() {
            out[k][x] += w;
        }
    }
    out.iter().map(|r| r.iter().map(|v| v / z).collect()).collect()
}

/// Expected return of the team from `(s, x)` with `k` steps left, by dense
/// recursion over every joint action, successor and joint next intent.
pub struct ReturnOracle<'a> {
    pub task: &'a TaskModel<f64>,
    pub team: &'a TeamModel<f64>,
    memo: HashMap<(usize, Vec<usize>, usize), f64>,
}

impl<'a> ReturnOracle<'a> {
    pub fn new(task: &'a TaskModel<f64>, team: &'a TeamModel<f64>) -> Self {
        Self { task, team, memo: HashMap::new() }
    }

    pub fn g(&mut self, s: usize, x: &[usize], k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        if let Some(&v) = self.memo.get(&(s, x.to_vec(), k)) {
            return v;
        }
        let task = self.task;
        let team = self.team;
        let n = team.n_members();
        let nx = team.n_intents();
        let gamma = task.gamma();
        let mut total = 0.0;
        for a in 0..task.n_joint_actions() {
            let acts = task.joint().decode(a);
            let pa: f64 = (0..n).map(|j| pi(&team.members[j], s, x[j], acts[j])).product();
            if pa == 0.0 {
                continue;
            }
            let mut cont = 0.0;
            for next in 0..task.n_states() {
                let q = task.transition_table().prob(s * task.n_joint_actions() + a, next);
                if q == 0.0 {
                    continue;
                }
                for xn in sequences(nx, n) {
                    let w: f64 = (0..n).map(|j| zeta(&team.members[j], next, a, x[j], xn[j])).product();
                    if w > 0.0 {
                        cont += q * w * self.g(next, &xn, k - 1);
                    }
                }
            }
            total += pa * (task.reward(s, a) + gamma * cont);
        }
        self.memo.insert((s, x.to_vec(), k), total);
        total
    }
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
