//! Single-member sub-task planning.

use crate::error::{Error, Result};
use crate::table::ProbTable;
use crate::task::{simple_members, value_iteration_with, q_values, TaskModel, ValueIterationConfig};

const PLAN_GAMMA: f64 = 0.95;

/// Solves "reach `target` and issue `service` there" for one member moving
/// alone, and converts the optimal Q-values into expected steps to completion
/// (the service step included). Actions that cannot lead to the target cost
/// infinity; positions with no finite action get the idle row instead.
///
/// Errors if any position listed in `must_reach` cannot reach the target.
pub(crate) fn subtask_step_costs(
    n_positions: usize,
    n_actions: usize,
    next: impl Fn(usize, usize) -> usize,
    target: usize,
    service: usize,
    idle: usize,
    must_reach: &[usize],
) -> Result<Vec<f64>> {
    let served = n_positions;
    let n_states = n_positions + 1;
    let mut t = ProbTable::builder(n_states);
    let mut reward = Vec::with_capacity(n_states * n_actions);
    for p in 0..n_positions {
        for a in 0..n_actions {
            if p == target && a == service {
                t.push_one_hot(served);
                reward.push(1.0);
            } else {
                t.push_one_hot(next(p, a));
                reward.push(0.0);
            }
        }
    }
    for _ in 0..n_actions {
        t.push_one_hot(served);
        reward.push(0.0);
    }
    let model = TaskModel::new(
        "subtask",
        n_states,
        simple_members(&[n_actions]),
        t.finish(),
        None,
        reward,
        PLAN_GAMMA,
        1,
    )?;
    let sol = value_iteration_with(&model, &ValueIterationConfig { tol: 1e-12, max_iterations: 10_000 })?;
    if let Some(&p) = must_reach.iter().find(|&&p| sol.values[p] <= 0.0) {
        return Err(Error::Domain(format!("target position {target} is unreachable from position {p}")));
    }
    let q = q_values(&model, &sol.values);
    let ln_g = PLAN_GAMMA.ln();
    let mut costs: Vec<f64> = q[..n_positions * n_actions]
        .iter()
        .map(|&qv| {
            if qv <= 1e-300 {
                f64::INFINITY
            } else {
                let steps = 1.0 + qv.ln() / ln_g;
                (steps * 1e6).round() / 1e6
            }
        })
        .collect();
    for row in costs.chunks_mut(n_actions) {
        if row.iter().all(|c| c.is_infinite()) {
            row.copy_from_slice(&idle_costs(n_actions, idle));
        }
    }
    Ok(costs)
}

/// Cost row for a member with nothing left to do: idling is best.
pub(crate) fn idle_costs(n_actions: usize, idle_action: usize) -> Vec<f64> {
    (0..n_actions).map(|a| if a == idle_action { 1.0 } else { 2.0 }).collect()
}
