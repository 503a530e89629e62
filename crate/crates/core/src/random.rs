//! Random tabular tasks and teams, for tests and benchmarks.

use rand::Rng;

use crate::domains::IntentSpace;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::table::{ProbTable, ProbTableBuilder};
use crate::task::{simple_members, TaskModel};
use crate::team::{AgentBehaviorModel, MemberRole, TeamModel};

/// A random distribution over `n` outcomes with at most `support` nonzero
/// entries.
pub fn random_row<R: Rng + ?Sized>(rng: &mut R, n: usize, support: usize) -> Vec<(usize, f64)> {
    let k = support.clamp(1, n);
    let cols = rand::seq::index::sample(rng, n, k).into_vec();
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let z: f64 = w.iter().sum();
    let mut row: Vec<(usize, f64)> = cols.into_iter().zip(w.into_iter().map(|v| v / z)).collect();
    row.sort_by_key(|e| e.0);
    row
}

fn random_table<F: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, support: usize) -> ProbTable<F> {
    let mut b = ProbTableBuilder::with_capacity(cols, rows);
    for _ in 0..rows {
        b.push_row(random_row(rng, cols, support).into_iter().map(|(c, p)| (c, F::lit(p))));
    }
    b.finish()
}

/// Random task with non-negative rewards and no absorbing states.
pub fn random_task<F: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    action_counts: &[usize],
    horizon: usize,
    gamma: f64,
) -> Result<TaskModel<F>> {
    let members = simple_members(action_counts);
    let na: usize = action_counts.iter().product();
    let transition = random_table(rng, n_states * na, n_states, 3);
    let reward = (0..n_states * na).map(|_| F::lit(rng.gen_range(0.0..1.0))).collect();
    TaskModel::new("random", n_states, members, transition, None, reward, F::lit(gamma), horizon)
}

/// Random behavior model for `member`; rows have at most `support` entries.
pub fn random_agent<F: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    task: &TaskModel<F>,
    member: usize,
    n_intents: usize,
    support: usize,
) -> AgentBehaviorModel<F> {
    let (ns, na, nja) = (task.n_states(), task.n_actions(member), task.n_joint_actions());
    AgentBehaviorModel {
        name: format!("agent{member}"),
        role: MemberRole::Synthetic,
        acceptance: None,
        n_states: ns,
        n_actions: na,
        n_joint_actions: nja,
        n_intents,
        policy: random_table(rng, ns * n_intents, na, support),
        intent_dynamics: random_table(rng, ns * nja * n_intents, n_intents, support),
        initial_intent: random_table(rng, ns, n_intents, n_intents),
    }
}

pub fn random_team<F: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    task: &TaskModel<F>,
    n_intents: usize,
    support: usize,
) -> Result<TeamModel<F>> {
    let labels: Vec<String> = (0..n_intents).map(|x| format!("x{x}")).collect();
    let members = (0..task.n_members()).map(|j| random_agent(rng, task, j, n_intents, support)).collect();
    TeamModel::new(task, IntentSpace { labels }, members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_models_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let task: TaskModel<f64> = random_task(&mut rng, 4, &[2, 3], 5, 0.9).unwrap();
            assert!(crate::task::validate_model(&task).is_empty());
            let team = random_team(&mut rng, &task, 3, 2).unwrap();
            assert!(team.validate(&task).is_ok());
        }
    }
}
