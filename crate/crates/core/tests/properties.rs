//! Randomized invariants of the model, filter, learner, coach and harness.

use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teamcoach::btil::{apply_label_fraction, fit, fit_counts, BtilConfig, Dataset, LabelGranularity};
use teamcoach::coach::{Coach, CoachConfig, ReturnMode};
use teamcoach::domains::movers::MoversState;
use teamcoach::domains::{load_domain, Domain, DomainKind};
use teamcoach::filter::{forward_backward, init_belief, BeliefState};
use teamcoach::harness::run_episode;
use teamcoach::random::{random_task, random_team};
use teamcoach::table::ProbTable;
use teamcoach::task::{
    evaluate_policy, greedy_member_policies, validate_model, value_iteration, JointActionSpace, TaskModel, Trajectory,
};
use teamcoach::team::{make_synthetic_team, rollout_team, SyntheticAgentConfig, TeamModel};

fn rescue() -> &'static (Arc<dyn Domain>, TeamModel<f64>) {
    static CELL: OnceLock<(Arc<dyn Domain>, TeamModel<f64>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let d = load_domain(DomainKind::Rescue, None).unwrap();
        let team = make_synthetic_team(&*d, &SyntheticAgentConfig::default()).unwrap();
        (d, team)
    })
}

fn rescue_coach(delta: f64) -> Coach<'static, f64> {
    static BASE: OnceLock<Coach<'static, f64>> = OnceLock::new();
    let (d, team) = rescue();
    let base = BASE.get_or_init(|| Coach::new(d.task(), team, CoachConfig { mode: ReturnMode::Dp, ..CoachConfig::rescue() }).unwrap());
    base.with_config(CoachConfig { delta, ..base.config().clone() }).unwrap()
}

fn small(seed: u64, ns: usize, nx: usize, horizon: usize) -> (TaskModel<f64>, TeamModel<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = random_task(&mut rng, ns, &[2, 3], horizon, 0.9).unwrap();
    let team = random_team(&mut rng, &task, nx, 3).unwrap();
    (task, team)
}

fn member_rows_normalized(task: &TaskModel<f64>, team: &TeamModel<f64>) -> Result<(), TestCaseError> {
    for (j, m) in team.members.iter().enumerate() {
        prop_assert!(m.problems(task, j).is_empty(), "{:?}", m.problems(task, j));
        for t in [&m.policy, &m.intent_dynamics, &m.initial_intent] {
            prop_assert!(t.row_violations(1e-9).is_empty());
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn joint_action_codec_is_bijective(sizes in prop::collection::vec(1usize..5, 1..4)) {
        let space = JointActionSpace::new(sizes.clone());
        for a in 0..space.len() {
            let parts = space.decode(a);
            prop_assert_eq!(space.encode(&parts), a);
            for (j, &p) in parts.iter().enumerate() {
                prop_assert!(p < sizes[j]);
                prop_assert_eq!(space.component(a, j), p);
            }
        }
    }

    #[test]
    fn evaluate_policy_is_monotone_in_reward(seed in any::<u64>(), bump in 0.0f64..2.0, horizon in 1usize..12) {
        let (task, _) = small(seed, 5, 2, horizon);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let policy: Vec<ProbTable<f64>> = (0..2)
            .map(|j| {
                let n = task.n_actions(j);
                ProbTable::from_dense_rows(n, &(0..5).map(|_| {
                    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let z: f64 = w.iter().sum();
                    w.iter().map(|v| v / z).collect()
                }).collect::<Vec<_>>())
            })
            .collect();
        let reward: Vec<f64> = task.rewards().iter().map(|r| r + if rng.gen_bool(0.5) { bump * rng.gen::<f64>() } else { 0.0 }).collect();
        let bumped = TaskModel::new("bumped", 5, task.members().to_vec(), task.transition_table().clone(), None, reward, 0.9, horizon).unwrap();
        let start = [0.2; 5];
        let lo = evaluate_policy(&task, &policy, &start, horizon).unwrap();
        let hi = evaluate_policy(&bumped, &policy, &start, horizon).unwrap();
        prop_assert!(hi >= lo - 1e-12);
    }

    #[test]
    fn greedy_policy_attains_the_value(seed in any::<u64>()) {
        let (task, _) = small(seed, 6, 2, 10);
        let sol = value_iteration(&task, 1e-9).unwrap();
        let pols = greedy_member_policies(&task, &sol.policy);
        for s in 0..6 {
            let mut start = [0.0; 6];
            start[s] = 1.0;
            let v = evaluate_policy(&task, &pols, &start, 400).unwrap();
            prop_assert!((v - sol.values[s]).abs() <= 1e-8, "state {}: {} vs {}", s, v, sol.values[s]);
        }
    }

    #[test]
    fn constructed_models_are_normalized(seed in any::<u64>(), nx in 1usize..5) {
        let (task, team) = small(seed, 5, nx, 6);
        prop_assert!(validate_model(&task).is_empty());
        member_rows_normalized(&task, &team)?;
        let f32_team = team.cast::<f32>();
        for m in &f32_team.members {
            prop_assert!(m.policy.row_violations(1e-5).is_empty());
        }
    }

    #[test]
    fn belief_stays_normalized(seed in any::<u64>(), nx in 1usize..5) {
        let (task, team) = small(seed, 5, nx, 8);
        let traj = rollout_team(&task, &team, 0, seed).unwrap();
        let mut b = init_belief(&team, 0).unwrap();
        let mut s = 0;
        for st in &traj.steps {
            let next = traj.state_at(st.t + 1).unwrap();
            b.update(&task, &team, s, st.a, next).unwrap();
            s = next;
            for row in &b.beliefs {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        prop_assert_eq!(b.t, traj.len());
    }

    #[test]
    fn learner_objective_never_drops(seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let (task, team) = small(seed, 4, 2, 6);
        let mut trajs: Vec<Trajectory> = (0..12).map(|i| rollout_team(&task, &team, 0, seed.wrapping_add(i)).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        apply_label_fraction(&mut trajs, frac, LabelGranularity::Step, &mut rng);
        let ds = Dataset { member: 0, trajectories: trajs, label_fraction: frac, granularity: LabelGranularity::Step };
        let intents = team.intents.clone();
        let (model, counts_report, counts) = fit_counts::<f64>(&Dataset { label_fraction: ds.actual_label_fraction(), ..ds.clone() }, &task, &intents, &BtilConfig { seed, ..BtilConfig::default() }).unwrap();
        for w in counts_report.elbo.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        prop_assert!(counts_report.max_elbo_drop <= 1e-8);
        // learned rows are distributions; rows without evidence sit at the prior mean
        prop_assert!(model.problems(&task, 0).is_empty());
        let nx = intents.len();
        for s in 0..4 {
            for x in 0..nx {
                if !counts.policy_counts.contains_key(&(s * nx + x)) {
                    let row = model.policy_row(s, x).to_dense(2);
                    prop_assert!(row.iter().all(|&p| (p - 0.5).abs() < 1e-12));
                }
            }
        }
        // labeled steps are one-hot after clamping
        for traj in &ds.trajectories {
            let post = forward_backward(&task, &model, 0, traj, true).unwrap();
            for (st, g) in traj.steps.iter().zip(&post.gamma) {
                if let Some(x) = st.x[0] {
                    prop_assert_eq!(g[x], 1.0);
                }
            }
        }
    }

    #[test]
    fn ground_truth_rollouts_have_finite_likelihood(seed in any::<u64>()) {
        let (task, team) = small(seed, 5, 3, 8);
        let traj = rollout_team(&task, &team, 0, seed).unwrap();
        for j in 0..2 {
            let ll = teamcoach::btil::log_likelihood(&task, &team.members[j], j, &traj).unwrap();
            prop_assert!(ll.value.is_finite());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn decisions_follow_the_threshold_rule(seed in any::<u64>(), cost in 0.0f64..1.0, delta in 0.0f64..0.5) {
        let (task, team) = small(seed, 4, 3, 6);
        let cfg = CoachConfig { cost, delta, mode: ReturnMode::Dp, ..CoachConfig::rescue() };
        let coach = Coach::new(&task, &team, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let s = rng.gen_range(0..4);
            let t = rng.gen_range(0..6);
            let x_hat = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
            let d = coach.decide_for(&x_hat, s, t).unwrap();
            prop_assert!(d.benefit >= 0.0);
            prop_assert_eq!(d.intervene, d.benefit > cost + delta);
            prop_assert_eq!(d.benefit, d.g_star - d.g_hat);
            let star = BeliefState::one_hot(3, &d.x_star, t);
            let again = coach.decide(&star, s, t).unwrap();
            prop_assert!(!again.intervene);
            prop_assert_eq!(again.benefit, 0.0);
        }
    }

    #[test]
    fn monte_carlo_benefit_is_not_significantly_negative(seed in any::<u64>()) {
        let (task, team) = small(seed, 4, 2, 6);
        let cfg = CoachConfig { mode: ReturnMode::MonteCarlo { rollouts: 200 }, seed, ..CoachConfig::rescue() };
        let coach = Coach::new(&task, &team, cfg).unwrap();
        for s in 0..4 {
            let d = coach.decide_for(&[1, 0], s, 2).unwrap();
            prop_assert!(d.benefit >= -3.0 * d.std_error - 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn raising_delta_never_adds_interventions(seed in any::<u64>(), d1 in 0.0f64..2.0, extra in 0.0f64..2.0) {
        let (d, team) = rescue();
        let traj = rollout_team(d.task(), team, d.start_state(), seed).unwrap();
        let count = |delta: f64| -> usize {
            let coach = rescue_coach(delta);
            let mut b = init_belief(team, d.start_state()).unwrap();
            let mut n = 0;
            for st in &traj.steps {
                let next = traj.state_at(st.t + 1).unwrap();
                b.update(d.task(), team, st.s, st.a, next).unwrap();
                if st.t + 1 < d.task().horizon() && coach.decide(&b, next, st.t + 1).unwrap().intervene {
                    n += 1;
                }
            }
            n
        };
        prop_assert!(count(d1 + extra) <= count(d1));
    }

    #[test]
    fn episodes_are_deterministic_and_scored_exactly(seed in any::<u64>()) {
        let (d, team) = rescue();
        let coach = rescue_coach(0.1);
        let a = run_episode(&**d, team, Some(&coach), seed, true).unwrap();
        let b = run_episode(&**d, team, Some(&coach), seed, true).unwrap();
        prop_assert_eq!(&a.result, &b.result);
        prop_assert_eq!(&a.trajectory, &b.trajectory);
        prop_assert_eq!(a.result.score, a.result.reward - a.result.cost);
        let total: f64 = a.interventions.iter().map(|r| r.cost).sum();
        prop_assert_eq!(a.result.cost, total);
        let (lo, hi) = d.reward_bounds();
        prop_assert!(a.result.reward >= lo && a.result.reward <= hi);
        let u = run_episode(&**d, team, None, seed, false).unwrap();
        prop_assert_eq!(u.result.cost, 0.0);
        prop_assert_eq!(u.result.interventions, 0);
    }

    #[test]
    fn domain_progress_never_reverts(seed in any::<u64>(), movers in any::<bool>()) {
        let d = load_domain(if movers { DomainKind::Movers } else { DomainKind::Rescue }, None).unwrap();
        let team = make_synthetic_team(&*d, &SyntheticAgentConfig::default()).unwrap();
        let traj = rollout_team(d.task(), &team, d.start_state(), seed).unwrap();
        let (lo, hi) = d.reward_bounds();
        prop_assert!(traj.terminal_reward_sum >= lo && traj.terminal_reward_sum <= hi);
        prop_assert!(traj.len() <= d.task().horizon());
        let mut last = 0;
        for t in 0..=traj.len() {
            let s = traj.state_at(t).unwrap();
            let p = d.progress(s);
            prop_assert!(p >= last);
            last = p;
        }
        if movers {
            let m = teamcoach::domains::MoversDomain::new(Default::default()).unwrap();
            for t in 0..=traj.len() {
                if let MoversState::Active { pos, .. } = m.state(traj.state_at(t).unwrap()) {
                    if m.state(traj.state_at(t).unwrap()).carried().is_some() {
                        prop_assert_eq!(pos[0], pos[1]);
                    }
                }
            }
        }
    }
}

#[test]
fn filter_beats_the_uniform_baseline() {
    let (d, team) = rescue();
    let nx = team.n_intents() as f64;
    let (mut sum, mut n) = (0.0, 0usize);
    for seed in 0..100 {
        let traj = rollout_team(d.task(), team, d.start_state(), seed).unwrap();
        let mut b = init_belief(team, d.start_state()).unwrap();
        for st in &traj.steps {
            sum += b.beliefs[0][st.x[0].unwrap()];
            n += 1;
            b.update(d.task(), team, st.s, st.a, traj.state_at(st.t + 1).unwrap()).unwrap();
        }
    }
    let mean = sum / n as f64;
    assert!(mean >= 1.0 / nx, "true-intent mass {mean} vs uniform {}", 1.0 / nx);
}

/// More labels on the same planted trajectories should not make the learned
/// policy worse on average.
#[test]
fn label_fraction_does_not_hurt_policy_recovery() {
    let (mut tv_low, mut tv_full) = (0.0, 0.0);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let task: TaskModel<f64> = random_task(&mut rng, 6, &[4, 4], 20, 1.0).unwrap();
        let team = random_team(&mut rng, &task, 3, 2).unwrap();
        let nx = team.n_intents();
        let trajs: Vec<Trajectory> =
            (0..60).map(|i| rollout_team(&task, &team, i % 6, seed * 1000 + i as u64).unwrap()).collect();
        let mut visits = vec![0usize; 6 * nx];
        for traj in &trajs {
            for st in &traj.steps {
                visits[st.s * nx + st.x[0].unwrap()] += 1;
            }
        }
        let full = Dataset { member: 0, trajectories: trajs, label_fraction: 1.0, granularity: LabelGranularity::Trajectory };
        let mut partial = full.clone();
        apply_label_fraction(&mut partial.trajectories, 0.3, LabelGranularity::Trajectory, &mut rng);
        partial.label_fraction = partial.actual_label_fraction();
        let tv = |ds: &Dataset| {
            let (m, _) = fit::<f64>(ds, &task, &team.intents, &BtilConfig { seed, ..BtilConfig::default() }).unwrap();
            let (mut total, mut weight) = (0.0, 0.0);
            for (r, &v) in visits.iter().enumerate() {
                let (s, x) = (r / nx, r % nx);
                let a = m.policy_row(s, x).to_dense(4);
                let b = team.members[0].policy_row(s, x).to_dense(4);
                total += v as f64 * 0.5 * a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>();
                weight += v as f64;
            }
            total / weight
        };
        tv_low += tv(&partial) / 10.0;
        tv_full += tv(&full) / 10.0;
    }
    assert!(tv_full <= tv_low, "full labels {tv_full} vs 30% {tv_low}");
}
