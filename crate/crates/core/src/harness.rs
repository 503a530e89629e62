//! Seeded experiments with simulated teams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::btil::{apply_label_fraction, Dataset, LabelGranularity};
use crate::coach::{Coach, CoachConfig, InterventionDecision, InterventionRecord};
use crate::domains::Domain;
use crate::error::{Error, Result};
use crate::filter::init_belief;
use crate::task::Trajectory;
use crate::team::{rollout_team, StepNoise, TeamModel, TeamStepper};

pub const STREAM_AGENTS: u64 = 1;
pub const STREAM_ACCEPTANCE: u64 = 2;
const STREAM_PERMUTATION: u64 = 3;

/// Seed of trial `i` in an experiment seeded with `seed`.
pub fn trial_seed(seed: u64, i: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(i as u64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Coached,
    Uncoached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub condition: Condition,
    pub reward: f64,
    pub cost: f64,
    pub score: f64,
    pub interventions: usize,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub result: TrialResult,
    pub trajectory: Trajectory,
    pub interventions: Vec<InterventionRecord>,
    /// Every decision point, when requested.
    pub decisions: Vec<InterventionDecision>,
}

/// One episode of the simulated `team` from the domain start state, coached
/// when `coach` is given. Agent noise comes from stream 1 of `seed`, so the
/// coached and uncoached runs of a seed share their random numbers.
pub fn run_episode(
    domain: &dyn Domain,
    team: &TeamModel<f64>,
    coach: Option<&Coach<'_, f64>>,
    seed: u64,
    log_decisions: bool,
) -> Result<Episode> {
    let task = domain.task();
    let s0 = domain.start_state();
    let n = team.n_members();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_AGENTS);
    let mut acc_rng = ChaCha8Rng::seed_from_u64(seed);
    acc_rng.set_stream(STREAM_ACCEPTANCE);
    let init: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let mut stepper = TeamStepper::sample_initial(task, team, s0, &init)?;
    let mut belief = coach.map(|c| init_belief(c.team(), s0)).transpose()?;
    let mut interventions = Vec::new();
    let mut decisions = Vec::new();
    let mut cost = 0.0;
    while !stepper.finished() {
        let noise = StepNoise::draw(&mut rng, n);
        let rec = stepper.step(&noise)?;
        let (Some(c), Some(b)) = (coach, belief.as_mut()) else { continue };
        b.update(c.task(), c.team(), rec.s, rec.a, rec.next)?;
        if stepper.finished() {
            continue;
        }
        let d = c.decide(b, rec.next, stepper.t())?;
        if d.intervene {
            let mut x = stepper.intents().to_vec();
            let record = c.apply_acceptance(&d, &mut x, &mut acc_rng);
            stepper.set_intents(&x);
            c.post_intervention_belief(b, &d);
            cost += record.cost;
            interventions.push(record);
        }
        if log_decisions {
            decisions.push(d);
        }
    }
    let steps = stepper.t();
    let trajectory = stepper.into_trajectory();
    let reward = trajectory.terminal_reward_sum;
    let result = TrialResult {
        trial: 0,
        seed,
        condition: if coach.is_some() { Condition::Coached } else { Condition::Uncoached },
        reward,
        cost,
        score: reward - cost,
        interventions: interventions.len(),
        steps,
    };
    Ok(Episode { result, trajectory, interventions, decisions })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self { mean: 0.0, sd: 0.0, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub mean_difference: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// One-sided p-value for a positive mean difference.
    pub p_greater: f64,
    pub resamples: usize,
}

/// Paired sign-flip permutation test on `differences`.
pub fn paired_permutation_test(differences: &[f64], resamples: usize, seed: u64) -> PermutationTest {
    let n = differences.len().max(1) as f64;
    let observed = differences.iter().sum::<f64>() / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_PERMUTATION);
    let eps = 1e-12 * (1.0 + observed.abs());
    let (mut two, mut one) = (0usize, 0usize);
    for _ in 0..resamples {
        let m = differences.iter().map(|&d| if rng.gen::<bool>() { d } else { -d }).sum::<f64>() / n;
        if m.abs() >= observed.abs() - eps {
            two += 1;
        }
        if m >= observed - eps {
            one += 1;
        }
    }
    let r = resamples as f64 + 1.0;
    PermutationTest {
        mean_difference: observed,
        p_value: (two as f64 + 1.0) / r,
        p_greater: (one as f64 + 1.0) / r,
        resamples,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub trials: usize,
    pub uncoached: Stats,
    pub coached: Stats,
    pub interventions: Stats,
    pub test: PermutationTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub uncoached: Vec<TrialResult>,
    pub coached: Vec<TrialResult>,
    pub summary: ExperimentSummary,
}

impl ExperimentReport {
    /// Recomputes the summary from the raw trial records.
    pub fn summarize(uncoached: Vec<TrialResult>, coached: Vec<TrialResult>, resamples: usize, seed: u64) -> Self {
        let u: Vec<f64> = uncoached.iter().map(|r| r.score).collect();
        let c: Vec<f64> = coached.iter().map(|r| r.score).collect();
        let diffs: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a - b).collect();
        let ints: Vec<f64> = coached.iter().map(|r| r.interventions as f64).collect();
        let summary = ExperimentSummary {
            trials: uncoached.len(),
            uncoached: Stats::of(&u),
            coached: Stats::of(&c),
            interventions: Stats::of(&ints),
            test: paired_permutation_test(&diffs, resamples, seed),
        };
        Self { uncoached, coached, summary }
    }

    /// Plot data: `condition,score` per trial.
    pub fn score_csv(&self) -> String {
        let mut out = String::from("condition,score\n");
        for r in self.uncoached.iter().chain(&self.coached) {
            let c = if r.condition == Condition::Coached { "coached" } else { "uncoached" };
            out.push_str(&format!("{c},{}\n", r.score));
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let s = &self.summary;
        format!(
            "condition   mean score    sd      n\n\
             uncoached   {:>10.3}  {:>6.3}  {}\n\
             coached     {:>10.3}  {:>6.3}  {}\n\
             interventions per coached episode: {:.3} (sd {:.3})\n\
             paired permutation test: mean difference {:.3}, p = {:.4} (two-sided), {:.4} (greater)\n",
            s.uncoached.mean,
            s.uncoached.sd,
            s.uncoached.n,
            s.coached.mean,
            s.coached.sd,
            s.coached.n,
            s.interventions.mean,
            s.interventions.sd,
            s.test.mean_difference,
            s.test.p_value,
            s.test.p_greater,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
}

fn default_resamples() -> usize {
    10_000
}

/// Paired coached and uncoached trials. `team` simulates the members; the
/// coach reasons with its own model of them.
pub fn run_controlled_experiment(
    domain: &dyn Domain,
    team: &TeamModel<f64>,
    coach: &Coach<'_, f64>,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    if spec.trials < 2 {
        return Err(Error::Config("an experiment needs at least 2 trials".into()));
    }
    let pairs = (0..spec.trials)
        .into_par_iter()
        .map(|i| {
            let seed = trial_seed(spec.seed, i);
            let mut u = run_episode(domain, team, None, seed, false)?.result;
            let mut c = run_episode(domain, team, Some(coach), seed, false)?.result;
            u.trial = i;
            c.trial = i;
            Ok((u, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let (u, c) = pairs.into_iter().unzip();
    Ok(ExperimentReport::summarize(u, c, spec.resamples, spec.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub delta: f64,
    pub score: Stats,
    pub interventions: Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_delta: f64,
    pub curve: Vec<GridPoint>,
}

/// Mean coached score for each threshold; the first maximum wins.
pub fn grid_search_delta(
    domain: &dyn Domain,
    team: &TeamModel<f64>,
    coach: &Coach<'_, f64>,
    deltas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<GridSearchResult> {
    if deltas.is_empty() {
        return Err(Error::Config("no threshold candidates".into()));
    }
    let mut curve = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let c = coach.with_config(CoachConfig { delta, ..coach.config().clone() })?;
        let results = (0..trials)
            .into_par_iter()
            .map(|i| run_episode(domain, team, Some(&c), trial_seed(seed, i), false).map(|e| e.result))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
        let ints: Vec<f64> = results.iter().map(|r| r.interventions as f64).collect();
        curve.push(GridPoint { delta, score: Stats::of(&scores), interventions: Stats::of(&ints) });
    }
    let mut best = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.score.mean > curve[best].score.mean {
            best = i;
        }
    }
    Ok(GridSearchResult { best_delta: curve[best].delta, curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentSuccess {
    pub intent: usize,
    pub label: String,
    pub success: f64,
    pub wrong: f64,
    pub nowhere: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelQualityReport {
    pub rollouts: usize,
    pub window: usize,
    pub intents: Vec<IntentSuccess>,
}

/// Clamps every member's intent to `intent`, starts from a state where the
/// sub-task is open, and classifies the first completed sub-task within
/// `window` steps.
pub fn evaluate_intent_success(
    domain: &dyn Domain,
    team: &TeamModel<f64>,
    intent: usize,
    rollouts: usize,
    window: usize,
    seed: u64,
) -> Result<IntentSuccess> {
    let intents = domain.intents();
    if !intents.task_intents().contains(&intent) {
        return Err(Error::Domain(format!("intent {intent} names no sub-task")));
    }
    if rollouts == 0 {
        return Err(Error::Config("rollouts must be positive".into()));
    }
    let task = domain.task();
    let s0 = domain.intent_eval_start(intent);
    let n = team.n_members();
    let outcomes = (0..rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, i));
            rng.set_stream(STREAM_AGENTS);
            let mut stepper = TeamStepper::new(task, team, s0, vec![intent; n])?.clamp_intents();
            for _ in 0..window {
                if stepper.finished() {
                    break;
                }
                let rec = stepper.step(&StepNoise::draw(&mut rng, n))?;
                let done = domain.completed_subtasks(rec.s, rec.a, rec.next);
                if done.contains(&intent) {
                    return Ok(0u8);
                }
                if !done.is_empty() {
                    return Ok(1);
                }
            }
            Ok(2)
        })
        .collect::<Result<Vec<u8>>>()?;
    let pct = |k: u8| 100.0 * outcomes.iter().filter(|&&o| o == k).count() as f64 / rollouts as f64;
    Ok(IntentSuccess {
        intent,
        label: intents.label(intent).to_string(),
        success: pct(0),
        wrong: pct(1),
        nowhere: pct(2),
    })
}

pub fn evaluate_model_quality(
    domain: &dyn Domain,
    team: &TeamModel<f64>,
    rollouts: usize,
    window: usize,
    seed: u64,
) -> Result<ModelQualityReport> {
    let intents = domain
        .intents()
        .task_intents()
        .map(|x| evaluate_intent_success(domain, team, x, rollouts, window, seed))
        .collect::<Result<_>>()?;
    Ok(ModelQualityReport { rollouts, window, intents })
}

const STREAM_LABELS: u64 = 4;

/// `episodes` ground-truth rollouts from the domain start, with intent labels
/// kept on a random `label_fraction` of them.
pub fn generate_dataset(
    domain: &dyn Domain,
    team: &TeamModel<f64>,
    member: usize,
    episodes: usize,
    label_fraction: f64,
    granularity: LabelGranularity,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&label_fraction) {
        return Err(Error::Config(format!("label fraction {label_fraction} is out of range")));
    }
    if member >= team.n_members() {
        return Err(Error::Config(format!("member {member} does not exist")));
    }
    let mut trajectories = (0..episodes)
        .into_par_iter()
        .map(|i| rollout_team(domain.task(), team, domain.start_state(), trial_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_LABELS);
    apply_label_fraction(&mut trajectories, label_fraction, granularity, &mut rng);
    let mut ds = Dataset { member, trajectories, label_fraction, granularity };
    ds.label_fraction = ds.actual_label_fraction();
    Ok(ds)
}
