use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TeamModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::task::{TaskModel, Trajectory, TrajectoryStep};

/// Uniform draws consumed by one environment step. Drawing a fixed number
/// per step keeps paired runs on common random numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub action: Vec<f64>,
    pub intent: Vec<f64>,
    pub transition: f64,
}

impl StepNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n_members: usize) -> Self {
        let action = (0..n_members).map(|_| rng.gen::<f64>()).collect();
        let intent = (0..n_members).map(|_| rng.gen::<f64>()).collect();
        Self { action, intent, transition: rng.gen() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub next: usize,
    pub x: Vec<usize>,
    pub next_x: Vec<usize>,
    pub reward: f64,
}

/// Advances a team through a task one step at a time, sampling actions from
/// each member's policy and next intents from its intent dynamics.
pub struct TeamStepper<'a, F> {
    task: &'a TaskModel<F>,
    team: &'a TeamModel<F>,
    s: usize,
    x: Vec<usize>,
    t: usize,
    reward: f64,
    steps: Vec<TrajectoryStep>,
    clamped: bool,
}

impl<'a, F: Scalar> TeamStepper<'a, F> {
    pub fn new(task: &'a TaskModel<F>, team: &'a TeamModel<F>, s0: usize, x0: Vec<usize>) -> Result<Self> {
        task.check_state(s0)?;
        if x0.len() != team.n_members() || x0.iter().any(|&x| x >= team.n_intents()) {
            return Err(Error::Dimension(format!("initial intents {x0:?} do not fit the team")));
        }
        Ok(Self { task, team, s: s0, x: x0, t: 0, reward: 0.0, steps: Vec::new(), clamped: false })
    }

    /// Draws each member's first intent from its initial-intent row.
    pub fn sample_initial(task: &'a TaskModel<F>, team: &'a TeamModel<F>, s0: usize, u: &[f64]) -> Result<Self> {
        task.check_state(s0)?;
        let x0 = team
            .members
            .iter()
            .zip(u)
            .map(|(m, &u)| m.initial_row(s0).sample(u).ok_or(Error::ZeroRow { state: s0, intent: 0 }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(task, team, s0, x0)
    }

    /// Freezes intents: members keep their current intent forever.
    pub fn clamp_intents(mut self) -> Self {
        self.clamped = true;
        self
    }

    pub fn state(&self) -> usize {
        self.s
    }

    pub fn intents(&self) -> &[usize] {
        &self.x
    }

    pub fn set_intents(&mut self, x: &[usize]) {
        self.x.copy_from_slice(x);
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Reward collected so far.
    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn finished(&self) -> bool {
        self.t >= self.task.horizon() || self.task.is_absorbing(self.s)
    }

    pub fn step(&mut self, noise: &StepNoise) -> Result<StepRecord> {
        let (s, t) = (self.s, self.t);
        let joint = self.task.joint();
        let mut a = 0;
        for (j, m) in self.team.members.iter().enumerate() {
            let aj = m
                .policy_row(s, self.x[j])
                .sample(noise.action[j])
                .ok_or(Error::ZeroRow { state: s, intent: self.x[j] })?;
            a += aj * joint.stride(j);
        }
        let next = self
            .task
            .transition(s, a)
            .sample(noise.transition)
            .ok_or(Error::ZeroRow { state: s, intent: 0 })?;
        let reward = self.task.reward(s, a).as_f64();
        let next_x = if self.clamped {
            self.x.clone()
        } else {
            self.team
                .members
                .iter()
                .enumerate()
                .map(|(j, m)| {
                    m.dynamics_row(next, a, self.x[j])
                        .sample(noise.intent[j])
                        .ok_or(Error::ZeroRow { state: next, intent: self.x[j] })
                })
                .collect::<Result<Vec<_>>>()?
        };
        self.steps.push(TrajectoryStep { t, s, a, x: self.x.iter().map(|&x| Some(x)).collect() });
        let rec = StepRecord { t, s, a, next, x: std::mem::replace(&mut self.x, next_x.clone()), next_x, reward };
        self.s = next;
        self.t += 1;
        self.reward += reward;
        Ok(rec)
    }

    /// Closes the episode, crediting the rest of the horizon spent in an
    /// absorbing state.
    pub fn into_trajectory(self) -> Trajectory {
        let rest = self.task.horizon().saturating_sub(self.t);
        let tail = self.task.absorbing_tail(self.s, rest).as_f64();
        Trajectory { steps: self.steps, final_state: Some(self.s), terminal_reward_sum: self.reward + tail }
    }
}

/// One episode from the task start state `s0` with ground-truth intents
/// recorded at every step.
pub fn rollout_team<F: Scalar>(
    task: &TaskModel<F>,
    team: &TeamModel<F>,
    s0: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = team.n_members();
    let init: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let mut stepper = TeamStepper::sample_initial(task, team, s0, &init)?;
    while !stepper.finished() {
        let noise = StepNoise::draw(&mut rng, n);
        stepper.step(&noise)?;
    }
    Ok(stepper.into_trajectory())
}
