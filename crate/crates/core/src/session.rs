//! Live task sessions: humans submit actions, scripted members act on their
//! own, and the coach watches every step.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::btil::{Dataset, LabelGranularity};
use crate::coach::{Coach, CoachConfig, Estimator, InterventionDecision, ReturnMode};
use crate::domains::{load_domain, Domain, DomainKind, EntityRef, Scene};
use crate::error::{Error, Result};
use crate::filter::{init_belief, BeliefState};
use crate::io::dataset_to_jsonl;
use crate::task::{Trajectory, TrajectoryStep};
use crate::team::{make_synthetic_team, MemberRole, SyntheticAgentConfig, TeamModel};

pub const NOMINAL_MESSAGE: &str = "Keep up the good work.";
pub const INTERVENTION_PREFIX: &str = "I've spotted a potential opportunity to enhance our teamwork: Please ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Tutorial,
    Practice,
    Trial,
    Review,
    PausedForIntervention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Coached,
    Uncoached,
    Annotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationSource {
    Live,
    AfterActionFix,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub t: usize,
    pub member: usize,
    pub intent: usize,
    pub source: AnnotationSource,
}

fn default_controlled() -> Vec<usize> {
    vec![0]
}

fn default_phase() -> Phase {
    Phase::Trial
}

fn default_nudge() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub mode: SessionMode,
    /// Members played by people; everyone else is scripted.
    #[serde(default = "default_controlled")]
    pub controlled: Vec<usize>,
    /// Defaults to the domain preset.
    #[serde(default)]
    pub coach: Option<CoachConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_phase")]
    pub phase: Phase,
    /// Steps without a destination report before a reminder.
    #[serde(default = "default_nudge")]
    pub nudge_after: usize,
}

impl SessionConfig {
    pub fn new(mode: SessionMode) -> Self {
        Self { mode, controlled: default_controlled(), coach: None, seed: 0, phase: Phase::Trial, nudge_after: 5 }
    }
}

/// What a client needs to draw the current step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub session_id: String,
    pub domain: DomainKind,
    pub mode: SessionMode,
    pub phase: Phase,
    pub t: usize,
    pub horizon: usize,
    pub state: usize,
    pub scene: Scene,
    /// Entity ids each member can see.
    pub visible_entities: Vec<Vec<String>>,
    pub coach_message: String,
    pub highlight: Option<String>,
    pub pending_confirmation: bool,
    pub reward: f64,
    pub cost: f64,
    pub score: f64,
    /// Controlled members whose action for this step is still missing.
    pub awaiting: Vec<usize>,
    /// Selectable destinations (annotation mode only).
    pub destinations: Option<Vec<EntityRef>>,
    pub selected: Vec<Option<usize>>,
    /// Members who should be reminded to report their destination.
    pub nudge: Vec<usize>,
    pub finished: bool,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created { session_id: String, domain: DomainKind, config: SessionConfig, start_state: usize },
    Action { t: usize, member: usize, action: usize },
    Step { t: usize, s: usize, a: usize, next: usize, reward: f64, intents: Vec<Option<usize>> },
    Belief { t: usize, beliefs: Vec<Vec<f64>> },
    Decision { decision: InterventionDecision },
    Intervention { t: usize, x_star: Vec<usize>, message: String, highlight: Option<String> },
    Confirm { t: usize, member: usize, cost: f64 },
    Annotation { record: AnnotationRecord },
    Finished { t: usize, final_state: usize, reward: f64, cost: f64 },
    Abandoned { t: usize, pending_intervention: bool },
}

/// One step of an after-action replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayFrame {
    pub t: usize,
    pub state: usize,
    pub joint_action: usize,
    pub actions: Vec<String>,
    pub intents: Vec<Option<usize>>,
    pub intent_labels: Vec<Option<String>>,
    pub scene: Scene,
}

/// Domain and models shared by every session on that domain.
pub struct ModelBundle {
    pub domain: Arc<dyn Domain>,
    pub team: TeamModel<f64>,
    mode: ReturnMode,
    estimator: OnceLock<Estimator<f64>>,
}

impl ModelBundle {
    pub fn new(domain: Arc<dyn Domain>, team: TeamModel<f64>, mode: ReturnMode) -> Result<Self> {
        team.validate(domain.task())?;
        Ok(Self { domain, team, mode, estimator: OnceLock::new() })
    }

    fn estimator(&self) -> Result<Estimator<f64>> {
        if let Some(e) = self.estimator.get() {
            return Ok(e.clone());
        }
        let cfg = CoachConfig { mode: self.mode, ..CoachConfig::preset(self.domain.kind()) };
        let e = Coach::new(self.domain.task(), &self.team, cfg)?.estimator();
        Ok(self.estimator.get_or_init(|| e).clone())
    }
}

pub struct Session {
    id: String,
    bundle: Arc<ModelBundle>,
    config: SessionConfig,
    coach_config: CoachConfig,
    phase: Phase,
    resume_phase: Phase,
    s: usize,
    t: usize,
    /// Current intents of scripted members (unused for controlled ones).
    intents: Vec<usize>,
    submitted: Vec<Option<usize>>,
    belief: Option<BeliefState<f64>>,
    pending: Option<InterventionDecision>,
    message: String,
    highlight: Option<String>,
    reward: f64,
    cost: f64,
    steps: Vec<TrajectoryStep>,
    annotations: Vec<AnnotationRecord>,
    selected: Vec<Option<usize>>,
    last_report: Vec<usize>,
    finished: bool,
    events: Vec<SessionEvent>,
    rng: ChaCha8Rng,
    dir: Option<PathBuf>,
}

const SNAPSHOT_EVERY: usize = 25;

impl Session {
    pub fn new(id: String, bundle: Arc<ModelBundle>, config: SessionConfig, dir: Option<PathBuf>) -> Result<Self> {
        let domain = bundle.domain.clone();
        let n = domain.n_members();
        if config.controlled.is_empty() || config.controlled.iter().any(|&j| j >= n) {
            return Err(Error::Config(format!("controlled members {:?} do not exist", config.controlled)));
        }
        if matches!(config.phase, Phase::Review | Phase::PausedForIntervention) {
            return Err(Error::Config("sessions start in tutorial, practice or trial".into()));
        }
        let coach_config = config.coach.clone().unwrap_or_else(|| CoachConfig::preset(domain.kind()));
        coach_config.validate()?;
        let s0 = domain.start_state();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let intents = bundle
            .team
            .members
            .iter()
            .map(|m| m.initial_row(s0).sample(rng.gen()).ok_or(Error::ZeroRow { state: s0, intent: 0 }))
            .collect::<Result<Vec<_>>>()?;
        let belief = match config.mode {
            SessionMode::Coached => {
                bundle.estimator()?;
                Some(init_belief(&bundle.team, s0)?)
            }
            _ => None,
        };
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
            fs::write(d.join("events.jsonl"), "")?;
        }
        let mut session = Self {
            id: id.clone(),
            bundle,
            coach_config,
            phase: config.phase,
            resume_phase: config.phase,
            s: s0,
            t: 0,
            intents,
            submitted: vec![None; n],
            belief,
            pending: None,
            message: NOMINAL_MESSAGE.into(),
            highlight: None,
            reward: 0.0,
            cost: 0.0,
            steps: Vec::new(),
            annotations: Vec::new(),
            selected: vec![None; n],
            last_report: vec![0; n],
            finished: false,
            events: Vec::new(),
            rng,
            dir,
            config: config.clone(),
        };
        session.log(SessionEvent::Created { session_id: id, domain: domain.kind(), config, start_state: s0 })?;
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn domain(&self) -> &dyn Domain {
        &*self.bundle.domain
    }

    fn log(&mut self, e: SessionEvent) -> Result<()> {
        if let Some(d) = &self.dir {
            let mut f = OpenOptions::new().append(true).create(true).open(d.join("events.jsonl"))?;
            serde_json::to_writer(&mut f, &e)?;
            f.write_all(b"\n")?;
        }
        self.events.push(e);
        if self.dir.is_some() && self.events.len() % SNAPSHOT_EVERY == 0 {
            self.snapshot()?;
        }
        Ok(())
    }

    fn snapshot(&self) -> Result<()> {
        if let Some(d) = &self.dir {
            let snap = serde_json::json!({ "events": self.events.len(), "frame": self.frame() });
            fs::write(d.join("snapshot.json"), serde_json::to_string(&snap)?)?;
        }
        Ok(())
    }

    fn accepts_actions(&self) -> bool {
        !self.finished && matches!(self.phase, Phase::Tutorial | Phase::Practice | Phase::Trial)
    }

    pub fn frame(&self) -> Frame {
        let domain = self.domain();
        let scene = domain.scene(self.s);
        let visible_entities = scene.visibility.iter().map(|v| v.entities.clone()).collect();
        let awaiting = if self.accepts_actions() {
            self.config.controlled.iter().copied().filter(|&j| self.submitted[j].is_none()).collect()
        } else {
            Vec::new()
        };
        let annotating = self.config.mode == SessionMode::Annotation;
        let destinations = annotating
            .then(|| domain.intents().task_intents().filter_map(|x| domain.intent_entity(x)).collect());
        let nudge = if annotating && self.accepts_actions() {
            self.config
                .controlled
                .iter()
                .copied()
                .filter(|&j| self.t - self.last_report[j] >= self.config.nudge_after)
                .collect()
        } else {
            Vec::new()
        };
        Frame {
            session_id: self.id.clone(),
            domain: domain.kind(),
            mode: self.config.mode,
            phase: self.phase,
            t: self.t,
            horizon: domain.task().horizon(),
            state: self.s,
            scene,
            visible_entities,
            coach_message: self.message.clone(),
            highlight: self.highlight.clone(),
            pending_confirmation: self.pending.is_some(),
            reward: self.reward,
            cost: self.cost,
            score: self.reward - self.cost,
            awaiting,
            destinations,
            selected: self.selected.clone(),
            nudge,
            finished: self.finished,
            text: domain.render_text(self.s),
        }
    }

    fn check_member(&self, member: usize) -> Result<()> {
        if !self.config.controlled.contains(&member) {
            return Err(Error::Rejected(format!("member {member} is not controlled by a participant")));
        }
        Ok(())
    }

    pub fn submit_action(&mut self, member: usize, action: usize) -> Result<Frame> {
        if self.pending.is_some() {
            return Err(Error::Rejected("confirm required".into()));
        }
        if self.finished {
            return Err(Error::Rejected("the episode is over".into()));
        }
        if !self.accepts_actions() {
            return Err(Error::Rejected(format!("phase {:?} does not accept actions", self.phase)));
        }
        self.check_member(member)?;
        if self.submitted[member].is_some() {
            return Err(Error::Rejected(format!("member {member} already acted at t={}", self.t)));
        }
        let domain = self.bundle.domain.clone();
        domain.check_action(self.s, member, action).map_err(Error::Rejected)?;
        if self.config.mode == SessionMode::Annotation {
            domain.destination_check(self.s, member, action, self.selected[member]).map_err(Error::Rejected)?;
        }
        self.submitted[member] = Some(action);
        self.log(SessionEvent::Action { t: self.t, member, action })?;
        if self.config.controlled.iter().all(|&j| self.submitted[j].is_some()) {
            self.advance()?;
        }
        Ok(self.frame())
    }

    fn advance(&mut self) -> Result<()> {
        let bundle = self.bundle.clone();
        let domain = &*bundle.domain;
        let task = domain.task();
        let team = &bundle.team;
        let n = domain.n_members();
        let (s, t) = (self.s, self.t);
        let mut actions = vec![0; n];
        for j in 0..n {
            actions[j] = match self.submitted[j] {
                Some(a) => a,
                None => {
                    let u = self.rng.gen();
                    team.members[j].policy_row(s, self.intents[j]).sample(u).ok_or(Error::ZeroRow { state: s, intent: self.intents[j] })?
                }
            };
        }
        let a = task.joint().encode(&actions);
        let next = domain.step(s, a);
        let r = task.reward(s, a);
        let controlled = |j: usize| self.config.controlled.contains(&j);
        let labels: Vec<Option<usize>> = (0..n)
            .map(|j| {
                if !controlled(j) {
                    Some(self.intents[j])
                } else if self.config.mode == SessionMode::Annotation {
                    self.selected[j]
                } else {
                    None
                }
            })
            .collect();
        self.steps.push(TrajectoryStep { t, s, a, x: labels.clone() });
        for j in 0..n {
            if !controlled(j) {
                let u = self.rng.gen();
                self.intents[j] = team.members[j].dynamics_row(next, a, self.intents[j]).sample(u).unwrap_or(self.intents[j]);
            }
        }
        self.submitted.iter_mut().for_each(|x| *x = None);
        self.s = next;
        self.t += 1;
        self.reward += r;
        self.log(SessionEvent::Step { t, s, a, next, reward: r, intents: labels })?;
        if let Some(b) = self.belief.as_mut() {
            b.update(task, team, s, a, next)?;
            let beliefs = b.beliefs.clone();
            self.log(SessionEvent::Belief { t: self.t, beliefs })?;
        }
        if self.t >= task.horizon() || task.is_absorbing(next) {
            self.reward += task.absorbing_tail(next, task.horizon() - self.t);
            self.finished = true;
            self.phase = Phase::Review;
            self.log(SessionEvent::Finished { t: self.t, final_state: next, reward: self.reward, cost: self.cost })?;
            info!("session {} finished with reward {}", self.id, self.reward);
            return Ok(());
        }
        if let Some(b) = &self.belief {
            let coach = Coach::from_estimator(task, team, self.coach_config.clone(), bundle.estimator()?)?;
            let d = coach.decide(b, next, self.t)?;
            self.log(SessionEvent::Decision { decision: d.clone() })?;
            if d.intervene {
                let message = self.recommendation(&d);
                let human = self.config.controlled.iter().copied().find(|j| d.recipients.contains(j));
                let highlight = human.and_then(|j| domain.intent_entity(d.x_star[j])).map(|e| e.id);
                self.message = message.clone();
                self.highlight = highlight.clone();
                self.resume_phase = self.phase;
                self.phase = Phase::PausedForIntervention;
                self.log(SessionEvent::Intervention { t: self.t, x_star: d.x_star.clone(), message, highlight })?;
                self.pending = Some(d);
            }
        }
        Ok(())
    }

    fn recommendation(&self, d: &InterventionDecision) -> String {
        let domain = self.domain();
        let name = |x: usize| {
            domain.intent_entity(x).map(|e| e.name).unwrap_or_else(|| domain.intents().label(x).to_string())
        };
        let humans: Vec<usize> =
            self.config.controlled.iter().copied().filter(|j| d.recipients.contains(j)).collect();
        let body = match humans.as_slice() {
            [j] => format!("target {}", name(d.x_star[*j])),
            [] => format!("let the team target {}", name(d.x_star[0])),
            many => many
                .iter()
                .map(|&j| format!("{} target {}", domain.member_name(j), name(d.x_star[j])))
                .collect::<Vec<_>>()
                .join("; "),
        };
        format!("{INTERVENTION_PREFIX}{body}.")
    }

    pub fn confirm_intervention(&mut self, member: usize) -> Result<Frame> {
        self.check_member(member)?;
        let Some(d) = self.pending.take() else {
            return Err(Error::Rejected("no pending intervention".into()));
        };
        let bundle = self.bundle.clone();
        for &j in &d.recipients {
            if !self.config.controlled.contains(&j) {
                self.intents[j] = d.x_star[j];
            }
        }
        if let Some(b) = self.belief.as_mut() {
            let coach = Coach::from_estimator(bundle.domain.task(), &bundle.team, self.coach_config.clone(), bundle.estimator()?)?;
            coach.post_intervention_belief(b, &d);
        }
        self.cost += self.coach_config.cost;
        self.phase = self.resume_phase;
        self.message = NOMINAL_MESSAGE.into();
        self.highlight = None;
        self.log(SessionEvent::Confirm { t: self.t, member, cost: self.coach_config.cost })?;
        Ok(self.frame())
    }

    /// Live destination report.
    pub fn annotate(&mut self, member: usize, intent: usize) -> Result<Frame> {
        if self.config.mode != SessionMode::Annotation {
            return Err(Error::Rejected("destination reports need an annotation session".into()));
        }
        if self.finished {
            return Err(Error::Rejected("the episode is over; use fix_annotation".into()));
        }
        self.check_member(member)?;
        if !self.domain().intents().task_intents().contains(&intent) {
            return Err(Error::Rejected(format!("intent {intent} is not a destination")));
        }
        let record =
            AnnotationRecord { session_id: self.id.clone(), t: self.t, member, intent, source: AnnotationSource::Live };
        self.selected[member] = Some(intent);
        self.last_report[member] = self.t;
        self.annotations.push(record.clone());
        self.log(SessionEvent::Annotation { record })?;
        Ok(self.frame())
    }

    /// Intent labels per step after applying fixes.
    pub fn effective_intents(&self) -> Vec<Vec<Option<usize>>> {
        let mut out: Vec<Vec<Option<usize>>> = self.steps.iter().map(|st| st.x.clone()).collect();
        for r in self.annotations.iter().filter(|r| r.source == AnnotationSource::AfterActionFix) {
            if let Some(row) = out.get_mut(r.t) {
                row[r.member] = Some(r.intent);
            }
        }
        out
    }

    pub fn review(&self) -> Result<Vec<ReplayFrame>> {
        if !self.finished {
            return Err(Error::Rejected("review is available once the episode is over".into()));
        }
        let domain = self.domain();
        let joint = domain.task().joint();
        Ok(self
            .steps
            .iter()
            .zip(self.effective_intents())
            .map(|(st, intents)| ReplayFrame {
                t: st.t,
                state: st.s,
                joint_action: st.a,
                actions: joint
                    .decode(st.a)
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| domain.action_label(j, a).to_string())
                    .collect(),
                intent_labels: intents.iter().map(|x| x.map(|x| domain.intents().label(x).to_string())).collect(),
                intents,
                scene: domain.scene(st.s),
            })
            .collect())
    }

    pub fn fix_annotation(&mut self, t: usize, member: usize, intent: usize) -> Result<AnnotationRecord> {
        if !self.finished {
            return Err(Error::Rejected("fixes are made during review".into()));
        }
        if t >= self.steps.len() {
            return Err(Error::Rejected(format!("timestep {t} is beyond the episode ({} steps)", self.steps.len())));
        }
        if member >= self.domain().n_members() {
            return Err(Error::Rejected(format!("member {member} does not exist")));
        }
        if !self.domain().intents().task_intents().contains(&intent) {
            return Err(Error::Rejected(format!("intent {intent} is not a destination")));
        }
        let record = AnnotationRecord {
            session_id: self.id.clone(),
            t,
            member,
            intent,
            source: AnnotationSource::AfterActionFix,
        };
        self.annotations.push(record.clone());
        self.log(SessionEvent::Annotation { record: record.clone() })?;
        if let Some(d) = self.dir.clone() {
            let member = self.config.controlled[0];
            fs::write(d.join("dataset.jsonl"), dataset_to_jsonl(&self.domain().kind().to_string(), &self.dataset(member))?)?;
        }
        Ok(record)
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            steps: self
                .steps
                .iter()
                .zip(self.effective_intents())
                .map(|(st, x)| TrajectoryStep { t: st.t, s: st.s, a: st.a, x })
                .collect(),
            final_state: Some(self.s),
            terminal_reward_sum: self.reward,
        }
    }

    /// One-episode dataset for `member`.
    pub fn dataset(&self, member: usize) -> Dataset {
        dataset_of(member, vec![self.trajectory()])
    }

    pub fn abandon(&mut self) -> Result<()> {
        if self.finished {
            return Ok(());
        }
        self.finished = true;
        self.phase = Phase::Review;
        let pending = self.pending.take().is_some();
        self.log(SessionEvent::Abandoned { t: self.t, pending_intervention: pending })?;
        self.snapshot()
    }
}

fn dataset_of(member: usize, trajectories: Vec<Trajectory>) -> Dataset {
    let mut ds = Dataset { member, trajectories, label_fraction: 0.0, granularity: LabelGranularity::Trajectory };
    ds.label_fraction = ds.actual_label_fraction();
    ds
}

/// Re-runs the recorded joint actions and returns the final state, checking
/// every recorded successor on the way.
pub fn replay_events(domain: &dyn Domain, events: &[SessionEvent]) -> Result<usize> {
    let Some(SessionEvent::Created { start_state, .. }) = events.first() else {
        return Err(Error::Dataset("event log does not start with a creation record".into()));
    };
    let mut s = *start_state;
    for e in events {
        if let SessionEvent::Step { s: from, a, next, t, .. } = e {
            if *from != s {
                return Err(Error::Dataset(format!("step {t} starts from {from}, replay is at {s}")));
            }
            s = domain.step(s, *a);
            if s != *next {
                return Err(Error::Dataset(format!("step {t} recorded {next}, replay reached {s}")));
            }
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Team-model files for the coach, per domain; synthetic teams otherwise.
    #[serde(default)]
    pub models: HashMap<DomainKind, PathBuf>,
    #[serde(default)]
    pub domain_configs: HashMap<DomainKind, PathBuf>,
    #[serde(default)]
    pub human: SyntheticAgentConfig,
    #[serde(default)]
    pub mode: ReturnMode,
    /// Where event logs, snapshots and datasets go.
    #[serde(default)]
    pub persist_dir: Option<PathBuf>,
}

/// Owns every live session. Each session is locked independently.
pub struct SessionManager {
    config: ServiceConfig,
    bundles: Mutex<HashMap<DomainKind, Arc<ModelBundle>>>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
    counter: Mutex<usize>,
}

impl SessionManager {
    pub fn new(config: ServiceConfig) -> Self {
        Self { config, bundles: Mutex::default(), sessions: Mutex::default(), counter: Mutex::new(0) }
    }

    /// Registers prebuilt models for a domain.
    pub fn insert_bundle(&self, bundle: ModelBundle) {
        self.bundles.lock().expect("bundle lock").insert(bundle.domain.kind(), Arc::new(bundle));
    }

    pub fn bundle(&self, kind: DomainKind) -> Result<Arc<ModelBundle>> {
        if let Some(b) = self.bundles.lock().expect("bundle lock").get(&kind) {
            return Ok(b.clone());
        }
        let domain = load_domain(kind, self.config.domain_configs.get(&kind).map(Path::new))?;
        let team = match self.config.models.get(&kind) {
            Some(p) => TeamModel::from_json(&fs::read_to_string(p)?, domain.task())?,
            None => make_synthetic_team(&*domain, &self.config.human)?,
        };
        let bundle = Arc::new(ModelBundle::new(domain, team, self.config.mode)?);
        Ok(self.bundles.lock().expect("bundle lock").entry(kind).or_insert(bundle).clone())
    }

    pub fn create_session(&self, domain: &str, config: SessionConfig) -> Result<Frame> {
        let kind: DomainKind = domain.parse().map_err(|_| Error::Config(format!("unknown domain {domain:?}")))?;
        let bundle = self.bundle(kind)?;
        let id = {
            let mut c = self.counter.lock().expect("counter lock");
            *c += 1;
            format!("{kind}-{:04}", *c)
        };
        let dir = self.config.persist_dir.as_ref().map(|d| d.join(&id));
        let session = Session::new(id.clone(), bundle, config, dir)?;
        let frame = session.frame();
        self.sessions.lock().expect("session lock").insert(id, Arc::new(Mutex::new(session)));
        Ok(frame)
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let s = self.session(id)?;
        let mut guard = s.lock().expect("session lock");
        f(&mut guard)
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.lock().expect("session lock").keys().cloned().collect()
    }

    pub fn frame(&self, id: &str) -> Result<Frame> {
        self.with_session(id, |s| Ok(s.frame()))
    }

    pub fn submit_action(&self, id: &str, member: usize, action: usize) -> Result<Frame> {
        self.with_session(id, |s| s.submit_action(member, action))
    }

    pub fn confirm_intervention(&self, id: &str, member: usize) -> Result<Frame> {
        self.with_session(id, |s| s.confirm_intervention(member))
    }

    pub fn annotate(&self, id: &str, member: usize, intent: usize) -> Result<Frame> {
        self.with_session(id, |s| s.annotate(member, intent))
    }

    pub fn review(&self, id: &str) -> Result<Vec<ReplayFrame>> {
        self.with_session(id, |s| s.review())
    }

    pub fn fix_annotation(&self, id: &str, t: usize, member: usize, intent: usize) -> Result<AnnotationRecord> {
        self.with_session(id, |s| s.fix_annotation(t, member, intent))
    }

    pub fn abandon(&self, id: &str) -> Result<()> {
        self.with_session(id, |s| s.abandon())
    }

    /// Finished sessions' trajectories as one dataset for `member`, in the
    /// order given.
    pub fn export_dataset(&self, ids: &[String], member: usize) -> Result<Dataset> {
        let mut trajs = Vec::with_capacity(ids.len());
        for id in ids {
            trajs.push(self.with_session(id, |s| {
                if !s.is_finished() {
                    return Err(Error::Rejected(format!("session {id} is still running")));
                }
                Ok(s.trajectory())
            })?);
        }
        Ok(dataset_of(member, trajs))
    }

    /// Role of each member in the models behind `kind`.
    pub fn roles(&self, kind: DomainKind) -> Result<Vec<MemberRole>> {
        Ok(self.bundle(kind)?.team.members.iter().map(|m| m.role).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manager() -> SessionManager {
        SessionManager::new(ServiceConfig::default())
    }

    #[test]
    fn uncoached_rescue_runs_to_review() {
        let m = manager();
        let f = m.create_session("rescue", SessionConfig::new(SessionMode::Uncoached)).unwrap();
        assert_eq!(f.coach_message, NOMINAL_MESSAGE);
        assert_eq!(f.awaiting, vec![0]);
        let id = f.session_id;
        let wait = 5;
        let mut last = f.t;
        while !m.frame(&id).unwrap().finished {
            let f = m.submit_action(&id, 0, wait).unwrap();
            assert_eq!(f.t, last + 1);
            last = f.t;
        }
        let review = m.review(&id).unwrap();
        assert_eq!(review.len(), last);
        assert!(m.confirm_intervention(&id, 0).is_err());
        assert!(m.submit_action(&id, 0, wait).is_err());
        let events = m.with_session(&id, |s| Ok(s.events().to_vec())).unwrap();
        let d = load_domain(DomainKind::Rescue, None).unwrap();
        assert_eq!(replay_events(&*d, &events).unwrap(), m.frame(&id).unwrap().state);
    }

    #[test]
    fn rejects_bad_requests() {
        let m = manager();
        assert!(m.create_session("kitchen", SessionConfig::new(SessionMode::Coached)).is_err());
        assert!(m.session_ids().is_empty());
        let id = m.create_session("rescue", SessionConfig::new(SessionMode::Uncoached)).unwrap().session_id;
        assert!(matches!(m.submit_action(&id, 1, 5), Err(Error::Rejected(_))));
        assert!(matches!(m.submit_action(&id, 0, 99), Err(Error::Rejected(_))));
        assert!(matches!(m.annotate(&id, 0, 0), Err(Error::Rejected(_))));
        assert!(matches!(m.frame("nope"), Err(Error::UnknownSession(_))));
    }
}
