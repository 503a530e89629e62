use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use teamcoach::btil::fit;
use teamcoach::coach::Coach;
use teamcoach::domains::{load_domain, Domain, DomainKind};
use teamcoach::harness::{
    evaluate_model_quality, generate_dataset, grid_search_delta, run_controlled_experiment, run_episode, trial_seed,
    ExperimentSpec, Stats, TrialResult,
};
use teamcoach::io::{read_dataset, write_dataset, write_jsonl, DatasetRecord};
use teamcoach::session::{replay_events, ServiceConfig, SessionEvent};
use teamcoach::team::{make_scripted_team, make_synthetic_team, TeamModel};

use crate::config::{Coached, Config};
use crate::{manifest, CliError};

type Res = Result<(), CliError>;

fn load(cfg: &Config) -> Result<Arc<dyn Domain>, CliError> {
    Ok(load_domain(cfg.domain(), cfg.domain_config.as_deref())?)
}

fn out_dir(cfg: &Config) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

/// Resolves a model source to a team and the file it came from, if any.
fn team_for(source: &str, cfg: &Config, domain: &dyn Domain) -> Result<(TeamModel<f64>, Option<PathBuf>), CliError> {
    let path = match source {
        "synthetic" => return Ok((make_synthetic_team(domain, &cfg.human)?, None)),
        "scripted" => return Ok((make_scripted_team(domain)?, None)),
        "trained" => cfg.out_dir().join("model.json"),
        p => PathBuf::from(p),
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Validation(format!("model file {}: {e}", path.display())))?;
    let team = TeamModel::from_json(&text, domain.task())
        .map_err(|e| CliError::Validation(format!("model file {}: {e}", path.display())))?;
    Ok((team, Some(path)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn gen_data(cfg: &Config, config_path: Option<PathBuf>) -> Res {
    let domain = load(cfg)?;
    let team = make_synthetic_team(&*domain, &cfg.human)?;
    let g = &cfg.gen_data;
    let ds = generate_dataset(&*domain, &team, g.member, g.episodes, g.label_fraction, g.granularity, cfg.seed)?;
    let out = out_dir(cfg)?;
    write_dataset(&out.join("dataset.jsonl"), &domain.kind().to_string(), &ds)?;
    manifest::write("gen-data", cfg, config_path, vec![], &["dataset.jsonl"])?;
    println!(
        "wrote {} {} episodes for member {} (label fraction {:.3}) to {}",
        ds.trajectories.len(),
        domain.kind(),
        g.member,
        ds.label_fraction,
        out.join("dataset.jsonl").display()
    );
    Ok(())
}

pub fn train(cfg: &Config, config_path: Option<PathBuf>) -> Res {
    let path = cfg.train.dataset.clone().unwrap_or_else(|| cfg.out_dir().join("dataset.jsonl"));
    let (name, ds) = read_dataset(&path).map_err(|e| CliError::Validation(format!("dataset {}: {e}", path.display())))?;
    let recorded: DomainKind = name.parse()?;
    if let Some(d) = cfg.domain {
        if d != recorded {
            return Err(CliError::Validation(format!("domain: dataset was recorded on {recorded}, config says {d}")));
        }
    }
    let cfg = Config { domain: Some(recorded), ..cfg.clone() };
    let domain = load(&cfg)?;
    let (model, report) = fit::<f64>(&ds, domain.task(), domain.intents(), &cfg.train.btil(cfg.seed))?;
    let mut team = make_synthetic_team(&*domain, &cfg.human)?;
    team.members[ds.member] = model;
    team.validate(domain.task())?;
    let out = out_dir(&cfg)?;
    fs::write(out.join("model.json"), team.to_json()?)?;
    write_json(&out.join("training.json"), &report)?;
    let mut csv = String::from("iteration,elbo\n");
    for (i, e) in report.elbo.iter().enumerate() {
        writeln!(csv, "{i},{e}").expect("string write");
    }
    fs::write(out.join("elbo.csv"), csv)?;
    manifest::write("train", &cfg, config_path, vec![path], &["model.json", "training.json", "elbo.csv"])?;
    println!(
        "trained member {} on {} trajectories (label fraction {:.3}): {} iterations, converged {}, final objective {:.4}",
        ds.member,
        report.n_trajectories,
        report.label_fraction,
        report.iterations,
        report.converged,
        report.elbo.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn eval_model(cfg: &Config, config_path: Option<PathBuf>) -> Res {
    let domain = load(cfg)?;
    let e = &cfg.eval_model;
    let (team, model_file) = team_for(&e.model, cfg, &*domain)?;
    let report = evaluate_model_quality(&*domain, &team, e.rollouts, e.window, cfg.seed)?;
    let mut table = format!("{:<12} {:>8} {:>8} {:>8}\n", "intent", "success", "wrong", "nowhere");
    for r in &report.intents {
        writeln!(table, "{:<12} {:>8.1} {:>8.1} {:>8.1}", r.label, r.success, r.wrong, r.nowhere).expect("string write");
    }
    let out = out_dir(cfg)?;
    write_json(&out.join("model_quality.json"), &report)?;
    fs::write(out.join("model_quality.txt"), &table)?;
    manifest::write("eval-model", cfg, config_path, model_file.into_iter().collect(), &["model_quality.json", "model_quality.txt"])?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct SingleConditionSummary {
    condition: Coached,
    trials: usize,
    score: Stats,
    interventions: Stats,
}

pub fn experiment(cfg: &Config, config_path: Option<PathBuf>) -> Res {
    let domain = load(cfg)?;
    let sim = make_synthetic_team(&*domain, &cfg.human)?;
    let e = &cfg.experiment;
    let (model, model_file) = team_for(&e.model, cfg, &*domain)?;
    let coach = Coach::new(domain.task(), &model, cfg.coach())?;
    info!("coach uses {}", if coach.is_exact() { "exact backward induction" } else { "Monte Carlo returns" });
    let out = out_dir(cfg)?;
    let (records, summary_json, table, csv) = match e.coached {
        Coached::Both => {
            let spec = ExperimentSpec { trials: e.trials, seed: cfg.seed, resamples: e.resamples };
            let report = run_controlled_experiment(&*domain, &sim, &coach, &spec)?;
            let records: Vec<TrialResult> = report.uncoached.iter().chain(&report.coached).cloned().collect();
            (records, serde_json::to_string_pretty(&report.summary)?, report.summary_table(), report.score_csv())
        }
        one => {
            let c = (one == Coached::On).then_some(&coach);
            let records = (0..e.trials)
                .into_par_iter()
                .map(|i| {
                    run_episode(&*domain, &sim, c, trial_seed(cfg.seed, i), false).map(|ep| TrialResult { trial: i, ..ep.result })
                })
                .collect::<teamcoach::Result<Vec<_>>>()?;
            let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
            let ints: Vec<f64> = records.iter().map(|r| r.interventions as f64).collect();
            let s = SingleConditionSummary { condition: one, trials: e.trials, score: Stats::of(&scores), interventions: Stats::of(&ints) };
            let name = if one == Coached::On { "coached" } else { "uncoached" };
            let table = format!(
                "condition   mean score    sd      n\n{name:<11} {:>10.3}  {:>6.3}  {}\ninterventions per episode: {:.3} (sd {:.3})\n",
                s.score.mean, s.score.sd, s.score.n, s.interventions.mean, s.interventions.sd
            );
            let mut csv = String::from("condition,score\n");
            for r in &records {
                writeln!(csv, "{name},{}", r.score).expect("string write");
            }
            (records, serde_json::to_string_pretty(&s)?, table, csv)
        }
    };
    write_jsonl(&out.join("trials.jsonl"), &records)?;
    fs::write(out.join("summary.json"), summary_json + "\n")?;
    fs::write(out.join("summary.txt"), &table)?;
    fs::write(out.join("scores.csv"), csv)?;
    manifest::write(
        "experiment",
        cfg,
        config_path,
        model_file.into_iter().collect(),
        &["trials.jsonl", "summary.json", "summary.txt", "scores.csv"],
    )?;
    print!("{table}");
    Ok(())
}

pub fn gridsearch(cfg: &Config, config_path: Option<PathBuf>) -> Res {
    let domain = load(cfg)?;
    let sim = make_synthetic_team(&*domain, &cfg.human)?;
    let (model, model_file) = team_for(&cfg.experiment.model, cfg, &*domain)?;
    let coach = Coach::new(domain.task(), &model, cfg.coach())?;
    let g = &cfg.gridsearch;
    let result = grid_search_delta(&*domain, &sim, &coach, &g.deltas, g.trials, cfg.seed)?;
    let mut csv = String::from("delta,mean_score,sd_score,mean_interventions\n");
    for p in &result.curve {
        writeln!(csv, "{},{},{},{}", p.delta, p.score.mean, p.score.sd, p.interventions.mean).expect("string write");
    }
    let out = out_dir(cfg)?;
    write_json(&out.join("gridsearch.json"), &result)?;
    fs::write(out.join("gridsearch.csv"), &csv)?;
    manifest::write("gridsearch-delta", cfg, config_path, model_file.into_iter().collect(), &["gridsearch.json", "gridsearch.csv"])?;
    print!("{csv}");
    println!("best delta: {}", result.best_delta);
    Ok(())
}

pub fn serve(cfg: &Config, config_path: Option<PathBuf>) -> Res {
    let kind = cfg.domain();
    let s = &cfg.serve;
    let service = ServiceConfig {
        models: s.model.iter().map(|p| (kind, p.clone())).collect(),
        domain_configs: cfg.domain_config.iter().map(|p| (kind, p.clone())).collect::<HashMap<_, _>>(),
        human: cfg.human,
        mode: s.mode,
        persist_dir: s.persist_dir.clone(),
    };
    // fail fast on a bad model or layout
    teamcoach::session::SessionManager::new(service.clone()).bundle(kind)?;
    out_dir(cfg)?;
    manifest::write("serve", cfg, config_path, s.model.iter().cloned().collect(), &[])?;
    let addr = s.addr.parse().map_err(|_| CliError::Validation(format!("serve.addr: {:?}", s.addr)))?;
    let rt = tokio::runtime::Runtime::new()?;
    println!("serving {kind} sessions on http://{addr}");
    rt.block_on(teamcoach_server::serve(addr, service))?;
    Ok(())
}

#[derive(Serialize)]
struct SceneFrame<'a> {
    t: usize,
    state: usize,
    actions: Option<Vec<&'a str>>,
    scene: teamcoach::domains::Scene,
    text: String,
}

pub fn replay(cfg: &Config, config_path: Option<PathBuf>, input: &Path, episode: usize, frames: Option<PathBuf>) -> Res {
    let text = fs::read_to_string(input).map_err(|e| CliError::Validation(format!("{}: {e}", input.display())))?;
    let first = text.lines().next().unwrap_or_default();
    let is_dataset = serde_json::from_str::<DatasetRecord>(first).is_ok();
    let (kind, start, steps): (DomainKind, usize, Vec<(usize, usize)>) = if is_dataset {
        let (name, ds) = read_dataset(input)?;
        let traj = ds
            .trajectories
            .get(episode)
            .ok_or_else(|| CliError::Validation(format!("episode {episode} is not in the dataset ({} episodes)", ds.trajectories.len())))?;
        let start = traj.steps.first().map(|s| s.s).or(traj.final_state).unwrap_or(0);
        (name.parse()?, start, traj.steps.iter().map(|s| (s.s, s.a)).collect())
    } else {
        let events: Vec<SessionEvent> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Validation(format!("{}: {e}", input.display())))?;
        let Some(SessionEvent::Created { domain, start_state, .. }) = events.first() else {
            return Err(CliError::Validation(format!("{}: not a dataset or session log", input.display())));
        };
        let cfg = Config { domain: Some(*domain), ..cfg.clone() };
        replay_events(&*load(&cfg)?, &events)?;
        let steps = events
            .iter()
            .filter_map(|e| if let SessionEvent::Step { s, a, .. } = e { Some((*s, *a)) } else { None })
            .collect();
        (*domain, *start_state, steps)
    };
    let cfg = Config { domain: Some(kind), out: frames.clone().or(cfg.out.clone()), ..cfg.clone() };
    let domain = load(&cfg)?;
    let joint = domain.task().joint();
    let mut s = start;
    let mut states = vec![s];
    for (t, &(from, a)) in steps.iter().enumerate() {
        if from != s {
            return Err(CliError::Validation(format!("step {t} starts in state {from}, replay is in {s}")));
        }
        s = domain.step(s, a);
        states.push(s);
    }
    if let Some(dir) = &frames {
        fs::create_dir_all(dir)?;
    }
    let mut written = Vec::new();
    let mut printed = String::new();
    for (t, &s) in states.iter().enumerate() {
        let actions: Option<Vec<&str>> = steps
            .get(t)
            .map(|&(_, a)| joint.decode(a).iter().enumerate().map(|(j, &aj)| domain.action_label(j, aj)).collect());
        let frame = SceneFrame { t, state: s, actions, scene: domain.scene(s), text: domain.render_text(s) };
        match &frames {
            Some(dir) => {
                let name = format!("frame-{t:04}.json");
                write_json(&dir.join(&name), &frame)?;
                written.push(name);
            }
            None => {
                writeln!(printed, "t = {t}").expect("string write");
                printed.push_str(&frame.text);
                if let Some(a) = &frame.actions {
                    writeln!(printed, "actions: {}", a.join(", ")).expect("string write");
                }
                printed.push('\n');
            }
        }
    }
    if frames.is_none() {
        use std::io::Write;
        // a closed pipe (e.g. `| head`) is not an error
        match std::io::stdout().lock().write_all(printed.as_bytes()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
            _ => {}
        }
    }
    if frames.is_some() {
        let names: Vec<&str> = written.iter().map(String::as_str).collect();
        manifest::write("replay", &cfg, config_path, vec![input.to_path_buf()], &names)?;
        println!("wrote {} frames", written.len());
    }
    Ok(())
}
