use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use teamcoach::io::read_dataset;
use teamcoach::session::{ServiceConfig, SessionConfig, SessionManager, SessionMode};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_teamcoach"));
    c.env_remove("TEAMCOACH_OUT").env("RUST_LOG", "error");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&run(dir.path(), &["gen-data", "--episodes", "many"])), 2);
    assert_eq!(code(&run(dir.path(), &["gen-data", "--no-such-flag"])), 2);
    let help = run(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["gen-data", "train", "eval-model", "experiment", "gridsearch-delta", "serve", "replay"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn validation_errors_exit_3_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-data", "--label-frac", "1.5"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("gen_data.label_fraction"), "{}", stderr(&o));

    fs::write(dir.path().join("bad.json"), r#"{"experiment": {"trails": 5}}"#).unwrap();
    let o = run(dir.path(), &["--config", "bad.json", "experiment"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("trails"), "{}", stderr(&o));

    let o = run(dir.path(), &["experiment", "--trials", "1"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("experiment.trials"));

    let o = run(dir.path(), &["train", "--dataset", "missing.jsonl"]);
    assert_eq!(code(&o), 3);

    let o = run(dir.path(), &["--domain", "rescue", "eval-model", "--model", "nowhere.json"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere.json"));
}

#[test]
fn runtime_failures_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("taken"), "a file, not a directory").unwrap();
    let o = run(dir.path(), &["--domain", "rescue", "--out", "taken", "gen-data", "--episodes", "2"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn gen_data_writes_160_episodes_with_30_percent_labels() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--out", "o", "gen-data", "--domain", "movers", "--episodes", "160", "--label-frac", "0.3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (domain, ds) = read_dataset(&dir.path().join("o/dataset.jsonl")).unwrap();
    assert_eq!(domain, "movers");
    assert_eq!(ds.trajectories.len(), 160);
    assert_eq!(ds.label_fraction, 0.3);
    let labelled = ds.trajectories.iter().filter(|t| t.steps.iter().all(|s| s.x[0].is_some())).count();
    assert_eq!(labelled, 48);
    assert!(dir.path().join("o/gen-data.manifest.json").exists());
}

#[test]
fn flags_override_file_which_overrides_env() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"domain": "rescue", "seed": 3, "gen_data": {"episodes": 4}}"#).unwrap();
    let o = bin()
        .current_dir(dir.path())
        .env("TEAMCOACH_OUT", "from-env")
        .args(["--config", "c.json", "gen-data", "--episodes", "6"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, ds) = read_dataset(&dir.path().join("from-env/dataset.jsonl")).unwrap();
    assert_eq!(ds.trajectories.len(), 6);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from-env/gen-data.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["gen_data"]["episodes"], 6);
    assert_eq!(m["command"], "gen-data");
    assert!(m["version"].as_str().unwrap().starts_with('v'));

    // the file's out beats the environment, the flag beats both
    fs::write(dir.path().join("d.json"), r#"{"domain": "rescue", "out": "from-file", "gen_data": {"episodes": 2}}"#).unwrap();
    let o = bin().current_dir(dir.path()).env("TEAMCOACH_OUT", "from-env2").args(["--config", "d.json", "gen-data"]).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("from-file/dataset.jsonl").exists());
    let o = run(dir.path(), &["--config", "d.json", "--out", "from-flag", "gen-data"]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("from-flag/dataset.jsonl").exists());
}

#[test]
fn manifests_reproduce_their_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--domain", "rescue", "--seed", "11", "--out", "a", "gen-data", "--episodes", "12"]);
    assert_eq!(code(&o), 0);
    let first = fs::read(dir.path().join("a/dataset.jsonl")).unwrap();
    fs::copy(dir.path().join("a/gen-data.manifest.json"), dir.path().join("m.json")).unwrap();
    fs::remove_file(dir.path().join("a/dataset.jsonl")).unwrap();
    let o = run(dir.path(), &["--config", "m.json", "gen-data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(dir.path().join("a/dataset.jsonl")).unwrap(), first);
}

#[test]
fn scripted_team_scores_full_success() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--domain", "rescue", "eval-model", "--model", "scripted", "--rollouts", "50"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().count(), 5);
    for line in table.lines().skip(1) {
        assert!(line.contains("100.0      0.0      0.0"), "{line}");
    }
}

#[test]
fn single_condition_experiments_and_gridsearch() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--domain", "rescue", "experiment", "--trials", "6", "--coached", "off"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trials = fs::read_to_string(dir.path().join("teamcoach-out/trials.jsonl")).unwrap();
    assert_eq!(trials.lines().count(), 6);
    assert!(trials.lines().all(|l| l.contains("\"uncoached\"") && l.contains("\"cost\":0.0")));

    let o = run(dir.path(), &["--domain", "rescue", "gridsearch-delta", "--deltas", "0,0.5", "--trials", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("teamcoach-out/gridsearch.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("teamcoach-out/gridsearch-delta.manifest.json").exists());
}

#[test]
fn replay_renders_datasets_and_session_logs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--domain", "rescue", "gen-data", "--episodes", "2"])), 0);
    let o = run(dir.path(), &["replay", "teamcoach-out/dataset.jsonl", "--episode", "1"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("t = 0\n"));
    assert_eq!(code(&run(dir.path(), &["replay", "teamcoach-out/dataset.jsonl", "--episode", "9"])), 3);

    let o = run(dir.path(), &["replay", "teamcoach-out/dataset.jsonl", "--frames", "frames"]);
    assert_eq!(code(&o), 0);
    let (_, ds) = read_dataset(&dir.path().join("teamcoach-out/dataset.jsonl")).unwrap();
    let n = fs::read_dir(dir.path().join("frames")).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().starts_with("frame-")
    }).count();
    assert_eq!(n, ds.trajectories[0].steps.len() + 1);
    assert!(dir.path().join("frames/replay.manifest.json").exists());

    // a persisted live session
    let m = SessionManager::new(ServiceConfig { persist_dir: Some(dir.path().join("sessions")), ..Default::default() });
    let id = m.create_session("rescue", SessionConfig::new(SessionMode::Uncoached)).unwrap().session_id;
    for _ in 0..4 {
        m.submit_action(&id, 0, 5).unwrap();
    }
    let log = dir.path().join("sessions").join(&id).join("events.jsonl");
    let o = run(dir.path(), &["replay", log.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("t = ").count(), 5);
}
