//! The `lidkit` binary: exit codes, diagnostics, and agreement between the
//! step-by-step command pipeline and the in-process experiment driver.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lidkit::config::KvConfig;
use lidkit::harness::{run_task, ExperimentPlan};

fn lidkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// File contents without `#` comment lines.
fn body(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

const KEY: &str = "A B\ns1 A\ns2 B\ns3 A\n";
const SCORES: &str = "s1 1 2\ns2 -1 1\ns3 -2 -1\n";

#[test]
fn evaluate_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("key.txt"), KEY).unwrap();
    fs::write(dir.path().join("scores.txt"), SCORES).unwrap();
    let o = lidkit(dir.path(), &["evaluate", "--scores", "scores.txt", "--key", "key.txt", "--report", "rep.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("Cavg 0.2500\nEER% "), "{}", stdout(&o));
    let rep = fs::read_to_string(dir.path().join("rep.txt")).unwrap();
    assert!(rep.starts_with("# lidkit evaluate config="));
    assert!(rep.contains("\ncavg 0.25\n"));

    let o = lidkit(dir.path(), &["evaluate", "--scores", "scores.txt", "--key", "key.txt", "--threshold", "0"]);
    assert!(stdout(&o).starts_with("Cavg 0.2500\n"));
    assert!(stdout(&o).contains("threshold fixed(0) 0"));
}

#[test]
fn validate_fills_lost_trial() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("key.txt"), KEY).unwrap();
    fs::write(dir.path().join("scores.txt"), "s1 1 2\ns3 -2 -1\n").unwrap();
    let o = lidkit(dir.path(), &["validate", "--scores", "scores.txt", "--key", "key.txt", "--out", "filled.txt"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("1 lost trial filled with -inf"), "{}", stderr(&o));
    assert_eq!(body(&dir.path().join("filled.txt")), "s1 1 2\ns3 -2 -1\ns2 -inf -inf\n");
}

#[test]
fn data_errors_are_one_line_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scores.txt"), SCORES).unwrap();
    let o = lidkit(dir.path(), &["evaluate", "--scores", "scores.txt", "--key", "missing.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
    assert!(stderr(&o).contains("missing.txt"));

    fs::write(dir.path().join("key.txt"), KEY).unwrap();
    fs::write(dir.path().join("bad.txt"), "s1 1 2\ns2 1\n").unwrap();
    let o = lidkit(dir.path(), &["validate", "--scores", "bad.txt", "--key", "key.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.txt:2:"), "{}", stderr(&o));

    fs::write(dir.path().join("extra.txt"), "s1 1 2\ns2 1 1\ns3 0 0\ns9 0 0\n").unwrap();
    let o = lidkit(dir.path(), &["validate", "--scores", "extra.txt", "--key", "key.txt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lidkit(dir.path(), &["evaluate", "--bogus"]).status.code(), Some(1));
    assert_eq!(lidkit(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(lidkit(dir.path(), &["--jobs", "0", "validate", "--scores", "a", "--key", "b"]).status.code(), Some(1));
    let help = lidkit(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for cmd in ["generate", "train", "extract", "enroll", "score", "validate", "evaluate"] {
        assert!(stdout(&help).contains(cmd), "help lists {cmd}");
    }
}

const SMALL: &str = "\
corpus.train_per_language = 8
corpus.test_per_language = 3
corpus.reference_per_language = 2
train.epochs = 1
net.frame_dims = 8,8,8,8,12
net.embed_dim = 8
net.segment7_dim = 8
";

fn plan_file(dir: &Path, task: &str) -> String {
    let text = format!("task = {task}\n{SMALL}");
    fs::write(dir.join("plan.cfg"), &text).unwrap();
    text
}

fn in_process(text: &str, seed: u64) -> lidkit::harness::TaskOutcome {
    let mut kv = KvConfig::parse(text).unwrap();
    kv.set("seed", seed);
    run_task(&ExperimentPlan::from_kv(&kv).unwrap()).unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    o
}

#[test]
fn closed_set_pipeline_matches_driver() {
    for task in ["short_utterance", "cross_channel"] {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let text = plan_file(d, task);
        let c = ["--config", "plan.cfg", "--seed", "3"];
        ok(lidkit(d, &[&c[..], &["generate", "--out", "corpus"]].concat()));
        ok(lidkit(d, &[&c[..], &["train", "--manifest", "corpus/manifest.txt", "--out", "model.bin"]].concat()));
        ok(lidkit(d, &[&c[..], &["score", "--model", "model.bin", "--manifest", "corpus/manifest.txt", "--out", "s1.txt"]].concat()));
        ok(lidkit(d, &[&c[..], &["score", "--model", "model.bin", "--manifest", "corpus/manifest.txt", "--out", "s2.txt"]].concat()));
        assert_eq!(fs::read(d.join("s1.txt")).unwrap(), fs::read(d.join("s2.txt")).unwrap());

        let expected = in_process(&text, 3);
        assert_eq!(body(&d.join("s1.txt")), expected.scores_text(), "{task}");
        let o = ok(lidkit(d, &[&c[..], &["evaluate", "--scores", "s1.txt", "--key", "corpus/key_test.txt"]].concat()));
        assert!(stdout(&o).starts_with(&format!("Cavg {:.4}\n", expected.report.cavg)));
    }
}

#[test]
fn zero_resource_pipeline_matches_driver() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = plan_file(d, "zero_resource");
    let c = ["--config", "plan.cfg", "--seed", "5"];
    ok(lidkit(d, &[&c[..], &["generate", "--out", "corpus"]].concat()));
    ok(lidkit(d, &[&c[..], &["train", "--manifest", "corpus/manifest.txt", "--out", "model.bin"]].concat()));
    ok(lidkit(d, &[&c[..], &["enroll", "--model", "model.bin", "--manifest", "corpus/manifest.txt", "--out", "centroids.txt"]].concat()));
    ok(lidkit(
        d,
        &[&c[..], &["score", "--model", "model.bin", "--manifest", "corpus/manifest.txt", "--centroids", "centroids.txt", "--out", "s.txt"]].concat(),
    ));
    ok(lidkit(d, &[&c[..], &["extract", "--model", "model.bin", "--manifest", "corpus/manifest.txt", "--out", "x.txt"]].concat()));
    assert_eq!(body(&d.join("x.txt")).lines().count(), 6);
    assert_eq!(body(&d.join("centroids.txt")).lines().count(), 2);

    let expected = in_process(&text, 5);
    assert_eq!(body(&d.join("s.txt")), expected.scores_text());
}

#[test]
fn run_is_reproducible_and_generate_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    plan_file(d, "short_utterance");
    ok(lidkit(d, &["--config", "plan.cfg", "run", "--out", "r1"]));
    ok(lidkit(d, &["--config", "plan.cfg", "--jobs", "1", "run", "--out", "r2"]));
    for f in ["scores.txt", "report.txt", "key.txt"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let first = fs::read_to_string(d.join("r1/scores.txt")).unwrap();
    assert!(first.starts_with("# lidkit run config="));

    fs::create_dir(d.join("busy")).unwrap();
    fs::write(d.join("busy/keep.txt"), "x").unwrap();
    let o = lidkit(d, &["--config", "plan.cfg", "generate", "--out", "busy"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_to_string(d.join("busy/keep.txt")).unwrap(), "x");

    let o = lidkit(d, &["--set", "task=zero_resource", "--set", "languages.eval=lang-a,lang-d", "generate", "--out", "g"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lang-a"), "{}", stderr(&o));
    assert!(!d.join("g").exists());
}
