use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn intent(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intent")).args(args).arg("--out").arg(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn collect_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = intent(d.path(), &["collect", "--games", "10", "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("trajectories.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(String::from_utf8(read(&a)).unwrap().lines().count(), 10);
}

#[test]
fn adversarial_collect_logs_both_seats() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[env]\ntask = \"bargain\"\n");
    let o = intent(d.path(), &["collect", "--games", "10", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(d.path().join("trajectories.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 20);
    assert_eq!(text.lines().filter(|l| l.contains("\"bob\"")).count(), 10);
}

#[test]
fn collect_defaults_to_a_thousand_games() {
    let d = tempfile::tempdir().unwrap();
    let o = intent(d.path(), &["collect"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.path().join("trajectories.jsonl")).unwrap().lines().count(), 1000);
}

#[test]
fn rerun_skips_and_tampering_is_named() {
    let d = tempfile::tempdir().unwrap();
    let first = intent(d.path(), &["pipeline", "--seed", "2"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).lines().all(|l| l.ends_with("done")), "{}", stdout(&first));

    let again = intent(d.path(), &["pipeline", "--seed", "2"]);
    assert_eq!(again.status.code(), Some(0));
    assert!(stdout(&again).lines().all(|l| l.contains("skipped")), "{}", stdout(&again));

    // Changing a training knob reruns only the stages that read it.
    let cfg = write_config(d.path(), "[training]\nepochs = 3\n");
    let changed = intent(d.path(), &["pipeline", "--seed", "2", "--config", &cfg]);
    assert!(changed.status.success());
    let text = stdout(&changed);
    let ran: Vec<&str> = text.lines().filter(|l| l.ends_with("done")).map(|l| l.split(':').next().unwrap()).collect();
    assert_eq!(ran, ["train", "train-online", "eval", "report"]);

    let table = d.path().join("reward_table.json");
    let mut bytes = fs::read(&table).unwrap();
    bytes.push(b' ');
    fs::write(&table, bytes).unwrap();
    let o = intent(d.path(), &["train", "--seed", "2", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checksum mismatch") && stderr(&o).contains("reward_table.json"), "{}", stderr(&o));

    // Rerunning the producer repairs the artifact.
    assert!(intent(d.path(), &["aggregate", "--seed", "2"]).status.success());
    assert!(intent(d.path(), &["train", "--seed", "2", "--config", &cfg]).status.success());
}

#[test]
fn missing_upstream_artifacts_are_listed() {
    let d = tempfile::tempdir().unwrap();
    let o = intent(d.path(), &["report"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    for f in ["split_scores.csv", "selection.json", "metrics.csv", "variance.json", "loss.csv", "online_curve.csv", "eval.csv"] {
        assert!(err.contains(f), "{f} not listed in {err}");
    }
}

#[test]
fn invalid_configs_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    for args in [&["embed", "--gamma", "1.5"][..], &["embed", "--epsilon", "0"], &["embed", "--embedder", "remote"]] {
        let o = intent(d.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let cfg = write_config(d.path(), "[env]\nopponent = \"greedy\"\n");
    assert_eq!(intent(d.path(), &["collect", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn report_summarizes_variance_and_is_idempotent() {
    for task in ["guess", "bargain", "negotiate"] {
        let d = tempfile::tempdir().unwrap();
        let cfg = write_config(d.path(), &format!("[env]\ntask = \"{task}\"\ngames = 300\n"));
        let o = intent(d.path(), &["pipeline", "--config", &cfg]);
        assert!(o.status.success(), "{}", stderr(&o));
        let summary = fs::read_to_string(d.path().join("report/summary.txt")).unwrap();
        assert!(summary.contains("Var(A) =") && summary.contains("Var(Ã) =") && summary.contains("Var(Ã)/Var(A) ="), "{summary}");
        let ratio: f64 = summary
            .lines()
            .find_map(|l| l.strip_prefix("Var(Ã)/Var(A) = "))
            .unwrap()
            .trim()
            .parse()
            .unwrap();
        assert!(ratio < 1.0, "{task}: {ratio}");

        fs::remove_file(d.path().join("manifests/report.json")).unwrap();
        let before = fs::read(d.path().join("report/summary.txt")).unwrap();
        assert!(intent(d.path(), &["report", "--config", &cfg]).status.success());
        assert_eq!(fs::read(d.path().join("report/summary.txt")).unwrap(), before);
    }
}

#[test]
fn external_logs_feed_the_pipeline() {
    let src = tempfile::tempdir().unwrap();
    assert!(intent(src.path(), &["collect", "--games", "50"]).status.success());
    let d = tempfile::tempdir().unwrap();
    let logs = src.path().join("trajectories.jsonl");
    let cfg = write_config(d.path(), &format!("[paths]\nlogs = {:?}\n", logs.display().to_string()));
    let o = intent(d.path(), &["collect", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&logs).unwrap(), fs::read(d.path().join("trajectories.jsonl")).unwrap());
}
