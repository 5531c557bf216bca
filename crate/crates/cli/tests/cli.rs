use std::path::Path;
use std::process::{Command, Output};

fn rfcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfcn")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "schema_version = 1

[data]
side = 64
train_exams = 3
test_exams = 6
prevalence = 0.5

[train]
epochs = 1
norm_warmup_images = 4
";

#[test]
fn full_pipeline_on_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let common = ["--config", "small.toml", "--out", "run"];
    for step in [&["gen-data"][..], &["train"], &["infer"], &["evaluate"]] {
        let args: Vec<&str> = step.iter().chain(&common).copied().collect();
        let o = rfcn(&args, dir.path());
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
        if step[0] == "evaluate" {
            let out = stdout(&o);
            assert!(out.contains("plain: breast-wise AUC") && out.contains("augmented: breast-wise AUC"), "{out}");
        }
    }
    let run = dir.path().join("run");
    for f in [
        "config.toml",
        "model.weights",
        "train_log.tsv",
        "scores.tsv",
        "roc_breast_plain.tsv",
        "roc_subject_augmented.tsv",
        "train/manifest.tsv",
        "test/manifest.tsv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let scores = std::fs::read_to_string(run.join("scores.tsv")).unwrap();
    assert!(scores.starts_with("subject_id\tlaterality\tview\trot\tflip\tscore\n"));
    assert_eq!(scores.lines().count(), 1 + 6 * 4 * 8);
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn misspelled_key_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "schema_version = 1\n[train]\nepochz = 3\n").unwrap();
    let o = rfcn(&["gen-data", "--config", "bad.toml"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error\tconfig\t") && err.contains("epochz"), "{err}");

    let o = rfcn(&["gen-data", "--set", "data.sied=3"], dir.path());
    assert!(!o.status.success() && stderr(&o).contains("sied"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rfcn(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error\tusage\t"));
}

#[test]
fn missing_model_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rfcn(&["infer", "--out", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error\tio\t"), "{}", stderr(&o));
}

#[test]
fn memplan_reports_growth() {
    let dir = tempfile::tempdir().unwrap();
    let o = rfcn(&["memplan", "--sides", "512,1024", "--budget-mib", "256"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("x4.000"), "{out}");
    assert!(out.contains("largest input side within 256 MiB"));
    let tsv = std::fs::read_to_string(dir.path().join("run/memplan.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 3 * 2);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = rfcn(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(dir.path().join("run/gradcheck.tsv")).unwrap();
    assert!(tsv.lines().skip(1).all(|l| l.ends_with("\tPASS")), "{tsv}");
    assert_eq!(tsv.lines().count(), 11);
}
