use std::fs;
use std::process::Command;

const TINY: &str = r#"
[stream]
num_tasks = 3
classes_per_task = 2
shots_per_class = 2
eval_per_class = 2

[optim]
epochs_per_task = 2
group_size = 4
"#;

fn rapo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rapo"))
}

#[test]
fn run_then_report_reproduces_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("runs");

    let status = rapo()
        .args(["run", "--seeds", "0,1", "--algo", "grpo,rapo", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for algo in ["grpo", "rapo"] {
        for seed in [0, 1] {
            let run = out.join(algo).join(format!("seed_{seed}"));
            for f in ["steps.csv", "evalmatrix.csv", "record.json"] {
                assert!(run.join(f).is_file(), "{} missing", run.join(f).display());
            }
        }
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("algo,A_mean,A_std,F_mean,F_std\n"));
    assert_eq!(summary.lines().count(), 3);

    fs::remove_file(out.join("summary.csv")).unwrap();
    let report = rapo().arg("report").arg("--in").arg(&out).output().unwrap();
    assert!(report.status.success());
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap(), summary);
    assert!(String::from_utf8(report.stdout).unwrap().contains("rapo"));
}

#[test]
fn resume_after_completion_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("runs");
    let run = |resume: bool| {
        let mut c = rapo();
        c.args(["run", "--seeds", "3", "--algo", "rapo", "--config"]).arg(&cfg).arg("--out").arg(&out);
        if resume {
            c.arg("--resume");
        }
        assert!(c.status().unwrap().success());
        fs::read(out.join("summary.csv")).unwrap()
    };
    let first = run(false);
    assert_eq!(run(true), first);
}

#[test]
fn bad_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = rapo()
        .args(["run", "--algo", "ppo", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let suite = rapo().args(["verify", "--suite", "nope"]).output().unwrap();
    assert_eq!(suite.status.code(), Some(2));
    let empty = rapo().arg("report").arg("--in").arg(dir.path().join("absent")).output().unwrap();
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn verify_properties_prints_one_line_per_criterion() {
    let out = rapo().args(["verify", "--suite", "properties"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| l.contains("criterion")).collect();
    assert_eq!(lines.len(), 7, "{text}");
    assert!(lines.iter().all(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]")));
}
