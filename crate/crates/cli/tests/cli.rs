use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgdf"))
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dgdf")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate_toy(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let toy = config("toy.json");
    ok(&run(&["generate", "--config", p(&toy), "--out", p(&out)]));
    out
}

#[test]
fn generate_is_byte_identical_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let toy = config("toy.json");
    let a = dir.path().join("a.csv");
    let stdout = ok(&run(&["generate", "--config", p(&toy), "--out", p(&a)]));
    assert!(stdout.contains("n_clicks=1000"), "{stdout}");
    assert!(
        stdout.contains("cvr=") && stdout.contains("delay_cdf@0.25h="),
        "{stdout}"
    );
    let b = generate_toy(dir.path(), "b.csv");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let c = dir.path().join("c.csv");
    ok(&run(&[
        "generate",
        "--config",
        p(&toy),
        "--out",
        p(&c),
        "--seed",
        "5",
        "--n-clicks",
        "300",
    ]));
    let text = fs::read_to_string(&c).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert!(text.starts_with("sample_id,user_id,item_id,click_ts,conversion_ts,"));
}

#[test]
fn usage_and_config_errors_exit_with_code_2() {
    let out = run(&["generate", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"pipeline": {"window_hrs": 1.0}}"#).unwrap();
    let out = run(&[
        "generate",
        "--config",
        p(&bad),
        "--out",
        p(&dir.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("window_hrs"));

    let toy = config("toy.json");
    let out = run(&[
        "generate",
        "--config",
        p(&toy),
        "--out",
        "x.csv",
        "--window-hours",
        "48",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let toy = config("toy.json");
    let log = dir.path().join("log.csv");
    fs::write(
        &log,
        "sample_id,user_id,item_id,click_ts,conversion_ts,uf_0\n0,1,2,10,5,0.5\n",
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        p(&toy),
        "--data",
        p(&log),
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 2"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = run(&[
        "train",
        "--config",
        p(&toy),
        "--data",
        p(&dir.path().join("missing.csv")),
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["case-study", "--run", p(&dir.path().join("nothing"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_writes_a_reproducible_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let log = generate_toy(dir.path(), "log.csv");
    let toy = config("toy.json");
    let train = |name: &str| {
        let out = dir.path().join(name);
        let start = Instant::now();
        let stdout = ok(&run(&[
            "train",
            "--config",
            p(&toy),
            "--data",
            p(&log),
            "--out",
            p(&out),
        ]));
        assert!(start.elapsed() < Duration::from_secs(60));
        assert!(stdout.starts_with("policy=DGDFEM"), "{stdout}");
        out
    };
    let a = train("run_a");
    for f in [
        "params.bin",
        "step_metrics.csv",
        "slot_metrics.csv",
        "pretrain_steps.csv",
        "config.json",
        "filter_weights.csv",
        "conversions.csv",
    ] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let b = train("run_b");
    for f in ["slot_metrics.csv", "step_metrics.csv", "params.bin"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let stdout = ok(&run(&["case-study", "--run", p(&a), "--window-hours", "8"]));
    assert!(
        stdout.lines().last().unwrap().starts_with("pearson_r="),
        "{stdout}"
    );
    let series = dir.path().join("series.csv");
    let stdout = ok(&run(&["case-study", "--run", p(&a), "--out", p(&series)]));
    assert_eq!(stdout.lines().count(), 1);
    assert!(fs::read_to_string(&series).unwrap().lines().count() > 2);
}

#[test]
fn compare_prints_ranking_and_slot_rows() {
    let dir = tempfile::tempdir().unwrap();
    let log = generate_toy(dir.path(), "log.csv");
    let toy = config("toy.json");
    let stdout = ok(&run(&[
        "compare",
        "--config",
        p(&toy),
        "--data",
        p(&log),
        "--policies",
        "DGDFEM,FNW,ORACLE",
    ]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines[0].starts_with("rank"));
    for policy in ["DGDFEM", "FNW", "ORACLE"] {
        assert!(lines[1..4].iter().any(|l| l.contains(policy)), "{stdout}");
    }
    let header = lines
        .iter()
        .position(|l| *l == "slot_start,policy,auc,nll")
        .unwrap();
    let rows = &lines[header + 1..];
    assert!(!rows.is_empty() && rows.len().is_multiple_of(3), "{stdout}");

    let out = dir.path().join("cmp");
    let stdout = ok(&run(&[
        "compare",
        "--config",
        p(&toy),
        "--data",
        p(&log),
        "--policies",
        "DGDFEM,FNW,ORACLE",
        "--out",
        p(&out),
        "--parallel",
    ]));
    assert_eq!(stdout.lines().count(), 4);
    let csv = fs::read_to_string(out.join("slot_metrics.csv")).unwrap();
    assert_eq!(csv.lines().skip(1).collect::<Vec<_>>(), rows);
}
