use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--set", "identities=6", "--set", "per_identity=8", "--seed", "5"];

fn tcpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcpm"))
        .args(args)
        .output()
        .expect("run tcpm")
}

fn ok(args: &[&str]) -> String {
    let out = tcpm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = ok(&[&["synth", "--out", s(&data)], SMALL].concat());
    let manifest = manifest.trim();
    assert!(Path::new(manifest).exists());

    let straight = dir.path().join("straight");
    ok(&[&["train", "--manifest", manifest, "--epochs", "2", "--out", s(&straight)], SMALL].concat());
    let metrics = std::fs::read_to_string(straight.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 1);

    // one epoch, then resume to two
    let resumed = dir.path().join("resumed");
    ok(&[&["train", "--manifest", manifest, "--epochs", "1", "--out", s(&resumed)], SMALL].concat());
    ok(&[
        &["train", "--manifest", manifest, "--epochs", "2", "--resume", "--out", s(&resumed)],
        SMALL,
    ]
    .concat());
    assert_eq!(
        std::fs::read(straight.join("checkpoint.pamf")).unwrap(),
        std::fs::read(resumed.join("checkpoint.pamf")).unwrap()
    );

    let ck = straight.join("checkpoint.pamf");
    let eval_dir = dir.path().join("eval");
    let printed = ok(&["eval", "--checkpoint", s(&ck), "--manifest", manifest, "--baseline", "--out", s(&eval_dir)]);
    let written = std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap();
    assert_eq!(printed, written);
    let summary: serde_json::Value = serde_json::from_str(&written).unwrap();
    assert!(summary["map"].as_f64().unwrap() > summary["random_baseline_map"].as_f64().unwrap());
    let rankings = std::fs::read_to_string(eval_dir.join("rankings.csv")).unwrap();
    assert!(rankings.starts_with("query_id,ap,first_match_rank,top10"));

    let single = dir.path().join("single");
    ok(&[
        "eval", "--checkpoint", s(&ck), "--manifest", manifest, "--out", s(&single),
        "--set", "protocol=single-gallery",
    ]);
    let table = ok(&["report", s(&eval_dir.join("metrics.json")), s(&single.join("metrics.json"))]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("eval") && table.contains("single"));
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "identities = 6\nper_identity = 8\nbranches = one\n").unwrap();
    let data = dir.path().join("data");
    let manifest = ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let out = dir.path().join("one");
    ok(&["train", "--config", s(&cfg), "--manifest", manifest.trim(), "--epochs", "1", "--memory", "off", "--loss", "triplet", "--out", s(&out)]);
    assert!(out.join("checkpoint.pamf").exists());
}

#[test]
fn gradcheck_command() {
    let table = ok(&["gradcheck", "--configs", "2"]);
    assert!(table.contains("triplet_center") && !table.contains("FAIL"));
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = tcpm(&["train", "--set", "epochs=-1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=config"));

    assert_eq!(code(&tcpm(&["synth", "--set", "no_such_key=1"])), 2);
    assert_eq!(code(&tcpm(&["train", "--beta", "0"])), 2);
    assert_eq!(code(&tcpm(&["train"])), 2); // no manifest

    let missing = dir.path().join("missing.csv");
    let out = tcpm(&["train", "--manifest", s(&missing)]);
    assert_eq!(code(&out), 3);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "sample_id,identity,camera,split,source\na,1,c1,sideways,x.pamf\n").unwrap();
    let out = tcpm(&["train", "--manifest", s(&bad)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("split"));

    let garbage = dir.path().join("ck.pamf");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&tcpm(&["eval", "--checkpoint", s(&garbage), "--manifest", s(&bad)])), 3);
}
