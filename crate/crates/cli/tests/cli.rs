use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set", "n_users=30", "--set", "n_items=60", "--set", "n_sessions=400", "--set", "n_item_clusters=4", "--set", "max_epochs=3",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cocorec")).args(args).env("RUST_LOG", "warn").output().expect("spawn cocorec")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) -> String {
    let data = dir.join("data.txt").to_str().unwrap().to_owned();
    let mut args = vec!["synth", "--output", &data];
    args.extend(SMALL);
    ok(&args);
    data
}

fn raw_log(dir: &Path) -> String {
    let path = dir.join("log.tsv");
    let mut text = String::from("user\titem\ttimestamp\n");
    for u in 0..6 {
        for s in 0..3 {
            for k in 0..4 {
                let ts = 1_600_000_000 + s * 86_400 + k * 60 + u * 7;
                text.push_str(&format!("u{u}\ti{}\t{ts}\n", (u + s + k) % 9));
            }
        }
    }
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--cases", "4"]);
    assert!(stdout.contains("all 4 gradient checks within 1e-4"), "{stdout}");
}

#[test]
fn train_then_recommend_prints_k_lines() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ck = dir.path().join("model.bin");
    let ck = ck.to_str().unwrap();
    let mut args = vec!["train", "--data", &data, "--fold", "0", "--output", ck];
    args.extend(SMALL);
    ok(&args);
    let report = std::fs::read_to_string(format!("{ck}.report.txt")).unwrap();
    assert!(report.contains("# max_epochs = 3"), "{report}");

    let stdout = ok(&["recommend", "--checkpoint", ck, "--data", &data, "--user", "u0", "--context", "i0,i1", "-k", "5"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5, "{stdout}");
    for (r, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert_eq!(fields[0], (r + 1).to_string());
        assert!(fields[2].parse::<f64>().is_ok(), "{line}");
    }

    let csv = dir.path().join("brm.csv");
    let stdout = ok(&["eval", "--data", &data, "--checkpoint", ck, "--fold", "0", "--model", "brm", "--output", csv.to_str().unwrap()]);
    assert!(stdout.contains("# model = brm"), "{stdout}");
    assert!(std::fs::read_to_string(csv).unwrap().lines().count() >= 2);

    let bad = run(&["recommend", "--checkpoint", ck, "--data", &data, "--user", "nobody", "--context", "i0"]);
    assert!(!bad.status.success());
}

#[test]
fn sknn_eval_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let csv = dir.path().join("sknn.csv");
    ok(&["eval", "--data", &data, "--model", "sknn", "--fold", "0,1", "--output", csv.to_str().unwrap()]);
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.lines().count() >= 3, "{text}");
}

#[test]
fn missing_and_empty_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let missing = missing.to_str().unwrap();
    let out = dir.path().join("out.txt");
    let out = out.to_str().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let empty = empty.to_str().unwrap();

    for args in [
        vec!["prepare", missing, "--output", out],
        vec!["prepare", empty, "--output", out],
        vec!["train", "--data", missing, "--output", out],
        vec!["train", "--data", empty, "--output", out],
        vec!["eval", "--data", empty, "--model", "sknn"],
        vec!["recommend", "--checkpoint", empty, "--data", empty, "--user", "u0", "--context", "i0"],
    ] {
        let res = run(&args);
        assert!(!res.status.success(), "{args:?} should fail");
        assert!(!res.stderr.is_empty(), "{args:?} should explain itself");
    }
}

#[test]
fn config_file_keys_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let log = raw_log(dir.path());
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# comment\nmin_interactions = 1\nn_folds = 2\ngap_hours = 1\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let snap = dir.path().join("snap.txt");
    let snap = snap.to_str().unwrap();

    // 1h gap splits the days apart; a 48h flag override merges them
    let split = ok(&["prepare", &log, "--output", snap, "--config", cfg]);
    let merged = ok(&["prepare", &log, "--output", snap, "--config", cfg, "--gap-hours", "48"]);
    assert_ne!(split, merged);

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    let res = run(&["prepare", &log, "--output", snap, "--config", bad.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("no_such_key"));
}

#[test]
fn prepare_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let log = raw_log(dir.path());
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        ok(&["prepare", &log, "--output", p.to_str().unwrap(), "--set", "min_interactions=1", "--set", "n_folds=2"]);
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}
