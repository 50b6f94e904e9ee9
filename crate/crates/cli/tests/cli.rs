use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
steps = 20

[train]
epochs = 2
batch_size = 4
episodes = 12
seq_len = 20
val_fraction = 0.25
checkpoint_every = 1

[bench]
episodes = 4
tune_trials = 2
tune_episodes = 3
timing_episodes = 1
"#;

fn maukf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maukf"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_then_bench_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();

    ok(&maukf(d, &["--config", "tiny.cfg", "--out", "run", "train"]));
    for f in ["best.json", "train_state.json", "training_log.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let out = maukf(d, &["inspect-ckpt", "run/best.json"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("w_in"));

    let resumed = maukf(d, &["--config", "tiny.cfg", "--out", "run", "train", "--resume", "run/train_state.json"]);
    ok(&resumed);

    let bench = |out: &str| {
        ok(&maukf(d, &["--config", "tiny.cfg", "--out", out, "bench", "--checkpoint", "run/best.json"]));
        fs::read(d.join(out).join("report.csv")).unwrap()
    };
    let a = bench("a");
    let b = bench("b");
    assert_eq!(a, b);
    for f in ["report.txt", "trial_log.csv", "weights.svg", "trajectory_ma_ukf.svg", "trajectory_imm_ukfs.svg"] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }

    let report = maukf(d, &["--out", "a", "report"]);
    ok(&report);
    assert!(String::from_utf8_lossy(&report.stdout).contains("MA-UKF"));
}

#[test]
fn gen_and_tune_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(&maukf(d, &["--config", "tiny.cfg", "--episodes", "3", "gen", "--regime", "eval-weave"]));
    let manifest = fs::read_dir(d.join("out/eval-weave")).unwrap().count();
    assert!(manifest >= 2);
    ok(&maukf(d, &["--config", "tiny.cfg", "--threads", "1", "tune"]));
    let log = fs::read_to_string(d.join("out/trial_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 3);
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "seed = 1\nbogus = 2\n").unwrap();
    assert_eq!(maukf(d, &["--config", "bad.cfg", "tune"]).status.code(), Some(1));
    fs::write(d.join("neg.cfg"), "dt = -0.1\n").unwrap();
    assert_eq!(maukf(d, &["--config", "neg.cfg", "tune"]).status.code(), Some(1));
    assert_eq!(maukf(d, &["bench"]).status.code(), Some(1));
    assert_eq!(maukf(d, &["inspect-ckpt", "missing.json"]).status.code(), Some(3));
    assert_eq!(maukf(d, &["--out", "nowhere", "report"]).status.code(), Some(3));
}
