use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use motionctl::rgf::GmmModel;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_motionctl"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "motionctl {args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny pipeline shared by the tests: clips, dataset, checkpoint, mixture.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let p = |n: &str| root.join(n);
        ok(&["synth", "--out", s(&p("raw")), "--clips", "60", "--seed", "3"]);
        ok(&["preprocess", "--input", s(&p("raw")), "--out", s(&p("data"))]);
        ok(&[
            "train", "--data", s(&p("data")), "--out", s(&p("model.ckpt")), "--preset", "tiny",
            "--epochs", "2", "--lr", "1e-3",
        ]);
        ok(&[
            "fit-gmm", "--data", s(&p("data")), "--out", s(&p("ref.gmm")), "--k", "3", "--max-iter", "20",
        ]);
        Fixture { _dir: dir, root }
    })
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--data", "x"]).status.code(), Some(1));
    let missing = run(&["train", "--data", "/nonexistent/data", "--out", "/tmp/never.ckpt"]);
    assert_eq!(missing.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rat = 3\n").unwrap();
    let bad = run(&["--config", s(&cfg), "synth", "--out", s(&dir.path().join("o"))]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn pipeline_artifacts_carry_their_config() {
    let f = fixture();
    for a in ["raw", "data", "model.ckpt", "ref.gmm"] {
        let cfg = f.root.join(format!("{a}.config.toml"));
        let text = std::fs::read_to_string(&cfg).unwrap();
        assert!(text.contains("[train]") && text.contains("[episode]"), "{a}");
    }
    let loss = std::fs::read_to_string(f.root.join("model.ckpt.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert_eq!(GmmModel::load(&f.root.join("ref.gmm")).unwrap().k(), 3);
}

fn generate(out: &Path, extra: &[&str]) -> Vec<u8> {
    let ckpt = fixture().root.join("model.ckpt");
    let mut args = vec![
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(out),
        "--goal",
        "right_wrist=2.5,0.5,1.1@239",
        "--seed",
        "4",
        "--duration",
        "60",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    let mut bytes = std::fs::read(out).unwrap();
    bytes.extend(std::fs::read(format!("{}.csv", out.display())).unwrap());
    bytes
}

#[test]
fn rgf_off_matches_zero_alpha_byte_for_byte() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let gmm = f.root.join("ref.gmm");
    let off = generate(&dir.path().join("off.mclip"), &["--gmm", s(&gmm), "--rgf", "off"]);
    let zero = generate(&dir.path().join("zero.mclip"), &["--gmm", s(&gmm), "--alpha", "0"]);
    assert_eq!(off, zero);
    let on = generate(&dir.path().join("on.mclip"), &["--gmm", s(&gmm), "--alpha", "0.05"]);
    assert_ne!(off, on);
    let again = generate(&dir.path().join("on2.mclip"), &["--gmm", s(&gmm), "--alpha", "0.05"]);
    assert_eq!(on, again);
    let missing = run(&[
        "generate", "--checkpoint", s(&f.root.join("model.ckpt")), "--out", s(&dir.path().join("x")),
        "--goal", "right_wrist=1,0,1@10", "--rgf", "on",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn generate_reads_goals_from_config() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[episode]\nduration = 60\nseed = 4\njoints = [\"right_wrist\"]\n\
         [episode.goals.joints.right_wrist]\nposition = [2.5, 0.5, 1.1]\nframe = 239\n",
    )
    .unwrap();
    let from_file = dir.path().join("file.mclip");
    ok(&[
        "--config", s(&cfg), "generate", "--checkpoint", s(&f.root.join("model.ckpt")), "--out", s(&from_file),
    ]);
    let from_flags = generate(&dir.path().join("flags.mclip"), &[]);
    let mut bytes = std::fs::read(&from_file).unwrap();
    bytes.extend(std::fs::read(format!("{}.csv", from_file.display())).unwrap());
    assert_eq!(bytes, from_flags);
}

#[test]
fn evaluate_single_grid_has_3750_rows() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    // Two-frame episodes keep the full grid cheap; the row count is what is
    // under test here.
    let cfg = dir.path().join("eval.toml");
    std::fs::write(&cfg, "[grid]\nduration = 2\n").unwrap();
    let out = dir.path().join("single.csv");
    ok(&[
        "--config", s(&cfg), "evaluate", "--checkpoint", s(&f.root.join("model.ckpt")), "--data",
        s(&f.root.join("data")), "--protocol", "single", "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3751);
    assert!(text.starts_with("index,initial,"));
    let summary = std::fs::read_to_string(format!("{}.summary.json", out.display())).unwrap();
    assert!(summary.contains("\"episodes\": 3750"));
}

#[test]
fn evaluate_subset_with_feedback() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seq.csv");
    let stdout = ok(&[
        "evaluate", "--checkpoint", s(&f.root.join("model.ckpt")), "--data", s(&f.root.join("data")),
        "--protocol", "sequential", "--out", s(&out), "--stride", "500", "--gmm",
        s(&f.root.join("ref.gmm")),
    ]);
    assert!(stdout.contains("8 episodes"), "{stdout}");
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 9);
}

#[test]
fn fit_gmm_at_full_size() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k50.gmm");
    ok(&[
        "fit-gmm", "--data", s(&f.root.join("data")), "--out", s(&out), "--k", "50", "--max-iter", "1000",
        "--max-features", "600",
    ]);
    assert_eq!(GmmModel::load(&out).unwrap().k(), 50);
}
