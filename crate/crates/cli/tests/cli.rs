use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
desk = true
[synth]
train_videos = 1
test_videos = 1
height = 24
width = 24
frames = 5
objects = 3
[pinv]
patches = 4
patch_size = 12
sigmas = [0.0, 1.0]
[pinv.train]
steps = 30
[train]
patch_size = 12
variance_threshold = 0.0
patch_attempts = 4
sigmas = [0.0, 1.0]
epochs = 2
batch_size = 4
[eval]
sigmas = [0.0, 1.0]
"#;

fn mdvsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdvsr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn mdvsr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn pipeline_then_sr_writes_one_image() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    for cmd in ["synth", "learn-pinv", "train", "eval"] {
        let o = mdvsr(dir.path(), &[cmd, "--config", "tiny.toml", "--out", "run"]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let run = dir.path().join("run");
    for f in [
        "config.toml",
        "config.input.toml",
        "run.log",
        "report.txt",
        "report.csv",
        "train_curve.csv",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("config.input.toml")).unwrap(), TINY);

    let frames: Vec<String> = (0..5).map(|i| format!("run/test/video00/frame{i:03}.pgm")).collect();
    let mut args = vec!["sr", "--config", "tiny.toml", "--out", "run", "--sigma", "1.0"];
    args.extend(frames.iter().map(String::as_str));
    let o = mdvsr(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let img = mdvsr::io::load_image(run.join("sr.pgm"), true).unwrap();
    assert_eq!(img.shape(), &[1, 48, 48]);

    let short = mdvsr(
        dir.path(),
        &[
            "sr",
            "--config",
            "tiny.toml",
            "--out",
            "run",
            "--sigma",
            "1",
            &frames[0],
        ],
    );
    assert_eq!(code(&short), 2);
    let no_sigma = mdvsr(dir.path(), &["sr", "--config", "tiny.toml", "--out", "run", &frames[0]]);
    assert_eq!(code(&no_sigma), 2);
}

#[test]
fn gradcheck_passes_and_corrupt_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mdvsr(dir.path(), &["gradcheck", "--out", "a"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let report = std::fs::read_to_string(dir.path().join("a/gradcheck.txt")).unwrap();
    assert!(report.lines().all(|l| l.starts_with("PASS")), "{report}");

    let bad = mdvsr(dir.path(), &["gradcheck", "--corrupt", "--out", "b"]);
    assert_eq!(code(&bad), 5);
    let report = std::fs::read_to_string(dir.path().join("b/gradcheck.txt")).unwrap();
    assert!(report.lines().all(|l| l.starts_with("FAIL")), "{report}");
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdvsr(dir.path(), &["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes_for_bad_config_and_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seed = 1\nsurprise = true\n").unwrap();
    assert_eq!(code(&mdvsr(dir.path(), &["synth", "--config", "bad.toml"])), 2);
    assert_eq!(code(&mdvsr(dir.path(), &["synth", "--config", "absent.toml"])), 3);
    assert_eq!(code(&mdvsr(dir.path(), &["train", "--desk"])), 3);
    assert_eq!(code(&mdvsr(dir.path(), &["finetune-gan", "--desk"])), 3);
    // clap usage errors also exit with 2
    assert_eq!(code(&mdvsr(dir.path(), &["synth", "--factor", "5"])), 2);
}
