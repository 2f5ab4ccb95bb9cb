use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[experiment]
n_stories = 24
n_eval = 4
[experiment.video]
n_videos = 12
n_eval = 3
[experiment.correction.solver]
n_steps = 10
[theory]
trials = 40
kl_pairs = 4
kl_mc_samples = 1000
eta_samples = 2000
clip_samples = 1000
"#;

fn acdc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acdc"))
        .args(args)
        .current_dir(dir)
        .env_remove("ACDC_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), format!("{SMALL}{extra}")).unwrap();
    tmp
}

fn pipeline(dir: &Path, cfg: &str, out: &str) {
    for cmd in [&["gen-data"][..], &["train"]] {
        let mut args = cmd.to_vec();
        args.extend(["--config", cfg, "--out", out]);
        let o = acdc(dir, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn invalid_configs_exit_with_code_one() {
    let tmp = setup("");
    fs::write(tmp.path().join("bad.toml"), "[experiment.story]\nn_characters = 0\n").unwrap();
    let o = acdc(tmp.path(), &["gen-data", "--config", "bad.toml", "--out", "r"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_characters"), "{}", stderr(&o));
    assert!(!tmp.path().join("r").exists());

    fs::write(tmp.path().join("typo.toml"), "seed = 1\nsed = 2\n").unwrap();
    let o = acdc(tmp.path(), &["gen-data", "--config", "typo.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sed") && stderr(&o).contains("line 2"), "{}", stderr(&o));

    assert_eq!(code(&acdc(tmp.path(), &["gen-data", "--config", "missing.toml"])), 1);
    assert_eq!(code(&acdc(tmp.path(), &["run", "--mode", "sideways"])), 1);
}

#[test]
fn gen_data_is_byte_reproducible_and_accepts_empty_corpora() {
    let tmp = setup("");
    pipeline(tmp.path(), "c.toml", "a");
    pipeline(tmp.path(), "c.toml", "b");
    assert_eq!(tree(&tmp.path().join("a/corpus")), tree(&tmp.path().join("b/corpus")));
    assert_eq!(tree(&tmp.path().join("a/checkpoints")), tree(&tmp.path().join("b/checkpoints")));

    fs::write(tmp.path().join("empty.toml"), "[experiment]\nn_stories = 0\n[experiment.video]\nn_videos = 0\n").unwrap();
    let o = acdc(tmp.path(), &["gen-data", "--config", "empty.toml", "--out", "e"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("e/corpus/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stories"].as_array().unwrap().len(), 0);
}

#[test]
fn missing_and_stale_artifacts_are_runtime_errors() {
    let tmp = setup("");
    let o = acdc(tmp.path(), &["train", "--config", "c.toml", "--out", "r"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gen-data"));
    pipeline(tmp.path(), "c.toml", "r");
    fs::write(tmp.path().join("c2.toml"), format!("{SMALL}[experiment.arm]\norder = 3\n")).unwrap();
    let o = acdc(tmp.path(), &["run", "--config", "c2.toml", "--out", "r"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));
    let o = acdc(tmp.path(), &["run", "--config", "c.toml", "--out", "r", "--seed", "9"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));
}

#[test]
fn locked_directories_are_refused() {
    let tmp = setup("");
    fs::create_dir(tmp.path().join("r")).unwrap();
    fs::write(tmp.path().join("r/.lock"), "").unwrap();
    let o = acdc(tmp.path(), &["gen-data", "--config", "c.toml", "--out", "r"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn baseline_matches_zero_correction_story_mode() {
    let tmp = setup("");
    pipeline(tmp.path(), "c.toml", "r");
    let o = acdc(tmp.path(), &["run", "--config", "c.toml", "--out", "r", "--mode", "baseline"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let baseline = fs::read_to_string(tmp.path().join("r/run-baseline/metrics.csv")).unwrap();
    assert_eq!(baseline.lines().count(), 1 + 4 * 6);

    fs::write(tmp.path().join("zero.toml"), format!("{SMALL}[experiment.correction]\ncorrect_first = 0\n")).unwrap();
    let o = acdc(tmp.path(), &["run", "--config", "zero.toml", "--out", "r", "--mode", "story"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let story = fs::read_to_string(tmp.path().join("r/run-story/metrics.csv")).unwrap();
    assert_eq!(story, baseline);
}

#[test]
fn runs_reproduce_from_their_snapshot_and_reports_are_idempotent() {
    let tmp = setup("");
    pipeline(tmp.path(), "c.toml", "a");
    for mode in ["story", "video", "baseline"] {
        let o = acdc(tmp.path(), &["run", "--config", "c.toml", "--out", "a", "--mode", mode]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let snap = "a/run-story/config.toml";
    pipeline(tmp.path(), snap, "b");
    let o = acdc(tmp.path(), &["run", "--config", snap, "--out", "b", "--mode", "story"]);
    assert_eq!(code(&o), 0);
    for f in ["metrics.csv", "per_frame.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("a/run-story").join(f)).unwrap(),
            fs::read(tmp.path().join("b/run-story").join(f)).unwrap()
        );
    }
    let video = fs::read_to_string(tmp.path().join("a/run-video/metrics.csv")).unwrap();
    assert_eq!(video.lines().count(), 1 + 3 * 8);

    assert_eq!(code(&acdc(tmp.path(), &["report", "a"])), 0);
    let first = tree(&tmp.path().join("a/report"));
    assert_eq!(code(&acdc(tmp.path(), &["report", "--out", "a"])), 0);
    assert_eq!(first, tree(&tmp.path().join("a/report")));

    let md = fs::read_to_string(tmp.path().join("a/report/report.md")).unwrap();
    let baseline_section = md.split("## baseline run").nth(1).unwrap();
    assert!(!baseline_section.contains("corrected"));
    let grid = fs::read(tmp.path().join("a/report/story/story_0001_grid.pgm")).unwrap();
    let tile = 16 * 4;
    assert!(grid.starts_with(format!("P5\n{} {}\n255\n", 6 * tile, 2 * tile).as_bytes()));
}

#[test]
fn report_on_an_incomplete_run_warns_and_succeeds() {
    let tmp = setup("");
    pipeline(tmp.path(), "c.toml", "r");
    let o = acdc(tmp.path(), &["run", "--config", "c.toml", "--out", "r", "--mode", "baseline"]);
    assert_eq!(code(&o), 0);
    fs::remove_file(tmp.path().join("r/run-baseline/per_frame.csv")).unwrap();
    let o = acdc(tmp.path(), &["report", "r"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("per_frame.csv"));
    assert_eq!(code(&acdc(tmp.path(), &["report", "nowhere"])), 2);
}

#[test]
fn network_backend_writes_one_loss_row_per_step() {
    let net = "[experiment.diffusion]\nbackend = \"network\"\nhidden = [8]\n[experiment.diffusion.train]\nsteps = 3\nbatch_size = 4\n";
    let tmp = setup(net);
    pipeline(tmp.path(), "c.toml", "r");
    let trace = fs::read_to_string(tmp.path().join("r/logs/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
    let o = acdc(tmp.path(), &["run", "--config", "c.toml", "--out", "r", "--mode", "story"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn zero_training_steps_leave_the_initialization() {
    let net = "[experiment.diffusion]\nbackend = \"network\"\nhidden = [8]\n[experiment.diffusion.train]\nsteps = 0\n";
    let tmp = setup(net);
    pipeline(tmp.path(), "c.toml", "r");
    let fresh = fs::read(tmp.path().join("r/checkpoints/score.txt")).unwrap();
    fs::write(tmp.path().join("lr.toml"), format!("{SMALL}{net}learning_rate = 0.5\n")).unwrap();
    pipeline(tmp.path(), "lr.toml", "s");
    assert_eq!(fresh, fs::read(tmp.path().join("s/checkpoints/score.txt")).unwrap());
    let trace = fs::read_to_string(tmp.path().join("r/logs/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
}

#[test]
fn verify_theory_gates_on_consistent_checks_only() {
    let tmp = setup("");
    let o = acdc(tmp.path(), &["verify-theory", "--config", "c.toml", "--out", "t"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let summary = fs::read_to_string(tmp.path().join("t/theory/summary.txt")).unwrap();
    assert!(summary.contains("informational"));
    let kl = fs::read_to_string(tmp.path().join("t/theory/kl_curves.csv")).unwrap();
    assert_eq!(kl.lines().count(), 1 + 4 * 11);

    fs::write(tmp.path().join("k0.toml"), format!("{SMALL}lipschitz_k = 0.0\n")).unwrap();
    let o = acdc(tmp.path(), &["verify-theory", "--config", "k0.toml", "--out", "t"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn default_out_dir_comes_from_the_environment() {
    let tmp = setup("");
    let o = Command::new(env!("CARGO_BIN_EXE_acdc"))
        .args(["gen-data", "--config", "c.toml"])
        .current_dir(tmp.path())
        .env("ACDC_OUT", "outroot")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let runs: Vec<_> = fs::read_dir(tmp.path().join("outroot")).unwrap().collect();
    assert_eq!(runs.len(), 1);
}
