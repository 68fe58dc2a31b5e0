use std::path::Path;
use std::process::{Command, Output};

use tuna_core::data::pnm::write_ppm;
use tuna_core::tensor::Tensor;

fn tuna(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tuna"))
        .args(args)
        .env_remove("TUNA_SEED")
        .output()
        .expect("spawn tuna")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_toy(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "toy", "--out", p(out)];
    args.extend_from_slice(extra);
    tuna(&args)
}

#[test]
fn train_with_zero_iters_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train_toy(&out, &["--set", "train.iters=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.bin", "metrics.log", "config.cfg"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    // Resolved config is echoed before anything runs.
    assert!(stderr(&o).contains("train.iters = 0"));
    assert!(stderr(&o).contains("tuna.structure = parallel"));
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_toy(&dir.path().join("run"), &["--set", "train.iterz=5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.iterz"));
}

#[test]
fn missing_seed_exits_2_and_env_fills_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train_toy(&out, &["--set", "train.seed=unset", "--set", "train.iters=0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.seed"));

    let o = Command::new(env!("CARGO_BIN_EXE_tuna"))
        .args(["train", "--config", "toy", "--set", "train.seed=unset", "--set", "train.iters=0", "--out", p(&out)])
        .env("TUNA_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = std::fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(cfg.contains("train.seed = 17"));
}

#[test]
fn smoke_run_beats_uniform_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_toy(&dir.path().join("run"), &["--set", "train.iters=300", "--set", "train.eval_interval=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let loss: f64 = last
        .split_whitespace()
        .find_map(|t| t.strip_prefix("final_loss="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(loss < 3f64.ln(), "{last}");
}

#[test]
fn count_params_swin_l_adapters_only() {
    let o = tuna(&["count-params", "--config", "swin_l", "--filter", "adapters_only"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("filter=adapters_only count=4336664"));
    assert!(out.contains("adapters_only=4336664\n"));
    let frac = out.lines().find_map(|l| l.strip_prefix("trainable_fraction=")).unwrap();
    assert_eq!(frac.split('.').nth(1).unwrap().len(), 4, "{frac}");
}

#[test]
fn count_params_linear_probe_has_no_adapters() {
    let o = tuna(&["count-params", "--config", "toy_linear_probe"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("adapters_only=0\n"));
}

#[test]
fn gradcheck_passes_and_reports_coverage() {
    let o = tuna(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(!out.contains("FAIL"));
    assert!(!out.contains("missing") && out.contains("coverage "));
}

#[test]
fn perturbed_gradcheck_fails_by_name() {
    let o = tuna(&["gradcheck", "--perturb", "softmax"]);
    assert_ne!(code(&o), 0);
    assert!(stdout(&o).contains("FAIL tensor-core/softmax "));
    assert!(stderr(&o).contains("softmax"));
}

#[test]
fn gradcheck_unknown_module_is_config_error() {
    assert_eq!(code(&tuna(&["gradcheck", "--module", "nope"])), 2);
}

#[test]
fn data_stats_two_image_set() {
    let dir = tempfile::tempdir().unwrap();
    write_ppm(&dir.path().join("a.img.ppm"), &Tensor::zeros([3, 10, 10])).unwrap();
    write_ppm(&dir.path().join("b.img.ppm"), &Tensor::zeros([3, 10, 30])).unwrap();
    let o = tuna(&["data-stats", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("r_range=3.0 gini=0.25"), "{}", stdout(&o));
}

#[test]
fn data_stats_missing_dir_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tuna(&["data-stats", p(&dir.path().join("absent"))])), 1);
}

#[test]
fn gen_synth_round_trips_through_data_stats() {
    let dir = tempfile::tempdir().unwrap();
    let o = tuna(&["gen-synth", "--config", "toy", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = tuna(&["data-stats", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("n=16 r_range=1.0 gini=0.0"), "{}", stdout(&o));
}

#[test]
fn eval_checks_backbone_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&train_toy(&out, &["--set", "train.iters=0"])), 0);
    let ckpt = out.join("checkpoint.bin");

    let o = tuna(&["eval", "--checkpoint", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("mIoU="));
    assert_eq!(out.lines().count(), 2 + 3, "{out}");

    let o = tuna(&["eval", "--checkpoint", p(&ckpt), "--set", "backbone.seed=1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = tuna(&["eval", "--checkpoint", p(&ckpt), "--set", "backbone.seed=1", "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn eval_on_empty_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&train_toy(&out, &["--set", "train.iters=0"])), 0);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = tuna(&["eval", "--checkpoint", p(&out.join("checkpoint.bin")), "--data", p(&empty)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tuna(&["gen-synth", "--config", "toy", "--out", p(dir.path())])), 0);
    let o = tuna(&["eval", "--config", "toy", "--data", p(dir.path()), "--pred", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("mIoU=1.0000 mAcc=1.0000 aAcc=1.0000\n"), "{out}");
}

#[test]
fn corrupt_checkpoint_is_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(code(&tuna(&["eval", "--checkpoint", p(&bad)])), 1);
}
