//! Command-line behavior: exit codes, flag validation, manifests, and the
//! files each subcommand leaves behind.

use duoseg::cli::run_main;

fn temp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("duoseg_cli_{tag}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[test]
fn missing_command_is_a_usage_error() {
    assert_eq!(run_main(&[]), 1);
    assert_eq!(run_main(&args(&["no-such-command"])), 1);
}

#[test]
fn unknown_flags_are_rejected() {
    assert_eq!(run_main(&args(&["train", "--frobnicate", "1"])), 1);
    assert_eq!(run_main(&args(&["variance-study", "--epochs", "3"])), 1);
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = temp_dir("badvals");
    let out = dir.to_string_lossy().into_owned();
    assert_eq!(
        run_main(&args(&["train", "--tau", "2.0", "--out", &out])),
        1
    );
    assert_eq!(
        run_main(&args(&["train", "--epochs", "zero", "--out", &out])),
        1
    );
    assert_eq!(
        run_main(&args(&["train", "--variant", "NOPE", "--out", &out])),
        1
    );
    assert_eq!(
        run_main(&args(&["variance-study", "--rho", "1.5", "--out", &out])),
        1
    );
}

#[test]
fn train_writes_manifest_losses_metrics_and_checkpoint() {
    let dir = temp_dir("train");
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 2, "steps_per_epoch": 2, "eval_scenes": 2, "labeled_scenes": 2, "unlabeled_scenes": 4}"#,
    )
    .unwrap();
    let out = dir.join("run");
    let code = run_main(&args(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    for file in ["manifest.json", "losses.csv", "metrics.csv"] {
        assert!(out.join(file).is_file(), "{file} missing");
    }
    assert!(out.join("checkpoints/final.ckpt").is_file());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["seed"], 3);
    assert_eq!(manifest["config"]["epochs"], 2);

    let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 2 * 2, "header plus one row per step");
    assert!(losses.starts_with("step,ce,pl,consist,reg,total,mask_fraction"));
}

#[test]
fn eval_reads_a_checkpoint_back() {
    let dir = temp_dir("eval");
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 1, "steps_per_epoch": 2, "eval_scenes": 2, "labeled_scenes": 2, "unlabeled_scenes": 4}"#,
    )
    .unwrap();
    let train_out = dir.join("train");
    assert_eq!(
        run_main(&args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ])),
        0
    );
    let eval_out = dir.join("eval");
    let code = run_main(&args(&[
        "eval",
        "--ckpt",
        train_out.join("checkpoints/final.ckpt").to_str().unwrap(),
        "--config",
        train_out.join("manifest.json").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,miou,pixel_acc"));
    assert_eq!(metrics.lines().count(), 2);

    // Missing --ckpt is a usage error.
    assert_eq!(
        run_main(&args(&["eval", "--out", eval_out.to_str().unwrap()])),
        1
    );
}

#[test]
fn variance_study_rerun_is_byte_identical() {
    let a = temp_dir("var_a");
    let b = temp_dir("var_b");
    for dir in [&a, &b] {
        let code = run_main(&args(&[
            "variance-study",
            "--rho",
            "0.5",
            "--trials",
            "20000",
            "--seed",
            "9",
            "--out",
            dir.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
    }
    assert_eq!(
        std::fs::read(a.join("variance.csv")).unwrap(),
        std::fs::read(b.join("variance.csv")).unwrap()
    );
}

#[test]
fn gradcheck_writes_all_pass_rows() {
    let dir = temp_dir("gradcheck");
    let code = run_main(&args(&["gradcheck", "--out", dir.to_str().unwrap()]));
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(dir.join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("case,coords,max_rel_err,passed"));
    assert!(csv.lines().skip(1).all(|line| line.ends_with("true")));
}

#[test]
fn dump_scenes_writes_ppm_pgm_pairs() {
    let dir = temp_dir("scenes");
    let code = run_main(&args(&[
        "dump-scenes",
        "--count",
        "3",
        "--beta",
        "0.5",
        "--out",
        dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    for index in 0..3 {
        let ppm = dir.join(format!("scenes/scene_{index:04}.ppm"));
        let pgm = dir.join(format!("scenes/scene_{index:04}.pgm"));
        assert!(ppm.is_file() && pgm.is_file());
        let bytes = std::fs::read(&ppm).unwrap();
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    }
}

#[test]
fn ablate_writes_per_run_rows_for_all_variants() {
    let dir = temp_dir("ablate");
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 1, "steps_per_epoch": 2, "eval_scenes": 2, "labeled_scenes": 2, "unlabeled_scenes": 4}"#,
    )
    .unwrap();
    let out = dir.join("run");
    let code = run_main(&args(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,seed,miou,pixel_acc,terminal_loss"));
    assert_eq!(csv.lines().count(), 1 + 5 * 2, "header plus 5 variants x 2 seeds");
    for name in ["STB", "STFW", "DTFW", "DTC", "COMPLETE"] {
        assert!(csv.contains(name), "{name} missing from ablation.csv");
    }
}

#[test]
fn nonfinite_abort_exits_two() {
    let dir = temp_dir("blowup");
    let cfg = dir.join("cfg.json");
    // A learning rate large enough to blow the loss up within two epochs.
    std::fs::write(
        &cfg,
        r#"{"epochs": 8, "steps_per_epoch": 8, "eval_scenes": 2, "labeled_scenes": 2, "unlabeled_scenes": 4, "lr": 1000000.0}"#,
    )
    .unwrap();
    let code = run_main(&args(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]));
    assert_eq!(code, 2, "numeric abort must exit 2");
}
