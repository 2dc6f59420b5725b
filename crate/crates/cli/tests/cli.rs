use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "name": "cli",
  "backbone": {"arch": "unet_encoder", "stage_channel_plan": [4, 8]},
  "age_train": {"batch_size": 40, "max_epochs": 2, "ma_window": 1},
  "seeds": [1],
  "paths": {"train_manifest": "data/train.csv", "val_manifest": "data/val.csv", "test_manifest": "data/test.csv", "output_dir": "out"},
  "synth": {
    "config": {"volume_shape": [48, 48, 48], "seed": 11},
    "cohort": {"counts": [
      {"split": "train", "group": "CN", "count": 3},
      {"split": "val", "group": "CN", "count": 2},
      {"split": "test", "group": "CN", "count": 2},
      {"split": "test", "group": "MCI", "count": 2},
      {"split": "test", "group": "AD", "count": 2}]}
  }
}"#;

fn brainage(dir: &Path, args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_brainage"));
    cmd.args(args).arg("--config").arg(dir.join("config.json")).arg("--quiet");
    match out_env {
        Some(p) => cmd.env("BRAINAGE_OUT_DIR", p),
        None => cmd.env_remove("BRAINAGE_OUT_DIR"),
    };
    cmd.output().unwrap()
}

/// Volume of the first record in a manifest.
fn first_volume(dir: &Path, manifest: &str) -> std::path::PathBuf {
    let text = std::fs::read_to_string(dir.join("data").join(manifest)).unwrap();
    let rel = text.lines().nth(1).unwrap().split(',').nth(1).unwrap().to_string();
    dir.join("data").join(rel)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn commands_exit_codes_and_output_override() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("config.json"), CONFIG).unwrap();

    assert_eq!(code(&brainage(dir, &["synth"], None)), 0);
    let again = brainage(dir, &["synth"], None);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    assert_eq!(code(&brainage(dir, &["synth", "--force"], None)), 0);

    let pre = brainage(dir, &["pretrain"], None);
    assert_eq!(code(&pre), 2);
    assert!(stderr(&pre).contains("pretraining not enabled"));

    let alt = dir.join("alt");
    assert_eq!(code(&brainage(dir, &["train"], Some(&alt))), 0);
    assert!(alt.join("cli/train/seed-1/final/meta.json").is_file());
    assert!(!dir.join("out").exists());

    let ok = brainage(dir, &["predict"], Some(&alt));
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(alt.join("cli/predictions/seed-1.csv").is_file());

    // One unreadable test volume: the rest is still predicted.
    let broken = first_volume(dir, "test.csv");
    assert!(broken.is_file());
    std::fs::write(&broken, b"garbage").unwrap();
    let partial = brainage(dir, &["predict", "--force"], Some(&alt));
    assert_eq!(code(&partial), 3, "{}", stderr(&partial));

    let report = brainage(dir, &["report"], Some(&alt));
    assert_eq!(code(&report), 0, "{}", stderr(&report));
    assert!(String::from_utf8_lossy(&report.stdout).contains("none"));
    let csv = std::fs::read_to_string(alt.join("cli/report.csv")).unwrap();
    assert!(csv.starts_with("backbone,pretraining,split,mae_mean,mae_std,"), "{csv}");

    // A bad seed list is a usage problem; a broken training volume aborts training.
    assert_eq!(code(&brainage(dir, &["train", "--seeds", "2,2"], Some(&alt))), 2);
    let train_vol = first_volume(dir, "train.csv");
    std::fs::write(&train_vol, b"garbage").unwrap();
    let abort = brainage(dir, &["train", "--seeds", "9"], Some(&alt));
    assert_eq!(code(&abort), 4, "{}", stderr(&abort));
}
