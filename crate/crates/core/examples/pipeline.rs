//! The whole experiment protocol from one JSON config, as the `brainage`
//! CLI runs it: synth, pretrain, train, predict, report.

use brainage::experiment::{cmd_predict, cmd_pretrain, cmd_report, cmd_synth, cmd_train, ExperimentConfig, RunOptions};

const CONFIG: &str = r#"{
  "name": "demo",
  "backbone": {"arch": "unet_encoder", "stage_channel_plan": [4, 8, 16]},
  "pretrain": {"enabled": true, "seg_config": {"epochs": 3, "batch_size": 16, "learning_rate": 0.003, "loss": "dice"},
               "data_manifest": "data/pretrain.csv"},
  "age_train": {"batch_size": 32, "learning_rate": 0.001, "max_epochs": 4, "ma_window": 2},
  "seeds": [0, 1],
  "paths": {"train_manifest": "data/train.csv", "val_manifest": "data/val.csv",
            "test_manifest": "data/test.csv", "output_dir": "out"},
  "synth": {
    "config": {"volume_shape": [48, 48, 48], "seed": 2},
    "cohort": {"counts": [
      {"split": "train", "group": "CN", "count": 16},
      {"split": "val", "group": "CN", "count": 6},
      {"split": "test", "group": "CN", "count": 8},
      {"split": "test", "group": "MCI", "count": 8},
      {"split": "test", "group": "AD", "count": 8}],
      "group_offsets": {"MCI": 4, "AD": 8}},
    "pretrain_subjects": 2
  }
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("demo.json");
    std::fs::write(&path, CONFIG)?;
    let cfg = ExperimentConfig::load(&path)?;
    let opts = RunOptions { verbose: true, ..Default::default() };

    cmd_synth(&cfg, &opts)?;
    cmd_pretrain(&cfg, &opts)?;
    let trained = cmd_train(&cfg, &opts)?;
    println!("retrain budget: {} epochs", trained.budget);
    for run in cmd_predict(&cfg, None, None, None, &opts)? {
        println!("{}: {} predictions", run.out.display(), run.meta.predicted);
    }
    cmd_report(&cfg, &[], None, &opts)?;
    println!("{}", std::fs::read_to_string(cfg.run_dir(None).join("report.csv"))?);
    Ok(())
}
