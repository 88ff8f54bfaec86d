//! End-to-end flows through the CLI entry point: generate data, train,
//! predict, evaluate, and the error paths that must exit with code 2.

use std::sync::Mutex;

use foresight::cli::run;
use foresight::data::{load_trajectory, load_trajectory_dir, TrajectoryFormat};

// libhdf5 1.10 file locking misbehaves under concurrent opens from one
// process, so the end-to-end flows run one at a time
static E2E: Mutex<()> = Mutex::new(());

fn args(s: &str) -> Vec<String> {
    std::iter::once("foresight".to_string())
        .chain(s.split_whitespace().map(str::to_string))
        .collect()
}

fn file_sha(path: &std::path::Path) -> u64 {
    // quick FNV over the bytes; enough to compare two exports
    let mut h = 0xcbf29ce484222325u64;
    for b in std::fs::read(path).unwrap() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const TRAIN_CONFIG: &str = r#"
seed = 7
data_format = "pandagrasp"

[model]
encoder = { custom = { stage_channels = [6, 12], convs_per_stage = 1 } }
latent_channels = 2
lstm_hidden = 12

[train]
context = 2
horizon = 6
batch_size = 2
steps = 2
lr = 1e-3
log_every = 1
"#;

#[test]
fn full_pipeline_gen_train_predict_eval() {
    let _guard = E2E.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let run1 = root.join("run1");
    let preds = root.join("preds");
    let report = root.join("eval/report.json");

    // gen-data twice with the same seed: identical bytes
    let data2 = root.join("data2");
    for out in [&data, &data2] {
        let code = run(args(&format!(
            "gen-data --seed 3 --n-traj 3 --frames 10 --out-dir {}",
            out.display()
        )));
        assert_eq!(code, 0);
    }
    assert_eq!(
        file_sha(&data.join("traj_00000.h5")),
        file_sha(&data2.join("traj_00000.h5"))
    );
    let trajs = load_trajectory_dir(&data, TrajectoryFormat::Pandagrasp).unwrap();
    assert_eq!(trajs.len(), 3);
    assert!(data.join("run_manifest.json").exists());

    // train a couple of steps
    let cfg_path = root.join("config.toml");
    std::fs::write(&cfg_path, TRAIN_CONFIG).unwrap();
    let code = run(args(&format!(
        "train --config {} --data-dir {} --out-dir {}",
        cfg_path.display(),
        data.display(),
        run1.display()
    )));
    assert_eq!(code, 0);
    assert!(run1.join("checkpoint.h5").exists());
    assert!(run1.join("losses.csv").exists());
    assert!(run1.join("run_manifest.json").exists());

    // predict: exported rollouts reload losslessly through the data module
    let code = run(args(&format!(
        "predict --checkpoint {} --input {} --out-dir {} --n-samples 2 --seed 1 --horizon 6",
        run1.join("checkpoint.h5").display(),
        data.join("traj_00000.h5").display(),
        preds.display()
    )));
    assert_eq!(code, 0);
    let sample = load_trajectory(&preds.join("sample_000.h5"), TrajectoryFormat::Pandagrasp).unwrap();
    assert_eq!(sample.frames.dim().0, 6);
    // byte-determinism of the export: re-exporting the loaded trajectory
    // reproduces the file
    let re = preds.join("re_export.h5");
    foresight::data::export_trajectory(&sample, &re, TrajectoryFormat::Pandagrasp).unwrap();
    assert_eq!(file_sha(&preds.join("sample_000.h5")), file_sha(&re));

    // evaluate
    let code = run(args(&format!(
        "eval --checkpoint {} --data-dir {} --n-samples 2 --seed 2 --report-out {} --horizon 6",
        run1.join("checkpoint.h5").display(),
        data.display(),
        report.display()
    )));
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&report).unwrap();
    let parsed = foresight::eval::MetricReport::from_json(&text).unwrap();
    assert_eq!(parsed.n_examples, 3);
    assert!(report.with_extension("tsv").exists());
}

#[test]
fn train_zero_steps_writes_initial_checkpoint() {
    let _guard = E2E.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    assert_eq!(
        run(args(&format!(
            "gen-data --seed 1 --n-traj 2 --frames 10 --out-dir {}",
            data.display()
        ))),
        0
    );
    let cfg_path = root.join("config.toml");
    std::fs::write(&cfg_path, TRAIN_CONFIG).unwrap();
    let out = root.join("run0");
    let code = run(args(&format!(
        "train --config {} --data-dir {} --out-dir {} --steps 0",
        cfg_path.display(),
        data.display(),
        out.display()
    )));
    assert_eq!(code, 0);
    let ckpt = foresight::training::load_checkpoint(&out.join("checkpoint.h5")).unwrap();
    assert_eq!(ckpt.train_state.as_ref().unwrap().step, 0);
}

#[test]
fn usage_errors_exit_with_code_2() {
    let _guard = E2E.lock().unwrap();
    // unknown flag
    assert_eq!(run(args("decompose --grasp 0,0,0 --bogus 1")), 2);
    // unknown subcommand
    assert_eq!(run(args("frobnicate")), 2);
    // invalid config names the offending key
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "seed = 1\nnot_a_key = true\n").unwrap();
    let code = run(args(&format!(
        "train --config {} --data-dir {} --out-dir {}",
        cfg_path.display(),
        dir.path().display(),
        dir.path().join("out").display()
    )));
    assert_eq!(code, 2);
    // invalid field value inside a section
    std::fs::write(&cfg_path, "[train]\nlr = 0.0\n").unwrap();
    let code = run(args(&format!(
        "train --config {} --data-dir {} --out-dir {}",
        cfg_path.display(),
        dir.path().display(),
        dir.path().join("out").display()
    )));
    assert_eq!(code, 2);
}

#[test]
fn decompose_prints_the_five_elements() {
    let _guard = E2E.lock().unwrap();
    // exercised through run(); output text is covered by the action module
    // tests, here we assert the exit code and manifest side effects
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan");
    let code = run(args(&format!(
        "decompose --grasp 0.3,0.1,0.02 --drop -0.2,0.15,0.02 --top 0.25 --out-dir {}",
        out.display()
    )));
    assert_eq!(code, 0);
    assert!(out.join("run_manifest.json").exists());
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["elements"].as_array().unwrap().len(), 5);
    assert_eq!(plan["elements"][0]["kind"], "ApproachTop");
    assert_eq!(plan["elements"][4]["kind"], "OpenAndDrop");
}

#[test]
fn data_dir_env_var_is_the_default_root() {
    let _guard = E2E.lock().unwrap();
    // uses the env var through a child process to avoid cross-test races
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("envdata");
    assert_eq!(
        run(args(&format!(
            "gen-data --seed 5 --n-traj 2 --frames 10 --out-dir {}",
            data.display()
        ))),
        0
    );
    let cfg_path = dir.path().join("config.toml");
    std::fs::write(&cfg_path, TRAIN_CONFIG).unwrap();
    let exe = env!("CARGO_BIN_EXE_foresight");
    let out = std::process::Command::new(exe)
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out-dir",
            dir.path().join("envrun").to_str().unwrap(),
            "--steps",
            "1",
        ])
        .env(foresight::cli::DATA_DIR_ENV, &data)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
