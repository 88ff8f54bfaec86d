//! Train a small model briefly, then sample several futures for one grasp
//! episode from the learned prior and export them as trajectory containers.
//!
//! ```text
//! cargo run --release --example sample_futures [train_steps]
//! ```

use foresight::data::{
    export_trajectory, f64_to_frames, generate_synthetic, sample_window, SceneConfig, Trajectory,
    TrajectoryFormat, TrajectoryMeta,
};
use foresight::model::{build_model, EncoderVariant, ModelConfig, RolloutMode};
use foresight::training::{TrainConfig, Trainer};
use ndarray::Axis;

fn main() {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let out_dir = std::path::PathBuf::from("target/sampled_futures");
    std::fs::create_dir_all(&out_dir).expect("create output dir");

    // grasp episodes that share a layout and differ only in outcome
    let cfg = SceneConfig {
        shared_layout: true,
        grasp_success_prob: 0.5,
        ..SceneConfig::default()
    };
    let data = generate_synthetic(5, 8, 12, &cfg).expect("generate");

    let model_cfg = ModelConfig {
        encoder: EncoderVariant::Custom {
            stage_channels: vec![12, 24, 48],
            convs_per_stage: 1,
        },
        lstm_hidden: 48,
        latent_channels: 4,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        context: 2,
        horizon: 10,
        batch_size: 4,
        lr: 2e-3,
        steps,
        seed: 1,
        log_every: 50,
        ..TrainConfig::default()
    };
    let model = build_model(&model_cfg, 1).expect("build");
    let mut trainer = Trainer::new(model, train_cfg).expect("trainer");
    println!("training {steps} steps on {} shared-layout episodes…", data.len());
    let (ckpt, _) = trainer
        .fit_with(&data, None, |step, loss| {
            println!("step {step}: total {:.5}", loss.total)
        })
        .expect("fit");
    let model = ckpt.to_model().expect("model");

    // sample five futures for the first episode
    let window = sample_window(&data[0], 2, 10, 0).expect("window");
    let samples = model
        .rollout(
            &window.context.view(),
            &window.actions.view(),
            window.states.as_ref().map(|s| s.view()).as_ref(),
            RolloutMode::Prior,
            None,
            5,
            123,
        )
        .expect("rollout");
    println!("sampled {:?} (samples, frames, h, w, rgb)", samples.dim());

    let actions = window.actions.slice(ndarray::s![2.., ..]).mapv(|v| v as f32);
    for s in 0..samples.dim().0 {
        let frames = f64_to_frames(&samples.index_axis(Axis(0), s).to_owned());
        let traj = Trajectory {
            frames,
            actions: actions.clone(),
            states: None,
            meta: TrajectoryMeta {
                source: "predicted".into(),
                camera: "topdown".into(),
                stage_labels: None,
            },
        };
        let path = out_dir.join(format!("sample_{s:03}.h5"));
        export_trajectory(&traj, &path, TrajectoryFormat::Pandagrasp).expect("export");
    }
    println!("wrote 5 sampled futures to {}", out_dir.display());

    // pairwise spread of the final frames shows what the prior learned
    let last: Vec<_> = (0..samples.dim().0)
        .map(|s| samples.index_axis(Axis(0), s).index_axis(Axis(0), 9).to_owned())
        .collect();
    let mut max_l1 = 0.0f64;
    for i in 0..last.len() {
        for j in i + 1..last.len() {
            let d = (&last[i] - &last[j]).mapv(f64::abs).mean().unwrap();
            max_l1 = max_l1.max(d);
        }
    }
    println!("max pairwise mean-L1 between final frames: {max_l1:.5}");
}
