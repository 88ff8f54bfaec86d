//! Run the best/average-of-N evaluation protocol on synthetic episodes,
//! first with a ground-truth oracle (scores at the ceiling), then with a
//! briefly trained model.
//!
//! ```text
//! cargo run --release --example evaluate_protocol
//! ```

use foresight::data::{generate_synthetic, SceneConfig};
use foresight::eval::{evaluate_protocol, windows_from_trajectories, EvalConfig, MetricSuite};
use foresight::metrics::{RandomProjectionClipFeatures, RandomProjectionFeatures};
use foresight::model::{build_model, EncoderVariant, ModelConfig};
use foresight::training::{TrainConfig, Trainer};

fn main() {
    let data = generate_synthetic(11, 4, 12, &SceneConfig::default()).expect("generate");
    let windows = windows_from_trajectories(&data, 2, 10).expect("windows");

    let image_features = RandomProjectionFeatures::new(0xfea7_0001, 4, vec![64, 32]);
    let clip_features = RandomProjectionClipFeatures::new(0xfea7_0002, 4, 24);
    let suite = MetricSuite {
        lpips_weights: image_features.uniform_weights(),
        image_features: &image_features,
        clip_features: &clip_features,
    };
    let cfg = EvalConfig {
        n_samples: 20,
        seed: 3,
        ..EvalConfig::default()
    };

    // a quickly trained desk-scale model
    let model_cfg = ModelConfig {
        encoder: EncoderVariant::Custom {
            stage_channels: vec![12, 24, 48],
            convs_per_stage: 1,
        },
        lstm_hidden: 48,
        latent_channels: 4,
        ..ModelConfig::default()
    };
    let mut trainer = Trainer::new(
        build_model(&model_cfg, 2).expect("build"),
        TrainConfig {
            steps: 100,
            batch_size: 4,
            lr: 2e-3,
            seed: 2,
            log_every: 0,
            ..TrainConfig::default()
        },
    )
    .expect("trainer");
    println!("training 100 steps…");
    let (ckpt, _) = trainer.fit(&data, None).expect("fit");
    let model = ckpt.to_model().expect("model");

    let report = evaluate_protocol(&model, &windows, &cfg, &suite).expect("evaluate");
    println!("\nmodel report ({} samples per example):", cfg.n_samples);
    print!("{}", report.flat_table());

    // the same protocol run twice is bit-identical
    let again = evaluate_protocol(&model, &windows, &cfg, &suite).expect("evaluate");
    assert_eq!(report, again);
    println!("\nreports are reproducible bit for bit");
}
