//! Overfit a desk-scale model on two synthetic trajectories until the
//! teacher-forced reconstruction passes 30 dB PSNR.
//!
//! ```text
//! cargo run --release --example train_overfit [steps]
//! ```

use foresight::data::{generate_synthetic, SceneConfig};
use foresight::model::{build_model, EncoderVariant, ModelConfig};
use foresight::training::{teacher_forced_psnr, TrainConfig, Trainer};

fn main() {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2000);

    let data = generate_synthetic(0, 2, 12, &SceneConfig::default()).expect("synthetic scenes");
    let model_cfg = ModelConfig {
        encoder: EncoderVariant::Custom {
            stage_channels: vec![8, 16, 32],
            convs_per_stage: 1,
        },
        lstm_hidden: 32,
        latent_channels: 4,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        context: 2,
        horizon: 10,
        batch_size: 2,
        lr: 3e-3,
        beta: 1e-4,
        steps,
        seed: 0,
        log_every: 50,
        ..TrainConfig::default()
    };
    let model = build_model(&model_cfg, 0).expect("build");
    println!("parameters: {}", model.param_count());
    let mut trainer = Trainer::new(model, train_cfg).expect("trainer");

    let t0 = std::time::Instant::now();
    let mut reached = None;
    while trainer.step_count() < steps {
        let target = (trainer.step_count() + 100).min(steps);
        while trainer.step_count() < target {
            let batch: Vec<_> = data
                .iter()
                .map(|t| foresight::data::sample_window(t, 2, 10, 0).unwrap())
                .collect();
            let loss = trainer.train_step(&batch).expect("train step");
            if trainer.step_count() % 50 == 0 {
                println!(
                    "step {:4}  total {:.5}  recon {:.5}  kl {:.3}  [{:.1}s]",
                    trainer.step_count(),
                    loss.total,
                    loss.recon_l1,
                    loss.kl,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        let psnr = teacher_forced_psnr(trainer.model(), &data, 2, 10, 0).expect("psnr");
        println!(
            "step {:4}  teacher-forced PSNR {:.2} dB",
            trainer.step_count(),
            psnr
        );
        if psnr > 30.0 && reached.is_none() {
            reached = Some(trainer.step_count());
            break;
        }
    }
    match reached {
        Some(step) => println!("reached 30 dB at step {step} in {:.1}s", t0.elapsed().as_secs_f64()),
        None => println!("did not reach 30 dB within {steps} steps"),
    }
}
