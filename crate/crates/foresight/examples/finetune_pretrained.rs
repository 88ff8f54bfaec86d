//! The fine-tuning workflow: pre-train on one dataset, write a checkpoint,
//! then continue on a second dataset starting from the donor parameters
//! (no reset) and compare against training from scratch.
//!
//! ```text
//! cargo run --release --example finetune_pretrained
//! ```

use foresight::data::{generate_synthetic, SceneConfig};
use foresight::model::{build_model, EncoderVariant, ModelConfig};
use foresight::training::{
    load_checkpoint, save_checkpoint, teacher_forced_psnr, TrainConfig, Trainer,
};

fn main() {
    let dir = std::path::PathBuf::from("target/finetune_demo");
    std::fs::create_dir_all(&dir).expect("create output dir");

    // dataset A: random layouts; dataset B: different seed and block count
    let data_a = generate_synthetic(100, 6, 12, &SceneConfig::default()).expect("data A");
    let data_b = generate_synthetic(
        200,
        6,
        12,
        &SceneConfig {
            n_blocks: 2,
            ..SceneConfig::default()
        },
    )
    .expect("data B");

    let model_cfg = ModelConfig {
        encoder: EncoderVariant::Custom {
            stage_channels: vec![12, 24, 48],
            convs_per_stage: 1,
        },
        lstm_hidden: 48,
        latent_channels: 4,
        ..ModelConfig::default()
    };
    let steps = 150u64;
    let base_cfg = TrainConfig {
        batch_size: 4,
        lr: 2e-3,
        steps,
        seed: 10,
        log_every: 0,
        ..TrainConfig::default()
    };

    // pre-train on A, save the donor checkpoint
    println!("pre-training {steps} steps on dataset A…");
    let mut pre = Trainer::new(build_model(&model_cfg, 10).expect("build"), base_cfg.clone())
        .expect("trainer");
    let (donor, _) = pre.fit(&data_a, None).expect("fit A");
    let donor_path = dir.join("donor.h5");
    save_checkpoint(&donor, &donor_path).expect("save donor");

    // fine-tune on B from the donor (parameters carried over, optimizer fresh)
    let loaded = load_checkpoint(&donor_path).expect("load donor");
    let donor_model = loaded.to_model().expect("model");
    assert_eq!(donor_model.checksum(), donor.params.checksum());
    println!("fine-tuning starts from donor checksum {:016x}", donor_model.checksum());
    let mut tuned = Trainer::new(donor_model, TrainConfig { seed: 11, ..base_cfg.clone() })
        .expect("trainer");
    let (tuned_ckpt, tuned_report) = tuned.fit(&data_b, None).expect("fit B");

    // train on B from scratch for the same budget
    let mut scratch = Trainer::new(
        build_model(&model_cfg, 12).expect("build"),
        TrainConfig { seed: 12, ..base_cfg },
    )
    .expect("trainer");
    let (scratch_ckpt, scratch_report) = scratch.fit(&data_b, None).expect("fit scratch");

    let avg = |v: &[f64]| v.iter().rev().take(20).sum::<f64>() / 20.0;
    println!(
        "last-20-step loss on B: fine-tuned {:.5} vs scratch {:.5}",
        avg(&tuned_report.losses),
        avg(&scratch_report.losses)
    );
    let tuned_psnr =
        teacher_forced_psnr(&tuned_ckpt.to_model().unwrap(), &data_b, 2, 10, 0).unwrap();
    let scratch_psnr =
        teacher_forced_psnr(&scratch_ckpt.to_model().unwrap(), &data_b, 2, 10, 0).unwrap();
    println!("teacher-forced PSNR on B: fine-tuned {tuned_psnr:.2} dB vs scratch {scratch_psnr:.2} dB");
}
