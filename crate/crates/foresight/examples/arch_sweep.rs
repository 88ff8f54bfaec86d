// autoencoder probe: encoder -> decoder only, no recurrence, no latent
use foresight::autodiff::Tape;
use foresight::data::{frames_to_f64, generate_synthetic, SceneConfig};
use foresight::model::{build_model, EncoderVariant, ModelConfig};
use foresight::nn::Adam;
use ndarray::{ArrayD, Axis, IxDyn};
use std::collections::BTreeMap;

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let data = generate_synthetic(0, 2, 12, &SceneConfig::default()).unwrap();
    let mc = ModelConfig {
        encoder: EncoderVariant::Custom { stage_channels: vec![12, 24, 48], convs_per_stage: 1 },
        lstm_hidden: 48,
        latent_channels: 4,
        ..ModelConfig::default()
    };
    let mut model = build_model(&mc, 0).unwrap();

    // all 24 frames as one (24,3,48,64) batch
    let mut frames = Vec::new();
    for t in &data {
        let f = frames_to_f64(&t.frames);
        for i in 0..f.dim().0 {
            frames.push(f.index_axis(Axis(0), i).to_owned());
        }
    }
    let n = frames.len();
    let mut batch = ArrayD::zeros(IxDyn(&[n, 3, 48, 64]));
    for (i, f) in frames.iter().enumerate() {
        for ((h, w, c), &v) in f.indexed_iter() {
            batch[[i, c, h, w]] = v;
        }
    }

    let mut adam = Adam::new(lr, None);
    let t0 = std::time::Instant::now();
    for s in 1..=steps {
        adam.lr = lr * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / steps as f64).cos());
        let mut tape = Tape::new();
        let (bound, handles) = model.bind_with_params_for_probe(&mut tape);
        let x = tape.constant(batch.clone());
        let feat = bound.encode_frames(&mut tape, &bound.prediction, x);
        let out = bound.decode(&mut tape, feat);
        let diff = tape.sub(out, x);
        let absd = tape.abs(diff);
        let loss = tape.mean_all(absd);
        tape.backward(loss);
        let mut grads = BTreeMap::new();
        for (name, &var) in handles.iter() {
            if let Some(g) = tape.grad(var) {
                grads.insert(name.clone(), g.clone());
            }
        }
        let lv = tape.scalar(loss);
        adam.step(model.params_mut(), &grads);
        if s % 50 == 0 {
            // mse/psnr of current output
            let pred = tape.value(out);
            let mse: f64 = pred.iter().zip(batch.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / batch.len() as f64;
            println!("step {s}: L1 {lv:.5}  PSNR {:.2} dB  [{:.2}s/step]", -10.0 * mse.log10(), t0.elapsed().as_secs_f64() / s as f64);
        }
    }
}
