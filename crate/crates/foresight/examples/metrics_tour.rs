//! Worked examples for every metric, including the closed-form values the
//! test suite pins.
//!
//! ```text
//! cargo run --example metrics_tour
//! ```

use foresight::metrics::{
    frechet_distance, fvd, lpips_distance, psnr_default, ssim, RandomProjectionClipFeatures,
    RandomProjectionFeatures,
};
use foresight::rng::{derive_rng, uniform};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, IxDyn};

fn main() {
    // PSNR: uniform |x - y| = 0.5 -> MSE 0.25 -> 6.0206 dB
    let x = ArrayD::from_elem(IxDyn(&[8, 8, 3]), 0.75);
    let y = ArrayD::from_elem(IxDyn(&[8, 8, 3]), 0.25);
    println!("psnr(0.75, 0.25) = {:.4} dB", psnr_default(&x.view(), &y.view()).unwrap());
    println!("psnr(x, x)       = {:.1} dB (capped)", psnr_default(&x.view(), &x.view()).unwrap());

    // SSIM: constant images 0.5 vs 0.25 -> ~0.8003
    let a = Array3::from_elem((16, 16, 3), 0.5);
    let b = Array3::from_elem((16, 16, 3), 0.25);
    println!("ssim(0.5, 0.25)  = {:.4}", ssim(&a.view(), &b.view()).unwrap());
    println!("ssim(a, a)       = {:.4}", ssim(&a.view(), &a.view()).unwrap());

    // LPIPS with the seeded random-projection stand-in
    let fe = RandomProjectionFeatures::new(7, 2, vec![64, 32]);
    let mut rng = derive_rng(1, &[0]);
    let img1: Array3<f64> = uniform(&[16, 16, 3], 0.0, 1.0, &mut rng).into_dimensionality().unwrap();
    let img2: Array3<f64> = uniform(&[16, 16, 3], 0.0, 1.0, &mut rng).into_dimensionality().unwrap();
    let d = lpips_distance(&img1.view(), &img2.view(), &fe, &fe.uniform_weights()).unwrap();
    println!("lpips(random pair) = {d:.4}");
    println!(
        "lpips(img, img)    = {:.4}",
        lpips_distance(&img1.view(), &img1.view(), &fe, &fe.uniform_weights()).unwrap()
    );

    // Fréchet distance: 1-D closed form (0 vs 1, unit variances) = 1
    let m0 = Array1::from_vec(vec![0.0]);
    let m1 = Array1::from_vec(vec![1.0]);
    let v = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
    println!(
        "frechet(N(0,1), N(1,1)) = {:.6}",
        frechet_distance(&m0, &v, &m1, &v).unwrap()
    );

    // FVD over two clip sets with the video stand-in extractor
    let clip_fe = RandomProjectionClipFeatures::new(9, 2, 16);
    let mut mk = |seed: u64, shift: f64| -> Vec<Array4<f64>> {
        let mut rng = derive_rng(seed, &[1]);
        (0..8)
            .map(|_| {
                let c: Array4<f64> =
                    uniform(&[4, 16, 16, 3], 0.0, 1.0, &mut rng).into_dimensionality().unwrap();
                c.mapv(|p| (p * 0.5 + shift).clamp(0.0, 1.0))
            })
            .collect()
    };
    let real = mk(2, 0.0);
    let near = mk(3, 0.05);
    let far = mk(4, 0.4);
    let rv: Vec<_> = real.iter().map(|c| c.view()).collect();
    let nv: Vec<_> = near.iter().map(|c| c.view()).collect();
    let fv: Vec<_> = far.iter().map(|c| c.view()).collect();
    println!("fvd(real, real) = {:.2e}", fvd(&rv, &rv, &clip_fe, 256).unwrap());
    println!("fvd(real, near) = {:.4}", fvd(&rv, &nv, &clip_fe, 256).unwrap());
    println!("fvd(real, far)  = {:.4}", fvd(&rv, &fv, &clip_fe, 256).unwrap());
}
