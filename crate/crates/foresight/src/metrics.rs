//! Image and video quality metrics: PSNR, SSIM, LPIPS and Fréchet video
//! distance.
//!
//! All metrics are pure functions of their inputs. The perceptual metrics
//! (LPIPS, FVD) are parameterized over feature extractors; a deterministic
//! seeded random-projection extractor keeps the test suite hermetic, and any
//! pretrained backbone can be plugged in through the same traits.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView3, ArrayView4, ArrayViewD, Axis};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image {h}x{w} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall { h: usize, w: usize, window: usize },
    #[error("covariance must be square, got {rows}x{cols}")]
    NonSquareCovariance { rows: usize, cols: usize },
    #[error("covariance is not symmetric (max asymmetry {0:.3e})")]
    AsymmetricCovariance(f64),
    #[error("covariance has eigenvalue {0:.3e} below the -1e-8 clip threshold")]
    NotPositiveSemiDefinite(f64),
    #[error("need at least {need} clips per side, got {got}")]
    TooFewClips { need: usize, got: usize },
    #[error("feature extractor dimension mismatch: {0}")]
    ExtractorMismatch(String),
}

/// Eigenvalues this far below zero are treated as rounding noise and
/// clipped to zero; anything lower is a genuine PSD violation.
const EIG_CLIP: f64 = -1e-8;

/// Peak signal-to-noise ratio in dB, capped at `cap` (identical inputs
/// would otherwise be infinite).
pub fn psnr(
    x: &ArrayViewD<f64>,
    y: &ArrayViewD<f64>,
    max_val: f64,
    cap: f64,
) -> Result<f64, MetricError> {
    if x.shape() != y.shape() {
        return Err(MetricError::ShapeMismatch(
            x.shape().to_vec(),
            y.shape().to_vec(),
        ));
    }
    let n = x.len() as f64;
    let mse: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(cap))
}

pub const PSNR_CAP: f64 = 100.0;

/// `psnr` with the conventional `[0,1]` range and 100 dB cap.
pub fn psnr_default(x: &ArrayViewD<f64>, y: &ArrayViewD<f64>) -> Result<f64, MetricError> {
    psnr(x, y, 1.0, PSNR_CAP)
}

#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Structural similarity over an `(H, W, C)` image pair, averaged over the
/// valid window positions of every channel. Returns a value in `[-1, 1]`.
pub fn ssim(x: &ArrayView3<f64>, y: &ArrayView3<f64>) -> Result<f64, MetricError> {
    ssim_with(x, y, SsimParams::default())
}

pub fn ssim_with(
    x: &ArrayView3<f64>,
    y: &ArrayView3<f64>,
    p: SsimParams,
) -> Result<f64, MetricError> {
    if x.shape() != y.shape() {
        return Err(MetricError::ShapeMismatch(
            x.shape().to_vec(),
            y.shape().to_vec(),
        ));
    }
    let (h, w, channels) = x.dim();
    if h < p.window || w < p.window {
        return Err(MetricError::ImageTooSmall {
            h,
            w,
            window: p.window,
        });
    }
    let kernel = gaussian_kernel(p.window, p.sigma);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let xc = x.index_axis(Axis(2), ch).to_owned();
        let yc = y.index_axis(Axis(2), ch).to_owned();
        let mu_x = filter_valid(&xc, &kernel);
        let mu_y = filter_valid(&yc, &kernel);
        let xx = filter_valid(&(&xc * &xc), &kernel);
        let yy = filter_valid(&(&yc * &yc), &kernel);
        let xy = filter_valid(&(&xc * &yc), &kernel);
        for ((i, j), &mx) in mu_x.indexed_iter() {
            let my = mu_y[(i, j)];
            let var_x = xx[(i, j)] - mx * mx;
            let var_y = yy[(i, j)] - my * my;
            let cov = xy[(i, j)] - mx * my;
            let v = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
            total += v;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let mid = (window - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable valid-mode filtering with a 1-D kernel applied to rows then
/// columns.
fn filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = kernel.len();
    let mut rows = Array2::<f64>::zeros((h - k + 1, w));
    for i in 0..h - k + 1 {
        for j in 0..w {
            let mut acc = 0.0;
            for (a, &kv) in kernel.iter().enumerate() {
                acc += kv * img[(i + a, j)];
            }
            rows[(i, j)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - k + 1, w - k + 1));
    for i in 0..h - k + 1 {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (b, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[(i, j + b)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Per-layer feature maps of a single image, for LPIPS-style distances.
pub trait ImageFeatures: Sync {
    fn num_layers(&self) -> usize;
    /// One feature vector per layer for an `(H, W, C)` image.
    fn features(&self, img: &ArrayView3<f64>) -> Vec<Array1<f64>>;
}

/// Whole-clip features of a `(T, H, W, C)` video, for FVD.
pub trait ClipFeatures: Sync {
    fn dim(&self) -> usize;
    /// One feature row per clip. Implementations must be deterministic and
    /// independent across rows so batching cannot change results.
    fn extract_batch(&self, clips: &[ArrayView4<f64>]) -> Array2<f64>;
}

/// Weighted perceptual distance between two images: per layer, feature
/// vectors are unit-normalized and the ℓ2 norm of their difference is taken;
/// layers combine as a weighted sum. Zero iff all features are equal.
pub fn lpips_distance(
    x: &ArrayView3<f64>,
    y: &ArrayView3<f64>,
    fe: &dyn ImageFeatures,
    layer_weights: &[f64],
) -> Result<f64, MetricError> {
    if x.shape() != y.shape() {
        return Err(MetricError::ShapeMismatch(
            x.shape().to_vec(),
            y.shape().to_vec(),
        ));
    }
    if layer_weights.len() != fe.num_layers() {
        return Err(MetricError::ExtractorMismatch(format!(
            "{} layer weights for {} layers",
            layer_weights.len(),
            fe.num_layers()
        )));
    }
    let fx = fe.features(x);
    let fy = fe.features(y);
    let mut total = 0.0;
    for ((vx, vy), &wl) in fx.iter().zip(fy.iter()).zip(layer_weights) {
        if vx.len() != vy.len() {
            return Err(MetricError::ExtractorMismatch(
                "layer dimension mismatch between inputs".into(),
            ));
        }
        let nx = unit_normalize(vx);
        let ny = unit_normalize(vy);
        let d = (&nx - &ny).mapv(|v| v * v).sum().sqrt();
        total += wl * d;
    }
    Ok(total)
}

fn unit_normalize(v: &Array1<f64>) -> Array1<f64> {
    let n = v.mapv(|x| x * x).sum().sqrt();
    if n < 1e-12 {
        v.clone()
    } else {
        v / n
    }
}

/// Fréchet distance between two Gaussians:
/// `‖μ1−μ2‖² + tr(C1 + C2 − 2 (C1 C2)^{1/2})`.
///
/// The matrix square root goes through symmetric eigendecompositions
/// (`tr((C1 C2)^{1/2}) = tr((√C1 · C2 · √C1)^{1/2})`); eigenvalues in
/// `[-1e-8, 0)` are clipped to zero, lower ones are an error.
pub fn frechet_distance(
    mu1: &Array1<f64>,
    cov1: &Array2<f64>,
    mu2: &Array1<f64>,
    cov2: &Array2<f64>,
) -> Result<f64, MetricError> {
    if mu1.len() != mu2.len() || cov1.dim() != cov2.dim() || cov1.dim().0 != mu1.len() {
        return Err(MetricError::ShapeMismatch(
            vec![mu1.len(), cov1.dim().0, cov1.dim().1],
            vec![mu2.len(), cov2.dim().0, cov2.dim().1],
        ));
    }
    let d = mu1.len();
    let c1 = to_dmatrix(cov1)?;
    let c2 = to_dmatrix(cov2)?;

    let sqrt_c1 = psd_sqrt(&c1)?;
    let inner = &sqrt_c1 * &c2 * &sqrt_c1;
    // symmetrize rounding noise before the second eigendecomposition
    let inner = (&inner + &inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l < EIG_CLIP {
            return Err(MetricError::NotPositiveSemiDefinite(l));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }

    let mean_term: f64 = (0..d).map(|i| (mu1[i] - mu2[i]).powi(2)).sum();
    let fd = mean_term + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

fn to_dmatrix(cov: &Array2<f64>) -> Result<DMatrix<f64>, MetricError> {
    let (r, c) = cov.dim();
    if r != c {
        return Err(MetricError::NonSquareCovariance { rows: r, cols: c });
    }
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..r {
        for j in 0..i {
            asym = asym.max((cov[(i, j)] - cov[(j, i)]).abs());
        }
    }
    if asym > 1e-8 * (1.0 + scale) {
        return Err(MetricError::AsymmetricCovariance(asym));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| cov[(i, j)]))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
    let eig = SymmetricEigen::new(m.clone());
    for &l in eig.eigenvalues.iter() {
        if l < EIG_CLIP {
            return Err(MetricError::NotPositiveSemiDefinite(l));
        }
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Gaussian moments of a feature row matrix: mean and unbiased covariance.
pub fn feature_moments(feats: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = feats.nrows();
    let mu = feats.mean_axis(Axis(0)).expect("nonempty feature matrix");
    let centered = feats - &mu;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    (mu, cov)
}

/// Fréchet video distance between two clip sets.
///
/// Features are extracted in batches of exactly `batch_size`; the final
/// partial batch is padded with zero clips and the padded rows are masked
/// out of the moment accumulation, so batching never changes the result.
pub fn fvd(
    real_clips: &[ArrayView4<f64>],
    gen_clips: &[ArrayView4<f64>],
    fe: &dyn ClipFeatures,
    batch_size: usize,
) -> Result<f64, MetricError> {
    let real = extract_features_batched(real_clips, fe, batch_size)?;
    let gen = extract_features_batched(gen_clips, fe, batch_size)?;
    let (mu_r, cov_r) = feature_moments(&real);
    let (mu_g, cov_g) = feature_moments(&gen);
    frechet_distance(&mu_r, &cov_r, &mu_g, &cov_g)
}

pub const FVD_BATCH_SIZE: usize = 256;

/// Batched feature extraction with pad-and-mask on the last batch.
pub fn extract_features_batched(
    clips: &[ArrayView4<f64>],
    fe: &dyn ClipFeatures,
    batch_size: usize,
) -> Result<Array2<f64>, MetricError> {
    if clips.len() < 2 {
        return Err(MetricError::TooFewClips {
            need: 2,
            got: clips.len(),
        });
    }
    assert!(batch_size > 0, "batch_size must be positive");
    let shape = clips[0].dim();
    for c in clips {
        if c.dim() != shape {
            return Err(MetricError::ShapeMismatch(
                clips[0].shape().to_vec(),
                c.shape().to_vec(),
            ));
        }
    }
    let zero = ndarray::Array4::<f64>::zeros(shape);
    let mut feats = Array2::<f64>::zeros((clips.len(), fe.dim()));
    for start in (0..clips.len()).step_by(batch_size) {
        let end = (start + batch_size).min(clips.len());
        let mut batch: Vec<ArrayView4<f64>> = clips[start..end].to_vec();
        while batch.len() < batch_size {
            batch.push(zero.view());
        }
        let out = fe.extract_batch(&batch);
        if out.ncols() != fe.dim() || out.nrows() != batch_size {
            return Err(MetricError::ExtractorMismatch(format!(
                "extractor returned {:?}, expected ({batch_size}, {})",
                out.dim(),
                fe.dim()
            )));
        }
        feats
            .slice_mut(ndarray::s![start..end, ..])
            .assign(&out.slice(ndarray::s![..end - start, ..]));
    }
    Ok(feats)
}

// ---- deterministic stand-in extractors ----

type ProjId = (u64, usize, usize); // (layer tag, in_dim, out_dim)

#[derive(Default)]
struct ProjectionCache {
    inner: Mutex<BTreeMap<ProjId, Arc<Array2<f64>>>>,
}

impl ProjectionCache {
    fn get(&self, seed: u64, layer: u64, in_dim: usize, out_dim: usize) -> Arc<Array2<f64>> {
        let mut map = self.inner.lock().unwrap();
        map.entry((layer, in_dim, out_dim))
            .or_insert_with(|| {
                let mut rng = crate::rng::derive_rng(seed, &[layer, in_dim as u64]);
                let scale = 1.0 / (in_dim as f64).sqrt();
                let m = crate::rng::standard_normal(&[out_dim, in_dim], &mut rng)
                    .into_dimensionality()
                    .unwrap()
                    * scale;
                Arc::new(m)
            })
            .clone()
    }
}

/// Seeded random-projection image features: the image is mean-pooled by
/// `pool`, flattened, and linearly projected once per layer. Deterministic
/// in (seed, input shape); a hermetic stand-in for pretrained perceptual
/// backbones at desk scale.
pub struct RandomProjectionFeatures {
    seed: u64,
    pool: usize,
    layer_dims: Vec<usize>,
    cache: ProjectionCache,
}

impl RandomProjectionFeatures {
    pub fn new(seed: u64, pool: usize, layer_dims: Vec<usize>) -> Self {
        assert!(pool >= 1 && !layer_dims.is_empty());
        RandomProjectionFeatures {
            seed,
            pool,
            layer_dims,
            cache: ProjectionCache::default(),
        }
    }

    /// Equal layer weights matching this extractor's layer count.
    pub fn uniform_weights(&self) -> Vec<f64> {
        vec![1.0; self.layer_dims.len()]
    }
}

impl ImageFeatures for RandomProjectionFeatures {
    fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    fn features(&self, img: &ArrayView3<f64>) -> Vec<Array1<f64>> {
        let pooled = mean_pool_hw(img, self.pool);
        let flat = Array1::from_iter(pooled.iter().copied());
        self.layer_dims
            .iter()
            .enumerate()
            .map(|(l, &d)| {
                let m = self.cache.get(self.seed, l as u64, flat.len(), d);
                m.dot(&flat)
            })
            .collect()
    }
}

/// Seeded random-projection clip features for FVD: frames are mean-pooled
/// spatially, the whole clip is flattened and projected to `out_dim`.
pub struct RandomProjectionClipFeatures {
    seed: u64,
    pool: usize,
    out_dim: usize,
    cache: ProjectionCache,
}

impl RandomProjectionClipFeatures {
    pub fn new(seed: u64, pool: usize, out_dim: usize) -> Self {
        RandomProjectionClipFeatures {
            seed,
            pool,
            out_dim,
            cache: ProjectionCache::default(),
        }
    }
}

impl ClipFeatures for RandomProjectionClipFeatures {
    fn dim(&self) -> usize {
        self.out_dim
    }

    fn extract_batch(&self, clips: &[ArrayView4<f64>]) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((clips.len(), self.out_dim));
        for (row, clip) in clips.iter().enumerate() {
            let t = clip.dim().0;
            let mut flat = Vec::new();
            for ti in 0..t {
                let frame = clip.index_axis(Axis(0), ti);
                let pooled = mean_pool_hw(&frame, self.pool);
                flat.extend(pooled.iter().copied());
            }
            let flat = Array1::from_vec(flat);
            let m = self.cache.get(self.seed, 0, flat.len(), self.out_dim);
            out.row_mut(row).assign(&m.dot(&flat));
        }
        out
    }
}

/// Mean-pool an `(H, W, C)` image over `pool`×`pool` blocks (floor division;
/// trailing rows/cols beyond the last full block are dropped).
fn mean_pool_hw(img: &ArrayView3<f64>, pool: usize) -> ndarray::Array3<f64> {
    let (h, w, c) = img.dim();
    if pool == 1 {
        return img.to_owned();
    }
    let (ho, wo) = (h / pool, w / pool);
    let mut out = ndarray::Array3::<f64>::zeros((ho, wo, c));
    let inv = 1.0 / (pool * pool) as f64;
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c {
                let mut acc = 0.0;
                for a in 0..pool {
                    for b in 0..pool {
                        acc += img[(i * pool + a, j * pool + b, ch)];
                    }
                }
                out[(i, j, ch)] = acc * inv;
            }
        }
    }
    out
}
