//! The sampling-and-scoring protocol: best-of-N and average-of-N per-sample
//! scores for PSNR/SSIM/LPIPS, FVD over all samples, and per-semantic-stage
//! breakdowns.
//!
//! Per test example the predictor draws `n_samples` prior-mode rollouts from
//! a seed stream derived per (example, sample), so evaluations are
//! reproducible bit for bit, examples can be processed in parallel, and the
//! sample set for a smaller `n_samples` is a prefix of a larger one.

use ndarray::{Array2, Array5, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_window, DataError, Stage, Trajectory, TrainingWindow};
use crate::metrics::{
    extract_features_batched, feature_moments, frechet_distance, lpips_distance, psnr_default,
    ssim, ClipFeatures, ImageFeatures, MetricError,
};
use crate::model::{Model, ModelError, RolloutMode};
use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("example {0} has no stage labels")]
    MissingStageLabels(usize),
    #[error("example {index}: expected context {c} and horizon {horizon}, got {got_c}/{got_h}")]
    WindowMismatch {
        index: usize,
        c: usize,
        horizon: usize,
        got_c: usize,
        got_h: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Anything that can sample futures for an evaluation window. Implemented
/// by [`Model`] (prior-mode rollout); tests plug in oracle predictors.
pub trait Predictor: Sync {
    /// `(n_samples, horizon, H, W, 3)` futures in `[0,1]`.
    fn sample_rollouts(
        &self,
        example: &TrainingWindow,
        n_samples: usize,
        seed: u64,
    ) -> Result<Array5<f64>, EvalError>;
}

impl Predictor for Model {
    fn sample_rollouts(
        &self,
        example: &TrainingWindow,
        n_samples: usize,
        seed: u64,
    ) -> Result<Array5<f64>, EvalError> {
        Ok(self.rollout(
            &example.context.view(),
            &example.actions.view(),
            example.states.as_ref().map(|s| s.view()).as_ref(),
            RolloutMode::Prior,
            None,
            n_samples,
            seed,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub context: usize,
    pub horizon: usize,
    pub n_samples: usize,
    pub fvd_batch: usize,
    /// Bootstrap resamples behind the FVD standard error.
    pub fvd_bootstrap: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context: 2,
            horizon: 10,
            n_samples: 100,
            fvd_batch: crate::metrics::FVD_BATCH_SIZE,
            fvd_bootstrap: 16,
            seed: 0,
        }
    }
}

/// The feature extractors and weights the perceptual metrics run with.
pub struct MetricSuite<'a> {
    pub image_features: &'a dyn ImageFeatures,
    pub lpips_weights: Vec<f64>,
    pub clip_features: &'a dyn ClipFeatures,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    fn over(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        MeanStderr { mean, stderr }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BestAverage {
    pub best: MeanStderr,
    pub average: MeanStderr,
}

/// Per-example best/average scores (kept in the report so the per-example
/// protocol invariants stay checkable).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub psnr_best: f64,
    pub psnr_avg: f64,
    pub ssim_best: f64,
    pub ssim_avg: f64,
    pub lpips_best: f64,
    pub lpips_avg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub psnr: Option<BestAverage>,
    pub ssim: Option<BestAverage>,
    pub lpips: Option<BestAverage>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimestepScores {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub n_examples: usize,
    pub psnr: BestAverage,
    pub ssim: BestAverage,
    pub lpips: BestAverage,
    /// Fréchet video distance between ground truth and all generated
    /// samples; absent when either side has fewer than two clips.
    pub fvd: Option<MeanStderr>,
    /// Rows: Approaching, Grasping, Moving, Average, FinalGoal. Present when
    /// every example carries stage labels.
    pub per_stage: Vec<StageRow>,
    /// Average-of-samples scores per predicted timestep (plot-ready).
    pub per_timestep: Vec<TimestepScores>,
    pub per_example: Vec<ExampleScores>,
}

struct ExampleEval {
    /// `(n_samples, horizon)` per-frame scores per metric.
    psnr: Array2<f64>,
    ssim: Array2<f64>,
    lpips: Array2<f64>,
    /// `(n_samples, d)` generated-clip features and the real clip features.
    gen_features: Array2<f64>,
    real_features: Vec<f64>,
    stages: Option<Vec<Stage>>,
}

fn eval_one(
    predictor: &dyn Predictor,
    example: &TrainingWindow,
    cfg: &EvalConfig,
    suite: &MetricSuite,
    example_seed: u64,
) -> Result<ExampleEval, EvalError> {
    let n = cfg.n_samples;
    let p = example.horizon();
    let samples = predictor.sample_rollouts(example, n, example_seed)?;
    let mut psnr_scores = Array2::<f64>::zeros((n, p));
    let mut ssim_scores = Array2::<f64>::zeros((n, p));
    let mut lpips_scores = Array2::<f64>::zeros((n, p));
    for s in 0..n {
        for t in 0..p {
            let pred = samples.index_axis(Axis(0), s);
            let pred = pred.index_axis(Axis(0), t);
            let truth = example.targets.index_axis(Axis(0), t);
            psnr_scores[(s, t)] = psnr_default(&pred.into_dyn(), &truth.into_dyn())?;
            ssim_scores[(s, t)] = ssim(&pred, &truth)?;
            lpips_scores[(s, t)] =
                lpips_distance(&pred, &truth, suite.image_features, &suite.lpips_weights)?;
        }
    }
    // clip features: ground truth first, then every sample, batched with
    // the protocol's pad-and-mask rule
    let mut clips = Vec::with_capacity(n + 1);
    clips.push(example.targets.view());
    let sample_clips: Vec<_> = (0..n).map(|s| samples.index_axis(Axis(0), s)).collect();
    clips.extend(sample_clips.iter().cloned());
    let feats = extract_features_batched(&clips, suite.clip_features, cfg.fvd_batch)?;
    let real_features = feats.row(0).to_vec();
    let gen_features = feats.slice(ndarray::s![1.., ..]).to_owned();
    Ok(ExampleEval {
        psnr: psnr_scores,
        ssim: ssim_scores,
        lpips: lpips_scores,
        gen_features,
        real_features,
        stages: example.target_stages.clone(),
    })
}

/// Best/average over samples of the per-sample mean across `frames`.
fn best_avg(scores: &Array2<f64>, frames: &[usize], higher_better: bool) -> (f64, f64) {
    let per_sample: Vec<f64> = scores
        .rows()
        .into_iter()
        .map(|row| frames.iter().map(|&t| row[t]).sum::<f64>() / frames.len() as f64)
        .collect();
    let avg = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let best = if higher_better {
        per_sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    } else {
        per_sample.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    (best, avg)
}

/// Run the full protocol: `n_samples` rollouts per example; per-metric best
/// and average of the per-trajectory mean; FVD between the ground-truth
/// clips and all generated samples; per-stage rows when labels are present.
pub fn evaluate_protocol(
    predictor: &dyn Predictor,
    testset: &[TrainingWindow],
    cfg: &EvalConfig,
    suite: &MetricSuite,
) -> Result<MetricReport, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    for (i, ex) in testset.iter().enumerate() {
        if ex.context_len() != cfg.context || ex.horizon() != cfg.horizon {
            return Err(EvalError::WindowMismatch {
                index: i,
                c: cfg.context,
                horizon: cfg.horizon,
                got_c: ex.context_len(),
                got_h: ex.horizon(),
            });
        }
    }

    let evals: Vec<ExampleEval> = testset
        .par_iter()
        .enumerate()
        .map(|(i, ex)| eval_one(predictor, ex, cfg, suite, derive_rng(cfg.seed, &[i as u64]).random()))
        .collect::<Result<_, _>>()?;

    let horizon = cfg.horizon;
    let all_frames: Vec<usize> = (0..horizon).collect();

    let mut per_example = Vec::with_capacity(evals.len());
    for e in &evals {
        let (pb, pa) = best_avg(&e.psnr, &all_frames, true);
        let (sb, sa) = best_avg(&e.ssim, &all_frames, true);
        let (lb, la) = best_avg(&e.lpips, &all_frames, false);
        per_example.push(ExampleScores {
            psnr_best: pb,
            psnr_avg: pa,
            ssim_best: sb,
            ssim_avg: sa,
            lpips_best: lb,
            lpips_avg: la,
        });
    }
    let agg = |f: fn(&ExampleScores) -> f64| MeanStderr::over(
        &per_example.iter().map(f).collect::<Vec<_>>(),
    );
    let psnr = BestAverage {
        best: agg(|e| e.psnr_best),
        average: agg(|e| e.psnr_avg),
    };
    let ssim_ba = BestAverage {
        best: agg(|e| e.ssim_best),
        average: agg(|e| e.ssim_avg),
    };
    let lpips = BestAverage {
        best: agg(|e| e.lpips_best),
        average: agg(|e| e.lpips_avg),
    };

    // per-timestep average-of-samples curves
    let per_timestep = (0..horizon)
        .map(|t| {
            let m = |pick: fn(&ExampleEval) -> &Array2<f64>| {
                let vals: Vec<f64> = evals
                    .iter()
                    .map(|e| pick(e).column(t).mean().unwrap())
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            TimestepScores {
                psnr: m(|e| &e.psnr),
                ssim: m(|e| &e.ssim),
                lpips: m(|e| &e.lpips),
            }
        })
        .collect();

    let fvd = compute_fvd(&evals, cfg);
    let per_stage = if evals.iter().all(|e| e.stages.is_some()) {
        stage_rows(&evals, horizon)
    } else {
        Vec::new()
    };

    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        n_examples: testset.len(),
        psnr,
        ssim: ssim_ba,
        lpips,
        fvd,
        per_stage,
        per_timestep,
        per_example,
    })
}

fn compute_fvd(evals: &[ExampleEval], cfg: &EvalConfig) -> Option<MeanStderr> {
    let d = evals[0].real_features.len();
    let n_real = evals.len();
    let n_gen: usize = evals.iter().map(|e| e.gen_features.nrows()).sum();
    if n_real < 2 || n_gen < 2 {
        return None;
    }
    let mut real = Array2::<f64>::zeros((n_real, d));
    for (i, e) in evals.iter().enumerate() {
        real.row_mut(i)
            .assign(&ndarray::ArrayView1::from(&e.real_features));
    }
    let mut gen = Array2::<f64>::zeros((n_gen, d));
    let mut at = 0;
    for e in evals {
        gen.slice_mut(ndarray::s![at..at + e.gen_features.nrows(), ..])
            .assign(&e.gen_features);
        at += e.gen_features.nrows();
    }
    let point = {
        let (mu_r, cov_r) = feature_moments(&real);
        let (mu_g, cov_g) = feature_moments(&gen);
        frechet_distance(&mu_r, &cov_r, &mu_g, &cov_g).ok()?
    };
    // seeded bootstrap over clips on both sides
    let mut rng = derive_rng(cfg.seed, &[0xb0_07]);
    let mut rounds = Vec::with_capacity(cfg.fvd_bootstrap);
    for _ in 0..cfg.fvd_bootstrap {
        let rs: Vec<usize> = (0..n_real).map(|_| rng.random_range(0..n_real)).collect();
        let gs: Vec<usize> = (0..n_gen).map(|_| rng.random_range(0..n_gen)).collect();
        let real_b = ndarray::Array::from_shape_fn((n_real, d), |(i, j)| real[(rs[i], j)]);
        let gen_b = ndarray::Array::from_shape_fn((n_gen, d), |(i, j)| gen[(gs[i], j)]);
        let (mu_r, cov_r) = feature_moments(&real_b);
        let (mu_g, cov_g) = feature_moments(&gen_b);
        if let Ok(v) = frechet_distance(&mu_r, &cov_r, &mu_g, &cov_g) {
            rounds.push(v);
        }
    }
    let stderr = if rounds.len() < 2 {
        0.0
    } else {
        let m = rounds.iter().sum::<f64>() / rounds.len() as f64;
        (rounds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (rounds.len() as f64 - 1.0)).sqrt()
    };
    Some(MeanStderr {
        mean: point,
        stderr,
    })
}

const STAGE_ORDER: [Stage; 3] = [Stage::Approaching, Stage::Grasping, Stage::Moving];

fn stage_rows(evals: &[ExampleEval], horizon: usize) -> Vec<StageRow> {
    let mut rows = Vec::with_capacity(5);
    // per named stage
    let mut stage_means: Vec<Vec<(f64, f64, f64, f64, f64, f64)>> = vec![Vec::new(); 3];
    for e in evals {
        let stages = e.stages.as_ref().unwrap();
        for (si, stage) in STAGE_ORDER.iter().enumerate() {
            let frames: Vec<usize> = (0..horizon).filter(|&t| stages[t] == *stage).collect();
            if frames.is_empty() {
                continue;
            }
            let (pb, pa) = best_avg(&e.psnr, &frames, true);
            let (sb, sa) = best_avg(&e.ssim, &frames, true);
            let (lb, la) = best_avg(&e.lpips, &frames, false);
            stage_means[si].push((pb, pa, sb, sa, lb, la));
        }
    }
    let build = |rows: &[(f64, f64, f64, f64, f64, f64)], name: &str| -> StageRow {
        if rows.is_empty() {
            StageRow {
                stage: name.to_string(),
                psnr: None,
                ssim: None,
                lpips: None,
            }
        } else {
            let pick = |f: fn(&(f64, f64, f64, f64, f64, f64)) -> f64| {
                MeanStderr::over(&rows.iter().map(f).collect::<Vec<_>>())
            };
            StageRow {
                stage: name.to_string(),
                psnr: Some(BestAverage {
                    best: pick(|r| r.0),
                    average: pick(|r| r.1),
                }),
                ssim: Some(BestAverage {
                    best: pick(|r| r.2),
                    average: pick(|r| r.3),
                }),
                lpips: Some(BestAverage {
                    best: pick(|r| r.4),
                    average: pick(|r| r.5),
                }),
            }
        }
    };
    for (si, stage) in STAGE_ORDER.iter().enumerate() {
        rows.push(build(&stage_means[si], &format!("{stage:?}")));
    }
    // Average row: unweighted mean over the stages present per example
    let mut avg_rows = Vec::new();
    for (ei, e) in evals.iter().enumerate() {
        let _ = ei;
        let stages = e.stages.as_ref().unwrap();
        let mut acc: Vec<(f64, f64, f64, f64, f64, f64)> = Vec::new();
        for stage in STAGE_ORDER.iter() {
            let frames: Vec<usize> = (0..horizon).filter(|&t| stages[t] == *stage).collect();
            if frames.is_empty() {
                continue;
            }
            let (pb, pa) = best_avg(&e.psnr, &frames, true);
            let (sb, sa) = best_avg(&e.ssim, &frames, true);
            let (lb, la) = best_avg(&e.lpips, &frames, false);
            acc.push((pb, pa, sb, sa, lb, la));
        }
        if !acc.is_empty() {
            let n = acc.len() as f64;
            avg_rows.push((
                acc.iter().map(|r| r.0).sum::<f64>() / n,
                acc.iter().map(|r| r.1).sum::<f64>() / n,
                acc.iter().map(|r| r.2).sum::<f64>() / n,
                acc.iter().map(|r| r.3).sum::<f64>() / n,
                acc.iter().map(|r| r.4).sum::<f64>() / n,
                acc.iter().map(|r| r.5).sum::<f64>() / n,
            ));
        }
    }
    rows.push(build(&avg_rows, "Average"));
    // FinalGoal row: the last predicted frame only
    let final_rows: Vec<(f64, f64, f64, f64, f64, f64)> = evals
        .iter()
        .map(|e| {
            let frames = [horizon - 1];
            let (pb, pa) = best_avg(&e.psnr, &frames, true);
            let (sb, sa) = best_avg(&e.ssim, &frames, true);
            let (lb, la) = best_avg(&e.lpips, &frames, false);
            (pb, pa, sb, sa, lb, la)
        })
        .collect();
    rows.push(build(&final_rows, "FinalGoal"));
    rows
}

/// Per-stage rows only; errors when any example lacks stage labels.
pub fn stage_metrics(
    predictor: &dyn Predictor,
    testset: &[TrainingWindow],
    cfg: &EvalConfig,
    suite: &MetricSuite,
) -> Result<Vec<StageRow>, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if let Some(i) = testset.iter().position(|e| e.target_stages.is_none()) {
        return Err(EvalError::MissingStageLabels(i));
    }
    let report = evaluate_protocol(predictor, testset, cfg, suite)?;
    Ok(report.per_stage)
}

/// Cut deterministic offset-0 evaluation windows from trajectories.
pub fn windows_from_trajectories(
    trajectories: &[Trajectory],
    context: usize,
    horizon: usize,
) -> Result<Vec<TrainingWindow>, EvalError> {
    trajectories
        .iter()
        .map(|t| sample_window(t, context, horizon, 0).map_err(EvalError::from))
        .collect()
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Flat tab-separated tables for plotting: a summary block, the stage
    /// table, and score-vs-timestep rows.
    pub fn flat_table(&self) -> String {
        let mut out = String::new();
        out.push_str("section\tname\tpsnr_best\tpsnr_avg\tssim_best\tssim_avg\tlpips_best\tlpips_avg\n");
        out.push_str(&format!(
            "summary\tall\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.psnr.best.mean,
            self.psnr.average.mean,
            self.ssim.best.mean,
            self.ssim.average.mean,
            self.lpips.best.mean,
            self.lpips.average.mean,
        ));
        if let Some(fvd) = &self.fvd {
            out.push_str(&format!(
                "summary\tfvd\t{:.6}\t{:.6}\t-\t-\t-\t-\n",
                fvd.mean, fvd.stderr
            ));
        }
        for row in &self.per_stage {
            let cell = |m: &Option<BestAverage>, best: bool| match m {
                Some(v) => format!("{:.6}", if best { v.best.mean } else { v.average.mean }),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "stage\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                row.stage,
                cell(&row.psnr, true),
                cell(&row.psnr, false),
                cell(&row.ssim, true),
                cell(&row.ssim, false),
                cell(&row.lpips, true),
                cell(&row.lpips, false),
            ));
        }
        for (t, s) in self.per_timestep.iter().enumerate() {
            out.push_str(&format!(
                "timestep\t{}\t-\t{:.6}\t-\t{:.6}\t-\t{:.6}\n",
                t + 1,
                s.psnr,
                s.ssim,
                s.lpips
            ));
        }
        out
    }

    /// Write `report.json` plus the flat `.tsv` next to it.
    pub fn save(&self, json_path: &std::path::Path) -> Result<(), EvalError> {
        std::fs::write(json_path, self.to_json()?)?;
        std::fs::write(json_path.with_extension("tsv"), self.flat_table())?;
        Ok(())
    }
}

use rand::Rng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SceneConfig};
    use crate::metrics::{RandomProjectionClipFeatures, RandomProjectionFeatures};
    use crate::metrics::PSNR_CAP;
    use ndarray::Array5;

    /// Predictor that returns the ground truth for every sample.
    struct Oracle;

    impl Predictor for Oracle {
        fn sample_rollouts(
            &self,
            example: &TrainingWindow,
            n_samples: usize,
            _seed: u64,
        ) -> Result<Array5<f64>, EvalError> {
            let (p, h, w, c) = example.targets.dim();
            let mut out = Array5::<f64>::zeros((n_samples, p, h, w, c));
            for s in 0..n_samples {
                out.index_axis_mut(Axis(0), s).assign(&example.targets);
            }
            Ok(out)
        }
    }

    /// Predictor that perturbs the ground truth per sample, deterministically
    /// in (example content, sample, seed).
    struct Noisy;

    impl Predictor for Noisy {
        fn sample_rollouts(
            &self,
            example: &TrainingWindow,
            n_samples: usize,
            seed: u64,
        ) -> Result<Array5<f64>, EvalError> {
            let (p, h, w, c) = example.targets.dim();
            let mut out = Array5::<f64>::zeros((n_samples, p, h, w, c));
            for s in 0..n_samples {
                let mut rng = derive_rng(seed, &[s as u64]);
                let noise = crate::rng::uniform(&[p, h, w, c], -0.2, 0.2, &mut rng)
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let mut v = out.index_axis_mut(Axis(0), s);
                v.assign(&example.targets);
                ndarray::Zip::from(&mut v)
                    .and(&noise)
                    .for_each(|a, &b| *a = (*a + b).clamp(0.0, 1.0));
            }
            Ok(out)
        }
    }

    fn testset(n: usize) -> Vec<TrainingWindow> {
        let trajs =
            generate_synthetic(77, n, 12, &SceneConfig::default()).unwrap();
        windows_from_trajectories(&trajs, 2, 10).unwrap()
    }

    fn suite_parts() -> (RandomProjectionFeatures, RandomProjectionClipFeatures) {
        (
            RandomProjectionFeatures::new(101, 4, vec![64, 32]),
            RandomProjectionClipFeatures::new(102, 4, 24),
        )
    }

    #[test]
    fn oracle_scores_sit_at_the_ceiling() {
        let (img, clip) = suite_parts();
        let suite = MetricSuite {
            image_features: &img,
            lpips_weights: img.uniform_weights(),
            clip_features: &clip,
        };
        let cfg = EvalConfig {
            n_samples: 4,
            fvd_bootstrap: 4,
            ..EvalConfig::default()
        };
        let set = testset(3);
        let report = evaluate_protocol(&Oracle, &set, &cfg, &suite).unwrap();
        assert_eq!(report.psnr.best.mean, PSNR_CAP);
        assert_eq!(report.psnr.average.mean, PSNR_CAP);
        assert!((report.ssim.best.mean - 1.0).abs() < 1e-12);
        assert_eq!(report.lpips.best.mean, 0.0);
        assert_eq!(report.lpips.average.mean, 0.0);
        let fvd = report.fvd.expect("fvd present");
        // the generated side holds every sample, so replicating the real
        // clips n_samples times shrinks the unbiased covariance by
        // n(k-1)/(nk-1); the oracle lands near zero, not at zero
        assert!(fvd.mean < 1e-2, "oracle FVD {}", fvd.mean);
        // stage rows exist and sit at the ceiling too
        assert_eq!(report.per_stage.len(), 5);
        for row in &report.per_stage {
            if let Some(p) = &row.psnr {
                assert_eq!(p.best.mean, PSNR_CAP);
            }
        }
    }

    #[test]
    fn single_sample_best_equals_average() {
        let (img, clip) = suite_parts();
        let suite = MetricSuite {
            image_features: &img,
            lpips_weights: img.uniform_weights(),
            clip_features: &clip,
        };
        let cfg = EvalConfig {
            n_samples: 1,
            fvd_bootstrap: 2,
            ..EvalConfig::default()
        };
        let set = testset(2);
        let report = evaluate_protocol(&Noisy, &set, &cfg, &suite).unwrap();
        for e in &report.per_example {
            assert_eq!(e.psnr_best, e.psnr_avg);
            assert_eq!(e.ssim_best, e.ssim_avg);
            assert_eq!(e.lpips_best, e.lpips_avg);
        }
    }

    #[test]
    fn best_dominates_average_per_example_and_monotonicity_in_samples() {
        let (img, clip) = suite_parts();
        let suite = MetricSuite {
            image_features: &img,
            lpips_weights: img.uniform_weights(),
            clip_features: &clip,
        };
        let set = testset(2);
        let mut prev_best: Option<Vec<f64>> = None;
        for n in [1usize, 4, 16] {
            let cfg = EvalConfig {
                n_samples: n,
                fvd_bootstrap: 2,
                ..EvalConfig::default()
            };
            let report = evaluate_protocol(&Noisy, &set, &cfg, &suite).unwrap();
            for e in &report.per_example {
                assert!(e.psnr_best >= e.psnr_avg);
                assert!(e.ssim_best >= e.ssim_avg);
                assert!(e.lpips_best <= e.lpips_avg);
            }
            let best: Vec<f64> = report.per_example.iter().map(|e| e.psnr_best).collect();
            if let Some(prev) = &prev_best {
                for (now, was) in best.iter().zip(prev) {
                    assert!(now >= was, "best PSNR degraded as samples grew");
                }
            }
            prev_best = Some(best);
        }
    }

    #[test]
    fn reports_are_bit_identical_across_runs() {
        let (img, clip) = suite_parts();
        let suite = MetricSuite {
            image_features: &img,
            lpips_weights: img.uniform_weights(),
            clip_features: &clip,
        };
        let cfg = EvalConfig {
            n_samples: 3,
            fvd_bootstrap: 3,
            seed: 5,
            ..EvalConfig::default()
        };
        let set = testset(2);
        let a = evaluate_protocol(&Noisy, &set, &cfg, &suite).unwrap();
        let b = evaluate_protocol(&Noisy, &set, &cfg, &suite).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn stage_rows_mark_missing_stages_and_metrics_errors() {
        let (img, clip) = suite_parts();
        let suite = MetricSuite {
            image_features: &img,
            lpips_weights: img.uniform_weights(),
            clip_features: &clip,
        };
        let cfg = EvalConfig {
            n_samples: 2,
            fvd_bootstrap: 2,
            ..EvalConfig::default()
        };
        // all frames labeled Approaching -> Grasping/Moving rows empty
        let mut set = testset(2);
        for w in &mut set {
            w.target_stages = Some(vec![Stage::Approaching; 10]);
        }
        let rows = stage_metrics(&Oracle, &set, &cfg, &suite).unwrap();
        assert_eq!(rows[0].stage, "Approaching");
        assert!(rows[0].psnr.is_some());
        assert!(rows[1].psnr.is_none(), "Grasping should be empty-marked");
        assert!(rows[2].psnr.is_none(), "Moving should be empty-marked");
        assert!(rows[3].psnr.is_some(), "Average uses available stages");
        assert_eq!(rows[4].stage, "FinalGoal");
        // missing labels -> typed error
        set[0].target_stages = None;
        assert!(matches!(
            stage_metrics(&Oracle, &set, &cfg, &suite),
            Err(EvalError::MissingStageLabels(0))
        ));
        // empty test set
        assert!(matches!(
            evaluate_protocol(&Oracle, &[], &cfg, &suite),
            Err(EvalError::EmptyTestSet)
        ));
    }

    #[test]
    fn stage_partition_sizes_sum_to_horizon_on_synthetic_episodes() {
        let set = testset(3);
        for w in &set {
            let stages = w.target_stages.as_ref().unwrap();
            let count: usize = STAGE_ORDER
                .iter()
                .map(|s| stages.iter().filter(|&&x| x == *s).count())
                .sum();
            assert_eq!(count, w.horizon());
        }
    }

    #[test]
    fn report_round_trips_through_json_and_tsv_has_all_sections() {
        let (img, clip) = suite_parts();
        let suite = MetricSuite {
            image_features: &img,
            lpips_weights: img.uniform_weights(),
            clip_features: &clip,
        };
        let cfg = EvalConfig {
            n_samples: 2,
            fvd_bootstrap: 2,
            ..EvalConfig::default()
        };
        let set = testset(2);
        let report = evaluate_protocol(&Noisy, &set, &cfg, &suite).unwrap();
        let json = report.to_json().unwrap();
        let back = MetricReport::from_json(&json).unwrap();
        assert_eq!(report, back);
        let table = report.flat_table();
        assert!(table.contains("summary\tall"));
        assert!(table.contains("stage\tApproaching"));
        assert!(table.contains("timestep\t10"));
    }
}
