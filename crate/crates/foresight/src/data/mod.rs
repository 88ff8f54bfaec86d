//! Trajectory data: containers, training windows, and synthetic scenes.
//!
//! A [`Trajectory`] is the unit all datasets share: aligned frames, actions
//! and optional robot states, with per-frame semantic stage labels when the
//! source provides them. Frames are stored as 8-bit RGB at the model's
//! 48×64 input size; loaders resize on the way in.

mod container;
mod synthetic;

pub use container::{
    export_trajectory, load_trajectory, load_trajectory_dir, TrajectoryFormat,
    CONTAINER_FORMAT_VERSION,
};
pub use synthetic::{
    block_centroid, generate_synthetic, marker_centroid, render_scene, stage_of_kind, SceneConfig,
};

use ndarray::{Array2, Array4, Axis, Slice};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame height after preprocessing.
pub const FRAME_H: usize = 48;
/// Frame width after preprocessing.
pub const FRAME_W: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("trajectory invariant violated: {0}")]
    Invalid(String),
    #[error("actions length {actions} does not match frame count {frames} - 1")]
    ActionLengthMismatch { actions: usize, frames: usize },
    #[error("window offset {offset} + context {c} + horizon {horizon} exceeds {frames} frames")]
    WindowOutOfRange {
        offset: usize,
        c: usize,
        horizon: usize,
        frames: usize,
    },
    #[error("missing dataset `{0}` in container")]
    MissingDataset(String),
    #[error("container format is `{found}`, expected `{expected}`")]
    FormatMismatch { found: String, expected: String },
    #[error("invalid scene config: {0}")]
    InvalidSceneConfig(String),
    #[error("hdf5: {0}")]
    Hdf5(#[from] hdf5::Error),
    #[error(transparent)]
    Action(#[from] crate::action::ActionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Semantic stage of a frame within a grasp episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Approaching,
    Grasping,
    Moving,
    None,
}

impl Stage {
    pub fn to_u8(self) -> u8 {
        match self {
            Stage::None => 0,
            Stage::Approaching => 1,
            Stage::Grasping => 2,
            Stage::Moving => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Stage::None),
            1 => Some(Stage::Approaching),
            2 => Some(Stage::Grasping),
            3 => Some(Stage::Moving),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryMeta {
    /// Source id, e.g. robot name.
    pub source: String,
    pub camera: String,
    /// Per-frame stage labels, when the recording carries them.
    pub stage_labels: Option<Vec<Stage>>,
}

/// Aligned frames / actions / states from one recording or episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `(T, 48, 64, 3)` 8-bit intensities.
    pub frames: Array4<u8>,
    /// `(T-1, n_a)`; `actions[i]` maps frame `i` to frame `i+1`.
    pub actions: Array2<f32>,
    /// `(T, n_s)` end-effector pose, when recorded.
    pub states: Option<Array2<f32>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn action_dim(&self) -> usize {
        self.actions.dim().1
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (t, h, w, c) = self.frames.dim();
        if t < 2 {
            return Err(DataError::Invalid(format!("need at least 2 frames, got {t}")));
        }
        if h != FRAME_H || w != FRAME_W || c != 3 {
            return Err(DataError::Invalid(format!(
                "frames must be ({FRAME_H}, {FRAME_W}, 3), got ({h}, {w}, {c})"
            )));
        }
        if self.actions.dim().0 != t - 1 {
            return Err(DataError::ActionLengthMismatch {
                actions: self.actions.dim().0,
                frames: t,
            });
        }
        if self.actions.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite action".into()));
        }
        if let Some(states) = &self.states {
            if states.dim().0 != t {
                return Err(DataError::Invalid(format!(
                    "states length {} != frame count {t}",
                    states.dim().0
                )));
            }
            if states.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid("non-finite state".into()));
            }
        }
        if let Some(labels) = &self.meta.stage_labels {
            if labels.len() != t {
                return Err(DataError::Invalid(format!(
                    "stage labels length {} != frame count {t}",
                    labels.len()
                )));
            }
        }
        Ok(())
    }
}

/// A model-ready slice of a trajectory: `c` context frames, `horizon`
/// prediction targets, and the actions spanning both, all scaled to `[0,1]`.
#[derive(Clone, Debug)]
pub struct TrainingWindow {
    /// `(c, H, W, 3)` in `[0,1]`.
    pub context: Array4<f64>,
    /// `(horizon, H, W, 3)` in `[0,1]`.
    pub targets: Array4<f64>,
    /// `(c + horizon - 1, n_a)`; `actions[i]` maps frame `i` to `i+1`.
    pub actions: Array2<f64>,
    /// `(c + horizon, n_s)` when the trajectory has states.
    pub states: Option<Array2<f64>>,
    /// Stage label per target frame, when the trajectory has labels.
    pub target_stages: Option<Vec<Stage>>,
}

impl TrainingWindow {
    pub fn context_len(&self) -> usize {
        self.context.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.targets.dim().0
    }
}

/// Convert stored 8-bit frames to `[0,1]` floats.
pub fn frames_to_f64(frames: &Array4<u8>) -> Array4<f64> {
    frames.mapv(|v| v as f64 / 255.0)
}

/// Quantize predicted `[0,1]` frames back to 8-bit.
pub fn f64_to_frames(frames: &Array4<f64>) -> Array4<u8> {
    frames.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Cut a window at a fixed `offset`. Fails when `offset + c + horizon`
/// exceeds the trajectory.
pub fn sample_window(
    traj: &Trajectory,
    c: usize,
    horizon: usize,
    offset: usize,
) -> Result<TrainingWindow, DataError> {
    if c < 1 || horizon < 1 {
        return Err(DataError::Invalid(
            "context and horizon must be at least 1".into(),
        ));
    }
    let t = traj.len();
    if offset + c + horizon > t {
        return Err(DataError::WindowOutOfRange {
            offset,
            c,
            horizon,
            frames: t,
        });
    }
    let span = c + horizon;
    let frames = traj
        .frames
        .slice_axis(Axis(0), Slice::from(offset..offset + span))
        .to_owned();
    let float = frames_to_f64(&frames);
    let context = float
        .slice_axis(Axis(0), Slice::from(0..c))
        .to_owned();
    let targets = float
        .slice_axis(Axis(0), Slice::from(c..span))
        .to_owned();
    let actions = traj
        .actions
        .slice_axis(Axis(0), Slice::from(offset..offset + span - 1))
        .mapv(|v| v as f64);
    let states = traj.states.as_ref().map(|s| {
        s.slice_axis(Axis(0), Slice::from(offset..offset + span))
            .mapv(|v| v as f64)
    });
    let target_stages = traj
        .meta
        .stage_labels
        .as_ref()
        .map(|labels| labels[offset + c..offset + span].to_vec());
    Ok(TrainingWindow {
        context,
        targets,
        actions,
        states,
        target_stages,
    })
}

/// Cut a window at a seeded random offset.
pub fn sample_window_random(
    traj: &Trajectory,
    c: usize,
    horizon: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TrainingWindow, DataError> {
    let t = traj.len();
    if c + horizon > t {
        return Err(DataError::WindowOutOfRange {
            offset: 0,
            c,
            horizon,
            frames: t,
        });
    }
    let max_offset = t - c - horizon;
    let offset = if max_offset == 0 {
        0
    } else {
        rand::Rng::random_range(rng, 0..=max_offset)
    };
    sample_window(traj, c, horizon, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    pub(crate) fn toy_trajectory(t: usize, n_a: usize) -> Trajectory {
        let mut frames = Array4::<u8>::zeros((t, FRAME_H, FRAME_W, 3));
        for ti in 0..t {
            frames
                .index_axis_mut(Axis(0), ti)
                .fill((ti * 17 % 256) as u8);
        }
        let actions =
            Array2::from_shape_fn((t - 1, n_a), |(i, j)| (i as f32) * 0.1 + (j as f32) * 0.01);
        let states = Array2::from_shape_fn((t, 4), |(i, j)| i as f32 + j as f32);
        Trajectory {
            frames,
            actions,
            states: Some(states),
            meta: TrajectoryMeta {
                source: "toy".into(),
                camera: "cam0".into(),
                stage_labels: Some(vec![Stage::Approaching; t]),
            },
        }
    }

    #[test]
    fn validate_catches_length_mismatch() {
        let mut traj = toy_trajectory(12, 4);
        assert!(traj.validate().is_ok());
        traj.actions = Array2::zeros((12, 4)); // actions length T instead of T-1
        assert!(matches!(
            traj.validate(),
            Err(DataError::ActionLengthMismatch { actions: 12, frames: 12 })
        ));
    }

    #[test]
    fn window_shapes_follow_the_protocol() {
        let traj = toy_trajectory(12, 4);
        let w = sample_window(&traj, 2, 10, 0).unwrap();
        assert_eq!(w.context.dim(), (2, FRAME_H, FRAME_W, 3));
        assert_eq!(w.targets.dim(), (10, FRAME_H, FRAME_W, 3));
        assert_eq!(w.actions.dim(), (11, 4));
        assert_eq!(w.states.as_ref().unwrap().dim(), (12, 4));
        assert_eq!(w.target_stages.as_ref().unwrap().len(), 10);
        assert!(w.context.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(w.targets.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn minimal_window_has_one_action() {
        let traj = toy_trajectory(4, 4);
        let w = sample_window(&traj, 1, 1, 2).unwrap();
        assert_eq!(w.context.dim().0, 1);
        assert_eq!(w.targets.dim().0, 1);
        assert_eq!(w.actions.dim().0, 1);
        // action alignment: the slice starts at the window offset
        assert_eq!(w.actions[(0, 0)], traj.actions[(2, 0)] as f64);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let traj = toy_trajectory(8, 4);
        assert!(matches!(
            sample_window(&traj, 2, 10, 0),
            Err(DataError::WindowOutOfRange { .. })
        ));
        assert!(matches!(
            sample_window(&traj, 2, 4, 3),
            Err(DataError::WindowOutOfRange { .. })
        ));
    }

    #[test]
    fn random_offsets_reproduce_for_equal_seeds() {
        let traj = toy_trajectory(30, 4);
        let offsets = |seed: u64| -> Vec<f64> {
            let mut rng = derive_rng(seed, &[1]);
            (0..10)
                .map(|_| {
                    sample_window_random(&traj, 2, 5, &mut rng)
                        .unwrap()
                        .context[(0, 0, 0, 0)]
                })
                .collect()
        };
        assert_eq!(offsets(42), offsets(42));
        assert_ne!(offsets(42), offsets(43));
    }

    #[test]
    fn frame_quantization_round_trips() {
        let traj = toy_trajectory(3, 2);
        let f = frames_to_f64(&traj.frames);
        let back = f64_to_frames(&f);
        assert_eq!(back, traj.frames);
    }
}
