//! HDF5 trajectory containers.
//!
//! Both supported formats use one file per trajectory with datasets
//! `frames` `(T,H,W,3) u8`, `actions` `(T-1,n_a) f32`, optional `states`
//! `(T,n_s) f32` and optional `stage_labels` `(T,) u8`, plus file
//! attributes `format`, `format_version`, `robot` and `camera`. The two
//! formats share this skeleton; the `format` attribute pins which one a
//! file claims to be, and loading under the wrong declared format is an
//! error. Frames of other sizes are bilinearly resized to 48×64 on load.

use std::path::Path;

use hdf5::types::VarLenUnicode;
use ndarray::{Array2, Array4, Axis};

use super::{DataError, Stage, Trajectory, TrajectoryMeta, FRAME_H, FRAME_W};

pub const CONTAINER_FORMAT_VERSION: i64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFormat {
    RobonetHdf5,
    Pandagrasp,
}

impl TrajectoryFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrajectoryFormat::RobonetHdf5 => "robonet_hdf5",
            TrajectoryFormat::Pandagrasp => "pandagrasp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "robonet_hdf5" => Some(TrajectoryFormat::RobonetHdf5),
            "pandagrasp" => Some(TrajectoryFormat::Pandagrasp),
            _ => None,
        }
    }
}

fn write_str_attr(file: &hdf5::File, name: &str, value: &str) -> Result<(), DataError> {
    let attr = file.new_attr::<VarLenUnicode>().create(name)?;
    let v: VarLenUnicode = value
        .parse()
        .map_err(|_| DataError::Invalid(format!("attribute {name} is not valid unicode")))?;
    attr.write_scalar(&v)?;
    Ok(())
}

fn read_str_attr(file: &hdf5::File, name: &str) -> Result<String, DataError> {
    let attr = file.attr(name)?;
    let v: VarLenUnicode = attr.read_scalar()?;
    Ok(v.to_string())
}

/// Read a string attribute without tripping libhdf5's error stack when the
/// attribute is absent.
fn read_str_attr_opt(file: &hdf5::File, name: &str) -> Option<String> {
    if !file.attr_names().ok()?.iter().any(|n| n == name) {
        return None;
    }
    read_str_attr(file, name).ok()
}

/// Write a trajectory container. The output bytes are a pure function of
/// the trajectory content and format version.
pub fn export_trajectory(
    traj: &Trajectory,
    path: &Path,
    format: TrajectoryFormat,
) -> Result<(), DataError> {
    traj.validate()?;
    let file = hdf5::File::create(path)?;
    let (t, h, w, c) = traj.frames.dim();

    let frames = file.new_dataset::<u8>().shape((t, h, w, c)).create("frames")?;
    frames.write_raw(traj.frames.as_slice().expect("frames contiguous"))?;

    let (ta, na) = traj.actions.dim();
    let actions = file.new_dataset::<f32>().shape((ta, na)).create("actions")?;
    actions.write_raw(traj.actions.as_slice().expect("actions contiguous"))?;

    if let Some(states) = &traj.states {
        let (ts, ns) = states.dim();
        let ds = file.new_dataset::<f32>().shape((ts, ns)).create("states")?;
        ds.write_raw(states.as_slice().expect("states contiguous"))?;
    }
    if let Some(labels) = &traj.meta.stage_labels {
        let coded: Vec<u8> = labels.iter().map(|s| s.to_u8()).collect();
        let ds = file.new_dataset::<u8>().shape(coded.len()).create("stage_labels")?;
        ds.write_raw(&coded)?;
    }

    write_str_attr(&file, "format", format.as_str())?;
    write_str_attr(&file, "robot", &traj.meta.source)?;
    write_str_attr(&file, "camera", &traj.meta.camera)?;
    let ver = file.new_attr::<i64>().create("format_version")?;
    ver.write_scalar(&CONTAINER_FORMAT_VERSION)?;
    Ok(())
}

/// Load a trajectory container, checking the declared format and resizing
/// frames to 48×64 when needed.
pub fn load_trajectory(path: &Path, format: TrajectoryFormat) -> Result<Trajectory, DataError> {
    let file = hdf5::File::open(path)?;

    let found = read_str_attr_opt(&file, "format")
        .ok_or_else(|| DataError::MissingDataset("format attribute".into()))?;
    if found != format.as_str() {
        return Err(DataError::FormatMismatch {
            found,
            expected: format.as_str().to_string(),
        });
    }

    if !file.link_exists("frames") {
        return Err(DataError::MissingDataset("frames".into()));
    }
    let frames_ds = file.dataset("frames")?;
    let fshape = frames_ds.shape();
    if fshape.len() != 4 || fshape[3] != 3 {
        return Err(DataError::Invalid(format!(
            "frames dataset must be (T,H,W,3), got {fshape:?}"
        )));
    }
    let raw: Vec<u8> = frames_ds.read_raw()?;
    let frames =
        Array4::from_shape_vec((fshape[0], fshape[1], fshape[2], fshape[3]), raw)
            .map_err(|e| DataError::Invalid(format!("frames dataset: {e}")))?;
    let frames = if fshape[1] == FRAME_H && fshape[2] == FRAME_W {
        frames
    } else {
        resize_frames(&frames, FRAME_H, FRAME_W)
    };

    if !file.link_exists("actions") {
        return Err(DataError::MissingDataset("actions".into()));
    }
    let actions_ds = file.dataset("actions")?;
    let ashape = actions_ds.shape();
    if ashape.len() != 2 {
        return Err(DataError::Invalid(format!(
            "actions dataset must be (T-1,n_a), got {ashape:?}"
        )));
    }
    let araw: Vec<f32> = actions_ds.read_raw()?;
    let actions = Array2::from_shape_vec((ashape[0], ashape[1]), araw)
        .map_err(|e| DataError::Invalid(format!("actions dataset: {e}")))?;

    let states = if file.link_exists("states") {
        let ds = file.dataset("states")?;
        let s = ds.shape();
        let raw: Vec<f32> = ds.read_raw()?;
        Some(
            Array2::from_shape_vec((s[0], s[1]), raw)
                .map_err(|e| DataError::Invalid(format!("states dataset: {e}")))?,
        )
    } else {
        None
    };

    let stage_labels = if file.link_exists("stage_labels") {
        let ds = file.dataset("stage_labels")?;
        let raw: Vec<u8> = ds.read_raw()?;
        let labels: Option<Vec<Stage>> = raw.iter().map(|&v| Stage::from_u8(v)).collect();
        Some(labels.ok_or_else(|| {
            DataError::Invalid("stage_labels contains an unknown code".into())
        })?)
    } else {
        None
    };

    let traj = Trajectory {
        frames,
        actions,
        states,
        meta: TrajectoryMeta {
            source: read_str_attr_opt(&file, "robot").unwrap_or_default(),
            camera: read_str_attr_opt(&file, "camera").unwrap_or_default(),
            stage_labels,
        },
    };
    traj.validate()?;
    Ok(traj)
}

/// Load every `*.h5` trajectory in a directory, sorted by file name.
pub fn load_trajectory_dir(
    dir: &Path,
    format: TrajectoryFormat,
) -> Result<Vec<Trajectory>, DataError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "h5").unwrap_or(false))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| load_trajectory(p, format))
        .collect()
}

/// Bilinear resize of a frame stack to `(out_h, out_w)`.
fn resize_frames(frames: &Array4<u8>, out_h: usize, out_w: usize) -> Array4<u8> {
    let (t, h, w, c) = frames.dim();
    let mut out = Array4::<u8>::zeros((t, out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ti in 0..t {
        let src = frames.index_axis(Axis(0), ti);
        for oy in 0..out_h {
            // align block centers so the mapping is inversion-friendly
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for ch in 0..c {
                    let v00 = src[(y0, x0, ch)] as f64;
                    let v01 = src[(y0, x1, ch)] as f64;
                    let v10 = src[(y1, x0, ch)] as f64;
                    let v11 = src[(y1, x1, ch)] as f64;
                    let v = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                    out[(ti, oy, ox, ch)] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_trajectory;

    #[test]
    fn export_load_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.h5");
        let traj = toy_trajectory(12, 4);
        export_trajectory(&traj, &path, TrajectoryFormat::Pandagrasp).unwrap();
        let back = load_trajectory(&path, TrajectoryFormat::Pandagrasp).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn export_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.h5"), dir.path().join("b.h5"));
        let traj = toy_trajectory(6, 4);
        export_trajectory(&traj, &p1, TrajectoryFormat::RobonetHdf5).unwrap();
        export_trajectory(&traj, &p2, TrajectoryFormat::RobonetHdf5).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn invalid_trajectory_is_rejected_on_export() {
        let dir = tempfile::tempdir().unwrap();
        let mut traj = toy_trajectory(6, 4);
        traj.actions = Array2::zeros((6, 4)); // wrong length
        let err = export_trajectory(
            &traj,
            &dir.path().join("bad.h5"),
            TrajectoryFormat::Pandagrasp,
        );
        assert!(matches!(err, Err(DataError::ActionLengthMismatch { .. })));
    }

    #[test]
    fn format_attribute_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.h5");
        let traj = toy_trajectory(6, 4);
        export_trajectory(&traj, &path, TrajectoryFormat::Pandagrasp).unwrap();
        assert!(matches!(
            load_trajectory(&path, TrajectoryFormat::RobonetHdf5),
            Err(DataError::FormatMismatch { .. })
        ));
    }

    #[test]
    fn oversized_frames_are_resized_on_load() {
        // hand-write a container with 96x128 frames
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.h5");
        let t = 3usize;
        let frames: Vec<u8> = (0..t * 96 * 128 * 3).map(|i| (i % 255) as u8).collect();
        let actions: Vec<f32> = vec![0.0; (t - 1) * 4];
        {
            let f = hdf5::File::create(&path).unwrap();
            let ds = f.new_dataset::<u8>().shape((t, 96, 128, 3)).create("frames").unwrap();
            ds.write_raw(&frames).unwrap();
            let da = f.new_dataset::<f32>().shape((t - 1, 4)).create("actions").unwrap();
            da.write_raw(&actions).unwrap();
            let attr = f.new_attr::<VarLenUnicode>().create("format").unwrap();
            attr.write_scalar(&"robonet_hdf5".parse::<VarLenUnicode>().unwrap())
                .unwrap();
        }
        let traj = load_trajectory(&path, TrajectoryFormat::RobonetHdf5).unwrap();
        assert_eq!(traj.frames.dim(), (3, FRAME_H, FRAME_W, 3));
        assert!(traj.validate().is_ok());
    }

    #[test]
    fn missing_actions_dataset_is_a_typed_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.h5");
        {
            let f = hdf5::File::create(&path).unwrap();
            let ds = f
                .new_dataset::<u8>()
                .shape((2, FRAME_H, FRAME_W, 3))
                .create("frames")
                .unwrap();
            ds.write_raw(&vec![0u8; 2 * FRAME_H * FRAME_W * 3]).unwrap();
            let attr = f.new_attr::<VarLenUnicode>().create("format").unwrap();
            attr.write_scalar(&"pandagrasp".parse::<VarLenUnicode>().unwrap())
                .unwrap();
        }
        assert!(matches!(
            load_trajectory(&path, TrajectoryFormat::Pandagrasp),
            Err(DataError::MissingDataset(name)) if name == "actions"
        ));
    }
}
