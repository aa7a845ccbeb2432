//! Dataset directories and TUM trajectory files.
//!
//! A dataset directory holds `scene.json` (camera intrinsics plus, for
//! synthetic data, the ground-truth objects and landmarks), `frames.jsonl`
//! (one [`FrameRecord`] per line) and `groundtruth.txt` (TUM trajectory).

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::geometry::Pose;
use crate::sim::{pose_from_tum, pose_to_tum, FrameRecord, Scene};

pub const SCENE_FILE: &str = "scene.json";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0}: frame timestamps must be strictly increasing")]
    NonMonotonicTimestamps(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// A timestamped camera pose (camera-from-world).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// `printf("%.{digits}g")`-style formatting.
pub fn format_significant(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -5 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", strip(mantissa), sign, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        strip(&format!("{x:.decimals$}"))
    }
}

/// One TUM line: `timestamp tx ty tz qx qy qz qw`, world-from-camera, pose
/// fields with 9 significant digits and the timestamp with 6 decimals.
pub fn format_tum_line(timestamp: f64, pose: &Pose) -> String {
    let v = pose_to_tum(pose);
    let mut line = format!("{timestamp:.6}");
    for x in v {
        line.push(' ');
        line.push_str(&format_significant(x, 9));
    }
    line
}

pub fn write_tum<W: Write>(mut w: W, poses: &[TumPose]) -> io::Result<()> {
    for p in poses {
        writeln!(w, "{}", format_tum_line(p.timestamp, &p.pose))?;
    }
    w.flush()
}

pub fn write_tum_file(path: &Path, poses: &[TumPose]) -> Result<(), DatasetError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_tum(BufWriter::new(f), poses).map_err(io_err(path))
}

/// Parses a TUM trajectory; `#` comments and blank lines are skipped.
pub fn read_tum<R: BufRead>(r: R, path: &Path) -> Result<Vec<TumPose>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("{t:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        let q = [vals[4], vals[5], vals[6], vals[7]];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(qn > 1e-6) {
            return Err(parse_err("zero quaternion".into()));
        }
        let arr = [vals[1], vals[2], vals[3], q[0], q[1], q[2], q[3]];
        out.push(TumPose { timestamp: vals[0], pose: pose_from_tum(&arr) });
    }
    Ok(out)
}

pub fn read_tum_file(path: &Path) -> Result<Vec<TumPose>, DatasetError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_tum(BufReader::new(f), path)
}

/// An input sequence loaded from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: Scene,
    pub frames: Vec<FrameRecord>,
    /// Empty when the directory has no ground truth.
    pub groundtruth: Vec<TumPose>,
}

pub fn write_dataset(dir: &Path, scene: &Scene, frames: &[FrameRecord]) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(SCENE_FILE);
    let text = serde_json::to_string_pretty(scene).expect("scene serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;

    let path = dir.join(FRAMES_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for f in frames {
        serde_json::to_writer(&mut w, f).map_err(|e| io_err(&path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let gt: Vec<TumPose> = frames
        .iter()
        .filter_map(|f| f.groundtruth_pose().map(|pose| TumPose { timestamp: f.timestamp, pose }))
        .collect();
    write_tum_file(&dir.join(GROUNDTRUTH_FILE), &gt)
}

pub fn read_frames<R: BufRead>(r: R, path: &Path) -> Result<Vec<FrameRecord>, DatasetError> {
    let mut frames: Vec<FrameRecord> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FrameRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if f.detections.iter().any(|d| d.contour.len() % 2 != 0) {
            return Err(DatasetError::Parse { path: path.to_path_buf(), line: i + 1, message: "odd contour length".into() });
        }
        if frames.last().is_some_and(|p| p.timestamp >= f.timestamp) {
            return Err(DatasetError::NonMonotonicTimestamps(path.to_path_buf()));
        }
        frames.push(f);
    }
    Ok(frames)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join(SCENE_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let scene: Scene = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    scene.intrinsics.validate().map_err(|e| DatasetError::Parse { path: path.clone(), line: 0, message: e.to_string() })?;

    let path = dir.join(FRAMES_FILE);
    let frames = read_frames(BufReader::new(File::open(&path).map_err(io_err(&path))?), &path)?;

    let path = dir.join(GROUNDTRUTH_FILE);
    let groundtruth = if path.exists() { read_tum_file(&path)? } else { Vec::new() };
    Ok(Dataset { scene, frames, groundtruth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scene, look_at, ObjectSpec, SceneSpec};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_significant(0.0, 9), "0");
        assert_eq!(format_significant(1.0, 9), "1");
        assert_eq!(format_significant(-0.5, 9), "-0.5");
        assert_eq!(format_significant(1.0 / 3.0, 9), "0.333333333");
        assert_eq!(format_significant(123456.7891234, 9), "123456.789");
        assert_eq!(format_significant(1.5e-7, 9), "1.5e-07");
        assert_eq!(format_significant(2.0e12, 9), "2e+12");
        assert_eq!(format_significant(999999999.6, 9), "1e+09");
        assert_eq!(format_significant(0.0001234, 9), "0.0001234");
    }

    proptest! {
        #[test]
        fn significant_digits_are_accurate(x in -1e6f64..1e6) {
            let s = format_significant(x, 9);
            let back: f64 = s.parse().unwrap();
            prop_assert!((back - x).abs() <= 5e-9 * x.abs().max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn tum_roundtrip() {
        let poses: Vec<TumPose> = (0..5)
            .map(|i| TumPose {
                timestamp: 1305031102.175304 + i as f64 * 0.033,
                pose: look_at(&Vector3::new(1.0 + i as f64, -2.0, 1.5), &Vector3::zeros()),
            })
            .collect();
        let mut buf = Vec::new();
        write_tum(&mut buf, &poses).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().all(|l| l.split_whitespace().count() == 8));
        let back = read_tum(buf.as_slice(), Path::new("mem")).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-6);
            let (r, t) = a.pose.distance_to(&b.pose);
            assert!(r < 1e-7 && t < 1e-7);
        }
        let with_comment = format!("# header\n\n{text}");
        assert_eq!(read_tum(with_comment.as_bytes(), Path::new("mem")).unwrap().len(), 5);
        assert!(read_tum("1 2 3\n".as_bytes(), Path::new("mem")).is_err());
        assert!(read_tum("1 0 0 0 0 0 0 0\n".as_bytes(), Path::new("mem")).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_byte_identical() {
        let spec = SceneSpec { frames: 20, background_points: 100, objects: ObjectSpec { count: 3, ..Default::default() }, ..Default::default() };
        let (scene, frames) = generate_scene(&spec).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &scene, &frames).unwrap();
        let loaded = read_dataset(a.path()).unwrap();
        assert_eq!(loaded.frames, frames);
        assert_eq!(loaded.scene, scene);
        assert_eq!(loaded.groundtruth.len(), 20);
        write_dataset(b.path(), &loaded.scene, &loaded.frames).unwrap();
        for f in [SCENE_FILE, FRAMES_FILE, GROUNDTRUTH_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn rejects_bad_frames() {
        let p = Path::new("mem");
        let f = r#"{"id":0,"timestamp":1.0,"keypoints":[],"detections":[]}"#;
        let ok = format!("{f}\n");
        assert_eq!(read_frames(ok.as_bytes(), p).unwrap().len(), 1);
        let twice = format!("{f}\n{f}\n");
        assert!(matches!(read_frames(twice.as_bytes(), p), Err(DatasetError::NonMonotonicTimestamps(_))));
        assert!(matches!(read_frames("{nope}\n".as_bytes(), p), Err(DatasetError::Parse { line: 1, .. })));
    }
}
