//! On-disk RGB-D dataset layout.
//!
//! A dataset directory holds one `agent<k>` subdirectory per agent:
//!
//! ```text
//! agent1/
//!   rgb/<stamp>.png      8-bit color
//!   depth/<stamp>.png    16-bit, meters times the scale factor
//!   intrinsics.txt       fx fy cx cy width height near far
//!   groundtruth.txt      optional trajectory, timestamp tx ty tz qx qy qz qw
//! ```
//!
//! File stems are frame timestamps printed as the shortest decimal that
//! parses back to identical bits, so timing survives a round trip exactly
//! even though pixel data is quantized once.

use crate::frame::{load_depth_png, load_rgb_png, save_depth_png, save_rgb_png, RgbdFrame};
use crate::geometry::{read_trajectory, write_trajectory, CameraIntrinsics, Trajectory};
use std::path::Path;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    /// The first offending file, with the reason it could not be used.
    #[error("malformed dataset, offending file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

fn malformed(path: &Path, reason: impl ToString) -> DatasetError {
    DatasetError::Malformed {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn io_error(path: &Path, reason: impl ToString) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// One agent's frame sequence plus its optional ground-truth trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSequence {
    pub agent_id: u32,
    pub frames: Vec<RgbdFrame>,
    pub groundtruth: Option<Trajectory>,
}

/// Writes sequences as `agent<k>` directories under `root`.
///
/// Every frame of an agent must share intrinsics; the first frame's values
/// become that agent's `intrinsics.txt`.
pub fn export_dataset(
    root: &Path,
    sequences: &[AgentSequence],
    depth_scale: f64,
) -> Result<(), DatasetError> {
    for seq in sequences {
        let dir = root.join(format!("agent{}", seq.agent_id));
        let first = seq
            .frames
            .first()
            .ok_or_else(|| malformed(&dir, "agent has no frames"))?;
        let rgb_dir = dir.join("rgb");
        let depth_dir = dir.join("depth");
        std::fs::create_dir_all(&rgb_dir).map_err(|e| io_error(&rgb_dir, e))?;
        std::fs::create_dir_all(&depth_dir).map_err(|e| io_error(&depth_dir, e))?;

        let k = &first.intrinsics;
        let intr_path = dir.join("intrinsics.txt");
        let line = format!(
            "{} {} {} {} {} {} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.near, k.far
        );
        std::fs::write(&intr_path, line).map_err(|e| io_error(&intr_path, e))?;

        for frame in &seq.frames {
            let name = format!("{}.png", frame.timestamp);
            let rgb_path = rgb_dir.join(&name);
            let depth_path = depth_dir.join(&name);
            save_rgb_png(&frame.rgb, &rgb_path).map_err(|e| io_error(&rgb_path, e))?;
            save_depth_png(&frame.depth, depth_scale, &depth_path)
                .map_err(|e| io_error(&depth_path, e))?;
        }

        if let Some(gt) = &seq.groundtruth {
            let gt_path = dir.join("groundtruth.txt");
            write_trajectory(&gt_path, gt).map_err(|e| io_error(&gt_path, e))?;
        }
    }
    Ok(())
}

/// Loads every `agent<k>` subdirectory of `root`, sorted by agent id, with
/// each agent's frames in timestamp order and depth converted to meters.
pub fn load_dataset(root: &Path, depth_scale: f64) -> Result<Vec<AgentSequence>, DatasetError> {
    let mut agents: Vec<(u32, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| io_error(root, e))? {
        let entry = entry.map_err(|e| io_error(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name();
        if let Some(id) = name
            .to_string_lossy()
            .strip_prefix("agent")
            .and_then(|s| s.parse::<u32>().ok())
        {
            agents.push((id, path));
        }
    }
    if agents.is_empty() {
        return Err(malformed(root, "no agent directories"));
    }
    agents.sort_by_key(|(id, _)| *id);
    agents
        .iter()
        .map(|(id, dir)| load_agent(*id, dir, depth_scale))
        .collect()
}

fn load_agent(agent_id: u32, dir: &Path, depth_scale: f64) -> Result<AgentSequence, DatasetError> {
    let intr_path = dir.join("intrinsics.txt");
    let text = std::fs::read_to_string(&intr_path)
        .map_err(|_| malformed(&intr_path, "missing or unreadable intrinsics file"))?;
    let intrinsics = parse_intrinsics(&text).map_err(|reason| malformed(&intr_path, reason))?;

    let rgb_dir = dir.join("rgb");
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&rgb_dir).map_err(|_| malformed(&rgb_dir, "missing rgb directory"))? {
        let entry = entry.map_err(|e| io_error(&rgb_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();

    let mut stamped: Vec<(f64, String)> = Vec::with_capacity(names.len());
    for name in names {
        let stem = &name[..name.len() - ".png".len()];
        let t: f64 = stem
            .parse()
            .map_err(|_| malformed(&rgb_dir.join(&name), "file stem is not a timestamp"))?;
        stamped.push((t, name));
    }
    stamped.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut frames = Vec::with_capacity(stamped.len());
    for (timestamp, name) in stamped {
        let rgb_path = rgb_dir.join(&name);
        let depth_path = dir.join("depth").join(&name);
        let rgb = load_rgb_png(&rgb_path).map_err(|e| malformed(&rgb_path, e))?;
        if rgb.width != intrinsics.width || rgb.height != intrinsics.height {
            return Err(malformed(
                &rgb_path,
                format!(
                    "image is {}x{} but intrinsics declare {}x{}",
                    rgb.width, rgb.height, intrinsics.width, intrinsics.height
                ),
            ));
        }
        if !depth_path.is_file() {
            return Err(malformed(&depth_path, "missing depth image for rgb frame"));
        }
        let depth = load_depth_png(&depth_path, depth_scale).map_err(|e| malformed(&depth_path, e))?;
        if depth.width != rgb.width || depth.height != rgb.height {
            return Err(malformed(
                &depth_path,
                format!(
                    "depth is {}x{} but rgb is {}x{}",
                    depth.width, depth.height, rgb.width, rgb.height
                ),
            ));
        }
        frames.push(RgbdFrame {
            timestamp,
            rgb,
            depth,
            intrinsics,
        });
    }

    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = if gt_path.is_file() {
        Some(read_trajectory(&gt_path).map_err(|e| malformed(&gt_path, e))?)
    } else {
        None
    };

    Ok(AgentSequence {
        agent_id,
        frames,
        groundtruth,
    })
}

fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics, String> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 intrinsics fields, got {}", fields.len()));
    }
    let num = |i: usize| -> Result<f64, String> {
        fields[i]
            .parse()
            .map_err(|_| format!("field {:?} is not a number", fields[i]))
    };
    let dim = |i: usize| -> Result<usize, String> {
        fields[i]
            .parse()
            .map_err(|_| format!("field {:?} is not a pixel count", fields[i]))
    };
    Ok(CameraIntrinsics {
        fx: num(0)?,
        fy: num(1)?,
        cx: num(2)?,
        cy: num(3)?,
        width: dim(4)?,
        height: dim(5)?,
        near: num(6)?,
        far: num(7)?,
    })
}
