//! Anisotropic Gaussian splat maps with a uniform voxel index.
//!
//! A splat is the map atom: position, per-axis standard deviations, an
//! orientation quaternion, opacity, and color. Its world covariance is
//! `R * diag(scale^2) * R^T`, symmetric positive definite by construction
//! for positive scales.
//!
//! The binary map format ("GSPL") stores a little-endian header
//! `magic, version: u32, count: u64` followed by 14 consecutive f32 per
//! splat: `x y z  sx sy sz  qw qx qy qz  opacity  r g b`. Quaternions are
//! scalar-first, matching the repo convention. Segment tags are runtime
//! bookkeeping and are not serialized.

use crate::frame::RgbdFrame;
use crate::geometry::{CameraIntrinsics, Pose};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Opacity assigned to splats created from raw observations.
pub const INIT_OPACITY: f64 = 0.5;

/// Default prune thresholds: drop near-transparent splats, oversized splats,
/// and needle-like splats whose longest axis dwarfs the other two.
pub const PRUNE_TAU_OPACITY: f64 = 0.005;
pub const PRUNE_TAU_SCALE: f64 = 0.25;
pub const PRUNE_TAU_ELONGATION: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("bad magic bytes, not a splat map file")]
    BadMagic,
    #[error("unsupported map format version {0}")]
    UnsupportedVersion(u32),
    #[error("file ends before the declared splat count")]
    Truncated,
    #[error("io error: {0}")]
    Io(String),
}

const MAGIC: &[u8; 4] = b"GSPL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSplat {
    pub position: Vector3<f64>,
    /// Per-axis standard deviations in meters, strictly positive.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Compositing opacity in `[0, 1]`.
    pub opacity: f64,
    /// Linear RGB in `[0, 1]`.
    pub color: [f64; 3],
}

impl GaussianSplat {
    /// Isotropic splat with identity orientation.
    pub fn isotropic(position: Vector3<f64>, sigma: f64, opacity: f64, color: [f64; 3]) -> Self {
        GaussianSplat {
            position,
            scale: Vector3::new(sigma, sigma, sigma),
            rotation: UnitQuaternion::identity(),
            opacity,
            color,
        }
    }

    /// World-frame covariance `R * diag(scale^2) * R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let d = Matrix3::from_diagonal(&self.scale.map(|s| s * s));
        r * d * r.transpose()
    }
}

/// Who a map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapOwner {
    Agent(u32),
    Global,
}

#[derive(Debug, Clone, Default)]
struct VoxelGrid {
    cell: f64,
    built_len: usize,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl VoxelGrid {
    fn key(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    fn rebuild(&mut self, splats: &[GaussianSplat]) {
        let mut maxima: Vec<f64> = splats.iter().map(|s| s.scale.max()).collect();
        maxima.sort_by(f64::total_cmp);
        let median = if maxima.is_empty() {
            0.0
        } else {
            maxima[maxima.len() / 2]
        };
        self.cell = (2.0 * median).max(1e-3);
        self.built_len = splats.len();
        self.cells.clear();
        for (i, s) in splats.iter().enumerate() {
            let key = self.key(&s.position);
            self.cells.entry(key).or_default().push(i as u32);
        }
    }

    fn insert(&mut self, idx: u32, p: &Vector3<f64>) {
        let key = self.key(p);
        self.cells.entry(key).or_default().push(idx);
    }
}

/// Splat collection plus a voxel index for radius queries.
///
/// The index cell size is twice the median splat scale at build time and is
/// lazily rebuilt once the map has grown by 25% since the last build, so the
/// cell size tracks the population without per-insert cost.
#[derive(Debug, Clone)]
pub struct GaussianMap {
    pub owner: MapOwner,
    splats: Vec<GaussianSplat>,
    /// Creating keyframe segment per splat, used for rigid re-anchoring.
    segments: Vec<u32>,
    grid: VoxelGrid,
}

impl GaussianMap {
    pub fn new(owner: MapOwner) -> Self {
        let mut grid = VoxelGrid::default();
        grid.rebuild(&[]);
        GaussianMap {
            owner,
            splats: Vec::new(),
            segments: Vec::new(),
            grid,
        }
    }

    pub fn from_splats(owner: MapOwner, splats: Vec<GaussianSplat>) -> Self {
        let mut map = GaussianMap::new(owner);
        map.segments = vec![0; splats.len()];
        map.splats = splats;
        map.grid.rebuild(&map.splats);
        map
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn splats(&self) -> &[GaussianSplat] {
        &self.splats
    }

    pub fn splats_mut(&mut self) -> &mut [GaussianSplat] {
        &mut self.splats
    }

    pub fn segment(&self, idx: usize) -> u32 {
        self.segments[idx]
    }

    pub fn insert(&mut self, splat: GaussianSplat, segment: u32) {
        let idx = self.splats.len() as u32;
        self.splats.push(splat);
        self.segments.push(segment);
        let threshold = (self.grid.built_len + self.grid.built_len / 4).max(16);
        if self.splats.len() >= threshold {
            self.grid.rebuild(&self.splats);
        } else {
            let p = self.splats[idx as usize].position;
            self.grid.insert(idx, &p);
        }
    }

    /// Rebuilds the voxel index unconditionally (after bulk edits).
    pub fn rebuild_index(&mut self) {
        self.grid.rebuild(&self.splats);
    }

    /// Indices of splats within `radius` of `center` (inclusive), ascending.
    pub fn radius_query(&self, center: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.splats.is_empty() {
            return out;
        }
        let cell = self.grid.cell;
        let lo = center.map(|c| ((c - radius) / cell).floor() as i64);
        let hi = center.map(|c| ((c + radius) / cell).floor() as i64);
        let r2 = radius * radius;
        for kx in lo.x..=hi.x {
            for ky in lo.y..=hi.y {
                for kz in lo.z..=hi.z {
                    if let Some(indices) = self.grid.cells.get(&(kx, ky, kz)) {
                        for &i in indices {
                            let d2 = (self.splats[i as usize].position - center).norm_squared();
                            if d2 <= r2 {
                                out.push(i as usize);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Index of the nearest splat within `radius`, ties broken by lowest index.
    pub fn nearest_within(&self, center: &Vector3<f64>, radius: f64) -> Option<usize> {
        let candidates = self.radius_query(center, radius);
        let mut best: Option<(f64, usize)> = None;
        for i in candidates {
            let d2 = (self.splats[i].position - center).norm_squared();
            match best {
                Some((bd2, _)) if d2 >= bd2 => {}
                _ => best = Some((d2, i)),
            }
        }
        best.map(|(_, i)| i)
    }

    /// Indices of splats with camera depth in `(0, max_dist]` projecting
    /// inside the image bounds of `intrinsics`, for a camera at `pose`.
    pub fn frustum_select(
        &self,
        pose: &Pose,
        intrinsics: &CameraIntrinsics,
        max_dist: f64,
    ) -> Vec<usize> {
        let world_to_cam = pose.inverse();
        let mut out = Vec::new();
        for (i, s) in self.splats.iter().enumerate() {
            let p = world_to_cam.transform_point(&s.position);
            if p.z <= 0.0 || p.z > max_dist {
                continue;
            }
            let u = intrinsics.fx * p.x / p.z + intrinsics.cx;
            let v = intrinsics.fy * p.y / p.z + intrinsics.cy;
            if intrinsics.contains(u, v) {
                out.push(i);
            }
        }
        out
    }

    /// Copies the given splats (and their segment tags) into a new map.
    pub fn subset(&self, indices: &[usize], owner: MapOwner) -> GaussianMap {
        let mut map = GaussianMap::new(owner);
        for &i in indices {
            map.insert(self.splats[i], self.segments[i]);
        }
        map
    }

    /// Keep-decision per splat for the given thresholds; all strict.
    ///
    /// A splat is dropped when its opacity falls below `tau_o`, or, only when
    /// a scale ceiling `tau_s` is supplied, when its largest scale exceeds
    /// `tau_s` or exceeds `tau_e` times the sum of the remaining two scales.
    pub fn prune_mask(&self, tau_o: f64, tau_s: Option<f64>, tau_e: f64) -> Vec<bool> {
        self.splats
            .iter()
            .map(|s| {
                if s.opacity < tau_o {
                    return false;
                }
                if let Some(ts) = tau_s {
                    let smax = s.scale.max();
                    if smax > ts {
                        return false;
                    }
                    let rest = s.scale.x + s.scale.y + s.scale.z - smax;
                    if smax > tau_e * rest {
                        return false;
                    }
                }
                true
            })
            .collect()
    }

    /// Removes splats failing `prune_mask`; returns how many were dropped.
    pub fn prune(&mut self, tau_o: f64, tau_s: Option<f64>, tau_e: f64) -> usize {
        let keep = self.prune_mask(tau_o, tau_s, tau_e);
        self.retain_mask(&keep)
    }

    /// Keeps exactly the splats flagged true; compacts and reindexes.
    pub fn retain_mask(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.splats.len());
        let before = self.splats.len();
        let mut write = 0;
        for read in 0..before {
            if keep[read] {
                self.splats[write] = self.splats[read];
                self.segments[write] = self.segments[read];
                write += 1;
            }
        }
        self.splats.truncate(write);
        self.segments.truncate(write);
        self.grid.rebuild(&self.splats);
        before - write
    }

    /// Rigidly moves every splat of each listed keyframe segment by that
    /// segment's world-frame correction (`new = correction * old` applied to
    /// position and orientation), then reindexes. Splats of unlisted
    /// segments stay put.
    pub fn reanchor_segments(&mut self, corrections: &HashMap<u32, Pose>) {
        if corrections.is_empty() {
            return;
        }
        let mut moved = false;
        for (splat, seg) in self.splats.iter_mut().zip(&self.segments) {
            let Some(c) = corrections.get(seg) else {
                continue;
            };
            splat.position = c.transform_point(&splat.position);
            splat.rotation = c.rotation * splat.rotation;
            moved = true;
        }
        if moved {
            self.grid.rebuild(&self.splats);
        }
    }

    pub fn save_binary(&self, path: &Path) -> Result<(), MapIoError> {
        let mut buf: Vec<u8> = Vec::with_capacity(16 + self.splats.len() * 14 * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.splats.len() as u64).to_le_bytes());
        for s in &self.splats {
            let q = s.rotation.quaternion();
            let fields: [f64; 14] = [
                s.position.x,
                s.position.y,
                s.position.z,
                s.scale.x,
                s.scale.y,
                s.scale.z,
                q.w,
                q.i,
                q.j,
                q.k,
                s.opacity,
                s.color[0],
                s.color[1],
                s.color[2],
            ];
            for f in fields {
                buf.extend_from_slice(&(f as f32).to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| MapIoError::Io(e.to_string()))?;
        file.write_all(&buf).map_err(|e| MapIoError::Io(e.to_string()))
    }

    pub fn load_binary(path: &Path) -> Result<GaussianMap, MapIoError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| MapIoError::Io(e.to_string()))?
            .read_to_end(&mut bytes)
            .map_err(|e| MapIoError::Io(e.to_string()))?;
        if bytes.len() < 16 {
            return Err(if bytes.starts_with(MAGIC) {
                MapIoError::Truncated
            } else {
                MapIoError::BadMagic
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(MapIoError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(MapIoError::UnsupportedVersion(version));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let need = 16 + count * 14 * 4;
        if bytes.len() < need {
            return Err(MapIoError::Truncated);
        }
        let mut splats = Vec::with_capacity(count);
        let mut off = 16;
        for _ in 0..count {
            let mut f = [0.0f64; 14];
            for v in f.iter_mut() {
                *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
                off += 4;
            }
            let rotation =
                UnitQuaternion::from_quaternion(Quaternion::new(f[6], f[7], f[8], f[9]));
            splats.push(GaussianSplat {
                position: Vector3::new(f[0], f[1], f[2]),
                scale: Vector3::new(f[3], f[4], f[5]),
                rotation,
                opacity: f[10],
                color: [f[11], f[12], f[13]],
            });
        }
        Ok(GaussianMap::from_splats(MapOwner::Global, splats))
    }

    /// ASCII PLY point export (positions plus 8-bit colors).
    pub fn export_ply(&self, path: &Path) -> Result<(), MapIoError> {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        s.push_str(&format!("element vertex {}\n", self.splats.len()));
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        s.push_str("end_header\n");
        for sp in &self.splats {
            s.push_str(&format!(
                "{} {} {} {} {} {}\n",
                sp.position.x as f32,
                sp.position.y as f32,
                sp.position.z as f32,
                (sp.color[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (sp.color[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (sp.color[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ));
        }
        std::fs::write(path, s).map_err(|e| MapIoError::Io(e.to_string()))
    }
}

/// Seeds splats from an observation: every `stride`-th valid-depth pixel is
/// back-projected to world space with an isotropic scale of one pixel
/// footprint (`depth / fx`) and opacity 0.5.
pub fn init_from_frame(frame: &RgbdFrame, pose: &Pose, stride: usize) -> Vec<GaussianSplat> {
    let k = &frame.intrinsics;
    let stride = stride.max(1);
    let mut out = Vec::new();
    for y in (0..k.height).step_by(stride) {
        for x in (0..k.width).step_by(stride) {
            if !frame.depth.is_valid(x, y) {
                continue;
            }
            let d = frame.depth.get(x, y);
            let p_cam = match k.backproject(x as f64 + 0.5, y as f64 + 0.5, d) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let world = pose.transform_point(&p_cam);
            out.push(GaussianSplat::isotropic(
                world,
                d / k.fx,
                INIT_OPACITY,
                frame.rgb.get(x, y),
            ));
        }
    }
    out
}

/// Flatness of oriented seeds: the normal-axis sigma is this fraction of the
/// tangential sigma, so the Mahalanobis metric weighs off-surface residuals
/// about 100x more than in-surface ones.
pub const ORIENTED_FLATNESS: f64 = 0.1;

/// Depth jump, in meters, beyond which neighboring pixels are treated as a
/// different surface when estimating normals.
const NORMAL_DEPTH_JUMP: f64 = 0.1;

/// Seeds splats like [`init_from_frame`], but flattens each one 10:1 along
/// the local surface normal estimated from the depth image.
///
/// Registration only behaves like surface alignment when covariances encode
/// the surface: isotropic seeds degrade the Mahalanobis metric to
/// point-to-point matching, which aliases against the sampling grid on
/// low-texture geometry. Pixels without a reliable normal (image border,
/// invalid or discontinuous neighbors) fall back to isotropic.
pub fn init_from_frame_oriented(
    frame: &RgbdFrame,
    pose: &Pose,
    stride: usize,
) -> Vec<GaussianSplat> {
    let k = &frame.intrinsics;
    let stride = stride.max(1);
    let mut out = Vec::new();
    for y in (0..k.height).step_by(stride) {
        for x in (0..k.width).step_by(stride) {
            if !frame.depth.is_valid(x, y) {
                continue;
            }
            let d = frame.depth.get(x, y);
            let p_cam = match k.backproject(x as f64 + 0.5, y as f64 + 0.5, d) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let world = pose.transform_point(&p_cam);
            let sigma = d / k.fx;
            let color = frame.rgb.get(x, y);
            let splat = match normal_from_depth(frame, x, y, d) {
                Some(n_cam) => {
                    let n_world = pose.transform_vector(&n_cam);
                    // The covariance is sign-invariant in the normal, so any
                    // rotation taking local +z to +/-n works; antiparallel
                    // inputs (rotation_between -> None) flip about x.
                    let rotation = UnitQuaternion::rotation_between(&Vector3::z(), &n_world)
                        .unwrap_or_else(|| {
                            UnitQuaternion::from_axis_angle(
                                &Vector3::x_axis(),
                                std::f64::consts::PI,
                            )
                        });
                    GaussianSplat {
                        position: world,
                        scale: Vector3::new(sigma, sigma, sigma * ORIENTED_FLATNESS),
                        rotation,
                        opacity: INIT_OPACITY,
                        color,
                    }
                }
                None => GaussianSplat::isotropic(world, sigma, INIT_OPACITY, color),
            };
            out.push(splat);
        }
    }
    out
}

/// Camera-frame surface normal at pixel `(x, y)` from central differences of
/// back-projected neighbors, or `None` when any neighbor is missing, lies
/// across a depth jump, or the cross product degenerates.
fn normal_from_depth(frame: &RgbdFrame, x: usize, y: usize, d: f64) -> Option<Vector3<f64>> {
    let k = &frame.intrinsics;
    if x == 0 || y == 0 || x + 1 >= k.width || y + 1 >= k.height {
        return None;
    }
    let sample = |sx: usize, sy: usize| -> Option<Vector3<f64>> {
        if !frame.depth.is_valid(sx, sy) {
            return None;
        }
        let sd = frame.depth.get(sx, sy);
        if (sd - d).abs() > NORMAL_DEPTH_JUMP {
            return None;
        }
        k.backproject(sx as f64 + 0.5, sy as f64 + 0.5, sd).ok()
    };
    let dx = sample(x + 1, y)? - sample(x - 1, y)?;
    let dy = sample(x, y + 1)? - sample(x, y - 1)?;
    let n = dx.cross(&dy);
    if n.norm() < 1e-12 {
        return None;
    }
    Some(n.normalize())
}
