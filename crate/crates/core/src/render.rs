//! Forward rasterization of splat maps plus the photometric loss.
//!
//! Each splat projects to an anisotropic 2D Gaussian footprint through the
//! EWA-style linearization `cov2d = J * cov_cam * J^T + 0.3 * I` (the
//! inflation keeps footprints at least a fraction of a pixel wide). Pixels
//! composite front to back in camera-depth order:
//!
//! `rgb(p) = sum_i c_i * f_i(p) * prod_{j<i} (1 - f_j(p))`
//!
//! and depth uses the same weights on the splats' camera-frame z. The
//! footprint weight is `opacity * (exp(-q/2) - F) / (1 - F)` with
//! `F = exp(-25/2)` for Mahalanobis `q < 25` and zero beyond: equal to
//! `opacity` at the center, within 4e-6 of the plain Gaussian everywhere,
//! and culled at five sigma. The cutoff sits far enough out that the weight
//! is continuous with a vanishing slope there; a three-sigma hard cutoff
//! looks identical on screen but its boundary kink is two orders of
//! magnitude too coarse for finite-difference gradient validation.

use crate::frame::{DepthImage, RgbImage, RgbdFrame};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::map::{GaussianMap, GaussianSplat};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Mahalanobis-squared footprint cutoff (five sigma).
pub(crate) const CUTOFF_Q: f64 = 25.0;
/// Gaussian value at the cutoff, subtracted to keep the weight continuous.
pub(crate) const GAUSS_FLOOR: f64 = 3.726653172078671e-6; // exp(-12.5)
/// Compositing stops once remaining transmittance drops below this.
pub(crate) const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Isotropic 2D covariance inflation in squared pixels.
pub(crate) const COV_INFLATION: f64 = 0.3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image dimensions {got_w}x{got_h} do not match render target {want_w}x{want_h}")]
    DimensionMismatch {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
}

/// Output of one render call. `alpha` and `depth` share indexing with `rgb`;
/// depth is zero exactly where alpha is zero.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub alpha: Vec<f64>,
}

/// Per-splat projection cache shared by the forward and backward passes.
#[derive(Debug, Clone)]
pub(crate) struct SplatProjection {
    /// Index into the source splat slice.
    pub idx: usize,
    pub p_cam: Vector3<f64>,
    pub mu: Vector2<f64>,
    /// Inverse of the inflated 2D covariance.
    pub a: Matrix2<f64>,
    pub j: Matrix2x3<f64>,
    /// Inclusive pixel bounding box of the five-sigma footprint.
    pub x0: i32,
    pub x1: i32,
    pub y0: i32,
    pub y1: i32,
}

pub(crate) fn projection_jacobian(k: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let z_inv = 1.0 / p.z;
    let z_inv2 = z_inv * z_inv;
    Matrix2x3::new(
        k.fx * z_inv,
        0.0,
        -k.fx * p.x * z_inv2,
        0.0,
        k.fy * z_inv,
        -k.fy * p.y * z_inv2,
    )
}

/// Projects all splats, culls those outside the view cone or closer than
/// the near plane, and returns the survivors sorted by camera depth (ties
/// by index).
pub(crate) fn project_splats(
    splats: &[GaussianSplat],
    pose: &Pose,
    k: &CameraIntrinsics,
) -> (Matrix3<f64>, Vec<SplatProjection>) {
    let world_to_cam = pose.inverse();
    let r = world_to_cam.rotation_matrix();
    // View-cone bounds with a 30% margin so splats just outside the image
    // still bleed in, while extreme off-axis splats are dropped before the
    // affine projection model can smear them across the frame.
    let lim_x_lo = -1.3 * k.cx / k.fx;
    let lim_x_hi = 1.3 * (k.width as f64 - k.cx) / k.fx;
    let lim_y_lo = -1.3 * k.cy / k.fy;
    let lim_y_hi = 1.3 * (k.height as f64 - k.cy) / k.fy;
    let mut out = Vec::with_capacity(splats.len());
    for (idx, s) in splats.iter().enumerate() {
        let p_cam = world_to_cam.transform_point(&s.position);
        if p_cam.z < k.near {
            continue;
        }
        let tan_x = p_cam.x / p_cam.z;
        let tan_y = p_cam.y / p_cam.z;
        if tan_x < lim_x_lo || tan_x > lim_x_hi || tan_y < lim_y_lo || tan_y > lim_y_hi {
            continue;
        }
        let mu = Vector2::new(
            k.fx * p_cam.x / p_cam.z + k.cx,
            k.fy * p_cam.y / p_cam.z + k.cy,
        );
        let j = projection_jacobian(k, &p_cam);
        let cov_cam = r * s.covariance() * r.transpose();
        let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * COV_INFLATION;
        let a = match cov2d.try_inverse() {
            Some(a) => a,
            None => continue,
        };
        let rx = 5.0 * cov2d[(0, 0)].max(0.0).sqrt();
        let ry = 5.0 * cov2d[(1, 1)].max(0.0).sqrt();
        // Pixel centers sit at integer + 0.5.
        let x0 = ((mu.x - rx - 0.5).ceil() as i32).max(0);
        let x1 = ((mu.x + rx - 0.5).floor() as i32).min(k.width as i32 - 1);
        let y0 = ((mu.y - ry - 0.5).ceil() as i32).max(0);
        let y1 = ((mu.y + ry - 0.5).floor() as i32).min(k.height as i32 - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        out.push(SplatProjection {
            idx,
            p_cam,
            mu,
            a,
            j,
            x0,
            x1,
            y0,
            y1,
        });
    }
    out.sort_by(|a, b| a.p_cam.z.total_cmp(&b.p_cam.z).then(a.idx.cmp(&b.idx)));
    (r, out)
}

/// Footprint weight at squared Mahalanobis distance `q`.
pub(crate) fn footprint_weight(opacity: f64, q: f64) -> f64 {
    if q >= CUTOFF_Q {
        return 0.0;
    }
    opacity * ((-0.5 * q).exp() - GAUSS_FLOOR) / (1.0 - GAUSS_FLOOR)
}

/// Tile edge in pixels for the rasterization grid.
const TILE: usize = 16;

/// Per-tile lists of projection indices. Projections arrive depth-sorted,
/// so every bin stays in compositing order; a pixel walks its tile's bin
/// front to back and stops as soon as transmittance bottoms out, which is
/// what makes dense opaque scenes cheap.
pub(crate) struct TileBins {
    tiles_x: usize,
    bins: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn bin_at(&self, x: usize, y: usize) -> &[u32] {
        &self.bins[(y / TILE) * self.tiles_x + x / TILE]
    }
}

pub(crate) fn bin_projections(
    projs: &[SplatProjection],
    width: usize,
    height: usize,
) -> TileBins {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (pi, proj) in projs.iter().enumerate() {
        for ty in (proj.y0 as usize / TILE)..=(proj.y1 as usize / TILE) {
            for tx in (proj.x0 as usize / TILE)..=(proj.x1 as usize / TILE) {
                bins[ty * tiles_x + tx].push(pi as u32);
            }
        }
    }
    TileBins { tiles_x, bins }
}

/// Footprint weight of `proj` at pixel `(x, y)`, zero outside the cutoff.
#[inline]
pub(crate) fn weight_at(
    proj: &SplatProjection,
    opacity: f64,
    x: usize,
    y: usize,
) -> Option<(f64, f64)> {
    if (x as i32) < proj.x0 || (x as i32) > proj.x1 || (y as i32) < proj.y0 || (y as i32) > proj.y1
    {
        return None;
    }
    let d = Vector2::new(x as f64 + 0.5 - proj.mu.x, y as f64 + 0.5 - proj.mu.y);
    let q = (d.transpose() * proj.a * d)[(0, 0)];
    if q >= CUTOFF_Q {
        return None;
    }
    Some((q, footprint_weight(opacity, q)))
}

/// Renders a splat slice. Prefer [`render`] for whole maps.
pub fn render_splats(
    splats: &[GaussianSplat],
    pose: &Pose,
    k: &CameraIntrinsics,
) -> RenderedFrame {
    let (_, projs) = project_splats(splats, pose, k);
    let bins = bin_projections(&projs, k.width, k.height);
    let mut rgb = RgbImage::new(k.width, k.height);
    let mut depth = DepthImage::new(k.width, k.height);
    let mut alpha = vec![0.0; k.width * k.height];

    for y in 0..k.height {
        for x in 0..k.width {
            let mut transmittance = 1.0;
            let mut acc = [0.0f64; 3];
            let mut acc_z = 0.0;
            for &pi in bins.bin_at(x, y) {
                if transmittance < MIN_TRANSMITTANCE {
                    break;
                }
                let proj = &projs[pi as usize];
                let splat = &splats[proj.idx];
                let Some((_, f)) = weight_at(proj, splat.opacity, x, y) else {
                    continue;
                };
                let w = f * transmittance;
                acc[0] += splat.color[0] * w;
                acc[1] += splat.color[1] * w;
                acc[2] += splat.color[2] * w;
                acc_z += proj.p_cam.z * w;
                transmittance *= 1.0 - f;
            }
            rgb.set(x, y, acc);
            depth.set(x, y, acc_z);
            alpha[y * k.width + x] = 1.0 - transmittance;
        }
    }
    RenderedFrame { rgb, depth, alpha }
}

/// Renders the map from a camera-to-world pose.
pub fn render(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics) -> RenderedFrame {
    render_splats(map.splats(), pose, k)
}

/// Term weights for the photometric loss. Defaults follow the tuned
/// operating point: 0.8 L1 color, 0.2 structural, 0.1 depth.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub l1_rgb: f64,
    pub ssim: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1_rgb: 0.8,
            ssim: 0.2,
            depth: 0.1,
        }
    }
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: i32 = 5; // taps at offsets -5..=5, an 11x11 window
const SSIM_SIGMA: f64 = 1.5;

/// Mean structural similarity over luminance, 11x11 Gaussian windows
/// (sigma 1.5). Windows at the border renormalize over in-image taps.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::DimensionMismatch {
            want_w: a.width,
            want_h: a.height,
            got_w: b.width,
            got_h: b.height,
        });
    }
    let la = a.luminance();
    let lb = b.luminance();
    let (w, h) = (a.width as i32, a.height as i32);
    let mut kernel = [0.0f64; 11];
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - SSIM_WINDOW as f64;
        *k = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut wsum = 0.0;
            let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -SSIM_WINDOW..=SSIM_WINDOW {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -SSIM_WINDOW..=SSIM_WINDOW {
                    let xx = x + dx;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    let wk = kernel[(dy + SSIM_WINDOW) as usize] * kernel[(dx + SSIM_WINDOW) as usize];
                    let va = la[(yy * w + xx) as usize];
                    let vb = lb[(yy * w + xx) as usize];
                    wsum += wk;
                    ma += wk * va;
                    mb += wk * vb;
                    maa += wk * va * va;
                    mbb += wk * vb * vb;
                    mab += wk * va * vb;
                }
            }
            ma /= wsum;
            mb /= wsum;
            let var_a = (maa / wsum - ma * ma).max(0.0);
            let var_b = (mbb / wsum - mb * mb).max(0.0);
            let cov = mab / wsum - ma * mb;
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += s;
        }
    }
    Ok(total / (w as f64 * h as f64))
}

/// Weighted photometric objective between a render and an observation:
///
/// `w.l1_rgb * L1(rgb) + w.ssim * (1 - ssim) / 2 + w.depth * L1(depth)`
///
/// The L1 terms average over pixels with valid observed depth (color over
/// pixels and channels); the structural term uses the full images.
pub fn photometric_loss(
    rendered: &RenderedFrame,
    observed_rgb: &RgbImage,
    observed_depth: &DepthImage,
    weights: &LossWeights,
) -> Result<f64, RenderError> {
    if rendered.rgb.width != observed_rgb.width
        || rendered.rgb.height != observed_rgb.height
        || observed_depth.width != observed_rgb.width
        || observed_depth.height != observed_rgb.height
    {
        return Err(RenderError::DimensionMismatch {
            want_w: rendered.rgb.width,
            want_h: rendered.rgb.height,
            got_w: observed_rgb.width,
            got_h: observed_rgb.height,
        });
    }
    let n_px = observed_rgb.width * observed_rgb.height;
    let mut valid = 0usize;
    let mut l1_rgb = 0.0;
    let mut l1_depth = 0.0;
    for i in 0..n_px {
        let d = observed_depth.data[i];
        if !(d.is_finite() && d > 0.0) {
            continue;
        }
        valid += 1;
        for c in 0..3 {
            l1_rgb += (rendered.rgb.data[3 * i + c] - observed_rgb.data[3 * i + c]).abs();
        }
        l1_depth += (rendered.depth.data[i] - d).abs();
    }
    if valid > 0 {
        l1_rgb /= (3 * valid) as f64;
        l1_depth /= valid as f64;
    }
    let ssim_term = if weights.ssim != 0.0 {
        weights.ssim * (1.0 - ssim(&rendered.rgb, observed_rgb)?) / 2.0
    } else {
        0.0
    };
    Ok(weights.l1_rgb * l1_rgb + ssim_term + weights.depth * l1_depth)
}

/// Photometric loss of a frame rendered from `map` at `pose` against `frame`.
pub fn frame_loss(
    map: &GaussianMap,
    pose: &Pose,
    frame: &RgbdFrame,
    weights: &LossWeights,
) -> Result<f64, RenderError> {
    let rendered = render(map, pose, &frame.intrinsics);
    photometric_loss(&rendered, &frame.rgb, &frame.depth, weights)
}
