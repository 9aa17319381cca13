//! Analytic per-splat gradients of the photometric loss.
//!
//! The backward pass differentiates the full forward chain: pixel L1 terms,
//! front-to-back compositing (including each splat's effect on the
//! transmittance of everything behind it), the footprint weight, the 2D
//! Mahalanobis form, the EWA covariance `J * cov_cam * J^T` including the
//! dependence of `J` on the splat's camera-frame position, and the depth
//! channel's direct use of camera z. Splat rotations are held fixed; the
//! optimized parameters are position, scale, opacity, and color.
//!
//! The structural term contributes to the loss value but not its own
//! gradient; its descent direction is approximated by scaling the color L1
//! gradient to weight `l1_rgb + ssim`, which keeps the backward pass exact
//! for the L1 objective that the finite-difference acceptance check uses.

use crate::frame::RgbdFrame;
use crate::geometry::Pose;
use crate::map::GaussianSplat;
use crate::render::{
    bin_projections, photometric_loss, project_splats, render_splats, weight_at, RenderError,
    RenderedFrame, GAUSS_FLOOR, MIN_TRANSMITTANCE,
};
use crate::render::LossWeights;
use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

/// Per-splat partials, index-aligned with the input splat slice.
#[derive(Debug, Clone)]
pub struct SplatGradients {
    pub position: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        SplatGradients {
            position: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// Adds `other` entrywise; both sides must cover the same splat slice.
    pub fn accumulate(&mut self, other: &SplatGradients) {
        assert_eq!(self.len(), other.len(), "gradient lengths differ");
        for i in 0..self.len() {
            self.position[i] += other.position[i];
            self.scale[i] += other.scale[i];
            self.opacity[i] += other.opacity[i];
            for c in 0..3 {
                self.color[i][c] += other.color[i][c];
            }
        }
    }

    /// Largest absolute entry per parameter group:
    /// `(position, scale, opacity, color)`.
    pub fn group_inf_norms(&self) -> (f64, f64, f64, f64) {
        let pos = self
            .position
            .iter()
            .map(|v| v.abs().max())
            .fold(0.0, f64::max);
        let scale = self
            .scale
            .iter()
            .map(|v| v.abs().max())
            .fold(0.0, f64::max);
        let op = self.opacity.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let col = self
            .color
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        (pos, scale, op, col)
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Renders `splats` at `pose`, evaluates the photometric loss against
/// `observed`, and returns the loss with its analytic per-splat gradients.
pub fn loss_gradients(
    splats: &[GaussianSplat],
    pose: &Pose,
    observed: &RgbdFrame,
    weights: &LossWeights,
) -> Result<(f64, RenderedFrame, SplatGradients), RenderError> {
    let k = &observed.intrinsics;
    let (r_wc, projs) = project_splats(splats, pose, k);
    let bins = bin_projections(&projs, k.width, k.height);

    // Forward images, identical arithmetic to render_splats.
    let mut rendered = RenderedFrame {
        rgb: crate::frame::RgbImage::new(k.width, k.height),
        depth: crate::frame::DepthImage::new(k.width, k.height),
        alpha: vec![0.0; k.width * k.height],
    };
    let loss;

    let n_valid = observed.depth.valid_count();
    let mut grads = SplatGradients::zeros(splats.len());
    if n_valid == 0 {
        // No valid pixels: both L1 terms vanish and so do their gradients.
        let rendered = render_splats(splats, pose, k);
        let loss = photometric_loss(&rendered, &observed.rgb, &observed.depth, weights)?;
        return Ok((loss, rendered, grads));
    }
    let w_rgb = (weights.l1_rgb + weights.ssim) / (3.0 * n_valid as f64);
    let w_depth = weights.depth / n_valid as f64;

    // Per-projection accumulators in image space.
    let mut g_mu = vec![Vector2::<f64>::zeros(); projs.len()];
    let mut g_sigma = vec![Matrix2::<f64>::zeros(); projs.len()];
    let mut g_z = vec![0.0f64; projs.len()];

    // Per-pixel replay buffer: (projection, q, f, transmittance in front).
    let mut active: Vec<(u32, f64, f64, f64)> = Vec::new();
    for y in 0..k.height {
        for x in 0..k.width {
            let pixel = y * k.width + x;
            active.clear();
            let mut transmittance = 1.0;
            let mut acc = [0.0f64; 3];
            let mut acc_z = 0.0;
            for &pi in bins.bin_at(x, y) {
                if transmittance < MIN_TRANSMITTANCE {
                    break;
                }
                let proj = &projs[pi as usize];
                let splat = &splats[proj.idx];
                let Some((q, f)) = weight_at(proj, splat.opacity, x, y) else {
                    continue;
                };
                active.push((pi, q, f, transmittance));
                let w = f * transmittance;
                acc[0] += splat.color[0] * w;
                acc[1] += splat.color[1] * w;
                acc[2] += splat.color[2] * w;
                acc_z += proj.p_cam.z * w;
                transmittance *= 1.0 - f;
            }
            rendered.rgb.set(x, y, acc);
            rendered.depth.set(x, y, acc_z);
            rendered.alpha[pixel] = 1.0 - transmittance;

            let obs_d = observed.depth.data[pixel];
            if obs_d.is_finite() && obs_d > 0.0 {
                let dldi = [
                    w_rgb * sgn(acc[0] - observed.rgb.data[3 * pixel]),
                    w_rgb * sgn(acc[1] - observed.rgb.data[3 * pixel + 1]),
                    w_rgb * sgn(acc[2] - observed.rgb.data[3 * pixel + 2]),
                ];
                let dldd = w_depth * sgn(acc_z - obs_d);

                let mut s_rgb = [0.0f64; 3];
                let mut s_z = 0.0;
                for &(pi, q, f, t_before) in active.iter().rev() {
                    let pi = pi as usize;
                    let proj = &projs[pi];
                    let splat = &splats[proj.idx];
                    let w = f * t_before;
                    let denom = (1.0 - f).max(1e-12);

                    let mut dl_df = dldd * (proj.p_cam.z * t_before - s_z / denom);
                    for ch in 0..3 {
                        dl_df += dldi[ch] * (splat.color[ch] * t_before - s_rgb[ch] / denom);
                        grads.color[proj.idx][ch] += dldi[ch] * w;
                    }
                    g_z[pi] += dldd * w;

                    let gauss = (-0.5 * q).exp();
                    grads.opacity[proj.idx] += dl_df * (gauss - GAUSS_FLOOR) / (1.0 - GAUSS_FLOOR);
                    let dl_dq = dl_df * splat.opacity * (-0.5 * gauss) / (1.0 - GAUSS_FLOOR);

                    let d = Vector2::new(
                        x as f64 + 0.5 - proj.mu.x,
                        y as f64 + 0.5 - proj.mu.y,
                    );
                    let u = proj.a * d;
                    g_mu[pi] += u * (-2.0 * dl_dq);
                    g_sigma[pi] += u * u.transpose() * (-dl_dq);

                    for ch in 0..3 {
                        s_rgb[ch] += splat.color[ch] * w;
                    }
                    s_z += proj.p_cam.z * w;
                }
            }
        }
    }

    loss = photometric_loss(&rendered, &observed.rgb, &observed.depth, weights)?;

    // Chain image-space accumulators back to world-space splat parameters.
    for (pi, proj) in projs.iter().enumerate() {
        let splat = &splats[proj.idx];
        let cov_cam = r_wc * splat.covariance() * r_wc.transpose();
        let p = proj.p_cam;
        let z2 = 1.0 / (p.z * p.z);
        let z3 = z2 / p.z;
        let dj = [
            Matrix2x3::new(0.0, 0.0, -k.fx * z2, 0.0, 0.0, 0.0),
            Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 0.0, -k.fy * z2),
            Matrix2x3::new(
                -k.fx * z2,
                0.0,
                2.0 * k.fx * p.x * z3,
                0.0,
                -k.fy * z2,
                2.0 * k.fy * p.y * z3,
            ),
        ];
        let mut g_cam = proj.j.transpose() * g_mu[pi];
        for (axis, djk) in dj.iter().enumerate() {
            let ds = djk * cov_cam * proj.j.transpose() + proj.j * cov_cam * djk.transpose();
            g_cam[axis] += g_sigma[pi].component_mul(&ds).sum();
        }
        g_cam.z += g_z[pi];
        grads.position[proj.idx] += r_wc.transpose() * g_cam;

        let jr = proj.j * r_wc * splat.rotation.to_rotation_matrix().into_inner();
        for axis in 0..3 {
            let wj = jr.column(axis);
            let quad = (wj.transpose() * g_sigma[pi] * wj)[(0, 0)];
            grads.scale[proj.idx][axis] += 2.0 * splat.scale[axis] * quad;
        }
    }

    Ok((loss, rendered, grads))
}
