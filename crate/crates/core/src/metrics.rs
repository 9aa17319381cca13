//! Trajectory and rendering quality metrics: ATE RMSE, PSNR, depth L1,
//! plus the per-run report. SSIM lives in [`crate::render`] because the
//! photometric loss shares it.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{DepthImage, RgbImage};
use crate::geometry::Pose;

/// PSNR reported for identical images; also the cap for near-zero MSE.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no timestamp pairs within tolerance between the trajectories")]
    EmptyOverlap,
    #[error("image dimensions differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("no valid pixels under the mask")]
    EmptyMask,
}

/// Closed-form least-squares rigid alignment (rotation + translation, no
/// scale) taking `src` points onto `dst`: cross-covariance SVD with a
/// reflection guard. Returns `None` for empty inputs.
pub fn rigid_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Pose> {
    if src.is_empty() || src.len() != dst.len() {
        return None;
    }
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Some(Pose::new(rot, cd - r * cs))
}

/// Pairs each estimated pose with the nearest ground-truth timestamp within
/// half the ground-truth frame period.
fn matched_translations(
    est: &[(f64, Pose)],
    gt: &[(f64, Pose)],
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut gaps: Vec<f64> = gt.windows(2).map(|w| (w[1].0 - w[0].0).abs()).collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let period = if gaps.is_empty() {
        1.0
    } else {
        gaps[gaps.len() / 2]
    };
    let tol = 0.5 * period;

    let mut est_t = Vec::new();
    let mut gt_t = Vec::new();
    for (ts, pose) in est {
        let mut best: Option<(f64, &Pose)> = None;
        for (gts, gpose) in gt {
            let d = (ts - gts).abs();
            if d <= tol && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, gpose));
            }
        }
        if let Some((_, gpose)) = best {
            est_t.push(pose.translation);
            gt_t.push(gpose.translation);
        }
    }
    (est_t, gt_t)
}

/// Absolute trajectory error in centimeters: RMSE of translation residuals
/// after timestamp matching, optionally gauge-aligned by closed-form rigid
/// least squares first.
pub fn ate_rmse(est: &[(f64, Pose)], gt: &[(f64, Pose)], align: bool) -> Result<f64, MetricsError> {
    let (mut est_t, gt_t) = matched_translations(est, gt);
    if est_t.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    if align {
        if let Some(g) = rigid_alignment(&est_t, &gt_t) {
            for p in est_t.iter_mut() {
                *p = g.transform_point(p);
            }
        }
    }
    let sum_sq: f64 = est_t
        .iter()
        .zip(&gt_t)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(100.0 * (sum_sq / est_t.len() as f64).sqrt())
}

/// Per-agent ATE in centimeters under one shared gauge: a single rigid
/// alignment fit over every agent's matched translations jointly, then
/// per-agent RMSE. Per-agent alignment would absorb a disagreement between
/// agents' world frames entirely; the shared fit exposes it. For a single
/// pair this equals [`ate_rmse`].
pub fn team_ate_rmse(
    pairs: &[(&[(f64, Pose)], &[(f64, Pose)])],
    align: bool,
) -> Result<Vec<f64>, MetricsError> {
    let mut matched: Vec<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> = Vec::with_capacity(pairs.len());
    for (est, gt) in pairs {
        let m = matched_translations(est, gt);
        if m.0.is_empty() {
            return Err(MetricsError::EmptyOverlap);
        }
        matched.push(m);
    }
    if align {
        let all_est: Vec<Vector3<f64>> = matched.iter().flat_map(|(e, _)| e.iter().copied()).collect();
        let all_gt: Vec<Vector3<f64>> = matched.iter().flat_map(|(_, g)| g.iter().copied()).collect();
        if let Some(t) = rigid_alignment(&all_est, &all_gt) {
            for (est, _) in matched.iter_mut() {
                for p in est.iter_mut() {
                    *p = t.transform_point(p);
                }
            }
        }
    }
    Ok(matched
        .iter()
        .map(|(est, gt)| {
            let sum_sq: f64 = est.iter().zip(gt).map(|(a, b)| (a - b).norm_squared()).sum();
            100.0 * (sum_sq / est.len() as f64).sqrt()
        })
        .collect())
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at
/// [`PSNR_CAP_DB`] so identical images stay finite in reports.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch {
            a_w: a.width,
            a_h: a.height,
            b_w: b.width,
            b_h: b.height,
        });
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean absolute depth difference in millimeters over masked pixels.
pub fn depth_l1(a: &DepthImage, b: &DepthImage, mask: &[bool]) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height || mask.len() != a.data.len() {
        return Err(MetricsError::DimensionMismatch {
            a_w: a.width,
            a_h: a.height,
            b_w: b.width,
            b_h: b.height,
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((x, y), keep) in a.data.iter().zip(&b.data).zip(mask) {
        if *keep {
            sum += (x - y).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(1000.0 * sum / count as f64)
}

/// Per-agent evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent_id: u32,
    pub ate_rmse_cm: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_depth_l1_mm: f64,
    pub tracking_ms_per_frame: f64,
    pub mapping_ms_per_frame: f64,
}

/// Whole-run evaluation report; aggregates are plain means over agents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub agents: Vec<AgentMetrics>,
    pub mean_ate_rmse_cm: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_depth_l1_mm: f64,
}

impl MetricsReport {
    pub fn from_agents(agents: Vec<AgentMetrics>) -> Self {
        let n = agents.len().max(1) as f64;
        let mean = |f: fn(&AgentMetrics) -> f64| agents.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            mean_ate_rmse_cm: mean(|a| a.ate_rmse_cm),
            mean_psnr_db: mean(|a| a.mean_psnr_db),
            mean_ssim: mean(|a| a.mean_ssim),
            mean_depth_l1_mm: mean(|a| a.mean_depth_l1_mm),
            agents,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Fixed-width table for terminal output; one row per agent plus a mean
    /// row. Units match the field names, so CI can parse either form.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("agent  ate_rmse_cm  psnr_db   ssim    depth_l1_mm  track_ms  map_ms\n");
        for a in &self.agents {
            out.push_str(&format!(
                "{:<5}  {:>11.4}  {:>7.2}  {:>6.4}  {:>11.3}  {:>8.2}  {:>6.2}\n",
                a.agent_id,
                a.ate_rmse_cm,
                a.mean_psnr_db,
                a.mean_ssim,
                a.mean_depth_l1_mm,
                a.tracking_ms_per_frame,
                a.mapping_ms_per_frame
            ));
        }
        out.push_str(&format!(
            "mean   {:>11.4}  {:>7.2}  {:>6.4}  {:>11.3}\n",
            self.mean_ate_rmse_cm, self.mean_psnr_db, self.mean_ssim, self.mean_depth_l1_mm
        ));
        out
    }
}
