//! One agent's SLAM loop: frame-to-map pose tracking under a constant-velocity
//! prior, keyframe selection by map overlap, and periodic map growth plus
//! photometric refinement.
//!
//! Tracking registers observation splats (every `tracking_stride`-th valid
//! pixel) against the map splats inside the predicted view. Every
//! `mapping_interval`-th frame the map is updated: pixels the current render
//! cannot explain spawn new splats, then the splats in view take `map_iters`
//! gradient steps on the photometric loss. Steps are normalized per parameter
//! group and backtracked by halving, so the refinement loss never increases.

use crate::align::{register, AlignError, RegistrationConfig, RegistrationResult};
use crate::frame::RgbdFrame;
use crate::geometry::{write_trajectory, GeometryError, Pose, Trajectory, Twist};
use crate::gradients::{loss_gradients, SplatGradients};
use crate::map::{
    init_from_frame_oriented, GaussianMap, GaussianSplat, MapIoError, MapOwner,
    PRUNE_TAU_ELONGATION,
    PRUNE_TAU_OPACITY, PRUNE_TAU_SCALE,
};
use crate::render::{photometric_loss, render, render_splats, LossWeights};
use nalgebra::{Matrix6, Vector3};
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

pub(crate) const MAX_BACKTRACKS: usize = 8;
const MIN_SCALE: f64 = 1e-5;
/// Opacity stays strictly inside (0, 1): 1 would zero the transmittance and
/// break the compositing gradient; near-zero splats are left for pruning.
const MIN_OPACITY: f64 = 1e-4;
const MAX_OPACITY: f64 = 0.9999;

/// Pose variance ascribed to a frame that coasted on the motion model, used
/// when odometry edges accumulate per-frame uncertainty. Generous on purpose:
/// a lost frame's pose is a guess.
const LOST_FRAME_VARIANCE: f64 = 1e-2;

/// Gradient-descent step sizes for map refinement, per parameter group. Each
/// step moves the largest-magnitude entry of a group by exactly this much.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RefineSteps {
    pub position: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for RefineSteps {
    fn default() -> Self {
        RefineSteps {
            position: 1e-4,
            scale: 1e-4,
            opacity: 5e-3,
            color: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Pixel stride when sampling observation splats for tracking.
    pub tracking_stride: usize,
    /// Pixel stride when spawning map splats.
    pub mapping_stride: usize,
    /// A map update runs on every n-th frame, the seeding frame included.
    pub mapping_interval: usize,
    /// Gradient steps per map update; 0 disables refinement.
    pub map_iters: usize,
    /// Tracking is lost when the mean Mahalanobis cost per correspondence
    /// exceeds this (far chi-square tail for a 3-dof residual).
    pub loss_gate: f64,
    /// Rendered-vs-observed depth mismatch that spawns a splat, meters.
    pub depth_gate: f64,
    /// Keyframe when the matched fraction of observation splats is below this.
    pub keyframe_corr_ratio: f64,
    /// Prune after every n-th map update; 0 disables pruning.
    pub prune_interval: usize,
    /// Far limit for in-view splat selection, meters.
    pub max_view_dist: f64,
    /// Predict with constant velocity; false holds the previous pose.
    pub constant_velocity: bool,
    pub registration: RegistrationConfig,
    pub loss_weights: LossWeights,
    pub steps: RefineSteps,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            tracking_stride: 4,
            mapping_stride: 1,
            mapping_interval: 10,
            map_iters: 10,
            loss_gate: 25.0,
            depth_gate: 0.05,
            keyframe_corr_ratio: 0.7,
            prune_interval: 10,
            max_view_dist: 20.0,
            constant_velocity: true,
            // The map samples surfaces one splat per pixel, roughly depth/fx
            // apart, so the correspondence radius must cover that spacing
            // plus the motion-prediction error; the registration default is
            // tuned for much denser clouds.
            registration: RegistrationConfig {
                max_dist: 0.05,
                ..RegistrationConfig::default()
            },
            loss_weights: LossWeights::default(),
            steps: RefineSteps::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame_index: usize,
    pub frame: RgbdFrame,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackingLost {
    #[error("registration failed: {0}")]
    Registration(AlignError),
    #[error("mean correspondence cost {cost:.2} exceeds the gate {gate}")]
    CostGate { cost: f64, gate: f64 },
}

/// What happened to one tracked frame.
#[derive(Debug, Clone)]
pub enum TrackStatus {
    /// First frame: the map was seeded and the pose is the start prior.
    Bootstrap,
    Tracked {
        result: RegistrationResult,
        /// Observation splats fed to registration.
        source_count: usize,
    },
    /// The pose fell back to the motion-model prediction.
    Lost(TrackingLost),
}

/// Per-frame log row, serialized as CSV by [`save_outputs`].
#[derive(Debug, Clone)]
pub struct TrackLogRow {
    pub frame: usize,
    /// Mean cost per correspondence; NaN when there was no registration.
    pub cost: f64,
    pub inliers: usize,
    pub keyframe: bool,
    pub lost: bool,
    pub track_ms: f64,
    pub map_ms: f64,
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub agent_id: u32,
    pub trajectory: Trajectory,
    pub local_map: GaussianMap,
    pub keyframes: Vec<Keyframe>,
    /// Per-frame motion estimate in the tangent space.
    pub velocity: Twist,
    /// One information matrix per frame: the registration Hessian for tracked
    /// frames, `I / LOST_FRAME_VARIANCE` for coasted ones. Odometry edges in
    /// the consensus pose graph sum the inverses over the frames they span.
    pub tracking_information: Vec<Matrix6<f64>>,
    pub log: Vec<TrackLogRow>,
    start_prior: Pose,
    frames_seen: usize,
    map_updates: usize,
}

impl AgentState {
    /// `start_prior` is the world pose assumed for the first frame.
    pub fn new(agent_id: u32, start_prior: Pose) -> Self {
        AgentState {
            agent_id,
            trajectory: Vec::new(),
            local_map: GaussianMap::new(MapOwner::Agent(agent_id)),
            keyframes: Vec::new(),
            velocity: Twist::zero(),
            tracking_information: Vec::new(),
            log: Vec::new(),
            start_prior,
            frames_seen: 0,
            map_updates: 0,
        }
    }

    pub fn current_pose(&self) -> Pose {
        self.trajectory
            .last()
            .map(|(_, p)| *p)
            .unwrap_or(self.start_prior)
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    fn predict(&self, constant_velocity: bool) -> Pose {
        let prev = self.current_pose();
        if constant_velocity {
            prev.compose(&Pose::exp(&self.velocity))
        } else {
            prev
        }
    }

    /// Deep copy of everything a consensus round reads. The agent keeps
    /// tracking frames while the round works on the copy.
    pub fn snapshot(&self) -> AgentSnapshot {
        AgentSnapshot {
            agent_id: self.agent_id,
            trajectory: self.trajectory.clone(),
            keyframes: self.keyframes.clone(),
            map: self.local_map.clone(),
            tracking_information: self.tracking_information.clone(),
        }
    }

    /// Applies absolute keyframe pose corrections from a consensus round.
    ///
    /// Each corrected keyframe defines a rigid delta `new * old^-1`. The delta
    /// carries every trajectory entry and keyframe from that keyframe's frame
    /// up to the next corrected one, the last delta extending to the end, so
    /// frames and splats added after the snapshot ride along with the newest
    /// corrected keyframe. Map segments move by the delta of the keyframe they
    /// were spawned under. Re-applying the same message is a no-op: the deltas
    /// come out as identity the second time.
    pub fn apply_pose_corrections(&mut self, corrected: &[(usize, Pose)]) {
        // (keyframe slot, frame, delta), sorted by frame.
        let mut spans: Vec<(u32, usize, Pose)> = Vec::with_capacity(corrected.len());
        for &(frame, new_pose) in corrected {
            let Some(slot) = self.keyframes.iter().position(|kf| kf.frame_index == frame) else {
                continue;
            };
            let delta = new_pose.compose(&self.keyframes[slot].pose.inverse());
            spans.push((slot as u32, frame, delta));
        }
        if spans.is_empty() {
            return;
        }
        spans.sort_by_key(|s| s.1);

        let covering_frame = |f: usize| spans.iter().rev().find(|s| s.1 <= f).map(|s| s.2);
        for (f, (_, pose)) in self.trajectory.iter_mut().enumerate() {
            if let Some(delta) = covering_frame(f) {
                *pose = delta.compose(pose);
            }
        }
        for kf in self.keyframes.iter_mut() {
            if let Some(delta) = covering_frame(kf.frame_index) {
                kf.pose = delta.compose(&kf.pose);
            }
        }

        // Segment ids are keyframe slots; segments newer than the last
        // corrected keyframe take its delta.
        let mut moves: HashMap<u32, Pose> = HashMap::new();
        for seg in 0..self.keyframes.len() as u32 {
            if let Some(s) = spans.iter().rev().find(|s| s.0 <= seg) {
                moves.insert(seg, s.2);
            }
        }
        self.local_map.reanchor_segments(&moves);
    }
}

/// Immutable copy of the agent state a consensus round works from.
#[derive(Debug, Clone)]
pub struct AgentSnapshot {
    pub agent_id: u32,
    pub trajectory: Trajectory,
    pub keyframes: Vec<Keyframe>,
    pub map: GaussianMap,
    pub tracking_information: Vec<Matrix6<f64>>,
}

/// Tracks one frame against the local map and appends the pose estimate.
///
/// The first frame seeds the map at the start prior and becomes keyframe 0.
/// Afterwards the motion model predicts the pose, observation splats are
/// registered against the splats in the predicted view, and the velocity is
/// re-estimated from the accepted pose. A failed or gated registration keeps
/// the prediction and leaves the velocity untouched.
pub fn track_frame(
    state: &mut AgentState,
    frame: &RgbdFrame,
    cfg: &AgentConfig,
) -> (Pose, TrackStatus) {
    debug_assert!(
        state
            .trajectory
            .last()
            .map(|(t, _)| *t < frame.timestamp)
            .unwrap_or(true),
        "frame timestamps must be strictly increasing"
    );
    state.frames_seen += 1;

    if state.trajectory.is_empty() {
        let pose = state.start_prior;
        for splat in init_from_frame_oriented(frame, &pose, cfg.mapping_stride) {
            state.local_map.insert(splat, 0);
        }
        state.local_map.rebuild_index();
        state.trajectory.push((frame.timestamp, pose));
        // The first pose is definitional, not measured; no odometry edge ever
        // spans it, the entry just keeps the per-frame list aligned.
        state.tracking_information.push(Matrix6::identity());
        state.keyframes.push(Keyframe {
            frame_index: 0,
            frame: frame.clone(),
            pose,
        });
        return (pose, TrackStatus::Bootstrap);
    }

    let prediction = state.predict(cfg.constant_velocity);
    // Only confidently oriented points feed registration. Pixels that failed
    // the normal test sit on depth discontinuities, where alpha-blended depth
    // puts phantom points between the foreground and background surfaces;
    // grazing surfaces (normal nearly perpendicular to the viewing ray) carry
    // the most view-dependent depth error.
    let mut observed = init_from_frame_oriented(frame, &Pose::identity(), cfg.tracking_stride);
    observed.retain(|s| {
        s.scale.z < s.scale.x && {
            let n = s.rotation * Vector3::z();
            let r = s.position.norm();
            r > 0.0 && (n.dot(&s.position) / r).abs() > 0.26
        }
    });
    let in_view = state
        .local_map
        .frustum_select(&prediction, &frame.intrinsics, cfg.max_view_dist);
    let candidates = state.local_map.subset(&in_view, state.local_map.owner);

    let outcome = match register(&observed, &candidates, &prediction, &cfg.registration) {
        Ok(result) => {
            let mean_cost = result.final_cost / result.inlier_count.max(1) as f64;
            if mean_cost > cfg.loss_gate {
                Err(TrackingLost::CostGate {
                    cost: mean_cost,
                    gate: cfg.loss_gate,
                })
            } else {
                Ok(result)
            }
        }
        // A degenerate system cannot yield a pose either; coast through it.
        Err(e) => Err(TrackingLost::Registration(e)),
    };

    let prev = state.current_pose();
    match outcome {
        Ok(result) => {
            let pose = result.transform;
            // Near-pi frame-to-frame rotations do not occur in tracked motion;
            // if the log still fails, coasting with zero velocity is safe.
            state.velocity = prev
                .inverse()
                .compose(&pose)
                .log()
                .unwrap_or_else(|_| Twist::zero());
            state.trajectory.push((frame.timestamp, pose));
            state.tracking_information.push(result.information);
            (
                pose,
                TrackStatus::Tracked {
                    result,
                    source_count: observed.len(),
                },
            )
        }
        Err(lost) => {
            state.trajectory.push((frame.timestamp, prediction));
            state
                .tracking_information
                .push(Matrix6::identity() / LOST_FRAME_VARIANCE);
            (prediction, TrackStatus::Lost(lost))
        }
    }
}

/// Low overlap between an observation and the map marks a new viewpoint.
pub fn should_keyframe(
    result: &RegistrationResult,
    source_count: usize,
    cfg: &AgentConfig,
) -> bool {
    if source_count == 0 {
        return false;
    }
    (result.inlier_count as f64 / source_count as f64) < cfg.keyframe_corr_ratio
}

/// Summary of one map update.
#[derive(Debug, Clone)]
pub struct MapUpdateSummary {
    pub new_splats: usize,
    pub pruned: usize,
    /// Refinement loss before the first step and after each accepted one;
    /// non-increasing by construction. Empty when refinement is disabled.
    pub loss_trace: Vec<f64>,
}

/// Grows the map from pixels the current render cannot explain, then refines
/// the splats in view with `cfg.map_iters` backtracked gradient steps.
///
/// A pixel is unexplained when its rendered alpha is below 0.5 or the
/// alpha-normalized rendered depth misses the observation by more than
/// `cfg.depth_gate`; those pixels are re-seeded via the usual observation
/// splat initializer. New splats are tagged with the latest keyframe segment
/// so later trajectory corrections can carry them along rigidly.
pub fn update_map(
    state: &mut AgentState,
    frame: &RgbdFrame,
    pose: &Pose,
    cfg: &AgentConfig,
) -> MapUpdateSummary {
    let k = &frame.intrinsics;
    let rendered = render(&state.local_map, pose, k);

    let mut unexplained = frame.clone();
    let mut any = false;
    for y in 0..k.height {
        for x in 0..k.width {
            if !frame.depth.is_valid(x, y) {
                continue;
            }
            let alpha = rendered.alpha[y * k.width + x];
            let depth_est = if alpha > 0.0 {
                rendered.depth.get(x, y) / alpha
            } else {
                0.0
            };
            if alpha >= 0.5 && (depth_est - frame.depth.get(x, y)).abs() <= cfg.depth_gate {
                unexplained.depth.set(x, y, 0.0);
            } else {
                any = true;
            }
        }
    }

    let segment = state.keyframes.len().saturating_sub(1) as u32;
    let spawned = if any {
        init_from_frame_oriented(&unexplained, pose, cfg.mapping_stride)
    } else {
        Vec::new()
    };
    let new_splats = spawned.len();
    for splat in spawned {
        state.local_map.insert(splat, segment);
    }
    if new_splats > 0 {
        state.local_map.rebuild_index();
    }

    let loss_trace = refine_in_view(state, frame, pose, cfg);

    state.map_updates += 1;
    let pruned = if cfg.prune_interval > 0 && state.map_updates % cfg.prune_interval == 0 {
        state
            .local_map
            .prune(PRUNE_TAU_OPACITY, Some(PRUNE_TAU_SCALE), PRUNE_TAU_ELONGATION)
    } else {
        0
    };

    MapUpdateSummary {
        new_splats,
        pruned,
        loss_trace,
    }
}

/// One normalized gradient step on a splat set: the largest-magnitude entry
/// of each parameter group moves by `factor * step`, everything else in
/// proportion, with scales, opacities, and colors clamped to their valid
/// ranges.
pub(crate) fn apply_refine_steps(
    splats: &[GaussianSplat],
    grads: &SplatGradients,
    steps: &RefineSteps,
    factor: f64,
) -> Vec<GaussianSplat> {
    let (g_pos, g_scale, g_op, g_col) = grads.group_inf_norms();
    let rate = |step: f64, norm: f64| if norm > 0.0 { factor * step / norm } else { 0.0 };
    let r_pos = rate(steps.position, g_pos);
    let r_scale = rate(steps.scale, g_scale);
    let r_op = rate(steps.opacity, g_op);
    let r_col = rate(steps.color, g_col);
    splats
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut out = *s;
            out.position -= r_pos * grads.position[i];
            out.scale = (out.scale - r_scale * grads.scale[i]).map(|v| v.max(MIN_SCALE));
            out.opacity = (out.opacity - r_op * grads.opacity[i]).clamp(MIN_OPACITY, MAX_OPACITY);
            for c in 0..3 {
                out.color[c] = (out.color[c] - r_col * grads.color[i][c]).clamp(0.0, 1.0);
            }
            out
        })
        .collect()
}

fn refine_in_view(
    state: &mut AgentState,
    frame: &RgbdFrame,
    pose: &Pose,
    cfg: &AgentConfig,
) -> Vec<f64> {
    if cfg.map_iters == 0 {
        return Vec::new();
    }
    let in_view = state
        .local_map
        .frustum_select(pose, &frame.intrinsics, cfg.max_view_dist);
    if in_view.is_empty() {
        return Vec::new();
    }
    let mut subset: Vec<GaussianSplat> = in_view
        .iter()
        .map(|&i| state.local_map.splats()[i])
        .collect();

    let mut trace = Vec::with_capacity(cfg.map_iters + 1);
    for _ in 0..cfg.map_iters {
        let (loss, _, grads) = loss_gradients(&subset, pose, frame, &cfg.loss_weights)
            .expect("frame dimensions match its intrinsics");
        if trace.is_empty() {
            trace.push(loss);
        }
        let norms = grads.group_inf_norms();
        if norms.0 == 0.0 && norms.1 == 0.0 && norms.2 == 0.0 && norms.3 == 0.0 {
            break;
        }

        let mut factor = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let candidate = apply_refine_steps(&subset, &grads, &cfg.steps, factor);
            let re_rendered = render_splats(&candidate, pose, &frame.intrinsics);
            let new_loss =
                photometric_loss(&re_rendered, &frame.rgb, &frame.depth, &cfg.loss_weights)
                    .expect("frame dimensions match its intrinsics");
            if new_loss <= loss {
                accepted = Some((candidate, new_loss));
                break;
            }
            factor *= 0.5;
        }
        match accepted {
            Some((candidate, new_loss)) => {
                subset = candidate;
                trace.push(new_loss);
            }
            // No admissible step even at the smallest size.
            None => break,
        }
    }

    for (slot, &i) in in_view.iter().enumerate() {
        state.local_map.splats_mut()[i] = subset[slot];
    }
    state.local_map.rebuild_index();
    trace
}

#[derive(Debug, Clone)]
pub struct StepSummary {
    pub pose: Pose,
    pub status: TrackStatus,
    pub map_update: Option<MapUpdateSummary>,
}

/// Runs one full frame: track, keyframe bookkeeping, periodic map update.
/// Map updates are skipped while tracking is lost.
pub fn step(state: &mut AgentState, frame: &RgbdFrame, cfg: &AgentConfig) -> StepSummary {
    let t0 = Instant::now();
    let (pose, status) = track_frame(state, frame, cfg);
    let track_ms = t0.elapsed().as_secs_f64() * 1e3;

    let frame_index = state.frames_seen - 1;
    let mut keyframe = matches!(status, TrackStatus::Bootstrap);
    if let TrackStatus::Tracked {
        result,
        source_count,
    } = &status
    {
        if should_keyframe(result, *source_count, cfg) {
            state.keyframes.push(Keyframe {
                frame_index,
                frame: frame.clone(),
                pose,
            });
            keyframe = true;
        }
    }

    let lost = matches!(status, TrackStatus::Lost(_));
    let t1 = Instant::now();
    let map_update = if !lost && frame_index % cfg.mapping_interval.max(1) == 0 {
        Some(update_map(state, frame, &pose, cfg))
    } else {
        None
    };
    let map_ms = t1.elapsed().as_secs_f64() * 1e3;

    let (cost, inliers) = match &status {
        TrackStatus::Tracked { result, .. } => (
            result.final_cost / result.inlier_count.max(1) as f64,
            result.inlier_count,
        ),
        _ => (f64::NAN, 0),
    };
    state.log.push(TrackLogRow {
        frame: frame_index,
        cost,
        inliers,
        keyframe,
        lost,
        track_ms,
        map_ms,
    });

    StepSummary {
        pose,
        status,
        map_update,
    }
}

#[derive(Debug, Error)]
pub enum AgentIoError {
    #[error(transparent)]
    Trajectory(#[from] GeometryError),
    #[error(transparent)]
    Map(#[from] MapIoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes `trajectory.txt`, `map.bin`, and `tracking.csv` into `dir`.
pub fn save_outputs(state: &AgentState, dir: &Path) -> Result<(), AgentIoError> {
    std::fs::create_dir_all(dir)?;
    write_trajectory(&dir.join("trajectory.txt"), &state.trajectory)?;
    state.local_map.save_binary(&dir.join("map.bin"))?;
    let mut csv = String::from("frame,cost,inliers,keyframe,lost,track_ms,map_ms\n");
    for r in &state.log {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.3}\n",
            r.frame, r.cost, r.inliers, r.keyframe as u8, r.lost as u8, r.track_ms, r.map_ms
        ));
    }
    std::fs::write(dir.join("tracking.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::DepthImage;
    use crate::geometry::CameraIntrinsics;
    use crate::sim::{generate_scene, heading_pose, standard_camera, SyntheticScene, FRAME_DT};
    use nalgebra::{Matrix6, Vector3};

    fn test_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32)
    }

    fn test_cfg() -> AgentConfig {
        AgentConfig {
            map_iters: 3,
            ..AgentConfig::default()
        }
    }

    fn observe(scene: &SyntheticScene, pose: &Pose, k: &CameraIntrinsics, t: f64) -> RgbdFrame {
        let r = render(&scene.map, pose, k);
        RgbdFrame {
            timestamp: t,
            rgb: r.rgb,
            depth: r.depth,
            intrinsics: *k,
        }
    }

    fn pose_error_m(truth: &Pose, est: &Pose) -> f64 {
        truth.inverse().compose(est).translation.norm()
    }

    #[test]
    fn static_camera_stays_put() {
        let scene = generate_scene(5, 2.5, 3);
        let k = test_camera();
        let pose = heading_pose(Vector3::new(0.0, -0.3, 0.0), Vector3::new(0.0, 1.0, 0.0));
        // Refinement off isolates the tracking contract; with it on, the map
        // itself settles a little and the poses legitimately follow it.
        let mut cfg = test_cfg();
        cfg.map_iters = 0;
        let mut state = AgentState::new(1, pose);
        for i in 0..6 {
            let frame = observe(&scene, &pose, &k, i as f64 * FRAME_DT);
            let summary = step(&mut state, &frame, &cfg);
            assert!(pose_error_m(&pose, &summary.pose) < 1e-6, "frame {i}");
            assert!(summary.pose.rotation.angle_to(&pose.rotation) < 1e-6);
        }
        assert_eq!(state.trajectory.len(), 6);
    }

    #[test]
    fn slow_motion_tracks_within_a_millimeter() {
        // Motion of 1 cm + 0.5 degrees per frame toward a room corner, a
        // view with two walls and objects so every pose component is
        // observable. A view of just one wall cannot separate yaw from
        // lateral translation (both produce uniform lateral flow) and no
        // registration metric can fix that.
        let scene = generate_scene(9, 2.5, 3);
        let k = standard_camera();
        let mut cfg = AgentConfig::default();
        cfg.tracking_stride = 2;
        let base = std::f64::consts::FRAC_PI_4;
        let poses: Vec<Pose> = (0..4)
            .map(|i| {
                let yaw = (i as f64) * 0.5_f64.to_radians();
                let dir = Vector3::new((base + yaw).cos(), (base + yaw).sin(), 0.0);
                let along = 0.01 * i as f64 / 2.0_f64.sqrt();
                heading_pose(Vector3::new(-0.5 + along, -0.5 + along, 0.0), dir)
            })
            .collect();
        let mut state = AgentState::new(1, poses[0]);
        for (i, truth) in poses.iter().enumerate() {
            let frame = observe(&scene, truth, &k, i as f64 * FRAME_DT);
            let summary = step(&mut state, &frame, &cfg);
            assert!(
                pose_error_m(truth, &summary.pose) < 1e-3,
                "frame {i}: {} m off",
                pose_error_m(truth, &summary.pose)
            );
            assert!(summary.pose.rotation.angle_to(&truth.rotation) < 2e-3);
        }
    }

    #[test]
    fn invalid_depth_coasts_on_the_motion_model() {
        let scene = generate_scene(5, 2.5, 3);
        let k = test_camera();
        let pose = heading_pose(Vector3::new(0.0, -0.3, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let cfg = test_cfg();
        let mut state = AgentState::new(1, pose);
        for i in 0..3 {
            let frame = observe(&scene, &pose, &k, i as f64 * FRAME_DT);
            step(&mut state, &frame, &cfg);
        }

        let expected = state
            .current_pose()
            .compose(&Pose::exp(&state.velocity));
        let blind = RgbdFrame {
            timestamp: 3.0 * FRAME_DT,
            rgb: crate::frame::RgbImage::new(32, 32),
            depth: DepthImage::new(32, 32),
            intrinsics: k,
        };
        let summary = step(&mut state, &blind, &cfg);
        match &summary.status {
            TrackStatus::Lost(TrackingLost::Registration(
                AlignError::InsufficientCorrespondences { found, .. },
            )) => assert_eq!(*found, 0),
            other => panic!("expected lost tracking, got {other:?}"),
        }
        assert!(pose_error_m(&expected, &summary.pose) < 1e-15);
        assert_eq!(state.trajectory.len(), 4);
        assert!(summary.map_update.is_none());
    }

    #[test]
    fn keyframe_ratio_boundary_is_strict() {
        let cfg = AgentConfig::default();
        let reg = |inliers: usize| RegistrationResult {
            transform: Pose::identity(),
            final_cost: 0.0,
            iterations: 1,
            inlier_count: inliers,
            converged: true,
            information: Matrix6::identity(),
            cost_trace: Vec::new(),
        };
        assert!(!should_keyframe(&reg(10), 10, &cfg));
        assert!(!should_keyframe(&reg(7), 10, &cfg), "exactly 0.7 is not a keyframe");
        assert!(should_keyframe(&reg(6), 10, &cfg));
    }

    #[test]
    fn fully_explained_frame_spawns_nothing() {
        let scene = generate_scene(5, 2.5, 2);
        let k = test_camera();
        // A close wall view with no depth discontinuities: per-pixel seeds
        // re-render to the observed depth. Object silhouettes would not;
        // their blended depth sits between the surfaces, and seeds placed
        // there drag the rendered depth of nearby pixels along.
        let pose = heading_pose(Vector3::new(0.0, 0.8, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let mut cfg = test_cfg();
        cfg.map_iters = 0;
        let mut state = AgentState::new(1, pose);
        let frame = observe(&scene, &pose, &k, 0.0);
        let summary = step(&mut state, &frame, &cfg);
        let update = summary.map_update.expect("frame 0 is a mapping frame");
        assert_eq!(update.new_splats, 0, "the seeding already explains the frame");

        // With refinement off, a repeated update leaves the map untouched.
        let before = state.local_map.splats().to_vec();
        let again = update_map(&mut state, &frame, &pose, &cfg);
        assert_eq!(again.new_splats, 0);
        assert_eq!(state.local_map.splats(), &before[..]);
    }

    #[test]
    fn facing_an_unmapped_wall_fills_the_view() {
        let scene = generate_scene(5, 2.5, 2);
        let k = test_camera();
        let pose_a = heading_pose(Vector3::new(0.0, -0.3, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let pose_b = heading_pose(Vector3::new(0.0, -0.3, 0.0), Vector3::new(0.0, -1.0, 0.0));
        let mut cfg = test_cfg();
        cfg.map_iters = 0;
        let mut state = AgentState::new(1, pose_a);
        step(&mut state, &observe(&scene, &pose_a, &k, 0.0), &cfg);

        let frame_b = observe(&scene, &pose_b, &k, FRAME_DT);
        let update = update_map(&mut state, &frame_b, &pose_b, &cfg);
        assert!(update.new_splats > 0, "the turned view is unmapped");

        let re_rendered = render(&state.local_map, &pose_b, &k);
        let mut covered = 0;
        let mut valid = 0;
        for y in 0..k.height {
            for x in 0..k.width {
                if !frame_b.depth.is_valid(x, y) {
                    continue;
                }
                valid += 1;
                if re_rendered.alpha[y * k.width + x] >= 0.5 {
                    covered += 1;
                }
            }
        }
        assert!(
            covered as f64 >= 0.95 * valid as f64,
            "{covered}/{valid} pixels covered"
        );
    }

    #[test]
    fn refinement_loss_never_increases() {
        let scene = generate_scene(5, 2.5, 2);
        let k = test_camera();
        let pose = heading_pose(Vector3::new(0.0, -0.3, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let mut cfg = test_cfg();
        cfg.map_iters = 5;
        let mut state = AgentState::new(1, pose);
        let summary = step(&mut state, &observe(&scene, &pose, &k, 0.0), &cfg);
        let trace = summary.map_update.unwrap().loss_trace;
        assert!(trace.len() >= 2, "refinement made no step");
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let scene = generate_scene(5, 2.5, 2);
            let k = test_camera();
            let pose = heading_pose(Vector3::new(0.0, -0.3, 0.0), Vector3::new(0.0, 1.0, 0.0));
            let cfg = test_cfg();
            let mut state = AgentState::new(1, pose);
            for i in 0..6 {
                let truth = heading_pose(
                    Vector3::new(0.0, -0.3 + 0.01 * i as f64, 0.0),
                    Vector3::new(0.0, 1.0, 0.0),
                );
                let frame = observe(&scene, &truth, &k, i as f64 * FRAME_DT);
                step(&mut state, &frame, &cfg);
            }
            state
        };
        let a = run();
        let b = run();
        assert_eq!(a.trajectory.len(), b.trajectory.len());
        for ((ta, pa), (tb, pb)) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(ta.to_bits(), tb.to_bits());
            assert_eq!(pa.translation, pb.translation);
            assert_eq!(
                pa.rotation.quaternion().coords,
                pb.rotation.quaternion().coords
            );
        }
        assert_eq!(a.local_map.splats().len(), b.local_map.splats().len());
    }

    #[test]
    fn per_frame_information_mirrors_tracking_outcomes() {
        let scene = generate_scene(5, 2.5, 3);
        let k = test_camera();
        let pose = heading_pose(Vector3::new(0.0, -0.3, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let mut cfg = test_cfg();
        cfg.map_iters = 0;
        let mut state = AgentState::new(1, pose);
        for i in 0..2 {
            step(&mut state, &observe(&scene, &pose, &k, i as f64 * FRAME_DT), &cfg);
        }
        let blind = RgbdFrame {
            timestamp: 2.0 * FRAME_DT,
            rgb: crate::frame::RgbImage::new(32, 32),
            depth: DepthImage::new(32, 32),
            intrinsics: k,
        };
        step(&mut state, &blind, &cfg);

        assert_eq!(state.tracking_information.len(), 3);
        assert_eq!(state.tracking_information[0], Matrix6::identity());
        let tracked = &state.tracking_information[1];
        assert!((tracked - tracked.transpose()).norm() < 1e-9 * tracked.norm());
        assert!((0..6).all(|i| tracked[(i, i)] > 0.0));
        assert_eq!(
            state.tracking_information[2],
            Matrix6::identity() / LOST_FRAME_VARIANCE
        );
    }

    fn placeholder_frame(k: CameraIntrinsics, t: f64) -> RgbdFrame {
        RgbdFrame {
            timestamp: t,
            rgb: crate::frame::RgbImage::new(k.width, k.height),
            depth: DepthImage::new(k.width, k.height),
            intrinsics: k,
        }
    }

    fn gap(a: &Pose, b: &Pose) -> f64 {
        let d = a.inverse().compose(b);
        d.translation.norm() + d.rotation.angle()
    }

    #[test]
    fn corrections_carry_their_spans_and_reapplying_is_free() {
        let k = test_camera();
        let twist = |rx: f64, tz: f64| {
            Pose::exp(&Twist {
                rotation: Vector3::new(rx, 0.0, 0.0),
                translation: Vector3::new(0.0, 0.0, tz),
            })
        };
        let mut state = AgentState::new(1, Pose::identity());
        for f in 0..6 {
            state.trajectory.push((f as f64 * FRAME_DT, twist(0.01 * f as f64, 0.1 * f as f64)));
            state.tracking_information.push(Matrix6::identity());
        }
        state.frames_seen = 6;
        for (slot, frame) in [0usize, 3].into_iter().enumerate() {
            state.keyframes.push(Keyframe {
                frame_index: frame,
                frame: placeholder_frame(k, frame as f64 * FRAME_DT),
                pose: state.trajectory[frame].1,
            });
            state.local_map.insert(
                GaussianSplat::isotropic(Vector3::new(slot as f64, 0.0, 1.0), 0.02, 0.8, [0.5; 3]),
                slot as u32,
            );
        }
        state.local_map.rebuild_index();

        let d0 = twist(0.2, -0.4);
        let d3 = twist(-0.1, 0.25);
        let before = state.clone();
        let corrected = vec![
            (0, d0.compose(&state.keyframes[0].pose)),
            (3, d3.compose(&state.keyframes[1].pose)),
        ];
        state.apply_pose_corrections(&corrected);

        for f in 0..6 {
            let delta = if f < 3 { &d0 } else { &d3 };
            let expected = delta.compose(&before.trajectory[f].1);
            assert!(gap(&expected, &state.trajectory[f].1) < 1e-12, "frame {f}");
        }
        assert!(gap(&state.keyframes[0].pose, &corrected[0].1) < 1e-12);
        assert!(gap(&state.keyframes[1].pose, &corrected[1].1) < 1e-12);
        let splats = state.local_map.splats();
        assert!((splats[0].position - d0.transform_point(&before.local_map.splats()[0].position))
            .norm()
            < 1e-12);
        assert!((splats[1].position - d3.transform_point(&before.local_map.splats()[1].position))
            .norm()
            < 1e-12);

        let once = state.clone();
        state.apply_pose_corrections(&corrected);
        for f in 0..6 {
            assert!(gap(&once.trajectory[f].1, &state.trajectory[f].1) < 1e-12);
        }
        for (a, b) in once.local_map.splats().iter().zip(state.local_map.splats()) {
            assert!((a.position - b.position).norm() < 1e-12);
        }
    }

    #[test]
    fn snapshots_are_deep_copies() {
        let scene = generate_scene(5, 2.5, 2);
        let k = test_camera();
        let pose = heading_pose(Vector3::new(0.0, -0.3, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let cfg = test_cfg();
        let mut state = AgentState::new(1, pose);
        step(&mut state, &observe(&scene, &pose, &k, 0.0), &cfg);
        let snap = state.snapshot();
        let frozen_len = snap.map.len();
        let frozen_pose = snap.trajectory[0].1;

        step(&mut state, &observe(&scene, &pose, &k, FRAME_DT), &cfg);
        state.local_map.splats_mut()[0].opacity = 0.123;
        state.trajectory[0].1 = Pose::exp(&Twist {
            rotation: Vector3::zeros(),
            translation: Vector3::new(9.0, 0.0, 0.0),
        });

        assert_eq!(snap.map.len(), frozen_len);
        assert!(snap.map.splats()[0].opacity != 0.123);
        assert_eq!(snap.trajectory.len(), 1);
        assert!(gap(&snap.trajectory[0].1, &frozen_pose) < 1e-15);
        assert_eq!(snap.tracking_information.len(), 1);
    }
}
