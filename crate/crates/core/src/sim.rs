//! Synthetic ground-truth world: a procedural splat room, waypoint camera
//! paths, RGB-D sequence synthesis through the shared renderer, and seeded
//! observation noise.
//!
//! Frames are produced by the exact same `render` call the SLAM side uses,
//! so the ground-truth map rendered at ground-truth poses reproduces the
//! dataset bitwise; any end-to-end error is the pipeline's own. Walls are
//! laid out dense and opaque enough that transmittance behind them falls
//! under the compositing termination floor, keeping the alpha-weighted
//! rendered depth within about a millimeter of the true surface.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frame::RgbdFrame;
use crate::geometry::{CameraIntrinsics, Pose, Trajectory};
use crate::map::{GaussianMap, GaussianSplat, MapOwner};
use crate::render::render;

/// Grid pitch of wall splats in meters. Fine pitch with sub-pitch sigma
/// keeps the alpha-weighted depth of oblique walls within a few millimeters
/// of the true plane; coarse blobs make the rendered surface ripple at the
/// pitch scale, which shows up directly as registration noise.
const WALL_SPACING: f64 = 0.03;
/// Tangential sigma of wall splats; overlaps the pitch so grid gaps stay
/// opaque while several splats share each pixel and average each other out.
const WALL_SIGMA: f64 = 0.022;
/// Tangential-to-normal scale ratio of wall splats.
const WALL_FLATNESS: f64 = 20.0;
/// Moderate opacities spread compositing weight over a few splats per
/// pixel instead of letting the front splat quantize the depth.
const WALL_OPACITY: f64 = 0.8;
const OBJECT_OPACITY: f64 = 0.8;
/// Per-splat uniform color jitter amplitude.
const COLOR_JITTER: f64 = 0.05;

/// Frame period of synthesized sequences in seconds.
pub const FRAME_DT: f64 = 1.0 / 30.0;

/// Procedurally generated ground-truth world.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub map: GaussianMap,
    pub extent: f64,
    pub seed: u64,
}

/// Camera path through waypoints: linear translation, quaternion slerp,
/// uniform timestamps.
#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Pose>,
    pub frames_per_segment: usize,
}

impl TrajectorySpec {
    pub fn sample(&self) -> Trajectory {
        let mut out = Vec::new();
        if self.waypoints.is_empty() {
            return out;
        }
        out.push((0.0, self.waypoints[0]));
        let f = self.frames_per_segment.max(1);
        for (seg, pair) in self.waypoints.windows(2).enumerate() {
            for i in 1..=f {
                let t = i as f64 / f as f64;
                let rot = pair[0].rotation.slerp(&pair[1].rotation, t);
                let trans = pair[0].translation.lerp(&pair[1].translation, t);
                let idx = seg * f + i;
                out.push((idx as f64 * FRAME_DT, Pose::new(rot, trans)));
            }
        }
        out
    }
}

/// 64x64 pinhole used by the standard synthetic runs (about 56 degrees FOV).
pub fn standard_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(60.0, 60.0, 32.0, 32.0, 64, 64)
}

fn wall_rotation(face: usize) -> UnitQuaternion<f64> {
    use std::f64::consts::FRAC_PI_2;
    use std::f64::consts::PI;
    // Maps local +z (the splat's thin axis) onto the face normal.
    match face {
        0 => UnitQuaternion::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2), // +x
        1 => UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -FRAC_PI_2), // -x
        2 => UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -FRAC_PI_2), // +y
        3 => UnitQuaternion::from_axis_angle(&Vector3::x_axis(), FRAC_PI_2), // -y
        4 => UnitQuaternion::identity(),                                     // +z
        _ => UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI),        // -z
    }
}

fn face_point(face: usize, h: f64, u: f64, v: f64) -> Vector3<f64> {
    match face {
        0 => Vector3::new(h, u, v),
        1 => Vector3::new(-h, u, v),
        2 => Vector3::new(u, h, v),
        3 => Vector3::new(u, -h, v),
        4 => Vector3::new(u, v, h),
        _ => Vector3::new(u, v, -h),
    }
}

const WALL_COLORS: [[f64; 3]; 6] = [
    [0.75, 0.55, 0.40],
    [0.45, 0.60, 0.75],
    [0.55, 0.70, 0.45],
    [0.70, 0.65, 0.50],
    [0.60, 0.50, 0.70],
    [0.80, 0.75, 0.65],
];

fn jittered(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = base;
    for ch in c.iter_mut() {
        *ch = (*ch + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.02, 0.98);
    }
    c
}

/// Builds the deterministic room: six wall planes of flat splats plus
/// `n_objects` box or sphere clusters of near-isotropic splats, every color
/// jittered per splat so views are texturally discriminative.
pub fn generate_scene(seed: u64, extent: f64, n_objects: usize) -> SyntheticScene {
    assert!(extent > 0.0, "scene extent must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = extent / 2.0;
    let mut splats = Vec::new();

    let per_side = (extent / WALL_SPACING).round() as usize + 1;
    for face in 0..6 {
        let rotation = wall_rotation(face);
        for iu in 0..per_side {
            for iv in 0..per_side {
                let u = -h + extent * iu as f64 / (per_side - 1) as f64;
                let v = -h + extent * iv as f64 / (per_side - 1) as f64;
                let sigma_t = WALL_SIGMA * rng.random_range(0.9..1.1);
                splats.push(GaussianSplat {
                    position: face_point(face, h, u, v),
                    scale: Vector3::new(sigma_t, sigma_t, sigma_t / WALL_FLATNESS),
                    rotation,
                    opacity: WALL_OPACITY,
                    color: jittered(WALL_COLORS[face], &mut rng),
                });
            }
        }
    }

    let margin = (0.25 * extent).min(0.8);
    for _ in 0..n_objects {
        let center = Vector3::new(
            rng.random_range(-h + margin..h - margin),
            rng.random_range(-h + margin..h - margin),
            rng.random_range(-h + margin..h - margin),
        );
        let base_color = [
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
        ];
        let size = rng.random_range(0.10..0.25) * (extent / 4.0).min(1.0);
        let is_sphere = rng.random_range(0.0..1.0) < 0.5;
        let half_extents = Vector3::new(
            size * rng.random_range(0.7..1.3),
            size * rng.random_range(0.7..1.3),
            size * rng.random_range(0.7..1.3),
        );
        // Splat count tracks surface area so the cloud stays dense enough
        // for a crisp rendered surface at any sampled size.
        let count = ((size * size * 45_000.0) as usize).clamp(150, 700);
        for _ in 0..count {
            let offset = if is_sphere {
                let dir = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let dir = if dir.norm() < 1e-9 { Vector3::x() } else { dir.normalize() };
                dir * size
            } else {
                // Uniform point on the box surface: pick an axis, pin it to
                // a face, spread over the other two.
                let axis = rng.random_range(0..3usize);
                let side = if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
                let mut p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                p[axis] = side;
                p.component_mul(&half_extents)
            };
            let sigma = rng.random_range(0.016..0.026) * (extent / 4.0).min(1.0);
            let stretch = Vector3::new(
                rng.random_range(0.85..1.2),
                rng.random_range(0.85..1.2),
                rng.random_range(0.85..1.2),
            );
            splats.push(GaussianSplat {
                position: center + offset,
                scale: sigma * stretch,
                rotation: UnitQuaternion::from_euler_angles(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                opacity: OBJECT_OPACITY,
                color: jittered(base_color, &mut rng),
            });
        }
    }

    SyntheticScene {
        map: GaussianMap::from_splats(MapOwner::Global, splats),
        extent,
        seed,
    }
}

/// Renders an RGB-D frame at every sampled trajectory pose through the
/// shared rendering path and returns the frames plus the ground-truth
/// trajectory that produced them.
pub fn synthesize_sequence(
    scene: &SyntheticScene,
    spec: &TrajectorySpec,
    k: &CameraIntrinsics,
) -> (Vec<RgbdFrame>, Trajectory) {
    let traj = spec.sample();
    let frames = traj
        .iter()
        .map(|(ts, pose)| {
            let rendered = render(&scene.map, pose, k);
            RgbdFrame {
                timestamp: *ts,
                rgb: rendered.rgb,
                depth: rendered.depth,
                intrinsics: *k,
            }
        })
        .collect();
    (frames, traj)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Adds i.i.d. Gaussian noise: `sigma_rgb` in unit intensity (the usual
/// robustness protocol is 10/255), `sigma_depth` in meters. RGB clamps to
/// [0,1], noisy depth stays positive, and invalid depth stays invalid.
pub fn add_noise(frame: &RgbdFrame, sigma_rgb: f64, sigma_depth: f64, seed: u64) -> RgbdFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frame.clone();
    if sigma_rgb > 0.0 {
        for v in out.rgb.data.iter_mut() {
            *v = (*v + sigma_rgb * standard_normal(&mut rng)).clamp(0.0, 1.0);
        }
    }
    if sigma_depth > 0.0 {
        for v in out.depth.data.iter_mut() {
            if v.is_finite() && *v > 0.0 {
                *v = (*v + sigma_depth * standard_normal(&mut rng)).max(1e-3);
            }
        }
    }
    out
}

/// Camera pose at `position` looking along the horizontal direction `dir`,
/// image x to the camera's right and image y pointing down.
pub fn heading_pose(position: Vector3<f64>, dir: Vector3<f64>) -> Pose {
    let forward = dir.normalize();
    let right = Vector3::new(forward.y, -forward.x, 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    let r = Matrix3::from_columns(&[right, down, forward]);
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
        position,
    )
}

/// Rectangular patrol loop in the z = 0 plane: corners and edge midpoints,
/// cameras facing along the direction of travel (central difference, so
/// corners look 45 degrees into the turn). The list closes on its starting
/// waypoint.
pub fn rectangle_loop(
    center_x: f64,
    center_y: f64,
    half_w: f64,
    half_h: f64,
    clockwise: bool,
    start: usize,
) -> Vec<Pose> {
    let mut anchors = [
        (center_x + half_w, center_y),
        (center_x + half_w, center_y + half_h),
        (center_x, center_y + half_h),
        (center_x - half_w, center_y + half_h),
        (center_x - half_w, center_y),
        (center_x - half_w, center_y - half_h),
        (center_x, center_y - half_h),
        (center_x + half_w, center_y - half_h),
    ];
    if clockwise {
        anchors.reverse();
    }
    let n = anchors.len();
    let mut poses = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let at = anchors[(start + i) % n];
        let prev = anchors[(start + i + n - 1) % n];
        let next = anchors[(start + i + 1) % n];
        let dir = Vector3::new(next.0 - prev.0, next.1 - prev.1, 0.0);
        poses.push(heading_pose(Vector3::new(at.0, at.1, 0.0), dir));
    }
    poses
}

/// Patrol loops for `n` agents in a row along x, each sharing its border
/// corridors with its neighbors. Directions alternate so neighboring loops
/// traverse every shared corridor the same way, giving roughly a third of
/// each loop co-visible views for consensus to find.
pub fn standard_agent_specs(n: usize, extent: f64, frames_per_segment: usize) -> Vec<TrajectorySpec> {
    assert!(n >= 1, "at least one agent");
    let hw = (0.45 * extent / n as f64).min(0.175 * extent);
    let hh = 0.30 * extent;
    (0..n)
        .map(|k| TrajectorySpec {
            waypoints: rectangle_loop(
                (2 * k + 1) as f64 * hw - n as f64 * hw,
                0.0,
                hw,
                hh,
                k % 2 == 1,
                4,
            ),
            frames_per_segment,
        })
        .collect()
}

/// The standard two-agent scenario: side-by-side loops that traverse the
/// shared x = 0 corridor in the same +y direction.
pub fn standard_two_agent_specs(extent: f64, frames_per_segment: usize) -> [TrajectorySpec; 2] {
    let mut specs = standard_agent_specs(2, extent, frames_per_segment);
    let b = specs.pop().unwrap();
    let a = specs.pop().unwrap();
    [a, b]
}
