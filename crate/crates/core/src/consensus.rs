//! Cross-agent consensus over snapshot state: appearance-driven overlap
//! detection, map-to-map registration around each overlap, pose-graph fusion
//! of odometry with the resulting inter-agent constraints, and joint
//! photometric refinement of the maps against each other's keyframes.
//!
//! A round never touches live agent state. It reads [`AgentSnapshot`]s, and
//! its outputs are absolute keyframe poses per agent (applied later through
//! `AgentState::apply_pose_corrections`), one log record per candidate, and
//! the assembled pose graph in g2o text form.

use std::collections::HashMap;

use nalgebra::Matrix6;
use serde::Serialize;
use thiserror::Error;

use crate::agent::{apply_refine_steps, AgentSnapshot, Keyframe, RefineSteps, MAX_BACKTRACKS};
use crate::align::{register, AlignError, RegistrationConfig};
use crate::descriptor::{
    compute_descriptor, detect_loops, Descriptor, LoopCandidate, DEFAULT_SIMILARITY_TAU,
};
use crate::frame::RgbdFrame;
use crate::geometry::Pose;
use crate::gradients::{loss_gradients, SplatGradients};
use crate::map::{GaussianMap, GaussianSplat, MapOwner};
use crate::pose_graph::{PoseGraph, PoseGraphConfig, PoseGraphError, PoseGraphReport};
use crate::render::{photometric_loss, render_splats, LossWeights};

/// Registration refuses to solve on fewer correspondences than this, so a
/// candidate whose anchor frustum cannot even supply that many splats is dead
/// on arrival.
const MIN_ANCHOR_SPLATS: usize = 6;

/// Largest variance a constraint direction may claim. Keeps near-unobserved
/// directions finite so the graph solver sees a valid SPD matrix instead of
/// an overflow.
const VARIANCE_CEILING: f64 = 1e6;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConsensusConfig {
    /// Descriptor similarity threshold for loop candidates.
    pub similarity_tau: f64,
    /// Map-to-map registration around a candidate. The association radius is
    /// wider than the tracking default because anchor poses carry the
    /// accumulated drift between the agents.
    pub registration: RegistrationConfig,
    /// Far limit for anchor-frustum splat selection, meters.
    pub max_view_dist: f64,
    /// Eigenvalue floor for constraint and per-frame covariances.
    pub covariance_floor: f64,
    pub pose_graph: PoseGraphConfig,
    /// Joint map refinement iterations in the final round.
    pub refine_iters: usize,
    pub loss_weights: LossWeights,
    pub steps: RefineSteps,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            similarity_tau: DEFAULT_SIMILARITY_TAU,
            registration: RegistrationConfig {
                max_dist: 0.08,
                ..RegistrationConfig::default()
            },
            max_view_dist: 20.0,
            covariance_floor: 1e-6,
            pose_graph: PoseGraphConfig::default(),
            refine_iters: 20,
            loss_weights: LossWeights::default(),
            steps: RefineSteps::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("candidate anchors frame {frame} of agent {agent}, which has no keyframe")]
    UnknownAnchor { agent: u32, frame: usize },
    #[error("registration failed: {0}")]
    Registration(#[from] AlignError),
    #[error("registration did not converge after {iterations} iterations (mean cost {cost:.3})")]
    Unconverged { iterations: usize, cost: f64 },
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
}

/// Rigid mismatch between two agents' world frames, measured by registering
/// their maps around one loop candidate: takes points expressed in
/// `from_agent`'s frame to the same physical points in `to_agent`'s frame.
/// Identity when the agents already agree.
#[derive(Debug, Clone)]
pub struct RelativeConstraint {
    pub from_agent: u32,
    pub to_agent: u32,
    /// Keyframe frame indices the registration was anchored at.
    pub anchor_frames: (usize, usize),
    pub transform: Pose,
    /// SPD measurement covariance, eigenvalue-floored.
    pub covariance: Matrix6<f64>,
    pub similarity: f64,
    /// Mean Mahalanobis cost per correspondence at the solution.
    pub mean_cost: f64,
    pub inliers: usize,
}

/// One line of the constraint log; every candidate gets one, accepted or not.
#[derive(Debug, Clone, Serialize)]
pub struct ConstraintRecord {
    pub agent_a: u32,
    pub frame_a: usize,
    pub agent_b: u32,
    pub frame_b: usize,
    pub similarity: f64,
    /// Mean registration cost per correspondence; absent when registration
    /// never produced a solution.
    pub cost: Option<f64>,
    pub accepted: bool,
    /// `t_x t_y t_z q_x q_y q_z q_w` of the constraint, accepted ones only.
    pub transform: Option<[f64; 7]>,
    /// Why the candidate was dropped; empty for accepted ones.
    pub reason: String,
}

fn pose_to_seven(p: &Pose) -> [f64; 7] {
    let q = p.rotation.quaternion().coords;
    let t = p.translation;
    [t.x, t.y, t.z, q.x, q.y, q.z, q.w]
}

/// Descriptors for every keyframe of a snapshot. Keyframes whose image is
/// constant are skipped; they cannot discriminate between views anyway.
pub fn snapshot_descriptors(snap: &AgentSnapshot) -> Vec<Descriptor> {
    snap.keyframes
        .iter()
        .filter_map(|kf| compute_descriptor(&kf.frame.rgb, (snap.agent_id, kf.frame_index)).ok())
        .collect()
}

/// Loop candidates across every agent pair, best-first with a deterministic
/// tiebreak.
pub fn detect_candidates(snapshots: &[AgentSnapshot], tau: f64) -> Vec<LoopCandidate> {
    let descriptors: Vec<Vec<Descriptor>> = snapshots.iter().map(snapshot_descriptors).collect();
    let mut all = Vec::new();
    for i in 0..snapshots.len() {
        for j in i + 1..snapshots.len() {
            all.extend(detect_loops(&descriptors[i], &descriptors[j], tau));
        }
    }
    all.sort_by(|p, q| {
        q.similarity
            .partial_cmp(&p.similarity)
            .unwrap()
            .then(p.a.cmp(&q.a))
            .then(p.b.cmp(&q.b))
    });
    all
}

fn anchor<'a>(snap: &'a AgentSnapshot, frame: usize) -> Result<&'a Keyframe, ConsensusError> {
    snap.keyframes
        .iter()
        .find(|kf| kf.frame_index == frame)
        .ok_or(ConsensusError::UnknownAnchor {
            agent: snap.agent_id,
            frame,
        })
}

/// The listed splats moved rigidly by `t`.
fn transformed_subset(map: &GaussianMap, indices: &[usize], t: &Pose) -> Vec<GaussianSplat> {
    indices
        .iter()
        .map(|&i| {
            let mut s = map.splats()[i];
            s.position = t.transform_point(&s.position);
            s.rotation = t.rotation * s.rotation;
            s
        })
        .collect()
}

/// Inverts an information matrix into a covariance whose spectrum is clamped
/// to `[floor, VARIANCE_CEILING]`; non-positive information directions get
/// the ceiling.
fn floor_covariance(information: &Matrix6<f64>, floor: f64) -> Matrix6<f64> {
    let sym = (information + information.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut cov = Matrix6::zeros();
    for k in 0..6 {
        let lambda = eig.eigenvalues[k];
        let var = if lambda > 0.0 {
            (1.0 / lambda).clamp(floor, VARIANCE_CEILING)
        } else {
            VARIANCE_CEILING
        };
        let v = eig.eigenvectors.column(k);
        cov += var * v * v.transpose();
    }
    cov
}

fn invert_spd(m: &Matrix6<f64>) -> Matrix6<f64> {
    m.cholesky()
        .expect("floored covariances are symmetric positive definite")
        .inverse()
}

/// Measures the world-frame mismatch between two agents around one candidate.
///
/// Both anchor frustum subsets are moved into their own camera frames, so the
/// solver starts from the estimated relative camera pose
/// `pose_b^-1 * pose_a` and only has to absorb the (small) inter-agent drift.
/// The registration result `R` satisfies `x_b = R x_a` in camera coordinates;
/// composed back through the anchors it becomes the world-frame constraint
/// `pose_b * R * pose_a^-1`, which is the identity when the agents already
/// agree. Its covariance is the inverse registration Hessian with a floored
/// spectrum, so no direction claims impossible certainty.
pub fn build_constraint(
    cand: &LoopCandidate,
    snap_a: &AgentSnapshot,
    snap_b: &AgentSnapshot,
    cfg: &ConsensusConfig,
) -> Result<RelativeConstraint, ConsensusError> {
    let kf_a = anchor(snap_a, cand.a.1)?;
    let kf_b = anchor(snap_b, cand.b.1)?;

    let idx_a = snap_a
        .map
        .frustum_select(&kf_a.pose, &kf_a.frame.intrinsics, cfg.max_view_dist);
    let idx_b = snap_b
        .map
        .frustum_select(&kf_b.pose, &kf_b.frame.intrinsics, cfg.max_view_dist);
    let found = idx_a.len().min(idx_b.len());
    if found < MIN_ANCHOR_SPLATS {
        return Err(ConsensusError::Registration(
            AlignError::InsufficientCorrespondences {
                found,
                needed: MIN_ANCHOR_SPLATS,
            },
        ));
    }

    let source = transformed_subset(&snap_a.map, &idx_a, &kf_a.pose.inverse());
    let target = GaussianMap::from_splats(
        MapOwner::Global,
        transformed_subset(&snap_b.map, &idx_b, &kf_b.pose.inverse()),
    );

    let init = kf_b.pose.inverse().compose(&kf_a.pose);
    let result = register(&source, &target, &init, &cfg.registration)?;
    let mean_cost = result.final_cost / result.inlier_count.max(1) as f64;
    if !result.converged {
        return Err(ConsensusError::Unconverged {
            iterations: result.iterations,
            cost: mean_cost,
        });
    }

    Ok(RelativeConstraint {
        from_agent: snap_a.agent_id,
        to_agent: snap_b.agent_id,
        anchor_frames: (cand.a.1, cand.b.1),
        transform: kf_b
            .pose
            .compose(&result.transform)
            .compose(&kf_a.pose.inverse()),
        covariance: floor_covariance(&result.information, cfg.covariance_floor),
        similarity: cand.similarity,
        mean_cost,
        inliers: result.inlier_count,
    })
}

/// Information for the odometry edge spanning frames `(from, to]`: per-frame
/// tracking covariances (floored) summed, then inverted.
fn odometry_information(snap: &AgentSnapshot, from: usize, to: usize, floor: f64) -> Matrix6<f64> {
    let mut cov = Matrix6::zeros();
    for f in from + 1..=to {
        let info = snap
            .tracking_information
            .get(f)
            .copied()
            .unwrap_or_else(Matrix6::identity);
        cov += floor_covariance(&info, floor);
    }
    invert_spd(&cov)
}

/// Assembles the multi-agent graph: one vertex per keyframe, odometry edges
/// between consecutive keyframes of each agent, and one inter-agent edge per
/// constraint. A constraint `G` between anchors `a` and `b` pins their
/// relative pose at `pose_a^-1 * G^-1 * pose_b`: where `b`'s anchor sits
/// relative to `a`'s once the world-frame mismatch is undone.
pub fn build_pose_graph(
    snapshots: &[AgentSnapshot],
    constraints: &[RelativeConstraint],
    cfg: &ConsensusConfig,
) -> Result<PoseGraph, ConsensusError> {
    let mut graph = PoseGraph::new();
    let mut vertex: HashMap<(u32, usize), usize> = HashMap::new();
    for snap in snapshots {
        let mut prev: Option<(usize, &Keyframe)> = None;
        for kf in &snap.keyframes {
            let vid = graph.add_vertex(snap.agent_id, kf.frame_index, kf.pose);
            vertex.insert((snap.agent_id, kf.frame_index), vid);
            if let Some((pv, pkf)) = prev {
                let relative = pkf.pose.inverse().compose(&kf.pose);
                let info = odometry_information(
                    snap,
                    pkf.frame_index,
                    kf.frame_index,
                    cfg.covariance_floor,
                );
                graph.add_odometry_edge(pv, vid, relative, info);
            }
            prev = Some((vid, kf));
        }
    }

    for c in constraints {
        let key_a = (c.from_agent, c.anchor_frames.0);
        let key_b = (c.to_agent, c.anchor_frames.1);
        let va = *vertex
            .get(&key_a)
            .ok_or(ConsensusError::UnknownAnchor {
                agent: key_a.0,
                frame: key_a.1,
            })?;
        let vb = *vertex
            .get(&key_b)
            .ok_or(ConsensusError::UnknownAnchor {
                agent: key_b.0,
                frame: key_b.1,
            })?;
        let pose_a = graph.vertices[va].pose;
        let pose_b = graph.vertices[vb].pose;
        let relative = pose_a
            .inverse()
            .compose(&c.transform.inverse())
            .compose(&pose_b);
        graph.add_inter_edge(va, vb, relative, invert_spd(&c.covariance));
    }
    Ok(graph)
}

/// One agent's corrected keyframe poses from a consensus round, in frame
/// order. Absolute replacements, so re-delivery is harmless.
#[derive(Debug, Clone)]
pub struct KeyframeCorrections {
    pub agent_id: u32,
    pub poses: Vec<(usize, Pose)>,
}

#[derive(Debug, Clone)]
pub struct PoseGraphOutcome {
    pub corrections: Vec<KeyframeCorrections>,
    pub report: PoseGraphReport,
    /// The graph as fed to the solver, g2o text format.
    pub g2o: String,
}

/// Builds and solves the pose graph over all snapshot keyframes.
pub fn optimize_pose_graph(
    snapshots: &[AgentSnapshot],
    constraints: &[RelativeConstraint],
    cfg: &ConsensusConfig,
) -> Result<PoseGraphOutcome, ConsensusError> {
    let mut graph = build_pose_graph(snapshots, constraints, cfg)?;
    let g2o = graph.dump_g2o();
    let report = graph.optimize(&cfg.pose_graph)?;

    let mut corrections: Vec<KeyframeCorrections> = snapshots
        .iter()
        .map(|s| KeyframeCorrections {
            agent_id: s.agent_id,
            poses: Vec::new(),
        })
        .collect();
    for v in &graph.vertices {
        let slot = corrections
            .iter_mut()
            .find(|c| c.agent_id == v.agent)
            .expect("every vertex came from a snapshot");
        slot.poses.push((v.frame, v.pose));
    }
    Ok(PoseGraphOutcome {
        corrections,
        report,
        g2o,
    })
}

/// One cross-rendering objective: the map at `map_index` rendered from `pose`
/// and scored against the observed `target` frame.
#[derive(Debug, Clone)]
pub struct RefineTask {
    pub map_index: usize,
    pub pose: Pose,
    pub target: RgbdFrame,
}

/// The two cross-rendering tasks of one constraint: each agent's map rendered
/// from the other agent's anchor keyframe, against the frame that agent
/// actually observed there. Meaningful once the pose-graph corrections have
/// brought both agents into a shared frame.
pub fn cross_tasks(
    c: &RelativeConstraint,
    map_index_a: usize,
    snap_a: &AgentSnapshot,
    map_index_b: usize,
    snap_b: &AgentSnapshot,
) -> Result<[RefineTask; 2], ConsensusError> {
    let kf_a = anchor(snap_a, c.anchor_frames.0)?;
    let kf_b = anchor(snap_b, c.anchor_frames.1)?;
    Ok([
        RefineTask {
            map_index: map_index_a,
            pose: kf_b.pose,
            target: kf_b.frame.clone(),
        },
        RefineTask {
            map_index: map_index_b,
            pose: kf_a.pose,
            target: kf_a.frame.clone(),
        },
    ])
}

/// Joint photometric refinement across maps.
///
/// Each iteration accumulates the loss gradients of every task onto its map,
/// then applies one normalized gradient step per map, backtracked jointly so
/// the summed loss never increases; when even the smallest step would hurt,
/// the maps stay exactly as they are. Returns the total loss before the first
/// step and after each accepted one. `iters == 0` is a no-op.
pub fn joint_map_refine(
    maps: &mut [&mut GaussianMap],
    tasks: &[RefineTask],
    weights: &LossWeights,
    steps: &RefineSteps,
    iters: usize,
) -> Vec<f64> {
    if iters == 0 || tasks.is_empty() || maps.is_empty() {
        return Vec::new();
    }
    let mut splats: Vec<Vec<GaussianSplat>> = maps.iter().map(|m| m.splats().to_vec()).collect();

    let total_loss = |splats: &[Vec<GaussianSplat>]| -> f64 {
        tasks
            .iter()
            .map(|t| {
                let r = render_splats(&splats[t.map_index], &t.pose, &t.target.intrinsics);
                photometric_loss(&r, &t.target.rgb, &t.target.depth, weights)
                    .expect("task frames match their intrinsics")
            })
            .sum()
    };

    let mut trace = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let mut grads: Vec<SplatGradients> =
            splats.iter().map(|s| SplatGradients::zeros(s.len())).collect();
        let mut loss = 0.0;
        for t in tasks {
            let (l, _, g) = loss_gradients(&splats[t.map_index], &t.pose, &t.target, weights)
                .expect("task frames match their intrinsics");
            loss += l;
            grads[t.map_index].accumulate(&g);
        }
        if trace.is_empty() {
            trace.push(loss);
        }
        if grads.iter().all(|g| {
            let n = g.group_inf_norms();
            n.0 == 0.0 && n.1 == 0.0 && n.2 == 0.0 && n.3 == 0.0
        }) {
            break;
        }

        let mut factor = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let candidate: Vec<Vec<GaussianSplat>> = splats
                .iter()
                .zip(&grads)
                .map(|(s, g)| apply_refine_steps(s, g, steps, factor))
                .collect();
            let new_loss = total_loss(&candidate);
            if new_loss <= loss {
                accepted = Some((candidate, new_loss));
                break;
            }
            factor *= 0.5;
        }
        match accepted {
            Some((candidate, new_loss)) => {
                splats = candidate;
                trace.push(new_loss);
            }
            None => break,
        }
    }

    for (m, s) in maps.iter_mut().zip(splats) {
        m.splats_mut().copy_from_slice(&s);
        m.rebuild_index();
    }
    trace
}

/// Everything one consensus round produced. `corrections` is empty when no
/// constraint was accepted; there is nothing to fuse then and the graph is
/// not built.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub candidates: Vec<LoopCandidate>,
    pub constraints: Vec<RelativeConstraint>,
    pub records: Vec<ConstraintRecord>,
    pub corrections: Vec<KeyframeCorrections>,
    pub report: Option<PoseGraphReport>,
    pub g2o: Option<String>,
}

/// Detection, constraint building, and pose-graph fusion for one round.
/// Candidates that fail registration are logged and dropped, never fatal;
/// joint map refinement is left to the caller because it mutates maps (see
/// [`joint_map_refine`]).
pub fn run_round(
    snapshots: &[AgentSnapshot],
    cfg: &ConsensusConfig,
) -> Result<RoundOutcome, ConsensusError> {
    let candidates = detect_candidates(snapshots, cfg.similarity_tau);
    let mut constraints = Vec::new();
    let mut records = Vec::new();
    for cand in &candidates {
        let snap_a = snapshots
            .iter()
            .find(|s| s.agent_id == cand.a.0)
            .expect("candidate agents come from the snapshots");
        let snap_b = snapshots
            .iter()
            .find(|s| s.agent_id == cand.b.0)
            .expect("candidate agents come from the snapshots");
        let mut record = ConstraintRecord {
            agent_a: cand.a.0,
            frame_a: cand.a.1,
            agent_b: cand.b.0,
            frame_b: cand.b.1,
            similarity: cand.similarity,
            cost: None,
            accepted: false,
            transform: None,
            reason: String::new(),
        };
        match build_constraint(cand, snap_a, snap_b, cfg) {
            Ok(c) => {
                record.cost = Some(c.mean_cost);
                record.accepted = true;
                record.transform = Some(pose_to_seven(&c.transform));
                constraints.push(c);
            }
            Err(e @ (ConsensusError::Registration(_) | ConsensusError::UnknownAnchor { .. })) => {
                record.reason = e.to_string();
            }
            Err(ConsensusError::Unconverged { iterations, cost }) => {
                record.cost = Some(cost);
                record.reason = ConsensusError::Unconverged { iterations, cost }.to_string();
            }
            Err(e) => return Err(e),
        }
        records.push(record);
    }

    if constraints.is_empty() {
        return Ok(RoundOutcome {
            candidates,
            constraints,
            records,
            corrections: Vec::new(),
            report: None,
            g2o: None,
        });
    }
    let outcome = optimize_pose_graph(snapshots, &constraints, cfg)?;
    Ok(RoundOutcome {
        candidates,
        constraints,
        records,
        corrections: outcome.corrections,
        report: Some(outcome.report),
        g2o: Some(outcome.g2o),
    })
}
