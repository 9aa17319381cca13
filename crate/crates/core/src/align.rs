//! Covariance-weighted rigid registration between Gaussian splat sets.
//!
//! This is the shared numerical core of pose tracking (observed splats
//! against an agent's own map) and inter-agent map alignment. It is a
//! generalized-ICP over splat centers: the residual for a matched pair is
//! weighted by the inverse of the combined covariance `R Σ_src Rᵀ + Σ_tgt`,
//! so flat splats pull hard along their thin axis and barely at all in
//! the tangent plane. The optimizer is Gauss-Newton on a left-multiplied
//! twist with step halving, which keeps the Mahalanobis cost monotone
//! over accepted steps.

use std::ops::{AddAssign, SubAssign};

use nalgebra::{Matrix3, Matrix6, Vector6};
use thiserror::Error;

use crate::geometry::{skew, Pose, Twist};
use crate::map::{GaussianMap, GaussianSplat};

/// Association distance gate in meters.
pub const DEFAULT_MAX_DIST: f64 = 0.02;

/// Minimum correspondences for a trustworthy 6-dof estimate.
pub const MIN_CORRESPONDENCES: usize = 6;

const MAX_HALVINGS: usize = 8;
const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("registration needs at least {needed} correspondences, found {found}")]
    InsufficientCorrespondences { found: usize, needed: usize },
    #[error("normal equations are degenerate (condition number {cond:.3e})")]
    DegenerateGeometry { cond: f64 },
}

/// A matched source/target splat pair.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    /// `(R Σ_src Rᵀ + Σ_tgt)⁻¹` at the transform used for association.
    pub combined_precision: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RegistrationConfig {
    pub max_iter: usize,
    pub max_dist: f64,
    /// Convergence threshold on the Gauss-Newton twist step norm.
    pub tol: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            max_iter: 30,
            max_dist: DEFAULT_MAX_DIST,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps source-frame points into the target frame.
    pub transform: Pose,
    /// Mahalanobis sum at the final transform (dimensionless).
    pub final_cost: f64,
    /// Number of linearizations performed.
    pub iterations: usize,
    /// Correspondence count at the final transform.
    pub inlier_count: usize,
    /// True iff the twist step norm dropped below `tol`.
    pub converged: bool,
    /// Gauss-Newton approximate Hessian `Jᵀ W J` at the final transform.
    pub information: Matrix6<f64>,
    /// Per-iteration `[cost before step, cost after accepted step]`, each
    /// evaluated on that iteration's fixed association.
    pub cost_trace: Vec<[f64; 2]>,
}

/// Matches each source splat to the nearest target splat within `max_dist`
/// of its transformed position. One-to-many is allowed: several sources may
/// share a target. Ties on exact distance go to the lowest target index.
pub fn associate(
    source: &[GaussianSplat],
    transform: &Pose,
    target: &GaussianMap,
    max_dist: f64,
) -> Vec<Correspondence> {
    let r = transform.rotation_matrix();
    let mut out = Vec::new();
    for (source_index, splat) in source.iter().enumerate() {
        let p = transform.transform_point(&splat.position);
        let Some(target_index) = target.nearest_within(&p, max_dist) else {
            continue;
        };
        let combined =
            r * splat.covariance() * r.transpose() + target.splats()[target_index].covariance();
        let Some(chol) = combined.cholesky() else {
            continue;
        };
        let inv = chol.inverse();
        out.push(Correspondence {
            source_index,
            target_index,
            combined_precision: 0.5 * (inv + inv.transpose()),
        });
    }
    out
}

/// Sum over pairs of `dᵀ (R Σ_src Rᵀ + Σ_tgt)⁻¹ d` with `d = T·x_src − x_tgt`.
/// The source covariance is re-rotated by the supplied transform, so the cost
/// tracks the full generalized-ICP objective, not a frozen linearization.
pub fn mahalanobis_cost(
    source: &[GaussianSplat],
    target: &GaussianMap,
    transform: &Pose,
    correspondences: &[Correspondence],
) -> f64 {
    let r = transform.rotation_matrix();
    let mut cost = 0.0;
    for c in correspondences {
        let s = &source[c.source_index];
        let t = &target.splats()[c.target_index];
        let d = transform.transform_point(&s.position) - t.position;
        let combined = r * s.covariance() * r.transpose() + t.covariance();
        let Some(chol) = combined.cholesky() else {
            continue;
        };
        cost += d.dot(&(chol.inverse() * d));
    }
    cost
}

/// Estimates the rigid transform taking `source` positions onto `target`.
///
/// Iterates association, Gauss-Newton on the 6-dof twist, and
/// re-linearization until the step norm drops below `cfg.tol` or
/// `cfg.max_iter` linearizations. A step that raises the cost is halved up
/// to eight times; if it still raises the cost the solver stops where it is.
pub fn register(
    source: &[GaussianSplat],
    target: &GaussianMap,
    init: &Pose,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, AlignError> {
    let mut transform = *init;
    let mut converged = false;
    let mut iterations = 0;
    let mut cost_trace = Vec::new();

    while iterations < cfg.max_iter {
        iterations += 1;
        let corr = associate(source, &transform, target, cfg.max_dist);
        let (h, b, cost) = checked_normal_equations(source, target, &transform, &corr)?;
        let step = h
            .cholesky()
            .map(|c| c.solve(&b))
            .ok_or(AlignError::DegenerateGeometry {
                cond: condition_number(&h),
            })?;
        if step.norm() < cfg.tol {
            converged = true;
            cost_trace.push([cost, cost]);
            break;
        }

        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let candidate =
                Pose::exp(&Twist::from_vector(&(step * scale))).compose(&transform);
            let candidate_cost = mahalanobis_cost(source, target, &candidate, &corr);
            if candidate_cost <= cost {
                accepted = Some((candidate, candidate_cost));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((pose, new_cost)) => {
                cost_trace.push([cost, new_cost]);
                transform = pose;
            }
            None => {
                // Fully damped step still climbs: the linearization is not
                // trusted here, so stop rather than accept an ascent.
                cost_trace.push([cost, cost]);
                break;
            }
        }
    }

    let corr = associate(source, &transform, target, cfg.max_dist);
    let (information, _, final_cost) =
        checked_normal_equations(source, target, &transform, &corr)?;
    Ok(RegistrationResult {
        transform,
        final_cost,
        iterations,
        inlier_count: corr.len(),
        converged,
        information,
        cost_trace,
    })
}

/// Builds `H = Σ Jᵀ M J`, `b = −Σ Jᵀ M d`, and the current cost for the
/// left-multiplied twist residual `d(ξ) = exp(ξ)·T·x_src − x_tgt`, whose
/// Jacobian at ξ = 0 is `[−[p]× | I]` with `p = T·x_src`.
fn normal_equations(
    source: &[GaussianSplat],
    target: &GaussianMap,
    transform: &Pose,
    correspondences: &[Correspondence],
) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let mut h = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut cost = 0.0;
    for c in correspondences {
        let p = transform.transform_point(&source[c.source_index].position);
        let d = p - target.splats()[c.target_index].position;
        let m = &c.combined_precision;
        let j_rot = -skew(&p);
        let m_jr = m * j_rot;
        let h_rr = j_rot.transpose() * m_jr;
        let h_rt = j_rot.transpose() * m;
        let m_d = m * d;

        h.fixed_view_mut::<3, 3>(0, 0).add_assign(&h_rr);
        h.fixed_view_mut::<3, 3>(0, 3).add_assign(&h_rt);
        h.fixed_view_mut::<3, 3>(3, 0).add_assign(&h_rt.transpose());
        h.fixed_view_mut::<3, 3>(3, 3).add_assign(m);
        b.fixed_view_mut::<3, 1>(0, 0)
            .sub_assign(&(j_rot.transpose() * m_d));
        b.fixed_view_mut::<3, 1>(3, 0).sub_assign(&m_d);
        cost += d.dot(&m_d);
    }
    (h, b, cost)
}

fn checked_normal_equations(
    source: &[GaussianSplat],
    target: &GaussianMap,
    transform: &Pose,
    correspondences: &[Correspondence],
) -> Result<(Matrix6<f64>, Vector6<f64>, f64), AlignError> {
    // Below three matches the normal matrix cannot be full rank; that is an
    // undercount, not degenerate geometry.
    if correspondences.len() < 3 {
        return Err(AlignError::InsufficientCorrespondences {
            found: correspondences.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    let (h, b, cost) = normal_equations(source, target, transform, correspondences);
    let cond = condition_number(&h);
    if !(cond <= CONDITION_LIMIT) {
        return Err(AlignError::DegenerateGeometry { cond });
    }
    if correspondences.len() < MIN_CORRESPONDENCES {
        return Err(AlignError::InsufficientCorrespondences {
            found: correspondences.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    Ok((h, b, cost))
}

fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = h.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::MapOwner;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso_splats(points: &[Vector3<f64>], sigma: f64) -> Vec<GaussianSplat> {
        points
            .iter()
            .map(|p| GaussianSplat::isotropic(*p, sigma, 0.5, [0.5, 0.5, 0.5]))
            .collect()
    }

    fn map_of(splats: Vec<GaussianSplat>) -> GaussianMap {
        GaussianMap::from_splats(MapOwner::Global, splats)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                )
            })
            .collect()
    }

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_trans: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        let t = Vector3::new(
            rng.random_range(-max_trans..max_trans),
            rng.random_range(-max_trans..max_trans),
            rng.random_range(-max_trans..max_trans),
        );
        Pose::new(
            UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle),
            t,
        )
    }

    /// Closed-form least-squares rigid alignment of paired points
    /// (cross-covariance SVD with reflection guard). Independent of the
    /// iterative solver; used as the ground-truth oracle.
    fn closed_form_alignment(src: &[Vector3<f64>], tgt: &[Vector3<f64>]) -> Pose {
        let n = src.len() as f64;
        let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
        let ct: Vector3<f64> = tgt.iter().sum::<Vector3<f64>>() / n;
        let mut cov = Matrix3::zeros();
        for (s, t) in src.iter().zip(tgt) {
            cov += (t - ct) * (s - cs).transpose();
        }
        let svd = cov.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut sign = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            sign[(2, 2)] = -1.0;
        }
        let r = u * sign * v_t;
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Pose::new(rot, ct - r * cs)
    }

    fn rotation_gap(a: &Pose, b: &Pose) -> f64 {
        (a.rotation.inverse() * b.rotation).angle()
    }

    /// 4x4x4 grid with 0.5 m spacing: separation is large next to the test
    /// motions, so nearest-neighbor association recovers the true pairing.
    fn grid_cloud() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    pts.push(Vector3::new(
                        -0.75 + 0.5 * i as f64,
                        -0.75 + 0.5 * j as f64,
                        -0.75 + 0.5 * k as f64,
                    ));
                }
            }
        }
        pts
    }

    #[test]
    fn identical_clouds_associate_index_to_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_cloud(&mut rng, 60, 1.0);
        let splats = iso_splats(&pts, 0.01);
        let map = map_of(splats.clone());
        let corr = associate(&splats, &Pose::identity(), &map, DEFAULT_MAX_DIST);
        assert_eq!(corr.len(), 60);
        for c in &corr {
            assert_eq!(c.source_index, c.target_index);
        }
    }

    #[test]
    fn shifted_cloud_beyond_threshold_associates_nothing() {
        let pts = grid_cloud();
        let map = map_of(iso_splats(&pts, 0.01));
        let shifted: Vec<Vector3<f64>> =
            pts.iter().map(|p| p + Vector3::new(0.05, 0.0, 0.0)).collect();
        let corr = associate(
            &iso_splats(&shifted, 0.01),
            &Pose::identity(),
            &map,
            DEFAULT_MAX_DIST,
        );
        assert!(corr.is_empty());
    }

    #[test]
    fn two_sources_may_share_one_target() {
        let target = map_of(iso_splats(&[Vector3::new(0.0, 0.0, 1.0)], 0.01));
        let sources = iso_splats(
            &[
                Vector3::new(0.005, 0.0, 1.0),
                Vector3::new(-0.005, 0.0, 1.0),
            ],
            0.01,
        );
        let corr = associate(&sources, &Pose::identity(), &target, DEFAULT_MAX_DIST);
        assert_eq!(corr.len(), 2);
        assert!(corr.iter().all(|c| c.target_index == 0));
    }

    #[test]
    fn association_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target_pts = random_cloud(&mut rng, 200, 1.0);
        let source_pts = random_cloud(&mut rng, 100, 1.0);
        let max_dist = 0.15;
        let map = map_of(iso_splats(&target_pts, 0.02));
        let source = iso_splats(&source_pts, 0.02);
        let corr = associate(&source, &Pose::identity(), &map, max_dist);

        let mut expected = Vec::new();
        for (si, p) in source_pts.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (ti, q) in target_pts.iter().enumerate() {
                let d = (p - q).norm();
                if d <= max_dist && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((ti, d));
                }
            }
            if let Some((ti, _)) = best {
                expected.push((si, ti));
            }
        }
        let got: Vec<(usize, usize)> =
            corr.iter().map(|c| (c.source_index, c.target_index)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn combined_precision_is_symmetric_inverse_of_combined_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut make = |p: Vector3<f64>| GaussianSplat {
            position: p,
            scale: Vector3::new(
                rng.random_range(0.005..0.05),
                rng.random_range(0.005..0.05),
                rng.random_range(0.005..0.05),
            ),
            rotation: UnitQuaternion::from_euler_angles(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            opacity: 0.5,
            color: [0.5; 3],
        };
        let source = vec![make(Vector3::new(0.1, 0.2, 0.3))];
        let target_splat = make(Vector3::new(0.105, 0.2, 0.3));
        let map = map_of(vec![target_splat]);
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.3, -0.2, 0.1),
            Vector3::zeros(),
        );
        // Association runs at `pose`, so compare against the source position
        // transformed the same way.
        let moved = pose.transform_point(&source[0].position);
        let corr = associate(&source, &pose, &map, (moved - target_splat.position).norm() + 0.01);
        assert_eq!(corr.len(), 1);
        let m = corr[0].combined_precision;
        assert!((m - m.transpose()).norm() < 1e-9);
        let r = pose.rotation_matrix();
        let combined = r * source[0].covariance() * r.transpose() + target_splat.covariance();
        assert!((m * combined - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn single_pair_cost_is_closed_form() {
        let source = iso_splats(&[Vector3::new(1.0, 0.0, 0.0)], 1.0);
        let map = map_of(iso_splats(&[Vector3::zeros()], 1.0));
        let corr = vec![Correspondence {
            source_index: 0,
            target_index: 0,
            combined_precision: Matrix3::identity() * 0.5,
        }];
        // d = (1,0,0), combined covariance = 2I, cost = d^T (2I)^-1 d = 0.5.
        let cost = mahalanobis_cost(&source, &map, &Pose::identity(), &corr);
        assert_relative_eq!(cost, 0.5, epsilon = 1e-12);
        assert_eq!(
            mahalanobis_cost(&source, &map, &Pose::new(UnitQuaternion::identity(), Vector3::new(-1.0, 0.0, 0.0)), &corr),
            0.0
        );
    }

    #[test]
    fn cost_is_equivariant_under_common_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src_pts = random_cloud(&mut rng, 20, 0.5);
        let mut source = iso_splats(&src_pts, 0.02);
        for s in source.iter_mut() {
            s.scale = Vector3::new(0.01, 0.02, 0.04);
            s.rotation = UnitQuaternion::from_euler_angles(0.2, 0.1, -0.3);
        }
        let mut target_splats = source.clone();
        for t in target_splats.iter_mut() {
            t.position += Vector3::new(
                rng.random_range(-0.005..0.005),
                rng.random_range(-0.005..0.005),
                rng.random_range(-0.005..0.005),
            );
        }
        let map = map_of(target_splats.clone());
        let t = random_pose(&mut rng, 0.1, 0.05);
        let corr = associate(&source, &t, &map, 0.5);
        assert!(!corr.is_empty());
        let base = mahalanobis_cost(&source, &map, &t, &corr);

        let g = random_pose(&mut rng, 1.0, 2.0);
        let move_splat = |s: &GaussianSplat| GaussianSplat {
            position: g.transform_point(&s.position),
            rotation: g.rotation * s.rotation,
            ..*s
        };
        let source_g: Vec<GaussianSplat> = source.iter().map(move_splat).collect();
        let map_g = map_of(target_splats.iter().map(move_splat).collect());
        let t_g = g.compose(&t).compose(&g.inverse());
        let moved = mahalanobis_cost(&source_g, &map_g, &t_g, &corr);
        assert_relative_eq!(base, moved, epsilon = 1e-9);
    }

    #[test]
    fn register_is_a_fixed_point_on_identical_clouds() {
        let pts = grid_cloud();
        let splats = iso_splats(&pts, 1.0);
        let map = map_of(splats.clone());
        let result = register(
            &splats,
            &map,
            &Pose::identity(),
            &RegistrationConfig::default(),
        )
        .unwrap();
        assert!(result.converged);
        assert!(result.iterations <= 2);
        assert!(result.final_cost < 1e-12);
        assert_eq!(result.inlier_count, pts.len());
        assert!(result.transform.translation.norm() < 1e-12);
        assert!(result.transform.rotation.angle() < 1e-12);
    }

    #[test]
    fn register_recovers_known_transform() {
        let pts = grid_cloud();
        let truth = Pose::new(
            UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(Vector3::new(1.0, 1.0, 1.0)),
                5.0_f64.to_radians(),
            ),
            Vector3::new(0.03, -0.02, 0.03),
        );
        let source = iso_splats(&pts, 1.0);
        let target_pts: Vec<Vector3<f64>> =
            pts.iter().map(|p| truth.transform_point(p)).collect();
        let map = map_of(iso_splats(&target_pts, 1.0));
        let cfg = RegistrationConfig {
            max_iter: 50,
            max_dist: 0.24,
            tol: 1e-12,
        };
        let result = register(&source, &map, &Pose::identity(), &cfg).unwrap();
        assert!(result.converged);
        assert!(rotation_gap(&result.transform, &truth) < 1e-6);
        assert!((result.transform.translation - truth.translation).norm() < 1e-6);
        assert!(result.final_cost >= 0.0);
        assert!((result.information - result.information.transpose()).norm() < 1e-9);
        assert!(result
            .information
            .symmetric_eigenvalues()
            .iter()
            .all(|&l| l > -1e-9));
    }

    #[test]
    fn register_matches_closed_form_oracle_on_noisy_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = grid_cloud();
        let truth = random_pose(&mut rng, 0.08, 0.04);
        let target_pts: Vec<Vector3<f64>> = pts
            .iter()
            .map(|p| {
                truth.transform_point(p)
                    + Vector3::new(
                        rng.random_range(-0.003..0.003),
                        rng.random_range(-0.003..0.003),
                        rng.random_range(-0.003..0.003),
                    )
            })
            .collect();
        let source = iso_splats(&pts, 1.0);
        let map = map_of(iso_splats(&target_pts, 1.0));
        let cfg = RegistrationConfig {
            max_iter: 60,
            max_dist: 0.2,
            tol: 1e-14,
        };
        let result = register(&source, &map, &Pose::identity(), &cfg).unwrap();
        // With isotropic equal covariances and a fixed pairing the objective
        // is exactly the least-squares point alignment, so the iterative
        // optimum must agree with the closed form, noise and all.
        let oracle = closed_form_alignment(&pts, &target_pts);
        assert!(rotation_gap(&result.transform, &oracle) < 1e-9);
        assert!((result.transform.translation - oracle.translation).norm() < 1e-9);
    }

    #[test]
    fn three_collinear_splats_are_degenerate() {
        let pts = [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::new(0.0, 0.0, 3.0),
        ];
        let splats = iso_splats(&pts, 0.01);
        let map = map_of(splats.clone());
        let err = register(
            &splats,
            &map,
            &Pose::identity(),
            &RegistrationConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, AlignError::DegenerateGeometry { .. }));
    }

    #[test]
    fn too_few_well_spread_splats_are_insufficient() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let splats = iso_splats(&pts, 0.01);
        let map = map_of(splats.clone());
        let err = register(
            &splats,
            &map,
            &Pose::identity(),
            &RegistrationConfig::default(),
        )
        .unwrap_err();
        match err {
            AlignError::InsufficientCorrespondences { found, needed } => {
                assert_eq!(found, 5);
                assert_eq!(needed, MIN_CORRESPONDENCES);
            }
            other => panic!("expected InsufficientCorrespondences, got {other:?}"),
        }
    }

    #[test]
    fn accepted_steps_never_raise_the_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let pts = random_cloud(&mut rng, 40, 0.75);
            let truth = random_pose(&mut rng, 0.15, 0.08);
            let target_pts: Vec<Vector3<f64>> =
                pts.iter().map(|p| truth.transform_point(p)).collect();
            let mut source = iso_splats(&pts, 0.02);
            // Anisotropy makes the re-rotated cost differ from the frozen
            // linearization, which is exactly what step halving guards.
            for (i, s) in source.iter_mut().enumerate() {
                s.scale = Vector3::new(0.01, 0.02, 0.05);
                s.rotation = UnitQuaternion::from_euler_angles(
                    0.1 * i as f64,
                    0.2 * i as f64,
                    0.3 * i as f64,
                );
            }
            let mut target_splats = source.clone();
            for (t, p) in target_splats.iter_mut().zip(&target_pts) {
                t.position = *p;
            }
            let map = map_of(target_splats);
            let cfg = RegistrationConfig {
                max_iter: 25,
                max_dist: 0.3,
                tol: 1e-10,
            };
            let result = register(&source, &map, &Pose::identity(), &cfg).unwrap();
            for step in &result.cost_trace {
                assert!(
                    step[1] <= step[0] * (1.0 + 1e-12) + 1e-15,
                    "cost rose within an iteration: {} -> {}",
                    step[0],
                    step[1]
                );
            }
        }
    }

    #[test]
    fn translation_error_scales_with_noise_over_root_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &sigma in &[0.001, 0.005] {
            let mut errors = Vec::new();
            for _ in 0..50 {
                let pts = random_cloud(&mut rng, 500, 1.0);
                let truth = random_pose(&mut rng, 0.03, 0.02);
                let target_pts: Vec<Vector3<f64>> = pts
                    .iter()
                    .map(|p| {
                        truth.transform_point(p)
                            + Vector3::new(
                                gaussian(&mut rng, sigma),
                                gaussian(&mut rng, sigma),
                                gaussian(&mut rng, sigma),
                            )
                    })
                    .collect();
                let source = iso_splats(&pts, 1.0);
                let map = map_of(iso_splats(&target_pts, 1.0));
                let cfg = RegistrationConfig {
                    max_iter: 40,
                    max_dist: 0.12,
                    tol: 1e-12,
                };
                let result = register(&source, &map, &Pose::identity(), &cfg).unwrap();
                // Error twist in the source frame; clouds are roughly
                // centered, so its translation is the centroid error.
                let err = truth.inverse().compose(&result.transform);
                errors.push(err.translation.norm());
            }
            errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p95 = errors[47];
            let bound = 3.0 * sigma / (500.0_f64).sqrt();
            assert!(
                p95 <= bound,
                "sigma {sigma}: 95th percentile {p95:.3e} exceeds {bound:.3e}"
            );
        }
    }

    #[test]
    fn flattened_covariances_pull_along_their_thin_axis() {
        // A wall in the z = 0 plane, splats squashed 100:1 along the normal.
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push(Vector3::new(0.3 * i as f64, 0.3 * j as f64, 0.0));
            }
        }
        let wall: Vec<GaussianSplat> = pts
            .iter()
            .map(|p| GaussianSplat {
                position: *p,
                scale: Vector3::new(0.1, 0.1, 0.01),
                rotation: UnitQuaternion::identity(),
                opacity: 0.5,
                color: [0.5; 3],
            })
            .collect();
        let map = map_of(wall.clone());
        let corr = associate(&wall, &Pose::identity(), &map, 0.01);
        assert_eq!(corr.len(), pts.len());

        let eps = 0.005;
        let shift = |v: Vector3<f64>| Pose::new(UnitQuaternion::identity(), v);
        let cost_normal =
            mahalanobis_cost(&wall, &map, &shift(Vector3::new(0.0, 0.0, eps)), &corr);
        let cost_tangent =
            mahalanobis_cost(&wall, &map, &shift(Vector3::new(eps, 0.0, 0.0)), &corr);
        // Quadratic costs at equal offsets, so this ratio is exactly the
        // restoring-gradient ratio along the two directions.
        assert!(cost_normal / cost_tangent > 10.0);
    }

    fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
        // Box-Muller; good enough for a statistical bound check.
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
