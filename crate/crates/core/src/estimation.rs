//! Rigid alignment of matched planes by damped Gauss-Newton.
//!
//! The solver estimates the transform that maps observed planes (mapping
//! frame) onto their matched model walls (model frame). The state is
//! parameterized locally as a rotation vector applied on the right of the
//! current rotation plus a translation increment; each step solves the
//! linearized system with a truncated SVD so that directions the matched
//! planes cannot constrain receive exactly no update. Under-constrained
//! problems therefore converge in the observable subspace and report the
//! remaining degenerate translation directions instead of failing.

use crate::bim::{BimModel, WallSegment};
use crate::geometry::{Plane, RigidTransform, Vec3};
use crate::matching::{MatchCandidate, MatchPair, MatchSet};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("cannot estimate from an empty match set")]
    EmptyMatchSet,
    #[error("cost became non-finite or could not be reduced")]
    NonFiniteCost,
    #[error("unknown wall id `{0}` in manual alignment")]
    UnknownWallId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Distance from the transformed patch centroid to the wall plane.
    /// Insensitive to where along the wall the patch was cut off.
    PointToPlane,
    /// Full 3D distance between transformed patch centroid and wall centroid.
    /// Only meaningful when observations cover whole walls.
    PointToPoint,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EstimationConfig {
    pub max_iterations: usize,
    /// Stop when the norm of the local update drops below this.
    pub convergence_tol: f64,
    /// Weight on the normal-alignment residual (lambda).
    pub normal_weight: f64,
    /// Singular values below this fraction of the largest are treated as zero.
    pub svd_truncation: f64,
    pub residual_mode: ResidualMode,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_tol: 1e-9,
            normal_weight: 1.0,
            svd_truncation: 1e-6,
            residual_mode: ResidualMode::PointToPlane,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub transform: RigidTransform,
    /// Sum of squared residuals at the returned transform.
    pub final_cost: f64,
    /// Accepted Gauss-Newton steps.
    pub iterations: usize,
    /// Rank of the translation block of the Jacobian at the solution (0-3).
    pub rank: usize,
    /// Unit translation directions the matched planes do not constrain.
    pub degenerate_directions: Vec<Vec3>,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

/// Residual vector for one plane-to-wall pair at a given transform.
///
/// Point-to-plane mode stacks 4 rows: the signed distance of the
/// transformed patch centroid to the wall plane, then the weighted normal
/// misalignment `sqrt(lambda) * (R n_s - n_b)`. Point-to-point mode uses
/// the full 3D centroid difference, 6 rows. The observed normal sign is
/// flipped beforehand when it disagrees with the wall normal, so storage
/// orientation cannot bend the cost.
pub fn residual(
    observed: &Plane,
    wall: &WallSegment,
    transform: &RigidTransform,
    mode: ResidualMode,
    normal_weight: f64,
) -> DVector<f64> {
    residual_jacobian(observed, wall, transform, mode, normal_weight).0
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn residual_jacobian(
    observed: &Plane,
    wall: &WallSegment,
    transform: &RigidTransform,
    mode: ResidualMode,
    normal_weight: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let r = transform.rotation().to_rotation_matrix();
    let rm = r.matrix();
    let t = transform.translation();
    let s = observed.centroid;
    let n_b = wall.plane.normal;

    let mut n_s = observed.normal;
    if (r * n_s).dot(&n_b) < 0.0 {
        n_s = -n_s;
    }

    let w = normal_weight.max(0.0).sqrt();
    let rot_point = -(rm * skew(&s));
    let rot_normal = -(rm * skew(&n_s)) * w;
    let n_res = (r * n_s - n_b) * w;

    match mode {
        ResidualMode::PointToPlane => {
            let mut res = DVector::zeros(4);
            res[0] = n_b.dot(&(r * s + t)) - wall.plane.offset;
            res.rows_mut(1, 3).copy_from(&n_res);

            let mut jac = DMatrix::zeros(4, 6);
            let row_rot = n_b.transpose() * rot_point;
            jac.view_mut((0, 0), (1, 3)).copy_from(&row_rot);
            jac.view_mut((0, 3), (1, 3)).copy_from(&n_b.transpose());
            jac.view_mut((1, 0), (3, 3)).copy_from(&rot_normal);
            (res, jac)
        }
        ResidualMode::PointToPoint => {
            let mut res = DVector::zeros(6);
            res.rows_mut(0, 3).copy_from(&(r * s + t - wall.plane.centroid));
            res.rows_mut(3, 3).copy_from(&n_res);

            let mut jac = DMatrix::zeros(6, 6);
            jac.view_mut((0, 0), (3, 3)).copy_from(&rot_point);
            jac.view_mut((0, 3), (3, 3)).copy_from(&Matrix3::identity());
            jac.view_mut((3, 0), (3, 3)).copy_from(&rot_normal);
            (res, jac)
        }
    }
}

fn rows_per_pair(mode: ResidualMode) -> usize {
    match mode {
        ResidualMode::PointToPlane => 4,
        ResidualMode::PointToPoint => 6,
    }
}

/// Stacked residual vector and Jacobian for a whole match set at `state`.
///
/// The Jacobian has one column block per local degree of freedom: rotation
/// (x, y, z) then translation (x, y, z), for the right-multiplied update
/// `R <- R exp([delta_theta]_x)`, `t <- t + delta_t`. Exposed so callers can
/// inspect conditioning or verify derivatives against finite differences.
pub fn linearize(
    matches: &MatchSet,
    state: &RigidTransform,
    cfg: &EstimationConfig,
) -> (DVector<f64>, DMatrix<f64>) {
    let rows = rows_per_pair(cfg.residual_mode);
    let mut res = DVector::zeros(rows * matches.pairs.len());
    let mut jac = DMatrix::zeros(rows * matches.pairs.len(), 6);
    for (i, pair) in matches.pairs.iter().enumerate() {
        let (r, j) = residual_jacobian(
            &pair.plane,
            &pair.wall,
            state,
            cfg.residual_mode,
            cfg.normal_weight,
        );
        res.rows_mut(i * rows, rows).copy_from(&r);
        jac.view_mut((i * rows, 0), (rows, 6)).copy_from(&j);
    }
    (res, jac)
}

/// Truncated-SVD least-squares step. Columns that are exactly zero are
/// removed before factorization and their update components set to literal
/// zero, so directions with no constraint at all cannot pick up rounding
/// noise.
fn solve_step(jac: &DMatrix<f64>, res: &DVector<f64>, truncation: f64) -> DVector<f64> {
    let cols: Vec<usize> = (0..6)
        .filter(|&c| jac.column(c).iter().any(|&v| v != 0.0))
        .collect();
    let mut delta = DVector::zeros(6);
    if cols.is_empty() {
        return delta;
    }
    let mut reduced = DMatrix::zeros(jac.nrows(), cols.len());
    for (k, &c) in cols.iter().enumerate() {
        reduced.column_mut(k).copy_from(&jac.column(c));
    }
    let svd = reduced.svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if sigma_max == 0.0 {
        return delta;
    }
    let eps = truncation * sigma_max;
    let solution = svd
        .solve(&(-res), eps)
        .expect("SVD was computed with both bases");
    for (k, &c) in cols.iter().enumerate() {
        delta[c] = solution[k];
    }
    delta
}

fn apply_step(state: &RigidTransform, delta: &DVector<f64>) -> RigidTransform {
    let dq = nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
    let step = RigidTransform::new(dq, Vec3::zeros());
    let rotated = RigidTransform::new(
        state.compose(&step).rotation(),
        state.translation() + Vec3::new(delta[3], delta[4], delta[5]),
    );
    rotated
}

/// Rank and unconstrained directions of the translation block `J_t` at a
/// state, from the eigenvalues of `J_t^T J_t`. A diagonal normal matrix
/// (the axis-aligned case) short-circuits to exact basis vectors.
fn translation_spectrum(jac: &DMatrix<f64>, truncation: f64) -> (usize, Vec<Vec3>) {
    let jt = jac.columns(3, 3);
    let a = jt.transpose() * jt;
    let mut pairs: Vec<(f64, Vec3)> = Vec::with_capacity(3);
    let off_diagonal_zero = a[(0, 1)] == 0.0 && a[(0, 2)] == 0.0 && a[(1, 2)] == 0.0;
    if off_diagonal_zero {
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = 1.0;
            pairs.push((a[(i, i)], e));
        }
    } else {
        let eig = nalgebra::Matrix3::new(
            a[(0, 0)],
            a[(0, 1)],
            a[(0, 2)],
            a[(1, 0)],
            a[(1, 1)],
            a[(1, 2)],
            a[(2, 0)],
            a[(2, 1)],
            a[(2, 2)],
        )
        .symmetric_eigen();
        for i in 0..3 {
            let mut v: Vec3 = eig.eigenvectors.column(i).into();
            // Deterministic sign: first nonzero component positive.
            let lead = v.iter().cloned().find(|c| c.abs() > 1e-12).unwrap_or(1.0);
            if lead < 0.0 {
                v = -v;
            }
            pairs.push((eig.eigenvalues[i].max(0.0), v));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let sigma_max = pairs.last().map(|p| p.0.sqrt()).unwrap_or(0.0);
    let threshold = truncation * sigma_max;
    let degenerate: Vec<Vec3> = pairs
        .iter()
        .filter(|(l, _)| l.sqrt() <= threshold)
        .map(|(_, v)| *v)
        .collect();
    (3 - degenerate.len(), degenerate)
}

/// Estimates the model-from-mapping transform for matched planes, starting
/// from `initial`. Observed planes must be expressed in the mapping frame.
///
/// Steps that would increase the cost are halved up to 8 times; if the cost
/// still cannot be reduced the iteration stops at the last accepted state.
/// Directions the matches leave unconstrained keep their initial values and
/// are listed in the result.
pub fn estimate_transform(
    matches: &MatchSet,
    initial: &RigidTransform,
    cfg: &EstimationConfig,
) -> Result<EstimationResult, EstimationError> {
    if matches.pairs.is_empty() {
        return Err(EstimationError::EmptyMatchSet);
    }

    let mut state = *initial;
    let (mut res, mut jac) = linearize(matches, &state, cfg);
    let mut cost = res.norm_squared();
    if !cost.is_finite() {
        return Err(EstimationError::NonFiniteCost);
    }
    let mut cost_trace = vec![cost];
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        let delta = solve_step(&jac, &res, cfg.svd_truncation);
        if delta.norm() < cfg.convergence_tol {
            break;
        }
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..=8 {
            let candidate = apply_step(&state, &(&delta * alpha));
            let (r2, j2) = linearize(matches, &candidate, cfg);
            let c2 = r2.norm_squared();
            if c2.is_finite() && c2 <= cost {
                state = candidate;
                res = r2;
                jac = j2;
                cost = c2;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // No damping level reduced the cost: the iteration has stalled
            // at the achievable minimum for this data. Stop with the last
            // accepted state; genuine blow-ups are caught on entry above.
            break;
        }
        iterations += 1;
        cost_trace.push(cost);
    }

    let (rank, degenerate_directions) = translation_spectrum(&jac, cfg.svd_truncation);
    Ok(EstimationResult {
        transform: state,
        final_cost: cost,
        iterations,
        rank,
        degenerate_directions,
        cost_trace,
    })
}

/// Manual first-keyframe alignment from user-provided plane-to-wall pairs.
/// Runs the full solver from identity; wall ids must exist in the model.
pub fn initial_alignment(
    pairs: &[(Plane, String)],
    model: &BimModel,
    cfg: &EstimationConfig,
) -> Result<RigidTransform, EstimationError> {
    if pairs.is_empty() {
        return Err(EstimationError::EmptyMatchSet);
    }
    let mut match_pairs = Vec::with_capacity(pairs.len());
    for (i, (plane, wall_id)) in pairs.iter().enumerate() {
        let wall = model
            .wall_by_id(wall_id)
            .ok_or_else(|| EstimationError::UnknownWallId(wall_id.clone()))?;
        match_pairs.push(MatchPair {
            plane: plane.clone(),
            wall: wall.clone(),
            candidate: MatchCandidate {
                observed_plane_id: format!("manual_{i}"),
                wall_id: wall_id.clone(),
                mahalanobis: 0.0,
                center_gap: 0.0,
                corner_gap: 0.0,
                area_ratio: 1.0,
            },
        });
    }
    let matches = MatchSet {
        keyframe_id: 0,
        pairs: match_pairs,
    };
    estimate_transform(&matches, &RigidTransform::identity(), cfg).map(|r| r.transform)
}
