//! Synthetic scenes, drifting trajectories, and noisy plane observations.
//!
//! The simulator stands in for a real capture rig: it builds axis-aligned
//! multi-room floorplans, walks a camera along waypoints, corrupts the
//! reported mapping-frame poses with a seeded drift process, and emits the
//! wall patches the camera would have detected — clipped to the view
//! frustum and perturbed in the camera frame. Everything is derived from
//! two independent seeded generators (drift, noise) so each corruption can
//! be zeroed on its own, and the full ground truth is returned alongside
//! the stream.
//!
//! The world is occlusion-free: a wall inside the frustum is observed even
//! when another wall stands in front of it. That keeps visibility purely
//! geometric and deterministic.
//!
//! Frame conventions: the model frame is world-anchored with z up. The
//! camera looks along its local +z, with +x to the right and +y down. The
//! mapping frame coincides with the model frame at the first keyframe and
//! then decays away from it as drift accumulates.

use crate::bim::{plane_basis, BimModel, WallSegment};
use crate::geometry::{polygon_area, Plane, RigidTransform, Vec3};
use crate::session::KeyframeObservation;
use crate::session::ObservedPlane;
use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const WALL_HEIGHT: f64 = 2.5;
pub const EYE_HEIGHT: f64 = 1.5;
/// Depth window of the virtual RGB-D camera, meters.
pub const FRUSTUM_NEAR: f64 = 0.05;
pub const FRUSTUM_RANGE: f64 = 6.0;
/// Half-angle of the square frustum, radians.
pub const FRUSTUM_HALF_ANGLE: f64 = 70.0 * std::f64::consts::PI / 180.0;
/// Clipped patches smaller than this are considered undetectable, m^2.
pub const MIN_PATCH_AREA: f64 = 0.05;
/// Lower bound on the reported feature standard deviations, so noiseless
/// runs still carry a positive-definite covariance.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("scene spec invalid: {0}")]
    InvalidSceneSpec(String),
    #[error("waypoint {index} lies outside the floorplan")]
    WaypointOutsideScene { index: usize },
    #[error("trajectory needs at least two distinct waypoints")]
    DegenerateTrajectory,
    #[error("keyframe spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("drift model invalid: {0}")]
    InvalidDriftModel(String),
    #[error("noise model invalid: {0}")]
    InvalidNoiseModel(String),
}

/// Grid floorplan description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub rooms_x: usize,
    pub rooms_y: usize,
    /// Side length of each square room, meters.
    pub room_size: f64,
    /// Recorded with the scene for reproducibility; the grid construction is
    /// fully deterministic and currently ignores it.
    pub seed: u64,
}

/// Per-keyframe corruption of the reported poses. Rates are random-walk
/// standard deviations; biases are deterministic increments. Both act in
/// the camera's local frame at the previous keyframe, except `bias_rot`
/// which is a yaw about the world up axis (the dominant failure mode of
/// planar indoor tracking).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DriftModel {
    pub rot_rate: f64,
    pub trans_rate: f64,
    pub bias_rot: f64,
    pub bias_trans: Vec3,
    pub seed: u64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            rot_rate: 0.0,
            trans_rate: 0.0,
            bias_rot: 0.0,
            bias_trans: Vec3::zeros(),
            seed: 0,
        }
    }
}

/// Detection noise applied to each emitted patch, in the camera frame.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NoiseModel {
    /// Std of the additive perturbation per normal component (renormalized
    /// afterwards), unitless.
    pub sigma_normal: f64,
    /// Std of the plane-offset perturbation, meters.
    pub sigma_offset: f64,
    /// Std of the in-plane centroid slide, meters.
    pub sigma_centroid: f64,
    /// Probability that a visible patch is actually reported.
    pub detection_prob: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_normal: 0.0,
            sigma_offset: 0.0,
            sigma_centroid: 0.0,
            detection_prob: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorrespondenceRecord {
    pub keyframe_id: u64,
    pub plane_id: String,
    pub wall_id: String,
}

/// Everything the session is never allowed to see.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True model-frame camera pose per keyframe.
    pub true_poses: Vec<RigidTransform>,
    /// True model-from-mapping transform per keyframe; composing it with
    /// the reported pose reproduces the true pose exactly.
    pub true_model_from_mapping: Vec<RigidTransform>,
    /// Which wall produced each emitted plane.
    pub true_correspondences: Vec<CorrespondenceRecord>,
}

/// Builds an axis-aligned grid of square rooms. Boundary walls span the
/// whole building (so wall splitting has real work to do); interior walls
/// are one room wide. Wall ids: `south`/`north`/`west`/`east` for the
/// boundary, `v{j}_{i}` for the interior wall at x = j*room_size beside
/// row i, `h{i}_{j}` for the one at y = i*room_size beside column j.
pub fn generate_scene(spec: &SceneSpec) -> Result<BimModel, SimulatorError> {
    if spec.rooms_x < 1 || spec.rooms_y < 1 {
        return Err(SimulatorError::InvalidSceneSpec(format!(
            "grid must be at least 1x1, got {}x{}",
            spec.rooms_x, spec.rooms_y
        )));
    }
    if !(spec.room_size > 0.0) || !spec.room_size.is_finite() {
        return Err(SimulatorError::InvalidSceneSpec(format!(
            "room size must be positive, got {}",
            spec.room_size
        )));
    }
    let s = spec.room_size;
    let width = spec.rooms_x as f64 * s;
    let depth = spec.rooms_y as f64 * s;

    let wall = |id: &str, a: (f64, f64), b: (f64, f64), rooms: Vec<String>| WallSegment {
        id: id.to_string(),
        plane: Plane::from_corners(&[
            Vec3::new(a.0, a.1, 0.0),
            Vec3::new(b.0, b.1, 0.0),
            Vec3::new(b.0, b.1, WALL_HEIGHT),
            Vec3::new(a.0, a.1, WALL_HEIGHT),
        ])
        .expect("grid walls are planar rectangles"),
        parent_id: None,
        room_ids: rooms,
    };
    let room = |jx: usize, iy: usize| format!("r{jx}_{iy}");

    let mut walls = Vec::new();
    walls.push(wall(
        "south",
        (0.0, 0.0),
        (width, 0.0),
        (0..spec.rooms_x).map(|j| room(j, 0)).collect(),
    ));
    walls.push(wall(
        "north",
        (0.0, depth),
        (width, depth),
        (0..spec.rooms_x).map(|j| room(j, spec.rooms_y - 1)).collect(),
    ));
    walls.push(wall(
        "west",
        (0.0, 0.0),
        (0.0, depth),
        (0..spec.rooms_y).map(|i| room(0, i)).collect(),
    ));
    walls.push(wall(
        "east",
        (width, 0.0),
        (width, depth),
        (0..spec.rooms_y).map(|i| room(spec.rooms_x - 1, i)).collect(),
    ));
    for j in 1..spec.rooms_x {
        for i in 0..spec.rooms_y {
            let x = j as f64 * s;
            walls.push(wall(
                &format!("v{j}_{i}"),
                (x, i as f64 * s),
                (x, (i + 1) as f64 * s),
                vec![room(j - 1, i), room(j, i)],
            ));
        }
    }
    for i in 1..spec.rooms_y {
        for j in 0..spec.rooms_x {
            let y = i as f64 * s;
            walls.push(wall(
                &format!("h{i}_{j}"),
                (j as f64 * s, y),
                ((j + 1) as f64 * s, y),
                vec![room(j, i - 1), room(j, i)],
            ));
        }
    }
    Ok(BimModel { walls })
}

/// A survey route through the scene at eye height: a serpentine pass
/// through the room centers, then two laps around the inside of the
/// boundary. `inset` is the clearance kept from the boundary walls during
/// the laps.
pub fn survey_waypoints(spec: &SceneSpec, inset: f64) -> Vec<Vec3> {
    let s = spec.room_size;
    let width = spec.rooms_x as f64 * s;
    let depth = spec.rooms_y as f64 * s;
    let d = inset.min(width / 2.0 - 1e-3).min(depth / 2.0 - 1e-3).max(0.0);
    let at = |x: f64, y: f64| Vec3::new(x, y, EYE_HEIGHT);

    let mut points = Vec::new();
    for i in 0..spec.rooms_y {
        let y = (i as f64 + 0.5) * s;
        let mut xs: Vec<f64> = (0..spec.rooms_x).map(|j| (j as f64 + 0.5) * s).collect();
        if i % 2 == 1 {
            xs.reverse();
        }
        for x in xs {
            points.push(at(x, y));
        }
    }
    for _ in 0..2 {
        points.extend([
            at(d, depth - d),
            at(d, d),
            at(width - d, d),
            at(width - d, depth - d),
        ]);
    }
    points.push(at(d, depth - d));
    points
}

struct Trajectory {
    points: Vec<Vec3>,
    cumulative: Vec<f64>,
}

impl Trajectory {
    fn new(waypoints: &[Vec3]) -> Result<Self, SimulatorError> {
        let mut points = Vec::with_capacity(waypoints.len());
        for &p in waypoints {
            // Collapse repeated waypoints so segment directions are defined.
            if points.last().map_or(true, |q: &Vec3| (p - q).norm() > 1e-12) {
                points.push(p);
            }
        }
        if points.len() < 2 {
            return Err(SimulatorError::DegenerateTrajectory);
        }
        let mut cumulative = vec![0.0];
        for i in 1..points.len() {
            let d = (points[i] - points[i - 1]).norm();
            cumulative.push(cumulative[i - 1] + d);
        }
        Ok(Self { points, cumulative })
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Camera pose at arc length `d`: z looks along the travel direction,
    /// x points right, y points down.
    fn pose_at(&self, d: f64) -> RigidTransform {
        let d = d.clamp(0.0, self.length());
        let mut i = match self
            .cumulative
            .binary_search_by(|c| c.total_cmp(&d))
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        if i >= self.points.len() - 1 {
            i = self.points.len() - 2;
        }
        let seg = self.points[i + 1] - self.points[i];
        let seg_len = seg.norm();
        let t = (d - self.cumulative[i]) / seg_len;
        let position = self.points[i] + seg * t;

        let forward = seg / seg_len;
        let up = Vec3::new(0.0, 0.0, 1.0);
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = Vec3::new(1.0, 0.0, 0.0);
        } else {
            right /= right.norm();
        }
        let down = forward.cross(&right);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            Matrix3::from_columns(&[right, down, forward]),
        ));
        RigidTransform::new(rotation, position)
    }
}

fn scene_bounds(model: &BimModel) -> (Vec3, Vec3) {
    let mut min = Vec3::from_element(f64::INFINITY);
    let mut max = Vec3::from_element(f64::NEG_INFINITY);
    for wall in &model.walls {
        for c in &wall.plane.corners {
            min = min.inf(c);
            max = max.sup(c);
        }
    }
    (min, max)
}

/// Sutherland-Hodgman step: keeps the region where `inside` holds, with
/// `edge` giving the signed boundary coordinate (0 on the clip plane).
fn clip_polygon(polygon: &[Vec3], edge: impl Fn(&Vec3) -> f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(polygon.len() + 2);
    for i in 0..polygon.len() {
        let a = polygon[i];
        let b = polygon[(i + 1) % polygon.len()];
        let ea = edge(&a);
        let eb = edge(&b);
        if ea <= 0.0 {
            out.push(a);
        }
        if (ea < 0.0) != (eb < 0.0) && ea != eb {
            let t = ea / (ea - eb);
            if t > 0.0 && t < 1.0 {
                out.push(a + (b - a) * t);
            }
        }
    }
    out
}

/// Portion of a wall visible from camera pose `pose`, as a polygon in the
/// camera frame. `None` when the visible patch is empty or too small.
fn visible_patch(wall: &WallSegment, pose: &RigidTransform) -> Option<Vec<Vec3>> {
    let inv = pose.inverse();
    let mut poly: Vec<Vec3> = wall
        .plane
        .corners
        .iter()
        .map(|c| inv.transform_point(c))
        .collect();
    let tan = FRUSTUM_HALF_ANGLE.tan();
    let planes: [Box<dyn Fn(&Vec3) -> f64>; 6] = [
        Box::new(|p: &Vec3| FRUSTUM_NEAR - p.z),
        Box::new(|p: &Vec3| p.z - FRUSTUM_RANGE),
        Box::new(move |p: &Vec3| p.x - tan * p.z),
        Box::new(move |p: &Vec3| -p.x - tan * p.z),
        Box::new(move |p: &Vec3| p.y - tan * p.z),
        Box::new(move |p: &Vec3| -p.y - tan * p.z),
    ];
    for clip in planes {
        poly = clip_polygon(&poly, clip);
        if poly.len() < 3 {
            return None;
        }
    }
    let centroid = poly.iter().sum::<Vec3>() / poly.len() as f64;
    (polygon_area(&poly, &centroid) >= MIN_PATCH_AREA).then_some(poly)
}

fn feature_covariance(noise: &NoiseModel) -> Matrix4<f64> {
    let sn = noise.sigma_normal.max(SIGMA_FLOOR);
    let sd = noise.sigma_offset.max(SIGMA_FLOOR);
    Matrix4::from_diagonal(&nalgebra::Vector4::new(sn * sn, sn * sn, sn * sn, sd * sd))
}

/// Applies detection noise to an exact camera-frame patch: perturbs the
/// normal and offset, slides the corners in-plane, then projects them back
/// onto the perturbed plane so the result is exactly planar.
fn perturb_patch(
    corners: &[Vec3],
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
    covariance: &Matrix4<f64>,
) -> Option<Plane> {
    let exact = Plane::from_corners_with_covariance(corners, *covariance).ok()?;
    let mut draws = [0.0; 6];
    for d in draws.iter_mut() {
        *d = rng.sample(StandardNormal);
    }
    let normal = (exact.normal
        + Vec3::new(draws[0], draws[1], draws[2]) * noise.sigma_normal)
        .normalize();
    let offset = exact.offset + draws[3] * noise.sigma_offset;
    let (u, v) = plane_basis(&exact.normal);
    let slide = u * (draws[4] * noise.sigma_centroid) + v * (draws[5] * noise.sigma_centroid);
    let projected: Vec<Vec3> = corners
        .iter()
        .map(|c| {
            let moved = c + slide;
            moved - normal * (normal.dot(&moved) - offset)
        })
        .collect();
    Plane::from_corners_with_covariance(&projected, *covariance).ok()
}

/// Walks the camera along `waypoints` at `keyframe_spacing`, reporting
/// drift-corrupted mapping-frame poses and noisy camera-frame patches of
/// the walls inside the frustum. Ground truth is returned separately and
/// must never reach the consumer of the stream.
pub fn simulate(
    model: &BimModel,
    waypoints: &[Vec3],
    drift: &DriftModel,
    noise: &NoiseModel,
    keyframe_spacing: f64,
) -> Result<(Vec<KeyframeObservation>, GroundTruth), SimulatorError> {
    if !(keyframe_spacing > 0.0) || !keyframe_spacing.is_finite() {
        return Err(SimulatorError::InvalidSpacing(keyframe_spacing));
    }
    if drift.rot_rate < 0.0 || drift.trans_rate < 0.0 {
        return Err(SimulatorError::InvalidDriftModel(
            "rates must be non-negative".to_string(),
        ));
    }
    if noise.sigma_normal < 0.0 || noise.sigma_offset < 0.0 || noise.sigma_centroid < 0.0 {
        return Err(SimulatorError::InvalidNoiseModel(
            "sigmas must be non-negative".to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&noise.detection_prob) {
        return Err(SimulatorError::InvalidNoiseModel(format!(
            "detection_prob must be within [0, 1], got {}",
            noise.detection_prob
        )));
    }
    let (min, max) = scene_bounds(model);
    for (index, p) in waypoints.iter().enumerate() {
        let inside = (0..3).all(|i| p[i] >= min[i] - 1e-9 && p[i] <= max[i] + 1e-9);
        if !inside {
            return Err(SimulatorError::WaypointOutsideScene { index });
        }
    }
    let trajectory = Trajectory::new(waypoints)?;
    let count = (trajectory.length() / keyframe_spacing).floor() as usize + 1;

    let mut drift_rng = ChaCha8Rng::seed_from_u64(drift.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let covariance = feature_covariance(noise);
    let world_up = Vec3::new(0.0, 0.0, 1.0);

    let mut keyframes = Vec::with_capacity(count);
    let mut truth = GroundTruth {
        true_poses: Vec::with_capacity(count),
        true_model_from_mapping: Vec::with_capacity(count),
        true_correspondences: Vec::new(),
    };
    let mut previous_true = RigidTransform::identity();
    let mut reported = RigidTransform::identity();

    for k in 0..count {
        let true_pose = trajectory.pose_at(k as f64 * keyframe_spacing);
        if k == 0 {
            // The mapping frame starts out coincident with the model frame.
            reported = true_pose;
        } else {
            let motion = previous_true.inverse().compose(&true_pose);
            let mut gauss = [0.0; 6];
            for g in gauss.iter_mut() {
                *g = drift_rng.sample(StandardNormal);
            }
            // Yaw bias acts about the world up axis, expressed in the local
            // frame where the increment is applied.
            let local_up = previous_true
                .rotation()
                .inverse_transform_vector(&world_up);
            let rot = local_up * drift.bias_rot
                + Vec3::new(gauss[0], gauss[1], gauss[2]) * drift.rot_rate;
            let trans = drift.bias_trans
                + Vec3::new(gauss[3], gauss[4], gauss[5]) * drift.trans_rate;
            let delta = RigidTransform::from_rotation_vector(rot, trans);
            reported = reported.compose(&delta).compose(&motion);
        }
        previous_true = true_pose;

        let mut planes = Vec::new();
        let mut known = BTreeMap::new();
        for wall in &model.walls {
            let Some(patch) = visible_patch(wall, &true_pose) else {
                continue;
            };
            if noise.detection_prob < 1.0 {
                let u: f64 = noise_rng.gen();
                if u > noise.detection_prob {
                    continue;
                }
            }
            let Some(plane) = perturb_patch(&patch, noise, &mut noise_rng, &covariance) else {
                continue;
            };
            let plane_id = format!("obs_{}", wall.id);
            truth.true_correspondences.push(CorrespondenceRecord {
                keyframe_id: k as u64,
                plane_id: plane_id.clone(),
                wall_id: wall.id.clone(),
            });
            if k == 0 {
                known.insert(plane_id.clone(), wall.id.clone());
            }
            planes.push(ObservedPlane { id: plane_id, plane });
        }

        truth.true_poses.push(true_pose);
        truth
            .true_model_from_mapping
            .push(true_pose.compose(&reported.inverse()));
        keyframes.push(KeyframeObservation {
            keyframe_id: k as u64,
            timestamp: k as f64 * 0.1,
            camera_pose: reported,
            planes,
            known_wall_ids: (k == 0).then_some(known),
        });
    }
    Ok((keyframes, truth))
}

pub fn ground_truth_to_json(truth: &GroundTruth) -> String {
    serde_json::to_string_pretty(truth).expect("ground truth serialization cannot fail")
}

pub fn ground_truth_from_json(text: &str) -> Result<GroundTruth, serde_json::Error> {
    serde_json::from_str(text)
}
