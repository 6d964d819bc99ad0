//! Keyframe-driven correction pipeline.
//!
//! A session consumes keyframe observations in order, maintains the latest
//! mapping-frame plane per plane id, and keeps the model-from-mapping
//! transform up to date according to its variant:
//!
//! * `initial_manual`: aligns once on the first keyframe that carries known
//!   plane-to-wall pairs and never re-estimates. The shared baseline.
//! * `global`: re-estimates from every registered plane.
//! * `local`: re-estimates from planes near the camera, growing the search
//!   radius until enough planes are found and capping the count.
//!
//! Per keyframe, the session also matches the keyframe's own planes under a
//! relaxed evaluation gate and reports their error metrics, so all variants
//! produce comparable series over identical observations.

use crate::bim::BimModel;
use crate::estimation::{estimate_transform, initial_alignment, EstimationConfig, EstimationError};
use crate::geometry::{angular_deviation, GeometryError, Plane, RigidTransform, Vec3};
use crate::matching::{match_planes, MatchConfig, MatchSet};
use crate::metrics::{evaluate_keyframe, MetricsSample};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Registry geometry deltas that mark a keyframe as worth re-estimating.
pub const GATE_NORMAL_ANGLE: f64 = 0.5 * std::f64::consts::PI / 180.0;
pub const GATE_OFFSET: f64 = 0.01;
pub const GATE_AREA_FRACTION: f64 = 0.05;

/// Minimum sine of the angle between two matched wall normals for the set
/// to count as direction-diverse (5 degrees).
const MIN_NORMAL_SPREAD: f64 = 0.0871557427476582;

/// A match set whose wall normals are all (near-)parallel cannot constrain
/// rotation: rotating about the shared normal leaves every plane residual
/// unchanged, so measurement noise is free to walk the estimate arbitrarily
/// far around that axis. Such sets are skipped rather than estimated from.
fn normals_span_two_directions(matches: &MatchSet) -> bool {
    let normals: Vec<&Vec3> = matches
        .pairs
        .iter()
        .map(|p| &p.wall.plane.normal)
        .collect();
    normals.iter().enumerate().any(|(i, a)| {
        normals[i + 1..]
            .iter()
            .any(|b| a.cross(b).norm() > MIN_NORMAL_SPREAD)
    })
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("keyframe {got} arrived after keyframe {last}")]
    OutOfOrderKeyframe { got: u64, last: u64 },
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("failed to read observation log: {0}")]
    Io(#[from] std::io::Error),
    #[error("observation log line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    InitialManual,
    Global,
    Local,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::InitialManual => "initial_manual",
            Variant::Global => "global",
            Variant::Local => "local",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "initial_manual" => Ok(Variant::InitialManual),
            "global" => Ok(Variant::Global),
            "local" => Ok(Variant::Local),
            other => Err(format!(
                "unknown variant `{other}`; expected initial_manual, global or local"
            )),
        }
    }
}

/// One observed plane, in the camera frame of its keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPlane {
    pub id: String,
    pub plane: Plane,
}

/// Everything the mapping system hands over per keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeObservation {
    pub keyframe_id: u64,
    pub timestamp: f64,
    /// Mapping-frame camera pose at this keyframe.
    pub camera_pose: RigidTransform,
    pub planes: Vec<ObservedPlane>,
    /// Manual plane-to-wall assignments; present on the alignment keyframe.
    pub known_wall_ids: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LocalSelectionConfig {
    /// Initial selection radius around the camera, meters.
    pub radius: f64,
    pub min_planes: usize,
    pub max_planes: usize,
    /// Multiplier applied to the radius while too few planes are in reach.
    pub radius_growth: f64,
}

impl Default for LocalSelectionConfig {
    fn default() -> Self {
        Self {
            radius: 5.0,
            min_planes: 3,
            max_planes: 10,
            radius_growth: 1.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SessionConfig {
    /// Gates used when associating planes for re-estimation. The gate is
    /// much wider than the matcher's default because the planes are compared
    /// under a transform that still carries the drift about to be removed:
    /// the gate caps the error the session can recover from. It must stay
    /// below the distance between parallel walls of adjacent rooms (offset
    /// gap 4 m → distance 40000) and below perpendicular-wall confusion
    /// (normal gap √2 → distance 5000).
    pub matching: MatchConfig,
    /// Relaxed gates used only for error reporting, so a badly drifted
    /// baseline still gets its planes associated and its error measured.
    /// Kept below the perpendicular-wall confusion distance (5000) so a
    /// drifted plane is never scored against a sideways wall.
    pub eval_matching: MatchConfig,
    pub estimation: EstimationConfig,
    pub selection: LocalSelectionConfig,
    /// Re-estimation runs only when at least this many pairs matched AND
    /// the matched wall normals span at least two directions. Two planes
    /// with independent normals pin rotation and two translation components;
    /// the remaining direction is left untouched by the rank-truncated
    /// solve. Anything less (or an all-parallel set) leaves rotation free
    /// to swing on measurement noise, so the previous transform is kept.
    pub min_matches: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig {
                tau: 2500.0,
                max_corner_gap: 2.5,
                max_center_gap: 2.5,
                min_area_ratio: 0.1,
            },
            eval_matching: MatchConfig {
                tau: 4000.0,
                max_corner_gap: 2.5,
                max_center_gap: 2.5,
                min_area_ratio: 0.1,
            },
            estimation: EstimationConfig {
                // Chord residuals are measured in radians, offsets in
                // meters. At building scale a rotation error of 1 rad moves
                // plane offsets by roughly the lever arm (~5 m), so an
                // unweighted sum lets the solver trade large rotations for
                // small offset gains when stale registry entries disagree.
                // Weighting the chord terms by the squared lever arm keeps
                // rotation appropriately stiff.
                normal_weight: 25.0,
                ..EstimationConfig::default()
            },
            selection: LocalSelectionConfig::default(),
            min_matches: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct EstimationSummary {
    pub final_cost: f64,
    pub iterations: usize,
    pub rank: usize,
}

/// Per-keyframe record of what the session did.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct KeyframeSummary {
    pub keyframe_id: u64,
    /// Whether the gating test saw new or changed geometry.
    pub processed: bool,
    /// Pairs used for re-estimation (0 when none ran).
    pub matched_count: usize,
    pub estimation: Option<EstimationSummary>,
    /// Model-from-mapping transform after this keyframe.
    pub transform: RigidTransform,
}

pub struct Session {
    variant: Variant,
    model: BimModel,
    config: SessionConfig,
    current: RigidTransform,
    registry: BTreeMap<String, Plane>,
    aligned: bool,
    last_keyframe: Option<u64>,
    history: Vec<KeyframeSummary>,
}

impl Session {
    /// `model` should already have its walls split into per-face segments.
    pub fn new(model: BimModel, variant: Variant, config: SessionConfig) -> Self {
        Self {
            variant,
            model,
            config,
            current: RigidTransform::identity(),
            registry: BTreeMap::new(),
            aligned: false,
            last_keyframe: None,
            history: Vec::new(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn current_transform(&self) -> RigidTransform {
        self.current
    }

    pub fn history(&self) -> &[KeyframeSummary] {
        &self.history
    }

    pub fn registry(&self) -> &BTreeMap<String, Plane> {
        &self.registry
    }

    /// True when the keyframe introduces a new plane id or moves known
    /// geometry beyond the gating thresholds. `planes` are mapping-frame.
    fn should_process(&self, planes: &[(String, Plane)]) -> bool {
        planes.iter().any(|(id, plane)| match self.registry.get(id) {
            None => true,
            Some(prev) => {
                angular_deviation(plane, prev) > GATE_NORMAL_ANGLE
                    || (plane.offset - prev.offset).abs() > GATE_OFFSET
                    || (plane.area - prev.area).abs() > GATE_AREA_FRACTION * prev.area
            }
        })
    }

    /// Planes handed to re-estimation, in the mapping frame.
    fn select_planes(&self, camera_pose: &RigidTransform) -> Vec<(String, Plane)> {
        match self.variant {
            Variant::InitialManual => Vec::new(),
            Variant::Global => self
                .registry
                .iter()
                .map(|(id, p)| (id.clone(), p.clone()))
                .collect(),
            Variant::Local => self.select_local(camera_pose),
        }
    }

    fn select_local(&self, camera_pose: &RigidTransform) -> Vec<(String, Plane)> {
        let cfg = &self.config.selection;
        let position = camera_pose.translation();
        let forward = camera_pose.transform_vector(&Vec3::new(0.0, 0.0, 1.0));

        let distances: Vec<(f64, bool, &String, &Plane)> = self
            .registry
            .iter()
            .map(|(id, p)| {
                let to_plane = p.centroid - position;
                (to_plane.norm(), to_plane.dot(&forward) >= 0.0, id, p)
            })
            .collect();
        if distances.is_empty() {
            return Vec::new();
        }
        let max_distance = distances
            .iter()
            .map(|(d, ..)| *d)
            .fold(0.0, f64::max);

        let mut radius = cfg.radius;
        let mut selected: Vec<(f64, &String, &Plane)>;
        loop {
            selected = distances
                .iter()
                .filter(|(d, fwd, ..)| *fwd && *d <= radius)
                .map(|(d, _, id, p)| (*d, *id, *p))
                .collect();
            if selected.len() >= cfg.min_planes || radius >= max_distance {
                break;
            }
            radius *= cfg.radius_growth;
        }
        // Expansion exhausted without reaching the minimum: fall back to
        // every registered plane so the estimate can still be updated.
        if selected.len() < cfg.min_planes {
            selected = distances.iter().map(|(d, _, id, p)| (*d, *id, *p)).collect();
        }

        selected.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        selected.truncate(cfg.max_planes);
        selected
            .into_iter()
            .map(|(_, id, p)| (id.clone(), p.clone()))
            .collect()
    }

    /// Feeds one keyframe through gating, alignment, re-estimation and
    /// evaluation. Returns the keyframe's error metrics under the possibly
    /// updated transform.
    pub fn process_keyframe(
        &mut self,
        kf: &KeyframeObservation,
    ) -> Result<MetricsSample, SessionError> {
        if let Some(last) = self.last_keyframe {
            if kf.keyframe_id <= last {
                return Err(SessionError::OutOfOrderKeyframe {
                    got: kf.keyframe_id,
                    last,
                });
            }
        }

        let lifted: Vec<(String, Plane)> = kf
            .planes
            .iter()
            .map(|op| (op.id.clone(), op.plane.transformed(&kf.camera_pose)))
            .collect();

        let gating = self.should_process(&lifted);

        // The manual alignment bootstraps every variant exactly once.
        if !self.aligned {
            if let Some(known) = &kf.known_wall_ids {
                let pairs: Vec<(Plane, String)> = known
                    .iter()
                    .filter_map(|(plane_id, wall_id)| {
                        lifted
                            .iter()
                            .find(|(id, _)| id == plane_id)
                            .map(|(_, p)| (p.clone(), wall_id.clone()))
                    })
                    .collect();
                if !pairs.is_empty() {
                    self.current =
                        initial_alignment(&pairs, &self.model, &self.config.estimation)?;
                    self.aligned = true;
                }
            }
        }

        for (id, plane) in &lifted {
            self.registry.insert(id.clone(), plane.clone());
        }

        let mut matched_count = 0;
        let mut estimation_summary = None;
        if gating && self.variant != Variant::InitialManual {
            let selected = self.select_planes(&kf.camera_pose);
            let in_model: Vec<(String, Plane)> = selected
                .iter()
                .map(|(id, p)| (id.clone(), p.transformed(&self.current)))
                .collect();
            let matches = match_planes(
                &in_model,
                &self.model,
                &self.config.matching,
                kf.keyframe_id,
            );
            matched_count = matches.pairs.len();
            if matched_count >= self.config.min_matches.max(1)
                && normals_span_two_directions(&matches)
            {
                // Re-estimation consumes mapping-frame planes.
                let est_matches = matches.map_observed_planes(|id| {
                    selected
                        .iter()
                        .find(|(sid, _)| sid == id)
                        .map(|(_, p)| p.clone())
                });
                let result =
                    estimate_transform(&est_matches, &self.current, &self.config.estimation)?;
                self.current = result.transform;
                estimation_summary = Some(EstimationSummary {
                    final_cost: result.final_cost,
                    iterations: result.iterations,
                    rank: result.rank,
                });
            }
            // Too few matches, or a match set that cannot pin down rotation:
            // keep the previous transform, degrade gracefully.
        }

        let sample = self.evaluate(&lifted, kf.keyframe_id);

        self.history.push(KeyframeSummary {
            keyframe_id: kf.keyframe_id,
            processed: gating,
            matched_count,
            estimation: estimation_summary,
            transform: self.current,
        });
        self.last_keyframe = Some(kf.keyframe_id);
        Ok(sample)
    }

    /// Error metrics of this keyframe's own planes under the current
    /// transform, associated with the relaxed evaluation gates.
    fn evaluate(&self, lifted: &[(String, Plane)], keyframe_id: u64) -> MetricsSample {
        let in_model: Vec<(String, Plane)> = lifted
            .iter()
            .map(|(id, p)| (id.clone(), p.transformed(&self.current)))
            .collect();
        let matches = match_planes(
            &in_model,
            &self.model,
            &self.config.eval_matching,
            keyframe_id,
        );
        let in_mapping: MatchSet = matches.map_observed_planes(|id| {
            lifted
                .iter()
                .find(|(lid, _)| lid == id)
                .map(|(_, p)| p.clone())
        });
        evaluate_keyframe(&in_mapping, &self.current, self.variant)
    }
}

// ====== observation log (JSON lines) ======

#[derive(Serialize, Deserialize)]
struct ObservedPlaneWire {
    id: String,
    normal: [f64; 3],
    offset: f64,
    centroid: [f64; 3],
    corners: Vec<[f64; 3]>,
    /// Row-major 4x4 feature covariance.
    #[serde(skip_serializing_if = "Option::is_none")]
    covariance: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct KeyframeWire {
    keyframe_id: u64,
    timestamp: f64,
    camera_pose: RigidTransform,
    planes: Vec<ObservedPlaneWire>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    known_wall_ids: Option<BTreeMap<String, String>>,
}

fn plane_to_wire(op: &ObservedPlane) -> ObservedPlaneWire {
    let p = &op.plane;
    let mut covariance = Vec::with_capacity(16);
    for r in 0..4 {
        for c in 0..4 {
            covariance.push(p.covariance[(r, c)]);
        }
    }
    ObservedPlaneWire {
        id: op.id.clone(),
        normal: [p.normal.x, p.normal.y, p.normal.z],
        offset: p.offset,
        centroid: [p.centroid.x, p.centroid.y, p.centroid.z],
        corners: p.corners.iter().map(|c| [c.x, c.y, c.z]).collect(),
        covariance: Some(covariance),
    }
}

fn plane_from_wire(wire: ObservedPlaneWire) -> Result<ObservedPlane, String> {
    let covariance = match &wire.covariance {
        None => crate::geometry::default_covariance(),
        Some(v) if v.len() == 16 => {
            Matrix4::from_fn(|r, c| v[r * 4 + c])
        }
        Some(v) => return Err(format!("covariance has {} entries, expected 16", v.len())),
    };
    let corners: Vec<Vec3> = wire
        .corners
        .iter()
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let centroid = Vec3::new(wire.centroid[0], wire.centroid[1], wire.centroid[2]);
    let normal = Vec3::new(wire.normal[0], wire.normal[1], wire.normal[2]);
    let finite = normal.iter().chain(centroid.iter()).all(|v| v.is_finite())
        && wire.offset.is_finite()
        && corners.iter().all(|c| c.iter().all(|v| v.is_finite()))
        && covariance.iter().all(|v| v.is_finite());
    if !finite {
        return Err("non-finite number in plane".to_string());
    }
    let area = {
        let c = corners.iter().sum::<Vec3>() / corners.len().max(1) as f64;
        let mut area = 0.0;
        for i in 0..corners.len() {
            let a = corners[i] - c;
            let b = corners[(i + 1) % corners.len()] - c;
            area += 0.5 * a.cross(&b).norm();
        }
        area
    };
    let mut plane = Plane {
        normal,
        offset: wire.offset,
        centroid,
        corners,
        area,
        covariance,
    };
    plane.canonicalize();
    plane
        .validate()
        .map_err(|e: GeometryError| e.to_string())?;
    Ok(ObservedPlane { id: wire.id, plane })
}

pub fn keyframe_to_json(kf: &KeyframeObservation) -> String {
    let wire = KeyframeWire {
        keyframe_id: kf.keyframe_id,
        timestamp: kf.timestamp,
        camera_pose: kf.camera_pose,
        planes: kf.planes.iter().map(plane_to_wire).collect(),
        known_wall_ids: kf.known_wall_ids.clone(),
    };
    serde_json::to_string(&wire).expect("keyframe serialization cannot fail")
}

pub fn observation_log_to_jsonl(keyframes: &[KeyframeObservation]) -> String {
    let mut out = String::new();
    for kf in keyframes {
        out.push_str(&keyframe_to_json(kf));
        out.push('\n');
    }
    out
}

pub fn parse_observation_log(text: &str) -> Result<Vec<KeyframeObservation>, SessionError> {
    let mut keyframes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let wire: KeyframeWire = serde_json::from_str(line).map_err(|e| SessionError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !wire.timestamp.is_finite() {
            return Err(SessionError::Parse {
                line: i + 1,
                message: "non-finite timestamp".to_string(),
            });
        }
        let mut planes = Vec::with_capacity(wire.planes.len());
        for p in wire.planes {
            planes.push(plane_from_wire(p).map_err(|message| SessionError::Parse {
                line: i + 1,
                message,
            })?);
        }
        keyframes.push(KeyframeObservation {
            keyframe_id: wire.keyframe_id,
            timestamp: wire.timestamp,
            camera_pose: wire.camera_pose,
            planes,
            known_wall_ids: wire.known_wall_ids,
        });
    }
    Ok(keyframes)
}

pub fn read_observation_log(path: &Path) -> Result<Vec<KeyframeObservation>, SessionError> {
    parse_observation_log(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bim::{parse_floorplan, split_walls};
    use approx::assert_abs_diff_eq;
    use nalgebra::UnitQuaternion;

    fn square_room() -> BimModel {
        let json = r#"{"units": "meters", "walls": [
            {"id": "south", "corners": [[0,0,0],[4,0,0],[4,0,2.5],[0,0,2.5]]},
            {"id": "north", "corners": [[0,4,0],[4,4,0],[4,4,2.5],[0,4,2.5]]},
            {"id": "west",  "corners": [[0,0,0],[0,4,0],[0,4,2.5],[0,0,2.5]]},
            {"id": "east",  "corners": [[4,0,0],[4,4,0],[4,4,2.5],[4,0,2.5]]}
        ]}"#;
        split_walls(&parse_floorplan(json).unwrap())
    }

    /// Camera at the room center looking toward +y, planes given in the
    /// camera frame for a mapping frame displaced from the model by `shift`.
    fn keyframe_at(
        id: u64,
        model: &BimModel,
        shift: &RigidTransform,
        with_known: bool,
    ) -> KeyframeObservation {
        // Camera axes: z forward (+y world), x right, y down.
        let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
            nalgebra::Matrix3::from_columns(&[
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 0.0, -1.0),
                Vec3::new(0.0, 1.0, 0.0),
            ]),
        ));
        let true_pose = RigidTransform::new(rot, Vec3::new(2.0, 2.0, 1.5));
        // Mapping frame = shift^-1 o model frame, so poses and planes agree.
        let camera_pose = shift.inverse().compose(&true_pose);
        let planes: Vec<ObservedPlane> = model
            .walls
            .iter()
            .map(|w| ObservedPlane {
                id: format!("obs_{}", w.id),
                plane: w.plane.transformed(&true_pose.inverse()),
            })
            .collect();
        let known_wall_ids = with_known.then(|| {
            model
                .walls
                .iter()
                .map(|w| (format!("obs_{}", w.id), w.id.clone()))
                .collect()
        });
        KeyframeObservation {
            keyframe_id: id,
            timestamp: id as f64 * 0.1,
            camera_pose,
            planes,
            known_wall_ids,
        }
    }

    #[test]
    fn manual_alignment_recovers_frame_shift_for_all_variants() {
        let model = square_room();
        let shift = RigidTransform::from_rotation_vector(
            Vec3::new(0.0, 0.0, 0.05),
            Vec3::new(0.3, -0.2, 0.0),
        );
        for variant in [Variant::InitialManual, Variant::Global, Variant::Local] {
            let mut session = Session::new(
                model.clone(),
                variant,
                SessionConfig::default(),
            );
            let sample = session
                .process_keyframe(&keyframe_at(0, &model, &shift, true))
                .unwrap();
            assert!(session.current_transform().rotation_angle_to(&shift) < 1e-7);
            assert!(session.current_transform().translation_distance_to(&shift) < 1e-7);
            assert_eq!(sample.matched_count, 4);
            assert!(sample.mean_angular_deviation.unwrap() < 1e-9);
            assert!(sample.mean_distance_error.unwrap() < 1e-9);
        }
    }

    #[test]
    fn drift_free_replay_keeps_transform_constant() {
        let model = square_room();
        let shift = RigidTransform::identity();
        let mut session = Session::new(
            model.clone(),
            Variant::Global,
            SessionConfig::default(),
        );
        session
            .process_keyframe(&keyframe_at(0, &model, &shift, true))
            .unwrap();
        let reference = session.current_transform();
        for id in 1..5 {
            session
                .process_keyframe(&keyframe_at(id, &model, &shift, false))
                .unwrap();
            assert!(session.current_transform().rotation_angle_to(&reference) < 1e-9);
            assert!(session.current_transform().translation_distance_to(&reference) < 1e-9);
        }
    }

    #[test]
    fn out_of_order_keyframes_are_rejected() {
        let model = square_room();
        let mut session = Session::new(
            model.clone(),
            Variant::Global,
            SessionConfig::default(),
        );
        let shift = RigidTransform::identity();
        session
            .process_keyframe(&keyframe_at(5, &model, &shift, true))
            .unwrap();
        let err = session
            .process_keyframe(&keyframe_at(5, &model, &shift, false))
            .unwrap_err();
        assert!(matches!(err, SessionError::OutOfOrderKeyframe { got: 5, last: 5 }));
    }

    #[test]
    fn repeated_geometry_does_not_reprocess() {
        let model = square_room();
        let mut session = Session::new(
            model.clone(),
            Variant::Global,
            SessionConfig::default(),
        );
        let shift = RigidTransform::identity();
        session
            .process_keyframe(&keyframe_at(0, &model, &shift, true))
            .unwrap();
        session
            .process_keyframe(&keyframe_at(1, &model, &shift, false))
            .unwrap();
        let history = session.history();
        assert!(history[0].processed, "first keyframe brings new planes");
        assert!(!history[1].processed, "identical geometry must not reprocess");
    }

    #[test]
    fn moved_plane_triggers_processing() {
        let model = square_room();
        let mut session = Session::new(
            model.clone(),
            Variant::Global,
            SessionConfig::default(),
        );
        let shift = RigidTransform::identity();
        session
            .process_keyframe(&keyframe_at(0, &model, &shift, true))
            .unwrap();
        // Same scene reported from a mapping frame that slid 5 cm: every
        // plane's offset moves beyond the 1 cm gate.
        let drifted = RigidTransform::new(UnitQuaternion::identity(), Vec3::new(0.05, 0.0, 0.0));
        session
            .process_keyframe(&keyframe_at(1, &model, &drifted, false))
            .unwrap();
        assert!(session.history()[1].processed);
        // The global variant re-estimates and absorbs the drift.
        assert!(session.current_transform().translation_distance_to(&drifted) < 1e-6);
    }

    #[test]
    fn empty_match_set_keeps_previous_transform() {
        let model = square_room();
        let mut session = Session::new(
            model.clone(),
            Variant::Global,
            SessionConfig::default(),
        );
        let shift = RigidTransform::identity();
        session
            .process_keyframe(&keyframe_at(0, &model, &shift, true))
            .unwrap();
        let before = session.current_transform();
        // A plane nowhere near the model: no match survives the gates.
        let far = Plane::from_corners(&[
            Vec3::new(100.0, 100.0, 0.0),
            Vec3::new(101.0, 100.0, 0.0),
            Vec3::new(101.0, 100.0, 1.0),
            Vec3::new(100.0, 100.0, 1.0),
        ])
        .unwrap();
        let kf = KeyframeObservation {
            keyframe_id: 1,
            timestamp: 0.1,
            camera_pose: RigidTransform::identity(),
            planes: vec![ObservedPlane { id: "stray".into(), plane: far }],
            known_wall_ids: None,
        };
        let sample = session.process_keyframe(&kf).unwrap();
        assert_eq!(sample.matched_count, 0);
        assert_eq!(sample.mean_angular_deviation, None);
        assert_eq!(
            session.current_transform().translation(),
            before.translation()
        );
    }

    #[test]
    fn local_selection_respects_limits_and_grows() {
        let model = square_room();
        let mut config = SessionConfig::default();
        config.selection.radius = 0.5; // nothing within reach at first
        config.selection.max_planes = 2;
        let mut session = Session::new(model.clone(), Variant::Local, config);
        let shift = RigidTransform::identity();
        session
            .process_keyframe(&keyframe_at(0, &model, &shift, true))
            .unwrap();
        let kf = keyframe_at(1, &model, &shift, false);
        let selected = session.select_planes(&kf.camera_pose);
        assert!(!selected.is_empty(), "radius growth must reach some planes");
        assert!(selected.len() <= 2, "max_planes caps the selection");
    }

    #[test]
    fn local_exhaustion_falls_back_to_all_planes() {
        let model = square_room();
        let mut config = SessionConfig::default();
        config.selection.min_planes = 10; // more than the room offers
        let mut session = Session::new(model.clone(), Variant::Local, config);
        let shift = RigidTransform::identity();
        session
            .process_keyframe(&keyframe_at(0, &model, &shift, true))
            .unwrap();
        let kf = keyframe_at(1, &model, &shift, false);
        let selected = session.select_planes(&kf.camera_pose);
        assert_eq!(selected.len(), 4, "expansion exhausts into every plane");
    }

    #[test]
    fn log_round_trip_is_exact() {
        let model = square_room();
        let kf0 = keyframe_at(0, &model, &RigidTransform::identity(), true);
        let kf1 = keyframe_at(
            1,
            &model,
            &RigidTransform::from_rotation_vector(Vec3::new(0.0, 0.0, 0.01), Vec3::new(0.1, 0.0, 0.0)),
            false,
        );
        let text = observation_log_to_jsonl(&[kf0.clone(), kf1.clone()]);
        let parsed = parse_observation_log(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0], kf0);
        assert_eq!(parsed[1], kf1);
        // Serializing again yields identical bytes.
        assert_eq!(observation_log_to_jsonl(&parsed), text);
    }

    #[test]
    fn malformed_log_lines_are_reported_with_line_numbers() {
        let err = parse_observation_log("{\"keyframe_id\": 0").unwrap_err();
        match err {
            SessionError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let model = square_room();
        let shift = RigidTransform::from_rotation_vector(
            Vec3::new(0.0, 0.0, 0.02),
            Vec3::new(0.1, -0.05, 0.0),
        );
        let run = || {
            let mut session = Session::new(
                model.clone(),
                Variant::Local,
                SessionConfig::default(),
            );
            session
                .process_keyframe(&keyframe_at(0, &model, &shift, true))
                .unwrap();
            for id in 1..4 {
                session
                    .process_keyframe(&keyframe_at(id, &model, &shift, false))
                    .unwrap();
            }
            serde_json::to_string(session.history()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_serde_round_trip() {
        let config = SessionConfig::default();
        let json = serde_json::to_string(&config).unwrap();
        let back: SessionConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
        assert_abs_diff_eq!(back.matching.tau, 2500.0, epsilon = 1e-12);
    }
}
