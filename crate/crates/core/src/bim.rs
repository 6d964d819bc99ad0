//! Building-model ingestion and preprocessing.
//!
//! Floorplans arrive as JSON wall lists. Before matching, walls that are
//! crossed by the extended plane of an abutting wall are split into
//! sub-segments, so that each segment corresponds to one observable face
//! (a wall shared by two rooms becomes one segment per room side).

use crate::geometry::{GeometryError, Plane, RigidTransform, Vec3};
use nalgebra::{Matrix3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Two walls count as touching when their polygons come this close, meters.
pub const WALL_CONTACT_TOL: f64 = 1e-6;

/// A cut must pass at least this far inside a polygon to split it, meters.
/// Contact along an edge or at a corner never splits.
pub const SPLIT_INTERIOR_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BimError {
    #[error("failed to read floorplan: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse floorplan JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("floorplan contains no walls")]
    EmptyWalls,
    #[error("duplicate wall id `{0}`")]
    DuplicateId(String),
    #[error("unsupported units `{0}`; expected meters")]
    UnsupportedUnits(String),
    #[error("wall `{id}` has invalid geometry: {source}")]
    DegenerateWall { id: String, source: GeometryError },
}

/// One planar wall face, possibly a sub-segment of a source wall.
#[derive(Debug, Clone)]
pub struct WallSegment {
    pub id: String,
    pub plane: Plane,
    /// Id of the source wall when this segment came out of a split.
    pub parent_id: Option<String>,
    pub room_ids: Vec<String>,
}

/// All wall faces of one building, in the model frame (meters).
#[derive(Debug, Clone, Default)]
pub struct BimModel {
    pub walls: Vec<WallSegment>,
}

impl BimModel {
    pub fn wall_by_id(&self, id: &str) -> Option<&WallSegment> {
        self.walls.iter().find(|w| w.id == id)
    }

    pub fn total_area(&self) -> f64 {
        self.walls.iter().map(|w| w.plane.area).sum()
    }
}

// ====== floorplan JSON ======

#[derive(Serialize, Deserialize)]
struct FloorplanWire {
    #[serde(default = "meters")]
    units: String,
    walls: Vec<WallWire>,
}

#[derive(Serialize, Deserialize)]
struct WallWire {
    id: String,
    corners: Vec<[f64; 3]>,
    #[serde(default)]
    rooms: Vec<String>,
}

fn meters() -> String {
    "meters".to_string()
}

pub fn load_bim(path: &Path) -> Result<BimModel, BimError> {
    parse_floorplan(&std::fs::read_to_string(path)?)
}

pub fn parse_floorplan(json: &str) -> Result<BimModel, BimError> {
    let wire: FloorplanWire = serde_json::from_str(json)?;
    if wire.units != "meters" {
        return Err(BimError::UnsupportedUnits(wire.units));
    }
    if wire.walls.is_empty() {
        return Err(BimError::EmptyWalls);
    }
    let mut walls = Vec::with_capacity(wire.walls.len());
    let mut seen = std::collections::BTreeSet::new();
    for w in wire.walls {
        if !seen.insert(w.id.clone()) {
            return Err(BimError::DuplicateId(w.id));
        }
        let corners: Vec<Vec3> = w.corners.iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let plane = Plane::from_corners(&corners)
            .map_err(|source| BimError::DegenerateWall { id: w.id.clone(), source })?;
        walls.push(WallSegment {
            id: w.id,
            plane,
            parent_id: None,
            room_ids: w.rooms,
        });
    }
    Ok(BimModel { walls })
}

pub fn floorplan_json(model: &BimModel) -> String {
    let wire = FloorplanWire {
        units: meters(),
        walls: model
            .walls
            .iter()
            .map(|w| WallWire {
                id: w.id.clone(),
                corners: w.plane.corners.iter().map(|c| [c.x, c.y, c.z]).collect(),
                rooms: w.room_ids.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&wire).expect("floorplan serialization cannot fail")
}

// ====== wall splitting ======

/// Splits every wall crossed by the extended plane of a touching,
/// non-parallel wall. Sub-segments are numbered ascending along the cut
/// direction and keep the source wall's id as `parent_id`. Total wall area
/// is conserved. Idempotent: cuts land on sub-segment boundaries afterwards.
pub fn split_walls(model: &BimModel) -> BimModel {
    let mut out = Vec::new();
    for (wi, wall) in model.walls.iter().enumerate() {
        let mut cuts: Vec<(Vec3, f64)> = Vec::new();
        for (vi, other) in model.walls.iter().enumerate() {
            if vi == wi {
                continue;
            }
            let cross = wall.plane.normal.cross(&other.plane.normal).norm();
            if cross < 1e-6 {
                continue; // parallel planes never produce a cut line
            }
            if !crosses_interior(&wall.plane, &other.plane.normal, other.plane.offset) {
                continue;
            }
            if !polygons_touch(&wall.plane, &other.plane) {
                continue;
            }
            let cut = (other.plane.normal, other.plane.offset);
            if !cuts
                .iter()
                .any(|(n, d)| (n - cut.0).norm() < 1e-9 && (d - cut.1).abs() < 1e-9)
            {
                cuts.push(cut);
            }
        }

        if cuts.is_empty() {
            out.push(wall.clone());
            continue;
        }

        let mut pieces: Vec<Vec<Vec3>> = vec![wall.plane.corners.clone()];
        for (n, d) in &cuts {
            let mut next = Vec::new();
            for piece in pieces {
                match split_polygon(&piece, n, *d) {
                    Some((neg, pos)) => {
                        next.push(neg);
                        next.push(pos);
                    }
                    None => next.push(piece),
                }
            }
            pieces = next;
        }

        // Order along the first cut direction; further cuts break ties.
        pieces.sort_by(|a, b| {
            let ca = polygon_centroid(a);
            let cb = polygon_centroid(b);
            for (n, _) in &cuts {
                let (sa, sb) = (n.dot(&ca), n.dot(&cb));
                if (sa - sb).abs() > 1e-9 {
                    return sa.partial_cmp(&sb).unwrap();
                }
            }
            std::cmp::Ordering::Equal
        });

        if pieces.len() == 1 {
            out.push(wall.clone());
            continue;
        }
        for (k, piece) in pieces.iter().enumerate() {
            match Plane::from_corners_with_covariance(piece, wall.plane.covariance) {
                Ok(plane) => out.push(WallSegment {
                    id: format!("{}#{}", wall.id, k),
                    plane,
                    parent_id: Some(wall.id.clone()),
                    room_ids: wall.room_ids.clone(),
                }),
                // A degenerate sliver cannot happen for sane input; keep the
                // source wall rather than dropping area.
                Err(_) => {
                    out.push(wall.clone());
                    out.retain(|w| w.parent_id.as_deref() != Some(wall.id.as_str()));
                    break;
                }
            }
        }
    }
    BimModel { walls: out }
}

/// True when the plane `n . x = d` passes strictly through the interior of
/// the patch polygon (corners strictly on both sides).
fn crosses_interior(patch: &Plane, n: &Vec3, d: f64) -> bool {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in &patch.corners {
        let s = n.dot(c) - d;
        lo = lo.min(s);
        hi = hi.max(s);
    }
    lo < -SPLIT_INTERIOR_TOL && hi > SPLIT_INTERIOR_TOL
}

fn polygon_centroid(corners: &[Vec3]) -> Vec3 {
    corners.iter().sum::<Vec3>() / corners.len() as f64
}

/// Clips a convex polygon into the `s <= 0` and `s >= 0` sides of a plane,
/// where `s(x) = n . x - d`. Returns `None` when the plane misses the
/// polygon interior.
fn split_polygon(corners: &[Vec3], n: &Vec3, d: f64) -> Option<(Vec<Vec3>, Vec<Vec3>)> {
    let s: Vec<f64> = corners.iter().map(|c| n.dot(c) - d).collect();
    let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo >= -SPLIT_INTERIOR_TOL || hi <= SPLIT_INTERIOR_TOL {
        return None;
    }

    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for i in 0..corners.len() {
        let j = (i + 1) % corners.len();
        let (a, b) = (corners[i], corners[j]);
        let (sa, sb) = (s[i], s[j]);
        if sa <= 0.0 {
            neg.push(a);
        }
        if sa >= 0.0 {
            pos.push(a);
        }
        if sa * sb < 0.0 {
            let t = sa / (sa - sb);
            let x = a + (b - a) * t;
            neg.push(x);
            pos.push(x);
        }
    }
    dedupe_ring(&mut neg);
    dedupe_ring(&mut pos);
    if neg.len() < 3 || pos.len() < 3 {
        return None;
    }
    Some((neg, pos))
}

fn dedupe_ring(corners: &mut Vec<Vec3>) {
    let mut i = 0;
    while corners.len() > 1 && i < corners.len() {
        let j = (i + 1) % corners.len();
        if (corners[i] - corners[j]).norm() < 1e-9 {
            corners.remove(j.max(i).min(corners.len() - 1));
        } else {
            i += 1;
        }
    }
}

// ====== polygon contact ======

fn polygons_touch(a: &Plane, b: &Plane) -> bool {
    for c in &a.corners {
        if point_to_polygon_distance(c, b) <= WALL_CONTACT_TOL {
            return true;
        }
    }
    for c in &b.corners {
        if point_to_polygon_distance(c, a) <= WALL_CONTACT_TOL {
            return true;
        }
    }
    let na = a.corners.len();
    let nb = b.corners.len();
    for i in 0..na {
        let ea = (a.corners[i], a.corners[(i + 1) % na]);
        if segment_crosses_polygon(&ea.0, &ea.1, b) {
            return true;
        }
        for j in 0..nb {
            let eb = (b.corners[j], b.corners[(j + 1) % nb]);
            if segment_segment_distance(&ea.0, &ea.1, &eb.0, &eb.1) <= WALL_CONTACT_TOL {
                return true;
            }
        }
    }
    for j in 0..nb {
        let eb = (b.corners[j], b.corners[(j + 1) % nb]);
        if segment_crosses_polygon(&eb.0, &eb.1, a) {
            return true;
        }
    }
    false
}

/// Distance from a 3D point to a bounded plane patch.
pub(crate) fn point_to_polygon_distance(p: &Vec3, patch: &Plane) -> f64 {
    let signed = patch.normal.dot(p) - patch.offset;
    let proj = p - patch.normal * signed;
    if point_in_polygon(&proj, patch) {
        return signed.abs();
    }
    let n = patch.corners.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let d = point_segment_distance(p, &patch.corners[i], &patch.corners[(i + 1) % n]);
        best = best.min(d);
    }
    best
}

/// Even-odd test in plane coordinates; `p` must already lie on the plane.
pub(crate) fn point_in_polygon(p: &Vec3, patch: &Plane) -> bool {
    let (u, v) = plane_basis(&patch.normal);
    let px = u.dot(p);
    let py = v.dot(p);
    let n = patch.corners.len();
    let mut inside = false;
    for i in 0..n {
        let a = &patch.corners[i];
        let b = &patch.corners[(i + 1) % n];
        let (ax, ay) = (u.dot(a), v.dot(a));
        let (bx, by) = (u.dot(b), v.dot(b));
        if (ay > py) != (by > py) {
            let t = (py - ay) / (by - ay);
            if px < ax + t * (bx - ax) {
                inside = !inside;
            }
        }
    }
    inside
}

/// Deterministic orthonormal in-plane basis for a unit normal.
pub(crate) fn plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let pick = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::new(1.0, 0.0, 0.0)
    } else if n.y.abs() <= n.z.abs() {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(0.0, 0.0, 1.0)
    };
    let u = (pick - n * n.dot(&pick)).normalize();
    let v = n.cross(&u);
    (u, v)
}

fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn segment_crosses_polygon(a: &Vec3, b: &Vec3, patch: &Plane) -> bool {
    let sa = patch.normal.dot(a) - patch.offset;
    let sb = patch.normal.dot(b) - patch.offset;
    if sa * sb > 0.0 || (sa - sb).abs() < 1e-12 {
        return false;
    }
    let t = sa / (sa - sb);
    let x = a + (b - a) * t;
    point_in_polygon(&x, patch)
}

/// Closest distance between two 3D segments (Ericson, Real-Time Collision
/// Detection, 5.1.9).
fn segment_segment_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let (mut s, mut t);
    if a <= 1e-18 && e <= 1e-18 {
        return (p1 - p2).norm();
    }
    if a <= 1e-18 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-18 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            s = if denom != 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

// ====== per-wall frames ======

/// Pose of a wall plane in the model frame: origin at the patch centroid,
/// z along the canonical normal, x along the projection of world-up onto
/// the plane (world-x for near-horizontal planes), y completing a
/// right-handed frame.
pub fn bim_plane_pose(wall: &WallSegment) -> RigidTransform {
    let z = wall.plane.normal;
    let up = Vec3::new(0.0, 0.0, 1.0);
    let reference = if z.dot(&up).abs() > 1.0 - 1e-6 {
        Vec3::new(1.0, 0.0, 0.0)
    } else {
        up
    };
    let x = (reference - z * z.dot(&reference)).normalize();
    let y = z.cross(&x);
    let rot = Matrix3::from_columns(&[x, y, z]);
    RigidTransform::new(
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot)),
        wall.plane.centroid,
    )
}
