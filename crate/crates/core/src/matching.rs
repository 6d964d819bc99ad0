//! Statistical association of observed planes with model walls.
//!
//! A wall is a candidate for an observed plane when it passes three
//! geometric gates (center alignment, corner proximity, area compatibility)
//! and the Mahalanobis distance between the plane feature vectors falls
//! below a chi-square threshold. Candidates are then assigned greedily,
//! best first, one wall per plane and one plane per wall.

use crate::bim::{point_to_polygon_distance, BimModel, WallSegment};
use crate::geometry::Plane;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Chi-square 95th percentile for 4 degrees of freedom; squared-distance gate.
pub const DEFAULT_TAU: f64 = 9.488;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("observation covariance is singular or near-singular (condition > {0:.1e})")]
    SingularCovariance(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MatchConfig {
    /// Gate on the squared Mahalanobis distance.
    pub tau: f64,
    /// Largest allowed distance from any observed corner to the wall polygon, meters.
    pub max_corner_gap: f64,
    /// Largest allowed in-plane distance between projected patch center and wall center, meters.
    pub max_center_gap: f64,
    /// Smallest allowed area ratio (small/large); patches no larger than the
    /// wall always pass this gate, partial views are expected.
    pub min_area_ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            max_corner_gap: 1.0,
            max_center_gap: 1.5,
            min_area_ratio: 0.25,
        }
    }
}

/// Squared Mahalanobis distance between plane feature vectors, weighted by
/// the observation covariance only; the model wall is treated as exact.
pub fn mahalanobis_distance(observed: &Plane, wall: &Plane) -> Result<f64, MatchError> {
    const MAX_CONDITION: f64 = 1e12;
    let cov = observed.covariance;
    let eig = cov.symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min > 0.0) || !min.is_finite() || !max.is_finite() || max / min > MAX_CONDITION {
        return Err(MatchError::SingularCovariance(MAX_CONDITION));
    }
    let diff = observed.feature_vector() - wall.feature_vector();
    let chol = cov
        .cholesky()
        .ok_or(MatchError::SingularCovariance(MAX_CONDITION))?;
    Ok(diff.dot(&chol.solve(&diff)))
}

/// Outcome of the geometric gates, with the measured quantities kept for
/// diagnostics and tie-breaking.
#[derive(Debug, Clone, Copy)]
pub struct GeometricCheck {
    pub pass: bool,
    pub center_gap: f64,
    pub corner_gap: f64,
    /// small/large area ratio, in (0, 1].
    pub area_ratio: f64,
}

pub fn geometric_filter(observed: &Plane, wall: &WallSegment, cfg: &MatchConfig) -> GeometricCheck {
    let plane = &wall.plane;
    let signed = plane.normal.dot(&observed.centroid) - plane.offset;
    let projected = observed.centroid - plane.normal * signed;
    let center_gap = (projected - plane.centroid).norm();

    let corner_gap = observed
        .corners
        .iter()
        .map(|c| point_to_polygon_distance(c, plane))
        .fold(0.0, f64::max);

    let area_ratio = {
        let (a, b) = (observed.area, plane.area);
        a.min(b) / a.max(b)
    };
    let area_ok = area_ratio >= cfg.min_area_ratio || observed.area <= plane.area;

    GeometricCheck {
        pass: center_gap <= cfg.max_center_gap && corner_gap <= cfg.max_corner_gap && area_ok,
        center_gap,
        corner_gap,
        area_ratio,
    }
}

#[derive(Debug, Clone)]
pub struct MatchCandidate {
    pub observed_plane_id: String,
    pub wall_id: String,
    /// Squared Mahalanobis distance.
    pub mahalanobis: f64,
    pub center_gap: f64,
    pub corner_gap: f64,
    pub area_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct MatchPair {
    pub plane: Plane,
    pub wall: WallSegment,
    pub candidate: MatchCandidate,
}

/// Accepted one-to-one assignment for a keyframe.
#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    pub keyframe_id: u64,
    pub pairs: Vec<MatchPair>,
}

impl MatchSet {
    /// Rebuilds the set with each pair's plane replaced through a lookup by
    /// observed plane id; pairs whose id resolves to nothing are dropped.
    /// Used to swap matched planes between coordinate frames.
    pub fn map_observed_planes<F>(&self, lookup: F) -> MatchSet
    where
        F: Fn(&str) -> Option<Plane>,
    {
        MatchSet {
            keyframe_id: self.keyframe_id,
            pairs: self
                .pairs
                .iter()
                .filter_map(|p| {
                    lookup(&p.candidate.observed_plane_id).map(|plane| MatchPair {
                        plane,
                        wall: p.wall.clone(),
                        candidate: p.candidate.clone(),
                    })
                })
                .collect(),
        }
    }
}

/// Matches observed planes (already expressed in the model frame) against
/// the model walls.
///
/// Candidates are ranked by ascending Mahalanobis distance, ties broken by
/// smaller center gap, then wall id, then plane id; greedy selection keeps
/// the assignment one-to-one. Planes with unusable covariance simply yield
/// no candidates; upstream validation rejects them before they get here.
pub fn match_planes(
    observed: &[(String, Plane)],
    model: &BimModel,
    cfg: &MatchConfig,
    keyframe_id: u64,
) -> MatchSet {
    let mut candidates: Vec<MatchCandidate> = Vec::new();
    for (plane_id, plane) in observed {
        for wall in &model.walls {
            let check = geometric_filter(plane, wall, cfg);
            if !check.pass {
                continue;
            }
            let Ok(mahalanobis) = mahalanobis_distance(plane, &wall.plane) else {
                continue;
            };
            if mahalanobis < cfg.tau {
                candidates.push(MatchCandidate {
                    observed_plane_id: plane_id.clone(),
                    wall_id: wall.id.clone(),
                    mahalanobis,
                    center_gap: check.center_gap,
                    corner_gap: check.corner_gap,
                    area_ratio: check.area_ratio,
                });
            }
        }
    }

    candidates.sort_by(|a, b| {
        a.mahalanobis
            .total_cmp(&b.mahalanobis)
            .then(a.center_gap.total_cmp(&b.center_gap))
            .then_with(|| a.wall_id.cmp(&b.wall_id))
            .then_with(|| a.observed_plane_id.cmp(&b.observed_plane_id))
    });

    let mut used_planes = std::collections::BTreeSet::new();
    let mut used_walls = std::collections::BTreeSet::new();
    let mut pairs = Vec::new();
    for cand in candidates {
        if used_planes.contains(&cand.observed_plane_id) || used_walls.contains(&cand.wall_id) {
            continue;
        }
        used_planes.insert(cand.observed_plane_id.clone());
        used_walls.insert(cand.wall_id.clone());
        let plane = observed
            .iter()
            .find(|(id, _)| *id == cand.observed_plane_id)
            .map(|(_, p)| p.clone())
            .expect("candidate refers to an input plane");
        let wall = model
            .wall_by_id(&cand.wall_id)
            .expect("candidate refers to a model wall")
            .clone();
        pairs.push(MatchPair {
            plane,
            wall,
            candidate: cand,
        });
    }

    MatchSet { keyframe_id, pairs }
}
