//! Rigid transforms and bounded plane patches.
//!
//! Planes are stored in Hessian normal form `normal . x = offset` together
//! with the polygon that bounds the observed patch. Every constructor and
//! every transform re-canonicalizes the sign of `(normal, offset)` so that
//! two observations of the same physical surface always compare equal
//! regardless of winding or detection side.

use nalgebra::{Isometry3, Matrix4, Translation3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Corners further than this from their common plane reject the polygon.
pub const COPLANARITY_TOL: f64 = 1e-6;

/// Default per-component standard deviation for the normal block of a plane
/// covariance when the producer does not supply one.
pub const DEFAULT_NORMAL_SIGMA: f64 = 0.05;

/// Default standard deviation for the offset entry of a plane covariance.
pub const DEFAULT_OFFSET_SIGMA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("need at least 3 corners to define a plane, got {0}")]
    TooFewCorners(usize),
    #[error("corners are collinear or coincident; no unique plane")]
    CollinearInput,
    #[error("corners deviate from a common plane by {max_deviation} m")]
    NonCoplanarInput { max_deviation: f64 },
    #[error("covariance is not symmetric positive definite")]
    InvalidCovariance,
}

// ====== rigid transforms ======

/// A proper rigid motion, stored as unit quaternion plus translation.
///
/// `compose` renormalizes the quaternion so long chains of keyframe updates
/// cannot drift away from orthonormality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Builds from a rotation vector (axis * angle) and a translation.
    pub fn from_rotation_vector(rotation: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::from_scaled_axis(rotation),
            translation,
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// `self.compose(other)` applies `other` first: (self o other)(x) = self(other(x)).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let q = self.rotation.into_inner() * other.rotation.into_inner();
        RigidTransform {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv_rot = self.rotation.inverse();
        RigidTransform {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Geodesic rotation angle to another transform, radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Wire format: translation `[x, y, z]` plus quaternion `[x, y, z, w]`.
#[derive(Serialize, Deserialize)]
struct RigidTransformWire {
    translation: [f64; 3],
    rotation: [f64; 4],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let q = self.rotation.into_inner();
        RigidTransformWire {
            translation: [self.translation.x, self.translation.y, self.translation.z],
            rotation: [q.i, q.j, q.k, q.w],
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let wire = RigidTransformWire::deserialize(de)?;
        let [x, y, z, w] = wire.rotation;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(serde::de::Error::custom("rotation quaternion is not unit length"));
        }
        Ok(RigidTransform {
            rotation: UnitQuaternion::new_normalize(q),
            translation: Vec3::new(
                wire.translation[0],
                wire.translation[1],
                wire.translation[2],
            ),
        })
    }
}

// ====== planes ======

/// A bounded plane patch in Hessian normal form.
///
/// Canonical sign: `offset >= 0`; when the patch passes through the origin
/// the normal with lexicographically positive components is kept. The
/// covariance is over the feature vector `[n_x, n_y, n_z, offset]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
    pub centroid: Vec3,
    pub corners: Vec<Vec3>,
    pub area: f64,
    pub covariance: Matrix4<f64>,
}

impl Plane {
    /// Fits a plane to an ordered polygon with the default covariance.
    pub fn from_corners(corners: &[Vec3]) -> Result<Plane, GeometryError> {
        Self::from_corners_with_covariance(corners, default_covariance())
    }

    pub fn from_corners_with_covariance(
        corners: &[Vec3],
        covariance: Matrix4<f64>,
    ) -> Result<Plane, GeometryError> {
        if corners.len() < 3 {
            return Err(GeometryError::TooFewCorners(corners.len()));
        }
        validate_covariance(&covariance)?;

        // Newell's method: robust polygon normal for any winding.
        let mut normal = Vec3::zeros();
        for i in 0..corners.len() {
            let a = corners[i];
            let b = corners[(i + 1) % corners.len()];
            normal.x += (a.y - b.y) * (a.z + b.z);
            normal.y += (a.z - b.z) * (a.x + b.x);
            normal.z += (a.x - b.x) * (a.y + b.y);
        }
        let norm = normal.norm();
        if norm < 1e-12 {
            return Err(GeometryError::CollinearInput);
        }
        let normal = normal / norm;

        let centroid = corners.iter().sum::<Vec3>() / corners.len() as f64;
        let max_deviation = corners
            .iter()
            .map(|c| (normal.dot(&(c - centroid))).abs())
            .fold(0.0, f64::max);
        if max_deviation > COPLANARITY_TOL {
            return Err(GeometryError::NonCoplanarInput { max_deviation });
        }

        let area = polygon_area(corners, &centroid);
        if area < 1e-12 {
            return Err(GeometryError::CollinearInput);
        }

        let offset = normal.dot(&centroid);
        let mut plane = Plane {
            normal,
            offset,
            centroid,
            corners: corners.to_vec(),
            area,
            covariance,
        };
        plane.canonicalize();
        Ok(plane)
    }

    /// Flips `(normal, offset)` to the canonical orientation. Idempotent.
    pub fn canonicalize(&mut self) {
        let flip = if self.offset < 0.0 {
            true
        } else if self.offset == 0.0 {
            !lexicographically_positive(&self.normal)
        } else {
            false
        };
        if flip {
            self.normal = -self.normal;
            self.offset = -self.offset;
        }
    }

    /// `[n_x, n_y, n_z, offset]`, the vector the matcher gates on.
    pub fn feature_vector(&self) -> Vector4<f64> {
        Vector4::new(self.normal.x, self.normal.y, self.normal.z, self.offset)
    }

    /// Maps the patch through a rigid transform and re-canonicalizes.
    ///
    /// The covariance transforms by congruence with blockdiag(R, 1); a
    /// canonical sign flip leaves it unchanged because the whole feature
    /// vector negates.
    pub fn transformed(&self, t: &RigidTransform) -> Plane {
        let corners: Vec<Vec3> = self.corners.iter().map(|c| t.transform_point(c)).collect();
        let normal = t.transform_vector(&self.normal);
        let centroid = t.transform_point(&self.centroid);
        let offset = normal.dot(&centroid);

        let r = t.rotation().to_rotation_matrix();
        let mut jac = Matrix4::identity();
        jac.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
        let covariance = jac * self.covariance * jac.transpose();

        let mut plane = Plane {
            normal,
            offset,
            centroid,
            corners,
            area: self.area,
            covariance,
        };
        plane.canonicalize();
        plane
    }

    /// Checks the stored fields against the plane invariants; used when
    /// ingesting planes from external files.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.corners.len() < 3 {
            return Err(GeometryError::TooFewCorners(self.corners.len()));
        }
        if (self.normal.norm() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::CollinearInput);
        }
        let max_deviation = self
            .corners
            .iter()
            .map(|c| (self.normal.dot(c) - self.offset).abs())
            .fold(0.0, f64::max);
        if max_deviation > COPLANARITY_TOL {
            return Err(GeometryError::NonCoplanarInput { max_deviation });
        }
        validate_covariance(&self.covariance)?;
        Ok(())
    }
}

fn lexicographically_positive(v: &Vec3) -> bool {
    if v.x != 0.0 {
        return v.x > 0.0;
    }
    if v.y != 0.0 {
        return v.y > 0.0;
    }
    v.z > 0.0
}

/// Fan-triangulated polygon area about the centroid; exact for convex input.
pub(crate) fn polygon_area(corners: &[Vec3], centroid: &Vec3) -> f64 {
    let mut area = 0.0;
    for i in 0..corners.len() {
        let a = corners[i] - centroid;
        let b = corners[(i + 1) % corners.len()] - centroid;
        area += 0.5 * a.cross(&b).norm();
    }
    area
}

pub fn default_covariance() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(
        DEFAULT_NORMAL_SIGMA * DEFAULT_NORMAL_SIGMA,
        DEFAULT_NORMAL_SIGMA * DEFAULT_NORMAL_SIGMA,
        DEFAULT_NORMAL_SIGMA * DEFAULT_NORMAL_SIGMA,
        DEFAULT_OFFSET_SIGMA * DEFAULT_OFFSET_SIGMA,
    ))
}

fn validate_covariance(cov: &Matrix4<f64>) -> Result<(), GeometryError> {
    for i in 0..4 {
        for j in (i + 1)..4 {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 {
                return Err(GeometryError::InvalidCovariance);
            }
        }
    }
    let eigenvalues = cov.symmetric_eigenvalues();
    if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(GeometryError::InvalidCovariance);
    }
    Ok(())
}

// ====== plane-to-plane error measures ======

/// Acute angle between two plane normals, radians in `[0, pi/2]`.
///
/// The absolute dot product makes the measure independent of which side of
/// the surface either plane was detected from.
pub fn angular_deviation(p: &Plane, q: &Plane) -> f64 {
    p.normal.dot(&q.normal).abs().clamp(0.0, 1.0).acos()
}

/// Distance from the observed patch centroid to the reference plane, meters.
pub fn distance_error(observed: &Plane, reference: &Plane) -> f64 {
    (reference.normal.dot(&observed.centroid) - reference.offset).abs()
}
