//! Shared geometric types: rotations, rigid transforms, the pinhole camera
//! with radial-tangential distortion, polar coordinates and the small 3×3
//! matrix helpers used by the conditioning metric.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
/// Row-major 3×3 matrix. Normal matrices store one unit normal per row.
pub type Mat3 = Matrix3<f64>;

/// Nearest proper rotation (Frobenius sense) to an arbitrary 3×3 matrix.
///
/// Uses the SVD `m = U S Vᵀ` and returns `U diag(1, 1, det(U Vᵀ)) Vᵀ`.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    let correction = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d }));
    u * correction * v_t
}

/// A proper 3D rotation.
///
/// Euler views use the intrinsic Z-Y-X convention: `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
/// Quaternions are `(w, x, y, z)` with `w ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Rotation3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Rotation3::identity())
    }

    /// Builds a rotation from any matrix, re-orthonormalizing it first.
    pub fn from_matrix(m: &Mat3) -> Self {
        Rotation(Rotation3::from_matrix_unchecked(nearest_rotation(m)))
    }

    /// Wraps a matrix that is already orthonormal. The caller guarantees it.
    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(Rotation3::from_matrix_unchecked(m))
    }

    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Rotation(Rotation3::from_euler_angles(roll, pitch, yaw))
    }

    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Rotation(q.to_rotation_matrix())
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let norm = axis.norm();
        if norm == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let unit = nalgebra::Unit::new_unchecked(axis / norm);
        Rotation(Rotation3::from_axis_angle(&unit, angle))
    }

    /// Exponential map of a rotation vector.
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        Rotation(Rotation3::new(*v))
    }

    pub fn matrix(&self) -> &Mat3 {
        self.0.matrix()
    }

    /// `(roll, pitch, yaw)` in radians.
    pub fn euler(&self) -> (f64, f64, f64) {
        self.0.euler_angles()
    }

    /// `[w, x, y, z]`, hemisphere fixed by `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.0);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn rotation_vector(&self) -> Vec3 {
        self.0.scaled_axis()
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic angle between two rotations, radians in `[0, π]`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.0.matrix().transpose() * other.0.matrix();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        // acos loses precision near zero; use the antisymmetric part there.
        let s = 0.5
            * Vec3::new(
                rel[(2, 1)] - rel[(1, 2)],
                rel[(0, 2)] - rel[(2, 0)],
                rel[(1, 0)] - rel[(0, 1)],
            )
            .norm();
        s.atan2(c)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

/// Rigid transform with the convention `p_lidar = R · p_camera + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -r_inv.apply(&self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }
}

/// Five-parameter radial-tangential (Brown-Conrady) distortion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distortion {
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.k3 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    /// Maps undistorted normalized coordinates to distorted ones.
    pub fn distort(&self, p: &Vec2) -> Vec2 {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        Vec2::new(x * radial + dx, y * radial + dy)
    }

    /// Fixed-point inversion of [`Distortion::distort`].
    pub fn undistort(&self, distorted: &Vec2, max_iters: usize, tol: f64) -> Result<Vec2> {
        if self.is_zero() {
            return Ok(*distorted);
        }
        let mut p = *distorted;
        for _ in 0..max_iters {
            let (x, y) = (p.x, p.y);
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            if radial.abs() < 1e-12 {
                return Err(Error::DistortionInversionFailed);
            }
            let next = Vec2::new((distorted.x - dx) / radial, (distorted.y - dy) / radial);
            let step = (next - p).norm();
            p = next;
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::DistortionInversionFailed);
            }
            if step < tol {
                return Ok(p);
            }
        }
        // The last update may still be inside tolerance of the forward model.
        if (self.distort(&p) - distorted).norm() < tol {
            Ok(p)
        } else {
            Err(Error::DistortionInversionFailed)
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub distortion: Distortion,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            distortion: Distortion::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.fx, self.fy, self.cx, self.cy];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("intrinsics must be finite".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn normalized_to_pixel(&self, p: &Vec2) -> Vec2 {
        Vec2::new(self.fx * p.x + self.cx, self.fy * p.y + self.cy)
    }

    pub fn pixel_to_distorted_normalized(&self, px: &Vec2) -> Vec2 {
        Vec2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    /// Projects a camera-frame point; `None` when `z ≤ 0`.
    pub fn project(&self, p_cam: &Vec3) -> Option<Vec2> {
        if p_cam.z <= 0.0 {
            return None;
        }
        let n = Vec2::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z);
        Some(self.normalized_to_pixel(&self.distortion.distort(&n)))
    }
}

/// Projects a lidar-frame point into the image.
///
/// `t` maps camera to lidar, so the point is first taken through `t⁻¹`.
/// Returns `None` when the point is behind the camera.
pub fn project_to_pixel(t: &RigidTransform, k: &CameraIntrinsics, p_lidar: &Vec3) -> Option<Vec2> {
    let p_cam = t.inverse().apply(p_lidar);
    k.project(&p_cam)
}

/// Range, azimuth and elevation of a point about the sensor origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polar {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

pub fn to_polar(p: &Vec3) -> Result<Polar> {
    let range = p.norm();
    if range == 0.0 || !range.is_finite() {
        return Err(Error::DegeneratePoint);
    }
    Ok(Polar {
        range,
        azimuth: p.y.atan2(p.x),
        elevation: (p.z / range).clamp(-1.0, 1.0).asin(),
    })
}

pub fn from_polar(range: f64, azimuth: f64, elevation: f64) -> Result<Vec3> {
    if range <= 0.0 || range.is_nan() {
        return Err(Error::NonPositiveRange(range));
    }
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Ok(Vec3::new(range * ce * ca, range * ce * sa, range * se))
}

pub fn frobenius_norm(m: &Mat3) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Inverse via the adjugate. Singular when `|det| < 1e-12 · ‖m‖_F³`.
pub fn invert3(m: &Mat3) -> Result<Mat3> {
    let f = frobenius_norm(m);
    let det = m.determinant();
    if !det.is_finite() || f == 0.0 || det.abs() < 1e-12 * f * f * f {
        return Err(Error::Singular);
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| {
        m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]
    };
    #[rustfmt::skip]
    let adj = Mat3::new(
        c(1, 1, 2, 2), -c(0, 1, 2, 2),  c(0, 1, 1, 2),
       -c(1, 0, 2, 2),  c(0, 0, 2, 2), -c(0, 0, 1, 2),
        c(1, 0, 2, 1), -c(0, 0, 2, 1),  c(0, 0, 1, 1),
    );
    Ok(adj / det)
}

/// Builds a normal matrix with one vector per row.
pub fn rows_to_mat3(rows: [Vec3; 3]) -> Mat3 {
    Mat3::from_rows(&[
        rows[0].transpose(),
        rows[1].transpose(),
        rows[2].transpose(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    #[test]
    fn polar_examples() {
        let p = to_polar(&Vec3::new(2.0, 0.0, 0.0)).unwrap();
        assert_eq!((p.range, p.azimuth, p.elevation), (2.0, 0.0, 0.0));

        let p = to_polar(&Vec3::new(0.0, 0.0, 3.0)).unwrap();
        assert_eq!((p.range, p.azimuth), (3.0, 0.0));
        assert_relative_eq!(p.elevation, FRAC_PI_2);

        let p = to_polar(&Vec3::new(1.0, 1.0, SQRT_2)).unwrap();
        assert_relative_eq!(p.range, 2.0, epsilon = 1e-15);
        assert_relative_eq!(p.azimuth, FRAC_PI_4, epsilon = 1e-15);
        assert_relative_eq!(p.elevation, FRAC_PI_4, epsilon = 1e-15);

        assert!(matches!(
            to_polar(&Vec3::zeros()),
            Err(Error::DegeneratePoint)
        ));
    }

    #[test]
    fn from_polar_examples() {
        assert_eq!(from_polar(2.0, 0.0, 0.0).unwrap(), Vec3::new(2.0, 0.0, 0.0));
        let p = from_polar(1.0, FRAC_PI_2, 0.0).unwrap();
        assert_relative_eq!(p, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert!(from_polar(0.0, 0.0, 0.0).is_err());
        assert!(from_polar(-1.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn polar_round_trip(range in 0.1f64..100.0, az in -3.1f64..3.1, el in -1.5f64..1.5) {
            let p = from_polar(range, az, el).unwrap();
            let q = to_polar(&p).unwrap();
            let back = from_polar(q.range, q.azimuth, q.elevation).unwrap();
            prop_assert!((back - p).norm() <= 1e-12 * p.norm());
        }

        #[test]
        fn euler_and_quaternion_views_agree(roll in -3.1f64..3.1, pitch in -1.5f64..1.5, yaw in -3.1f64..3.1) {
            let r = Rotation::from_euler(roll, pitch, yaw);
            let (a, b, c) = r.euler();
            let from_e = Rotation::from_euler(a, b, c);
            let [w, x, y, z] = r.quaternion();
            let from_q = Rotation::from_quaternion(w, x, y, z);
            prop_assert!((from_e.matrix() - r.matrix()).amax() < 1e-9);
            prop_assert!((from_q.matrix() - r.matrix()).amax() < 1e-9);
        }

        #[test]
        fn from_matrix_is_orthonormal(vals in proptest::array::uniform9(-1.0f64..1.0)) {
            let m = Mat3::from_row_slice(&vals);
            prop_assume!(m.determinant().abs() > 1e-3);
            let r = Rotation::from_matrix(&m);
            let rtr = r.matrix().transpose() * r.matrix();
            prop_assert!((rtr - Mat3::identity()).amax() < 1e-9);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0);
        let t = RigidTransform::identity();
        assert_eq!(
            project_to_pixel(&t, &k, &Vec3::new(0.0, 0.0, 2.0)),
            Some(Vec2::new(640.0, 360.0))
        );
        assert_eq!(
            project_to_pixel(&t, &k, &Vec3::new(0.1, 0.0, 2.0)),
            Some(Vec2::new(690.0, 360.0))
        );
        assert_eq!(project_to_pixel(&t, &k, &Vec3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(project_to_pixel(&t, &k, &Vec3::new(0.3, 0.2, 0.0)), None);
    }

    #[test]
    fn projection_matches_pinhole_formula() {
        let k = CameraIntrinsics::new(812.5, 790.25, 301.0, 255.5);
        let t = RigidTransform::identity();
        for p in [Vec3::new(0.3, -0.7, 2.5), Vec3::new(-1.1, 0.2, 7.0)] {
            let px = project_to_pixel(&t, &k, &p).unwrap();
            assert_eq!(px.x, k.fx * (p.x / p.z) + k.cx);
            assert_eq!(px.y, k.fy * (p.y / p.z) + k.cy);
        }
    }

    #[test]
    fn frobenius_examples() {
        assert_relative_eq!(frobenius_norm(&Mat3::identity()), 3f64.sqrt());
        assert_eq!(frobenius_norm(&Mat3::zeros()), 0.0);
        assert_relative_eq!(
            frobenius_norm(&Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0))),
            6f64.sqrt()
        );
    }

    #[test]
    fn invert3_examples() {
        assert_eq!(invert3(&Mat3::identity()).unwrap(), Mat3::identity());
        let inv = invert3(&Mat3::from_diagonal(&Vec3::new(2.0, 4.0, 5.0))).unwrap();
        assert_relative_eq!(
            inv,
            Mat3::from_diagonal(&Vec3::new(0.5, 0.25, 0.2)),
            epsilon = 1e-15
        );
        let m = Mat3::new(1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 0.0, 1.0, 4.0);
        assert!(matches!(invert3(&m), Err(Error::Singular)));
        assert!(invert3(&Mat3::zeros()).is_err());
    }

    proptest! {
        #[test]
        fn invert3_is_inverse(vals in proptest::array::uniform9(-5.0f64..5.0)) {
            let m = Mat3::from_row_slice(&vals);
            prop_assume!(m.determinant().abs() > 1e-2);
            let inv = invert3(&m).unwrap();
            prop_assert!((m * inv - Mat3::identity()).amax() < 1e-9);
        }
    }

    #[test]
    fn rigid_inverse_and_compose() {
        let t = RigidTransform::new(
            Rotation::from_euler(0.1, -0.4, 1.2),
            Vec3::new(0.5, -1.0, 2.0),
        );
        let p = Vec3::new(0.3, 0.2, -0.9);
        assert_relative_eq!(t.inverse().apply(&t.apply(&p)), p, epsilon = 1e-12);
        let id = t.compose(&t.inverse());
        assert_relative_eq!(id.translation, Vec3::zeros(), epsilon = 1e-12);
        assert!(id.rotation.angle_to(&Rotation::identity()) < 1e-12);
    }

    #[test]
    fn angle_to_is_geodesic() {
        let a = Rotation::from_axis_angle(&Vec3::new(1.0, 2.0, -0.5), 0.3);
        let b = Rotation::from_axis_angle(&Vec3::new(1.0, 2.0, -0.5), 0.3 + 1e-9);
        assert_relative_eq!(a.angle_to(&b), 1e-9, epsilon = 1e-15);
        assert_relative_eq!(Rotation::identity().angle_to(&a), 0.3, epsilon = 1e-14);
    }

    #[test]
    fn distortion_round_trip() {
        let d = Distortion {
            k1: -0.1,
            k2: 0.02,
            k3: 0.0,
            p1: 1e-3,
            p2: -5e-4,
        };
        for p in [
            Vec2::new(0.3, -0.2),
            Vec2::new(-0.5, 0.4),
            Vec2::new(0.0, 0.0),
        ] {
            let back = d.undistort(&d.distort(&p), 20, 1e-10).unwrap();
            assert!((back - p).norm() < 1e-8);
        }
    }
}
