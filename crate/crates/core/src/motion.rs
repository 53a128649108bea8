//! Per-slice rigid motion.
//!
//! A slice transform `t` acts about the slice center: a slice-local point `l`
//! (millimetres, centered on the pixel lattice, z along the slice normal) lands at
//!
//! ```text
//! w = c + t.translation + t.rotation · R_n · l
//! ```
//!
//! where `(R_n, c)` is the slice's nominal pose. The identity transform is the
//! nominal acquisition geometry. Motion is optimized as an increment
//! [`MotionParams`] about a base transform, see [`exp_update`].

use nalgebra::{Matrix3, Matrix3x6, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Self {
        Self {
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])),
            translation: Vector3::from(translation),
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Six-dof increment: axis-angle rotation (radians) and translation (mm).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub axis_angle: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl MotionParams {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            axis_angle: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.axis_angle[0],
            self.axis_angle[1],
            self.axis_angle[2],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }
}

/// Axis-angle vector to unit quaternion.
pub fn so3_exp(axis_angle: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = axis_angle.norm();
    if theta < 1e-12 {
        // Second-order accurate near zero.
        let h = 0.5 * axis_angle;
        return UnitQuaternion::from_quaternion(Quaternion::new(1.0 - h.norm_squared() * 0.5, h[0], h[1], h[2]));
    }
    UnitQuaternion::from_axis_angle(&Unit::new_unchecked(axis_angle / theta), theta)
}

/// Unit quaternion to axis-angle vector with angle in [0, π].
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut c = *q.quaternion();
    if c.w < 0.0 {
        c = -c;
    }
    let v = c.vector();
    let s = v.norm();
    if s < 1e-12 {
        return 2.0 * v.into_owned();
    }
    let theta = 2.0 * s.atan2(c.w);
    v * (theta / s)
}

/// Rotation angle of `q` in radians, in [0, π].
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    let c = q.quaternion();
    2.0 * c.vector().norm().atan2(c.w.abs())
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Left Jacobian of SO(3): exp(φ + δ) ≈ exp(J_l(φ) δ) exp(φ).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + a * k + b * k * k
}

/// `(exp(axis_angle) · base.rotation, base.translation + translation)`.
pub fn exp_update(base: &RigidTransform, params: &MotionParams) -> Result<RigidTransform> {
    if !params.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::validation("motion.params", "non-finite motion increment"));
    }
    if params.axis_angle.norm() > std::f64::consts::PI {
        return Err(Error::validation("motion.params.axis_angle", "rotation increment exceeds π"));
    }
    Ok(RigidTransform {
        rotation: so3_exp(&params.axis_angle) * base.rotation,
        translation: base.translation + params.translation,
    })
}

/// Geometry of one acquired slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGeometry {
    /// Pixel spacing along columns (local x) and rows (local y), mm.
    pub in_plane_spacing: [f64; 2],
    pub rows: usize,
    pub cols: usize,
    pub slice_thickness: f64,
    pub slice_gap: f64,
    /// Maps slice-local coordinates to the atlas frame; its translation is the slice center.
    pub nominal_pose: RigidTransform,
}

impl SliceGeometry {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("in_plane_spacing[0]", self.in_plane_spacing[0]),
            ("in_plane_spacing[1]", self.in_plane_spacing[1]),
            ("slice_thickness", self.slice_thickness),
            ("slice_gap", self.slice_gap),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("geometry.{name}"), format!("must be > 0, got {v}")));
            }
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::validation("geometry.rows", "rows and cols must be >= 1"));
        }
        if !self.nominal_pose.is_finite() {
            return Err(Error::validation("geometry.nominal_pose", "must be finite"));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Slice-local position of a pixel center plus a local offset.
    #[inline]
    pub fn local_point(&self, row: usize, col: usize, offset: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            (col as f64 - 0.5 * (self.cols as f64 - 1.0)) * self.in_plane_spacing[0] + offset[0],
            (row as f64 - 0.5 * (self.rows as f64 - 1.0)) * self.in_plane_spacing[1] + offset[1],
            offset[2],
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        self.nominal_pose.translation
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.nominal_pose.rotation * Vector3::z()
    }

    /// Orientation taking slice-local vectors to the world under motion `t`.
    #[inline]
    pub fn world_rotation(&self, t: &RigidTransform) -> Matrix3<f64> {
        (t.rotation * self.nominal_pose.rotation).to_rotation_matrix().into_inner()
    }

    /// World position of a slice-local point under motion `t`.
    #[inline]
    pub fn local_to_world(&self, t: &RigidTransform, local: &Vector3<f64>) -> Vector3<f64> {
        self.center() + t.translation + t.rotation * (self.nominal_pose.rotation * local)
    }

    pub fn world_to_local(&self, t: &RigidTransform, w: &Vector3<f64>) -> Vector3<f64> {
        self.nominal_pose.rotation.inverse() * (t.rotation.inverse() * (w - self.center() - t.translation))
    }

    /// The absolute pose (slice-local → world) under motion `t`.
    pub fn absolute_pose(&self, t: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: t.rotation * self.nominal_pose.rotation,
            translation: self.center() + t.translation,
        }
    }
}

/// Pixel center offset by `depth_offset` along the normal, mapped to the world.
pub fn map_slice_to_world(geom: &SliceGeometry, t: &RigidTransform, pixel: (usize, usize), depth_offset: f64) -> Vector3<f64> {
    let local = geom.local_point(pixel.0, pixel.1, &Vector3::new(0.0, 0.0, depth_offset));
    geom.local_to_world(t, &local)
}

/// ∂w/∂(axis_angle, translation) for the world point of a local point under
/// `exp_update(base, params)`.
pub fn transform_jacobian_at(
    geom: &SliceGeometry,
    base: &RigidTransform,
    params: &MotionParams,
    local: &Vector3<f64>,
) -> Matrix3x6<f64> {
    let rotated = so3_exp(&params.axis_angle) * (base.rotation * (geom.nominal_pose.rotation * local));
    let rot_block = -skew(&rotated) * so3_left_jacobian(&params.axis_angle);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_block);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

/// Jacobian at zero increment about `t`.
pub fn transform_jacobian(geom: &SliceGeometry, t: &RigidTransform, pixel: (usize, usize), depth_offset: f64) -> Matrix3x6<f64> {
    let local = geom.local_point(pixel.0, pixel.1, &Vector3::new(0.0, 0.0, depth_offset));
    transform_jacobian_at(geom, t, &MotionParams::zero(), &local)
}

/// Rotation angle of `a·b⁻¹` in degrees and translation distance in mm.
pub fn geodesic_errors(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let rel = a.rotation * b.rotation.inverse();
    (rotation_angle(&rel).to_degrees(), (a.translation - b.translation).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn geom() -> SliceGeometry {
        SliceGeometry {
            in_plane_spacing: [1.0, 1.0],
            rows: 5,
            cols: 7,
            slice_thickness: 3.0,
            slice_gap: 3.0,
            nominal_pose: RigidTransform::new(
                UnitQuaternion::from_euler_angles(0.2, 0.4, -0.3),
                Vector3::new(4.0, -2.0, 7.0),
            ),
        }
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (prop::array::uniform3(-1.0f64..1.0), prop::array::uniform3(-20.0f64..20.0)).prop_map(|(aa, t)| {
            RigidTransform::new(so3_exp(&Vector3::from(aa)), Vector3::from(t))
        })
    }

    fn arb_params() -> impl Strategy<Value = MotionParams> {
        (prop::array::uniform3(-0.8f64..0.8), prop::array::uniform3(-5.0f64..5.0))
            .prop_map(|(aa, t)| MotionParams { axis_angle: Vector3::from(aa), translation: Vector3::from(t) })
    }

    #[test]
    fn zero_params_leave_base() {
        let base = RigidTransform::new(so3_exp(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0));
        let out = exp_update(&base, &MotionParams::zero()).unwrap();
        assert_eq!(out.translation, base.translation);
        assert!(rotation_angle(&(out.rotation * base.rotation.inverse())) < 1e-15);
    }

    #[test]
    fn half_turn_about_z() {
        let t = exp_update(
            &RigidTransform::identity(),
            &MotionParams { axis_angle: Vector3::new(0.0, 0.0, PI), translation: Vector3::zeros() },
        )
        .unwrap();
        let p = t.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_increment() {
        let p = MotionParams { axis_angle: Vector3::new(f64::NAN, 0.0, 0.0), translation: Vector3::zeros() };
        assert!(exp_update(&RigidTransform::identity(), &p).is_err());
    }

    #[test]
    fn pixel_mapping_basics() {
        let g = SliceGeometry {
            in_plane_spacing: [1.0, 1.0],
            rows: 5,
            cols: 5,
            slice_thickness: 2.0,
            slice_gap: 2.0,
            nominal_pose: RigidTransform::new(UnitQuaternion::identity(), Vector3::new(1.0, 2.0, 3.0)),
        };
        let id = RigidTransform::identity();
        assert_eq!(map_slice_to_world(&g, &id, (2, 2), 0.0), Vector3::new(1.0, 2.0, 3.0));
        let mut g0 = g;
        g0.nominal_pose = RigidTransform::identity();
        assert_eq!(map_slice_to_world(&g0, &id, (2, 3), 0.0), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn jacobian_structure_at_zero() {
        let g = geom();
        let t = RigidTransform::new(so3_exp(&Vector3::new(0.3, -0.1, 0.2)), Vector3::new(1.0, 0.0, -1.0));
        let j = transform_jacobian(&g, &t, (1, 6), 0.7);
        assert_eq!(j.fixed_view::<3, 3>(0, 3).into_owned(), Matrix3::identity());
        let local = g.local_point(1, 6, &Vector3::new(0.0, 0.0, 0.7));
        let rotated = t.rotation * (g.nominal_pose.rotation * local);
        assert!((j.fixed_view::<3, 3>(0, 0) + skew(&rotated)).norm() < 1e-14);
        // The slice center sits on the rotation center.
        let mut g_odd = g;
        g_odd.rows = 5;
        g_odd.cols = 5;
        let jc = transform_jacobian(&g_odd, &t, (2, 2), 0.0);
        assert!(jc.fixed_view::<3, 3>(0, 0).norm() < 1e-14);
    }

    #[test]
    fn ten_degree_error() {
        let a = RigidTransform::new(so3_exp(&Vector3::new(0.0, 0.0, 10f64.to_radians())), Vector3::new(1.0, 2.0, 3.0));
        let b = RigidTransform::new(UnitQuaternion::identity(), Vector3::new(1.0, 2.0, 3.0));
        let (r, t) = geodesic_errors(&a, &b);
        assert!((r - 10.0).abs() < 1e-9);
        assert_eq!(t, 0.0);
        assert_eq!(geodesic_errors(&a, &a), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn inverse_increment_recovers_base(base in arb_transform(), p in arb_params()) {
            let moved = exp_update(&base, &p).unwrap();
            let back = exp_update(&moved, &MotionParams { axis_angle: -p.axis_angle, translation: -p.translation }).unwrap();
            let (r, t) = geodesic_errors(&back, &base);
            prop_assert!(r.to_radians() < 1e-9 && t < 1e-9);
        }

        #[test]
        fn group_laws(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            let (r, t) = geodesic_errors(&lhs, &rhs);
            prop_assert!(r.to_radians() < 1e-9 && t < 1e-9);
            let (r, t) = geodesic_errors(&a.compose(&a.inverse()), &RigidTransform::identity());
            prop_assert!(r.to_radians() < 1e-9 && t < 1e-9);
        }

        #[test]
        fn geodesic_errors_symmetric(a in arb_transform(), b in arb_transform()) {
            let (r1, t1) = geodesic_errors(&a, &b);
            let (r2, t2) = geodesic_errors(&b, &a);
            prop_assert!((r1 - r2).abs() < 1e-9 && (t1 - t2).abs() < 1e-12);
        }

        #[test]
        fn world_slice_round_trip(t in arb_transform(), l in prop::array::uniform3(-50.0f64..50.0)) {
            let g = geom();
            let local = Vector3::from(l);
            let back = g.world_to_local(&t, &g.local_to_world(&t, &local));
            prop_assert!((back - local).norm() < 1e-9);
        }

        #[test]
        fn log_inverts_exp(aa in prop::array::uniform3(-1.5f64..1.5)) {
            let v = Vector3::from(aa);
            prop_assert!((so3_log(&so3_exp(&v)) - v).norm() < 1e-10);
        }

        #[test]
        fn jacobian_matches_central_differences(base in arb_transform(), p in arb_params(), l in prop::array::uniform3(-30.0f64..30.0)) {
            let g = geom();
            let local = Vector3::from(l);
            let analytic = transform_jacobian_at(&g, &base, &p, &local);
            let f = |v: [f64; 6]| g.local_to_world(&exp_update(&base, &MotionParams::from_array(v)).unwrap(), &local);
            let h = 1e-6;
            for k in 0..6 {
                let mut plus = p.to_array();
                let mut minus = p.to_array();
                plus[k] += h;
                minus[k] -= h;
                let fd = (f(plus) - f(minus)) / (2.0 * h);
                let col = analytic.column(k);
                let err = (fd - col).norm();
                prop_assert!(err <= 1e-5 * col.norm().max(1.0), "k={k} fd={fd:?} analytic={col:?}");
            }
        }

        #[test]
        fn exp_update_locally_linear(p in arb_params()) {
            let base = RigidTransform::identity();
            let eps = 1e-4;
            let small = MotionParams { axis_angle: p.axis_angle * eps, translation: p.translation * eps };
            let moved = exp_update(&base, &small).unwrap();
            let (r, t) = geodesic_errors(&moved, &base);
            prop_assert!((r.to_radians() - eps * p.axis_angle.norm()).abs() <= 1e-9);
            prop_assert!((t - eps * p.translation.norm()).abs() <= 1e-12);
        }
    }
}
