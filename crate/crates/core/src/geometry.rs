//! Rigid transforms and the primitive shapes used for obstacles, arm links
//! and hand parts.
//!
//! Rotations are kept as 3×3 matrices. Quaternions only appear at the
//! serialization boundary (`PoseSpec`), where they are stored `w, x, y, z`.

use std::cmp::Ordering;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("primitive dimension must be strictly positive and finite, got {0}")]
    NonPositiveDimension(f64),
    #[error("quaternion has zero or non-finite norm")]
    BadQuaternion,
    #[error("non-finite translation")]
    NonFinite,
}

/// A rigid transform: `p_parent = rotation * p_child + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseSpec", into = "PoseSpec")]
pub struct Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

/// On-disk pose representation: translation in meters and a `w, x, y, z`
/// quaternion (normalized on read).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub translation: [f64; 3],
    #[serde(default = "identity_quaternion")]
    pub quaternion: [f64; 4],
}

fn identity_quaternion() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl TryFrom<PoseSpec> for Transform {
    type Error = GeometryError;

    fn try_from(spec: PoseSpec) -> Result<Self, Self::Error> {
        let t = Vec3::from(spec.translation);
        if !t.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Transform::from_quaternion(spec.quaternion, t)
    }
}

impl From<Transform> for PoseSpec {
    fn from(t: Transform) -> Self {
        PoseSpec {
            translation: t.translation.into(),
            quaternion: t.quaternion(),
        }
    }
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Transform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Transform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Transform {
            rotation,
            translation: Vec3::zeros(),
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::from_rotation(axis_angle_matrix(axis, angle))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    /// Builds a transform from a `w, x, y, z` quaternion and a translation.
    pub fn from_quaternion(wxyz: [f64; 4], translation: Vec3) -> Result<Self, GeometryError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(GeometryError::BadQuaternion);
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Ok(Transform {
            rotation: *uq.to_rotation_matrix().matrix(),
            translation,
        })
    }

    /// Returns the rotation as a `w, x, y, z` quaternion with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    /// `self ∘ other`: maps points from `other`'s child frame into `self`'s parent frame.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Maps a point expressed in the parent frame into this transform's frame.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(p - self.translation))
    }

    pub fn x_axis(&self) -> Vec3 {
        self.rotation.column(0).into()
    }

    pub fn y_axis(&self) -> Vec3 {
        self.rotation.column(1).into()
    }

    pub fn z_axis(&self) -> Vec3 {
        self.rotation.column(2).into()
    }

    /// Orthonormality and handedness check on the rotation block.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max() <= tol;
        ortho
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Rotation vector (axis × angle) of `self.rotation * other.rotationᵀ`.
    pub fn rotation_error(&self, other: &Transform) -> Vec3 {
        rotation_log(&(self.rotation * other.rotation.transpose()))
    }

    /// Angle in radians between the two orientations.
    pub fn angle_to(&self, other: &Transform) -> f64 {
        self.rotation_error(other).norm()
    }

    pub fn approx_eq(&self, other: &Transform, tol: f64) -> bool {
        (self.rotation - other.rotation).abs().max() <= tol
            && (self.translation - other.translation).abs().max() <= tol
    }
}

impl Mul for Transform {
    type Output = Transform;
    fn mul(self, rhs: Transform) -> Transform {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Transform> for &'a Transform {
    type Output = Transform;
    fn mul(self, rhs: &'a Transform) -> Transform {
        self.compose(rhs)
    }
}

pub fn compose(a: &Transform, b: &Transform) -> Transform {
    a.compose(b)
}

/// Rodrigues formula; a zero axis yields the identity.
pub fn axis_angle_matrix(axis: &Vec3, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n < 1e-15 {
        return Matrix3::identity();
    }
    *Rotation3::from_axis_angle(&Unit::new_unchecked(axis / n), angle).matrix()
}

/// Exponential map from a rotation vector to a rotation matrix.
pub fn rotation_exp(w: &Vec3) -> Matrix3<f64> {
    *Rotation3::new(*w).matrix()
}

/// Logarithm map of a rotation matrix to its rotation vector.
pub fn rotation_log(r: &Matrix3<f64>) -> Vec3 {
    // atan2 keeps full precision for small angles, where acos of the trace does not
    let v = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = v.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let angle = s.atan2(c);
    if angle < 3.0 {
        if s < 1e-300 {
            return Vec3::zeros();
        }
        v * (angle / s)
    } else {
        Rotation3::from_matrix_unchecked(*r).scaled_axis()
    }
}

/// Orthonormal basis `(u, v)` completing the unit vector `n`.
pub fn orthonormal_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    (u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Box { half_extents: [f64; 3] },
    Sphere { radius: f64 },
    /// Capsule whose axis is the local z axis, spanning `[-half_length, half_length]`.
    Capsule { radius: f64, half_length: f64 },
}

impl Shape {
    fn rank(&self) -> u8 {
        match self {
            Shape::Sphere { .. } => 0,
            Shape::Capsule { .. } => 1,
            Shape::Box { .. } => 2,
        }
    }

    fn dims(&self) -> Vec<f64> {
        match *self {
            Shape::Box { half_extents } => half_extents.to_vec(),
            Shape::Sphere { radius } => vec![radius],
            Shape::Capsule {
                radius,
                half_length,
            } => vec![radius, half_length],
        }
    }
}

/// A posed box, sphere or capsule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrimitiveSpec", into = "PrimitiveSpec")]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Transform,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(default)]
    pub pose: Transform,
}

impl TryFrom<PrimitiveSpec> for Primitive {
    type Error = GeometryError;
    fn try_from(spec: PrimitiveSpec) -> Result<Self, Self::Error> {
        Primitive::new(spec.shape, spec.pose)
    }
}

impl From<Primitive> for PrimitiveSpec {
    fn from(p: Primitive) -> Self {
        PrimitiveSpec {
            shape: p.shape,
            pose: p.pose,
        }
    }
}

impl Primitive {
    pub fn new(shape: Shape, pose: Transform) -> Result<Self, GeometryError> {
        for d in shape.dims() {
            if !(d.is_finite() && d > 0.0) {
                return Err(GeometryError::NonPositiveDimension(d));
            }
        }
        Ok(Primitive { shape, pose })
    }

    pub fn cuboid(half_extents: [f64; 3], pose: Transform) -> Result<Self, GeometryError> {
        Self::new(Shape::Box { half_extents }, pose)
    }

    pub fn sphere(radius: f64, center: Vec3) -> Result<Self, GeometryError> {
        Self::new(Shape::Sphere { radius }, Transform::from_translation(center))
    }

    /// Capsule between two world points. A degenerate segment gets a
    /// vanishing half length so the capsule behaves as a sphere.
    pub fn capsule_between(a: &Vec3, b: &Vec3, radius: f64) -> Result<Self, GeometryError> {
        let d = b - a;
        let len = d.norm();
        let center = (a + b) * 0.5;
        let rotation = if len < 1e-12 {
            Matrix3::identity()
        } else {
            let z = d / len;
            let (u, v) = orthonormal_basis(&z);
            Matrix3::from_columns(&[u, v, z])
        };
        Self::new(
            Shape::Capsule {
                radius,
                half_length: (0.5 * len).max(1e-9),
            },
            Transform::new(rotation, center),
        )
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn with_pose(&self, pose: Transform) -> Primitive {
        Primitive {
            shape: self.shape,
            pose,
        }
    }

    /// Applies `t` on top of the current pose.
    pub fn transformed(&self, t: &Transform) -> Primitive {
        self.with_pose(t.compose(&self.pose))
    }

    /// Radius of a sphere around `center()` enclosing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Box { half_extents } => Vec3::from(half_extents).norm(),
            Shape::Sphere { radius } => radius,
            Shape::Capsule {
                radius,
                half_length,
            } => radius + half_length,
        }
    }

    /// Capsule end points in the parent frame.
    pub fn segment(&self) -> Option<(Vec3, Vec3)> {
        match self.shape {
            Shape::Capsule { half_length, .. } => {
                let axis = self.pose.z_axis() * half_length;
                Some((self.center() - axis, self.center() + axis))
            }
            _ => None,
        }
    }

    /// Signed distance from a point to the primitive surface (negative inside).
    pub fn signed_distance_to_point(&self, p: &Vec3) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => (p - self.center()).norm() - radius,
            Shape::Capsule { radius, .. } => {
                let (a, b) = self.segment().unwrap();
                point_segment_distance(p, &a, &b) - radius
            }
            Shape::Box { half_extents } => {
                let local = self.pose.inverse_transform_point(p);
                box_signed_distance(&local, &half_extents)
            }
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.signed_distance_to_point(p) < 0.0
    }

    /// Deterministic points on the primitive surface in its local frame.
    /// At least `min_count` points are produced.
    pub fn local_surface_samples(&self, min_count: usize) -> Vec<Vec3> {
        match self.shape {
            Shape::Sphere { radius } => fibonacci_sphere(min_count)
                .into_iter()
                .map(|d| d * radius)
                .collect(),
            Shape::Capsule {
                radius,
                half_length,
            } => capsule_samples(radius, half_length, min_count),
            Shape::Box { half_extents } => box_samples(&half_extents, min_count),
        }
    }

    pub fn surface_samples(&self, min_count: usize) -> Vec<Vec3> {
        self.local_surface_samples(min_count)
            .iter()
            .map(|p| self.pose.transform_point(p))
            .collect()
    }
}

/// Signed distance between two primitives: positive is the separating gap,
/// zero or negative means touching or penetrating.
///
/// Exact for sphere and capsule pairs and for sphere–box. Capsule–box is
/// exact up to a 1e-9 m safety margin. Box–box reports the largest
/// separating-axis gap, a lower bound on the true distance when separated
/// and the minimum overlap (negated) when penetrating.
pub fn primitive_distance(p: &Primitive, q: &Primitive) -> f64 {
    let (p, q) = canonical_order(p, q);
    match (p.shape, q.shape) {
        (Shape::Sphere { radius: r1 }, Shape::Sphere { radius: r2 }) => {
            (p.center() - q.center()).norm() - r1 - r2
        }
        (Shape::Sphere { radius: r1 }, Shape::Capsule { radius: r2, .. }) => {
            let (a, b) = q.segment().unwrap();
            point_segment_distance(&p.center(), &a, &b) - r1 - r2
        }
        (Shape::Sphere { radius }, Shape::Box { .. }) => {
            q.signed_distance_to_point(&p.center()) - radius
        }
        (Shape::Capsule { radius: r1, .. }, Shape::Capsule { radius: r2, .. }) => {
            let (a0, a1) = p.segment().unwrap();
            let (b0, b1) = q.segment().unwrap();
            segment_segment_distance(&a0, &a1, &b0, &b1) - r1 - r2
        }
        (Shape::Capsule { radius, .. }, Shape::Box { half_extents }) => {
            let (a, b) = p.segment().unwrap();
            let la = q.pose.inverse_transform_point(&a);
            let lb = q.pose.inverse_transform_point(&b);
            segment_box_distance(&la, &lb, &half_extents) - radius - 1e-9
        }
        (Shape::Box { half_extents: ha }, Shape::Box { half_extents: hb }) => {
            box_box_sat_gap(&p.pose, &ha, &q.pose, &hb)
        }
        _ => unreachable!("canonical_order sorts by rank"),
    }
}

fn canonical_order<'a>(p: &'a Primitive, q: &'a Primitive) -> (&'a Primitive, &'a Primitive) {
    match p.shape.rank().cmp(&q.shape.rank()) {
        Ordering::Less => (p, q),
        Ordering::Greater => (q, p),
        Ordering::Equal => {
            if primitive_key(p)
                .iter()
                .zip(primitive_key(q).iter())
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
                == Ordering::Greater
            {
                (q, p)
            } else {
                (p, q)
            }
        }
    }
}

fn primitive_key(p: &Primitive) -> Vec<f64> {
    let mut key: Vec<f64> = p.pose.translation.iter().copied().collect();
    key.extend(p.pose.rotation.iter().copied());
    key.extend(p.shape.dims());
    key
}

pub fn box_signed_distance(local: &Vec3, half: &[f64; 3]) -> f64 {
    let q = Vec3::new(
        local.x.abs() - half[0],
        local.y.abs() - half[1],
        local.z.abs() - half[2],
    );
    let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let denom = ab.norm_squared();
    let t = if denom < 1e-300 {
        0.0
    } else {
        ((p - a).dot(&ab) / denom).clamp(0.0, 1.0)
    };
    (p - (a + ab * t)).norm()
}

/// Closest distance between segments `[p1, q1]` and `[p2, q2]`.
pub fn segment_segment_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-24;
    let (s, t);
    if a <= eps && e <= eps {
        return r.norm();
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

/// Minimum of the (convex) box signed distance along a segment, by golden
/// section search in the segment parameter.
fn segment_box_distance(a: &Vec3, b: &Vec3, half: &[f64; 3]) -> f64 {
    let f = |t: f64| box_signed_distance(&(a + (b - a) * t), half);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    f(0.0).min(f(1.0)).min(f1).min(f2)
}

fn box_box_sat_gap(pa: &Transform, ha: &[f64; 3], pb: &Transform, hb: &[f64; 3]) -> f64 {
    let d = pb.translation - pa.translation;
    let axes_a = [pa.x_axis(), pa.y_axis(), pa.z_axis()];
    let axes_b = [pb.x_axis(), pb.y_axis(), pb.z_axis()];
    let radius = |axes: &[Vec3; 3], h: &[f64; 3], l: &Vec3| -> f64 {
        (0..3).map(|i| h[i] * axes[i].dot(l).abs()).sum()
    };
    let mut best = f64::NEG_INFINITY;
    let mut test = |l: Vec3| {
        let gap = d.dot(&l).abs() - radius(&axes_a, ha, &l) - radius(&axes_b, hb, &l);
        if gap > best {
            best = gap;
        }
    };
    for l in axes_a.iter().chain(axes_b.iter()) {
        test(*l);
    }
    for u in &axes_a {
        for v in &axes_b {
            let c = u.cross(v);
            let n = c.norm();
            if n > 1e-9 {
                test(c / n);
            }
        }
    }
    best
}

fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let n = n.max(1);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn capsule_samples(radius: f64, half_length: f64, min_count: usize) -> Vec<Vec3> {
    // Split the budget between the cylinder and the two hemispherical caps by area.
    let cyl_area = 2.0 * std::f64::consts::PI * radius * 2.0 * half_length;
    let cap_area = 4.0 * std::f64::consts::PI * radius * radius;
    let total = cyl_area + cap_area;
    let n_cap = ((min_count as f64 * cap_area / total).ceil() as usize).max(16);
    let n_cyl = min_count.saturating_sub(n_cap).max(8);
    let ring = 8usize.max(((n_cyl as f64).sqrt() * 1.5).ceil() as usize);
    let rows = n_cyl.div_ceil(ring).max(2);
    let mut out = Vec::with_capacity(n_cap + rows * ring);
    for r in 0..rows {
        let z = -half_length + 2.0 * half_length * r as f64 / (rows - 1) as f64;
        for k in 0..ring {
            let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5 * (r % 2) as f64) / ring as f64;
            out.push(Vec3::new(radius * phi.cos(), radius * phi.sin(), z));
        }
    }
    for d in fibonacci_sphere(n_cap) {
        let offset = if d.z >= 0.0 { half_length } else { -half_length };
        out.push(Vec3::new(d.x * radius, d.y * radius, d.z * radius + offset));
    }
    out
}

fn box_samples(h: &[f64; 3], min_count: usize) -> Vec<Vec3> {
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let n_face = ((min_count as f64 * areas[axis] / total).ceil() as usize).max(4);
        // grid proportional to the face aspect ratio
        let aspect = h[u] / h[v];
        let nu = ((n_face as f64 * aspect).sqrt().ceil() as usize).max(2);
        let nv = n_face.div_ceil(nu).max(2);
        for sign in [-1.0, 1.0] {
            for i in 0..nu {
                for j in 0..nv {
                    let mut p = Vec3::zeros();
                    p[axis] = sign * h[axis];
                    p[u] = -h[u] + 2.0 * h[u] * i as f64 / (nu - 1) as f64;
                    p[v] = -h[v] + 2.0 * h[v] * j as f64 / (nv - 1) as f64;
                    out.push(p);
                }
            }
        }
    }
    out
}
