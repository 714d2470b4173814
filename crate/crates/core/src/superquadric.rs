//! Superquadric object model.
//!
//! The surface is described both implicitly,
//! `F(x, y, z) = ((x/a)^(2/e2) + (y/b)^(2/e2))^(e2/e1) + (z/c)^(2/e1)`,
//! and explicitly through the angles `(eta, omega)`. Trigonometric terms use
//! the signed power `sign(s) |s|^e` so the parametrization covers all octants.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Transform, Vec3};

pub const MIN_EXPONENT: f64 = 0.1;
pub const MAX_EXPONENT: f64 = 1.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("semi-axis lengths must be positive and finite (a={0}, b={1}, c={2})")]
    BadExtent(f64, f64, f64),
    #[error("shape exponents must lie in [{MIN_EXPONENT}, {MAX_EXPONENT}] (e1={0}, e2={1})")]
    BadExponent(f64, f64),
    #[error("sample spacing {0} m must be positive and finite")]
    InvalidSpacing(f64),
    #[error("sample spacing {spacing} m is too large: only {count} samples would result")]
    SpacingTooLarge { spacing: f64, count: usize },
    #[error("mesh resolution {0} is below the minimum of 8")]
    ResolutionTooLow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SuperquadricSpec", into = "SuperquadricSpec")]
pub struct Superquadric {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub e1: f64,
    pub e2: f64,
    /// Object frame in the world.
    pub pose: Transform,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SuperquadricSpec {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub e1: f64,
    pub e2: f64,
    #[serde(default)]
    pub pose: Transform,
}

impl TryFrom<SuperquadricSpec> for Superquadric {
    type Error = ShapeError;
    fn try_from(s: SuperquadricSpec) -> Result<Self, ShapeError> {
        Superquadric::new(s.a, s.b, s.c, s.e1, s.e2, s.pose)
    }
}

impl From<Superquadric> for SuperquadricSpec {
    fn from(s: Superquadric) -> Self {
        SuperquadricSpec {
            a: s.a,
            b: s.b,
            c: s.c,
            e1: s.e1,
            e2: s.e2,
            pose: s.pose,
        }
    }
}

/// A point on the surface with its outward unit normal, in the object frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub point: Vec3,
    pub normal: Vec3,
    pub eta: f64,
    pub omega: f64,
}

/// `sign(s) |s|^e`
#[inline]
pub fn signed_pow(s: f64, e: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        s.signum() * s.abs().powf(e)
    }
}

/// Cosine/sine pair of a surface angle. Kept as a pair so angles within
/// 1e-16 of a quadrant boundary stay resolvable.
#[derive(Debug, Clone, Copy)]
struct CosSin {
    c: f64,
    s: f64,
}

impl CosSin {
    fn from_angle(t: f64) -> Self {
        let clean = |v: f64| if v.abs() < 1e-15 { 0.0 } else { v };
        CosSin {
            c: clean(t.cos()),
            s: clean(t.sin()),
        }
    }

    fn angle(&self) -> f64 {
        self.s.atan2(self.c)
    }

    fn lerp(&self, other: &CosSin, f: f64) -> CosSin {
        let c = self.c + (other.c - self.c) * f;
        let s = self.s + (other.s - self.s) * f;
        let n = (c * c + s * s).sqrt();
        CosSin { c: c / n, s: s / n }
    }
}

/// Nodes covering `[0, π/2]` in order, clustered logarithmically at both
/// ends where the signed powers vary fastest for small exponents.
fn quarter_nodes() -> Vec<CosSin> {
    let mut nodes = vec![CosSin { c: 1.0, s: 0.0 }];
    let decades: Vec<f64> = (0..=1400).map(|k| -30.0 + 0.02 * k as f64).collect(); // 1e-30 .. 1e-2
    for &d in &decades {
        let delta = 10f64.powf(d);
        nodes.push(CosSin {
            c: delta.cos(),
            s: delta.sin(),
        });
    }
    let n_uniform = 1500;
    for k in 1..n_uniform {
        let t = 0.01 + (FRAC_PI_2 - 0.02) * k as f64 / n_uniform as f64;
        nodes.push(CosSin::from_angle(t));
    }
    for &d in decades.iter().rev() {
        let delta = 10f64.powf(d);
        nodes.push(CosSin {
            c: delta.sin(),
            s: delta.cos(),
        });
    }
    nodes.push(CosSin { c: 0.0, s: 1.0 });
    nodes
}

/// Polyline with cumulative arc length, used to place points at equal
/// arc-length positions along a parameter curve.
struct ArcTable {
    params: Vec<CosSin>,
    cumulative: Vec<f64>,
}

impl ArcTable {
    fn new(params: Vec<CosSin>, curve: impl Fn(&CosSin) -> Vec3) -> Self {
        let mut cumulative = Vec::with_capacity(params.len());
        let mut total = 0.0;
        let mut prev = curve(&params[0]);
        cumulative.push(0.0);
        for p in &params[1..] {
            let cur = curve(p);
            total += (cur - prev).norm();
            cumulative.push(total);
            prev = cur;
        }
        ArcTable { params, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn at(&self, arc: f64) -> CosSin {
        let arc = arc.clamp(0.0, self.length());
        let idx = self.cumulative.partition_point(|&v| v < arc);
        if idx == 0 {
            return self.params[0];
        }
        if idx >= self.params.len() {
            return *self.params.last().unwrap();
        }
        let (l0, l1) = (self.cumulative[idx - 1], self.cumulative[idx]);
        let f = if l1 > l0 { (arc - l0) / (l1 - l0) } else { 0.0 };
        self.params[idx - 1].lerp(&self.params[idx], f)
    }
}

impl Superquadric {
    pub fn new(a: f64, b: f64, c: f64, e1: f64, e2: f64, pose: Transform) -> Result<Self, ShapeError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(a) && ok(b) && ok(c)) {
            return Err(ShapeError::BadExtent(a, b, c));
        }
        let in_range = |e: f64| (MIN_EXPONENT..=MAX_EXPONENT).contains(&e);
        if !(in_range(e1) && in_range(e2)) {
            return Err(ShapeError::BadExponent(e1, e2));
        }
        Ok(Superquadric {
            a,
            b,
            c,
            e1,
            e2,
            pose,
        })
    }

    /// Shape at the world origin.
    pub fn at_origin(a: f64, b: f64, c: f64, e1: f64, e2: f64) -> Result<Self, ShapeError> {
        Self::new(a, b, c, e1, e2, Transform::identity())
    }

    pub fn with_pose(&self, pose: Transform) -> Superquadric {
        Superquadric { pose, ..*self }
    }

    pub fn extents(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    /// Inside-outside function in the object frame: `< 1` inside, `1` on the
    /// surface, `> 1` outside.
    pub fn implicit_value(&self, p: &Vec3) -> f64 {
        let xy = (p.x.abs() / self.a).powf(2.0 / self.e2) + (p.y.abs() / self.b).powf(2.0 / self.e2);
        xy.powf(self.e2 / self.e1) + (p.z.abs() / self.c).powf(2.0 / self.e1)
    }

    pub fn implicit_value_world(&self, p: &Vec3) -> f64 {
        self.implicit_value(&self.pose.inverse_transform_point(p))
    }

    /// Signed distance from `p` (object frame) to the surface measured along
    /// the ray from the object center. Negative inside.
    pub fn radial_distance(&self, p: &Vec3) -> f64 {
        let r = p.norm();
        if r < 1e-15 {
            return -self.a.min(self.b).min(self.c);
        }
        let f = self.implicit_value(p);
        if !f.is_finite() {
            return r;
        }
        r * (1.0 - f.powf(-self.e1 / 2.0))
    }

    pub fn radial_distance_world(&self, p: &Vec3) -> f64 {
        self.radial_distance(&self.pose.inverse_transform_point(p))
    }

    fn point_cs(&self, eta: &CosSin, omega: &CosSin) -> Vec3 {
        let ce = signed_pow(eta.c, self.e1);
        Vec3::new(
            self.a * ce * signed_pow(omega.c, self.e2),
            self.b * ce * signed_pow(omega.s, self.e2),
            self.c * signed_pow(eta.s, self.e1),
        )
    }

    fn normal_cs(&self, eta: &CosSin, omega: &CosSin) -> Vec3 {
        let ce = signed_pow(eta.c, 2.0 - self.e1);
        let n = Vec3::new(
            ce * signed_pow(omega.c, 2.0 - self.e2) / self.a,
            ce * signed_pow(omega.s, 2.0 - self.e2) / self.b,
            signed_pow(eta.s, 2.0 - self.e1) / self.c,
        );
        n.normalize()
    }

    fn sample_cs(&self, eta: &CosSin, omega: &CosSin) -> SurfaceSample {
        SurfaceSample {
            point: self.point_cs(eta, omega),
            normal: self.normal_cs(eta, omega),
            eta: eta.angle(),
            omega: omega.angle(),
        }
    }

    /// Explicit surface point and unit outward normal for
    /// `eta ∈ [-π/2, π/2]`, `omega ∈ (-π, π]`.
    pub fn surface_point(&self, eta: f64, omega: f64) -> (Vec3, Vec3) {
        let (e, o) = (CosSin::from_angle(eta), CosSin::from_angle(omega));
        (self.point_cs(&e, &o), self.normal_cs(&e, &o))
    }

    pub fn surface_sample(&self, eta: f64, omega: f64) -> SurfaceSample {
        self.sample_cs(&CosSin::from_angle(eta), &CosSin::from_angle(omega))
    }

    /// Near-uniform surface sampling with the given target spacing.
    ///
    /// Latitude rows are placed at equal arc-length steps along the profile
    /// curve (scaled by the widest cross-section so rows are never farther
    /// apart than `spacing`); each row is then split at equal arc-length
    /// steps of its own cross-section. A final pass drops points closer than
    /// half the spacing to an already accepted one.
    pub fn sample_equal_distance(&self, spacing: f64) -> Result<Vec<SurfaceSample>, ShapeError> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(ShapeError::InvalidSpacing(spacing));
        }
        let quarter = quarter_nodes();

        // Cross-section (unit latitude) superellipse over the full circle.
        let mut ring_params = Vec::with_capacity(quarter.len() * 4);
        for q in 0..4 {
            for (i, n) in quarter.iter().enumerate() {
                if q > 0 && i == 0 {
                    continue;
                }
                let rotated = match q {
                    0 => *n,
                    1 => CosSin { c: -n.s, s: n.c },
                    2 => CosSin { c: -n.c, s: -n.s },
                    _ => CosSin { c: n.s, s: -n.c },
                };
                ring_params.push(rotated);
            }
        }
        let cross = |o: &CosSin| {
            Vec3::new(
                self.a * signed_pow(o.c, self.e2),
                self.b * signed_pow(o.s, self.e2),
                0.0,
            )
        };
        let ring = ArcTable::new(ring_params, cross);
        let r_max = ring
            .params
            .iter()
            .map(|o| cross(o).norm())
            .fold(0.0f64, f64::max);

        // Meridian profile from the south to the north pole.
        let mut profile_params: Vec<CosSin> = quarter
            .iter()
            .rev()
            .map(|n| CosSin { c: n.c, s: -n.s })
            .collect();
        profile_params.extend(quarter.iter().skip(1).copied());
        let profile = ArcTable::new(profile_params, |e: &CosSin| {
            Vec3::new(r_max * signed_pow(e.c, self.e1), self.c * signed_pow(e.s, self.e1), 0.0)
        });

        let rows = ((profile.length() / spacing).round() as usize).max(2);
        let mut samples = Vec::new();
        for k in 0..=rows {
            let eta = profile.at(profile.length() * k as f64 / rows as f64);
            let scale = signed_pow(eta.c, self.e1);
            let ring_len = ring.length() * scale;
            if k == 0 || k == rows || ring_len < 0.5 * spacing {
                let pole = CosSin {
                    c: 0.0,
                    s: eta.s.signum(),
                };
                let e = if k == 0 || k == rows { pole } else { eta };
                samples.push(self.sample_cs(&e, &CosSin { c: 1.0, s: 0.0 }));
                continue;
            }
            let n = ((ring_len / spacing).round() as usize).max(3);
            let stagger = if k % 2 == 0 { 0.0 } else { 0.5 };
            for j in 0..n {
                let omega = ring.at(ring.length() * (j as f64 + stagger) / n as f64);
                samples.push(self.sample_cs(&eta, &omega));
            }
        }

        let min_gap = 0.5 * spacing;
        let mut kept: Vec<SurfaceSample> = Vec::with_capacity(samples.len());
        for s in samples {
            if kept
                .iter()
                .all(|k| (k.point - s.point).norm_squared() >= min_gap * min_gap)
            {
                kept.push(s);
            }
        }
        if kept.len() < 8 {
            return Err(ShapeError::SpacingTooLarge {
                spacing,
                count: kept.len(),
            });
        }
        Ok(kept)
    }

    /// Closed triangle mesh over a regular `(eta, omega)` grid with a fan at
    /// each pole. Vertices are in the object frame.
    pub fn to_mesh(&self, resolution: usize) -> Result<TriMesh, ShapeError> {
        if resolution < 8 {
            return Err(ShapeError::ResolutionTooLow(resolution));
        }
        let n = resolution;
        let mut vertices = Vec::with_capacity(2 + (n - 1) * n);
        vertices.push(Vec3::new(0.0, 0.0, -self.c));
        for i in 1..n {
            let eta = CosSin::from_angle(-FRAC_PI_2 + PI * i as f64 / n as f64);
            for j in 0..n {
                let omega = CosSin::from_angle(-PI + 2.0 * PI * j as f64 / n as f64);
                vertices.push(self.point_cs(&eta, &omega));
            }
        }
        vertices.push(Vec3::new(0.0, 0.0, self.c));
        let north = vertices.len() - 1;
        let idx = |row: usize, col: usize| 1 + (row - 1) * n + (col % n);
        let mut faces = Vec::with_capacity(2 * n * (n - 1));
        for j in 0..n {
            faces.push([0, idx(1, j + 1), idx(1, j)]);
        }
        for i in 1..n - 1 {
            for j in 0..n {
                let (p00, p01) = (idx(i, j), idx(i, j + 1));
                let (p10, p11) = (idx(i + 1, j), idx(i + 1, j + 1));
                faces.push([p00, p01, p11]);
                faces.push([p00, p11, p10]);
            }
        }
        for j in 0..n {
            faces.push([north, idx(n - 1, j), idx(n - 1, j + 1)]);
        }
        Ok(TriMesh { vertices, faces })
    }

    /// The local axes ordered by increasing semi-extent; ties prefer x, then y, then z.
    pub fn axes_by_extent(&self) -> [Vec3; 3] {
        let ext = self.extents();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| ext[i].total_cmp(&ext[j]).then(i.cmp(&j)));
        let unit = |i: usize| {
            let mut v = Vec3::zeros();
            v[i] = 1.0;
            v
        };
        [unit(order[0]), unit(order[1]), unit(order[2])]
    }

    /// Local axis with the smallest semi-extent (finger closing direction).
    pub fn smallest_axis(&self) -> Vec3 {
        self.axes_by_extent()[0]
    }

    /// Radius of a sphere about the object origin enclosing the whole shape.
    pub fn bounding_radius(&self) -> f64 {
        (self.a * self.a + self.b * self.b + self.c * self.c).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_count() as i64 + self.faces.len() as i64
    }

    /// ASCII OBJ with `v` and `f` records only (1-based indices).
    pub fn write_obj<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in &self.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn sphere() -> Superquadric {
        Superquadric::at_origin(1.0, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    fn nearest_neighbor_distances(samples: &[SurfaceSample]) -> Vec<f64> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                samples
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, o)| (o.point - s.point).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn implicit_value_on_sphere() {
        let s = sphere();
        assert_eq!(s.implicit_value(&Vec3::zeros()), 0.0);
        assert!((s.implicit_value(&Vec3::new(1.0, 0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((s.implicit_value(&Vec3::new(2.0, 0.0, 0.0)) - 4.0).abs() < 1e-12);
        assert!((s.implicit_value(&Vec3::new(-0.3, 0.4, -0.5)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(Superquadric::at_origin(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(Superquadric::at_origin(1.0, 1.0, 1.0, 0.05, 1.0).is_err());
        assert!(Superquadric::at_origin(1.0, 1.0, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn sphere_pole_point() {
        let (p, n) = sphere().surface_point(0.0, 0.0);
        assert!((p - Vec3::x()).norm() < 1e-15);
        assert!((n - Vec3::x()).norm() < 1e-15);
    }

    #[test]
    fn box_like_diagonal_point() {
        // Oracle: direct evaluation of a cos^e1(eta) cos^e2(omega) with
        // signed powers, e1 = e2 = 0.1 at (0, π/4): (√½)^0.1 = 0.965936...
        let bx = Superquadric::at_origin(1.0, 1.0, 1.0, 0.1, 0.1).unwrap();
        let (p, _) = bx.surface_point(0.0, FRAC_PI_4);
        let expected = 0.965_936_328_924_846_f64;
        assert!((p.x - expected).abs() < 1e-9, "{}", p.x);
        assert!((p.y - expected).abs() < 1e-9);
        assert!(p.z.abs() < 1e-15);
        assert!((bx.implicit_value(&p) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cylinder_like_side_point() {
        let cyl = Superquadric::at_origin(0.05, 0.05, 0.1, 0.1, 1.0).unwrap();
        let (p, n) = cyl.surface_point(0.0, FRAC_PI_2);
        assert!((p - Vec3::new(0.0, 0.05, 0.0)).norm() < 1e-12);
        assert!((n - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn sphere_sampling_spacing_and_count() {
        let samples = sphere().sample_equal_distance(0.5).unwrap();
        // Rejection-sampling oracle for the expected count: area / spacing².
        assert!((30..=80).contains(&samples.len()), "{}", samples.len());
        for d in nearest_neighbor_distances(&samples) {
            assert!((0.25..=1.0).contains(&d), "nn distance {d}");
        }
    }

    #[test]
    fn box_like_samples_stay_on_surface() {
        let bx = Superquadric::at_origin(0.1, 0.15, 0.2, 0.1, 0.1).unwrap();
        let samples = bx.sample_equal_distance(0.02).unwrap();
        for s in &samples {
            assert!((bx.implicit_value(&s.point) - 1.0).abs() < 1e-6);
            assert!((s.normal.norm() - 1.0).abs() < 1e-9);
        }
        // the flat top face must be populated, not just its rim
        let top_center = samples
            .iter()
            .filter(|s| s.point.z > 0.199 && s.point.x.abs() < 0.05 && s.point.y.abs() < 0.05)
            .count();
        assert!(top_center >= 4, "{top_center}");
    }

    #[test]
    fn sampling_errors() {
        assert_eq!(sphere().sample_equal_distance(0.0), Err(ShapeError::InvalidSpacing(0.0)));
        assert!(matches!(
            sphere().sample_equal_distance(5.0),
            Err(ShapeError::SpacingTooLarge { .. })
        ));
    }

    #[test]
    fn mesh_topology_and_area() {
        let m = sphere().to_mesh(16).unwrap();
        for v in &m.vertices {
            assert!((v.norm() - 1.0).abs() < 1e-9);
        }
        assert_eq!(m.euler_characteristic(), 2);
        let fine = sphere().to_mesh(64).unwrap();
        let area = 4.0 * PI;
        assert!((fine.area() - area).abs() / area < 0.02);
        assert!(sphere().to_mesh(7).is_err());
    }

    #[test]
    fn mesh_is_watertight() {
        let sq = Superquadric::at_origin(0.03, 0.05, 0.1, 0.3, 1.5).unwrap();
        let m = sq.to_mesh(12).unwrap();
        assert_eq!(m.euler_characteristic(), 2);
        let mut edges = std::collections::HashMap::new();
        for f in &m.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                // consistent orientation: each directed edge appears once
            }
        }
        assert!(edges.values().all(|&c| c == 2));
        for v in &m.vertices {
            assert!((sq.implicit_value(v) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn obj_export() {
        let m = sphere().to_mesh(8).unwrap();
        let mut buf = Vec::new();
        m.write_obj(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), m.vertices.len());
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), m.faces.len());
        assert!(text.lines().all(|l| l.starts_with("v ") || l.starts_with("f ")));
    }

    #[test]
    fn smallest_axis_tie_break() {
        let ax = |a, b, c| Superquadric::at_origin(a, b, c, 1.0, 1.0).unwrap().smallest_axis();
        assert_eq!(ax(0.03, 0.1, 0.2), Vec3::x());
        assert_eq!(ax(0.1, 0.05, 0.2), Vec3::y());
        assert_eq!(ax(0.1, 0.1, 0.1), Vec3::x());
        assert_eq!(ax(0.2, 0.1, 0.1), Vec3::y());
    }

    #[test]
    fn sampling_is_deterministic() {
        let sq = Superquadric::at_origin(0.04, 0.06, 0.1, 0.5, 0.8).unwrap();
        assert_eq!(sq.sample_equal_distance(0.01).unwrap(), sq.sample_equal_distance(0.01).unwrap());
    }

    #[test]
    fn radial_distance_sign() {
        let s = sphere();
        assert!((s.radial_distance(&Vec3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((s.radial_distance(&Vec3::new(0.0, 0.5, 0.0)) + 0.5).abs() < 1e-12);
        assert!(s.radial_distance(&Vec3::zeros()) < 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_sq() -> impl Strategy<Value = Superquadric> {
            (0.02..0.3f64, 0.02..0.3f64, 0.02..0.3f64, 0.1..1.9f64, 0.1..1.9f64)
                .prop_map(|(a, b, c, e1, e2)| Superquadric::at_origin(a, b, c, e1, e2).unwrap())
        }

        fn angle_between(u: &Vec3, v: &Vec3) -> f64 {
            let c = (u.dot(v) / (u.norm() * v.norm())).clamp(-1.0, 1.0);
            // acos is ill-conditioned near 1; use the cross product instead
            u.normalize().cross(&v.normalize()).norm().atan2(c)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn surface_points_satisfy_implicit(sq in arb_sq(), eta in -1.5..1.5f64, omega in -3.1..3.1f64) {
                let (p, n) = sq.surface_point(eta, omega);
                prop_assert!((sq.implicit_value(&p) - 1.0).abs() < 1e-9);
                prop_assert!((n.norm() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn normal_matches_finite_difference_gradient(sq in arb_sq(), eta in -1.4..1.4f64, omega in -3.0..3.0f64) {
                // stay away from the octant boundaries where |F| is not differentiable
                prop_assume!(eta.abs() > 0.05 && (omega.rem_euclid(FRAC_PI_2)).min(FRAC_PI_2 - omega.rem_euclid(FRAC_PI_2)) > 0.05);
                let (p, n) = sq.surface_point(eta, omega);
                let h = 1e-7 * sq.a.min(sq.b).min(sq.c);
                let mut g = Vec3::zeros();
                for k in 0..3 {
                    let mut dp = Vec3::zeros();
                    dp[k] = h;
                    g[k] = (sq.implicit_value(&(p + dp)) - sq.implicit_value(&(p - dp))) / (2.0 * h);
                }
                let err = angle_between(&n, &g);
                prop_assert!(err < 1e-4, "angular error {}", err);
            }

            #[test]
            fn scaling_covariance(sq in arb_sq(), s in 0.2..5.0f64, eta in -1.5..1.5f64, omega in -3.1..3.1f64) {
                let scaled = Superquadric::at_origin(sq.a * s, sq.b * s, sq.c * s, sq.e1, sq.e2).unwrap();
                let (p, _) = sq.surface_point(eta, omega);
                let (ps, ns) = scaled.surface_point(eta, omega);
                prop_assert!((ps - p * s).norm() < 1e-12 * s.max(1.0));
                // normal recomputed with scaled 1/a weights
                let (_, n) = sq.surface_point(eta, omega);
                prop_assert!((ns - n).norm() < 1e-9);
            }

            #[test]
            fn sampling_spacing_postcondition(sq in arb_sq(), frac in 0.1..0.5f64) {
                let spacing = frac * sq.a.min(sq.b).min(sq.c);
                let samples = sq.sample_equal_distance(spacing).unwrap();
                let nn = nearest_neighbor_distances(&samples);
                let good = nn.iter().filter(|&&d| d >= 0.5 * spacing && d <= 2.0 * spacing).count();
                prop_assert!(good as f64 >= 0.95 * nn.len() as f64, "{} of {}", good, nn.len());
                for s in &samples {
                    prop_assert!((sq.implicit_value(&s.point) - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
