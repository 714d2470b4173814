//! Point clouds: synthetic single-view rendering, symmetry-plane mirroring
//! and superquadric recovery.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{orthonormal_basis, rotation_exp, Transform, Vec3};
use crate::superquadric::{ShapeError, Superquadric, MAX_EXPONENT, MIN_EXPONENT};

/// Minimum number of points accepted by mirroring and fitting.
pub const MIN_POINTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("no ray from the viewpoint hits the object")]
    NoHits,
    #[error("angular resolution {0} must be positive and finite")]
    InvalidResolution(f64),
    #[error("viewpoint lies inside the object")]
    ViewpointInside,
    #[error("cloud has {0} points; at least {MIN_POINTS} are required")]
    DegenerateCloud(usize),
    #[error("cloud contains a non-finite coordinate")]
    NonFinite,
    #[error("cloud has no viewpoint")]
    MissingViewpoint,
    #[error("fit diverged (non-finite cost)")]
    FitDiverged,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub viewpoint: Option<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, viewpoint: Option<Vec3>) -> Self {
        PointCloud { points, viewpoint }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.points.iter().sum();
        sum / self.points.len().max(1) as f64
    }

    pub fn transformed(&self, t: &Transform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            viewpoint: self.viewpoint.map(|v| t.transform_point(&v)),
        }
    }

    fn check_fit_input(&self) -> Result<(), CloudError> {
        if self.points.len() < MIN_POINTS {
            return Err(CloudError::DegenerateCloud(self.points.len()));
        }
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(CloudError::NonFinite);
        }
        Ok(())
    }
}

/// Reads an ASCII cloud: one `x y z` triple per line. A `# viewpoint x y z`
/// comment sets the sensor origin, other `#` lines and a literal `x y z`
/// header row are skipped.
pub fn load_cloud(path: &Path) -> Result<PointCloud, CloudError> {
    let text = fs::read_to_string(path).map_err(|e| CloudError::Io(format!("{}: {e}", path.display())))?;
    parse_cloud(&text)
}

pub fn parse_cloud(text: &str) -> Result<PointCloud, CloudError> {
    let mut cloud = PointCloud::default();
    let triple = |fields: &[&str], line: usize| -> Result<Vec3, CloudError> {
        if fields.len() != 3 {
            return Err(CloudError::Parse {
                line,
                message: format!("expected 3 values, found {}", fields.len()),
            });
        }
        let mut v = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f.parse::<f64>().map_err(|_| CloudError::Parse {
                line,
                message: format!("not a number: {f:?}"),
            })?;
            if !v[k].is_finite() {
                return Err(CloudError::Parse {
                    line,
                    message: "non-finite coordinate".into(),
                });
            }
        }
        Ok(Vec3::new(v[0], v[1], v[2]))
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let fields: Vec<&str> = comment.split_whitespace().collect();
            if fields.first() == Some(&"viewpoint") {
                cloud.viewpoint = Some(triple(&fields[1..], line)?);
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields == ["x", "y", "z"] {
            continue;
        }
        cloud.points.push(triple(&fields, line)?);
    }
    if cloud.points.is_empty() {
        return Err(CloudError::Parse {
            line: text.lines().count().max(1),
            message: "file contains no points".into(),
        });
    }
    Ok(cloud)
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<(), CloudError> {
    fs::write(path, format_cloud(cloud)).map_err(|e| CloudError::Io(format!("{}: {e}", path.display())))
}

pub fn format_cloud(cloud: &PointCloud) -> String {
    let mut out = String::new();
    if let Some(v) = cloud.viewpoint {
        out.push_str(&format!("# viewpoint {:?} {:?} {:?}\n", v.x, v.y, v.z));
    }
    for p in &cloud.points {
        // Debug formatting of f64 is shortest round-trip
        out.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    out
}

/// Casts a regular angular grid of rays from `viewpoint` and keeps the first
/// hit of each, so the self-occluded back of the object is absent.
pub fn render_single_view(
    sq: &Superquadric,
    viewpoint: Vec3,
    angular_res: f64,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<PointCloud, CloudError> {
    if !(angular_res.is_finite() && angular_res > 0.0) {
        return Err(CloudError::InvalidResolution(angular_res));
    }
    if sq.implicit_value_world(&viewpoint) <= 1.0 {
        return Err(CloudError::ViewpointInside);
    }
    let center = sq.pose.translation;
    let to_center = center - viewpoint;
    let dist = to_center.norm();
    let radius = sq.bounding_radius();
    let forward = to_center / dist;
    let (u, w) = orthonormal_basis(&forward);
    let half_angle = if radius >= dist {
        std::f64::consts::FRAC_PI_2 * 0.99
    } else {
        (radius / dist).asin() * 1.05
    };
    let n = (half_angle / angular_res).ceil() as i64;
    let march = sq.a.min(sq.b).min(sq.c) / 8.0;
    let t_near = (dist - radius).max(0.0);
    let t_far = dist + radius;

    let mut hits = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            let dir = (forward + (i as f64 * angular_res).tan() * u + (j as f64 * angular_res).tan() * w).normalize();
            if let Some(t) = first_hit(sq, &viewpoint, &dir, t_near, t_far, march) {
                hits.push(viewpoint + dir * t);
            }
        }
    }
    if hits.is_empty() {
        return Err(CloudError::NoHits);
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let normal = Normal::new(0.0, noise_sigma).expect("sigma is positive and finite");
        for p in &mut hits {
            *p += Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(PointCloud::new(hits, Some(viewpoint)))
}

fn first_hit(sq: &Superquadric, origin: &Vec3, dir: &Vec3, t_near: f64, t_far: f64, step: f64) -> Option<f64> {
    let inside = |t: f64| sq.implicit_value_world(&(origin + dir * t)) <= 1.0;
    let mut prev = t_near;
    let mut t = t_near;
    while t <= t_far {
        if inside(t) {
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if inside(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hi);
        }
        prev = t;
        t += step;
    }
    None
}

/// Points spread over the whole surface (a fully observed object), with
/// isotropic Gaussian noise. `count` is approximate.
pub fn sample_full_cloud(sq: &Superquadric, count: usize, noise_sigma: f64, rng_seed: u64) -> Result<PointCloud, CloudError> {
    // area of the equivalent ellipsoid (Knud Thomsen's approximation)
    let p = 1.6075;
    let (a, b, c) = (sq.a.powf(p), sq.b.powf(p), sq.c.powf(p));
    let area = 4.0 * std::f64::consts::PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p);
    let spacing = (area / count.max(8) as f64).sqrt();
    let samples = sq.sample_equal_distance(spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("sigma is finite");
    let points = samples
        .iter()
        .map(|s| {
            let mut p = sq.pose.transform_point(&s.point);
            if noise_sigma > 0.0 {
                p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            }
            p
        })
        .collect();
    Ok(PointCloud::new(points, None))
}

/// Uniform-grid spatial hash for nearest-neighbor queries within a radius.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        let mut cells: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        PointGrid { points, cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Distance to the nearest stored point, capped at the cell size.
    pub fn nearest_capped(&self, q: &Vec3, skip: Option<usize>) -> f64 {
        let (kx, ky, kz) = Self::key(q, self.cell);
        let mut best = self.cell * self.cell;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in ids {
                            if Some(i) == skip {
                                continue;
                            }
                            best = best.min((self.points[i] - q).norm_squared());
                        }
                    }
                }
            }
        }
        best.sqrt()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median nearest-neighbor distance; a proxy for the sampling density.
pub fn median_spacing(points: &[Vec3]) -> f64 {
    let diag = cloud_diagonal(points).max(1e-9);
    // a cell that holds a handful of points on average for a surface cloud
    let mut cell = diag / (points.len() as f64).sqrt() * 2.0;
    loop {
        let grid = PointGrid::new(points, cell);
        let d: Vec<f64> = (0..points.len()).map(|i| grid.nearest_capped(&points[i], Some(i))).collect();
        let capped = d.iter().filter(|&&x| x >= cell).count();
        if capped * 2 < d.len() || cell > diag {
            return median(d);
        }
        cell *= 2.0;
    }
}

const SCORING_POINTS: usize = 600;

/// Keeps the first point falling in each cubic voxel.
pub fn voxel_downsample(points: &[Vec3], cell: f64) -> Vec<Vec3> {
    let mut seen = std::collections::HashSet::new();
    points
        .iter()
        .filter(|p| seen.insert(PointGrid::key(p, cell)))
        .copied()
        .collect()
}

/// Vertical symmetry plane `normal · x = offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn reflect(&self, p: &Vec3) -> Vec3 {
        p - 2.0 * (self.normal.dot(p) - self.offset) * self.normal
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorOptions {
    /// Plane orientations tried over a half turn about the table normal.
    pub yaw_steps: usize,
    /// Plane offsets tried behind the centroid, spanning the cloud depth.
    pub offset_steps: usize,
    /// Range slack before a mirrored point counts as visible (meters).
    pub depth_tolerance: f64,
}

impl Default for MirrorOptions {
    fn default() -> Self {
        MirrorOptions {
            yaw_steps: 36,
            offset_steps: 24,
            depth_tolerance: 0.006,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorResult {
    /// Original points followed by their reflections.
    pub cloud: PointCloud,
    pub plane: Plane,
    /// Mirrored points that would have been visible to the sensor.
    pub violations: usize,
}

/// Range image of the observed cloud on an angular grid around the view
/// direction; stores the closest range per cell.
struct RangeImage {
    origin: Vec3,
    forward: Vec3,
    u: Vec3,
    w: Vec3,
    cell: f64,
    nearest: HashMap<(i64, i64), f64>,
}

impl RangeImage {
    fn new(points: &[Vec3], origin: Vec3, centroid: Vec3, spacing: f64) -> Self {
        let forward = (centroid - origin).normalize();
        let (u, w) = orthonormal_basis(&forward);
        let range = (centroid - origin).norm().max(1e-9);
        let mut img = RangeImage {
            origin,
            forward,
            u,
            w,
            cell: 2.0 * spacing / range,
            nearest: HashMap::new(),
        };
        for p in points {
            let (k, r) = img.project(p);
            let e = img.nearest.entry(k).or_insert(f64::INFINITY);
            *e = e.min(r);
        }
        img
    }

    fn project(&self, p: &Vec3) -> ((i64, i64), f64) {
        let d = p - self.origin;
        let f = d.dot(&self.forward);
        let a = d.dot(&self.u).atan2(f);
        let b = d.dot(&self.w).atan2(f);
        (((a / self.cell).floor() as i64, (b / self.cell).floor() as i64), d.norm())
    }

    /// True if a surface point at `p` would have shown up in the image:
    /// either in front of what was observed, or where nothing was observed.
    fn would_be_visible(&self, p: &Vec3, tol: f64) -> bool {
        let ((i, j), r) = self.project(p);
        let mut observed = None::<f64>;
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(&m) = self.nearest.get(&(i + di, j + dj)) {
                    observed = Some(observed.map_or(m, |o: f64| o.max(m)));
                }
            }
        }
        match (self.nearest.get(&(i, j)), observed) {
            (Some(&m), _) => r < m - tol,
            (None, Some(m)) => r < m - tol,
            (None, None) => true,
        }
    }
}

pub fn mirror_cloud(cloud: &PointCloud, table_normal: &Vec3) -> Result<MirrorResult, CloudError> {
    mirror_cloud_with(cloud, table_normal, &MirrorOptions::default())
}

/// Completes a single-view cloud by reflection across the vertical plane
/// that best explains the observation.
///
/// Candidate planes contain the table normal; their normals are swept over
/// a half turn and, for each, the plane is slid from the centroid to the
/// back of the cloud. A candidate is penalized for every mirrored point the
/// sensor would have seen (in front of the observed surface, or in free
/// space). Among equally consistent candidates, ones that add new surface
/// are preferred, then the one whose reflection lies closest to the data.
pub fn mirror_cloud_with(cloud: &PointCloud, table_normal: &Vec3, opts: &MirrorOptions) -> Result<MirrorResult, CloudError> {
    cloud.check_fit_input()?;
    let viewpoint = cloud.viewpoint.ok_or(CloudError::MissingViewpoint)?;
    let up = table_normal.normalize();
    let centroid = cloud.centroid();
    let spacing = median_spacing(&cloud.points).max(1e-6);
    let image = RangeImage::new(&cloud.points, viewpoint, centroid, spacing);
    let novelty_radius = 2.5 * spacing + opts.depth_tolerance / 3.0;
    // Score on a strided subset against a thinned reference; the ranking
    // only needs densities, not every point.
    let reference = voxel_downsample(&cloud.points, 0.5 * novelty_radius);
    let grid = PointGrid::new(&reference, novelty_radius);
    let stride = cloud.points.len().div_ceil(SCORING_POINTS).max(1);
    let probe: Vec<Vec3> = cloud.points.iter().step_by(stride).copied().collect();
    let (e1, e2) = orthonormal_basis(&up);
    let to_view = viewpoint - centroid;

    let mut candidates = Vec::new();
    for k in 0..opts.yaw_steps.max(1) {
        let theta = std::f64::consts::PI * k as f64 / opts.yaw_steps.max(1) as f64;
        let mut n = e1 * theta.cos() + e2 * theta.sin();
        if n.dot(&to_view) < 0.0 {
            n = -n;
        }
        let depth = cloud
            .points
            .iter()
            .map(|p| (p - centroid).dot(&n))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        let span = (depth.1 - depth.0).max(0.0);
        for s in 0..=opts.offset_steps {
            let back = span * s as f64 / opts.offset_steps.max(1) as f64;
            candidates.push(Plane {
                normal: n,
                offset: n.dot(&centroid) - back,
            });
        }
    }

    let scored: Vec<(usize, bool, f64)> = candidates
        .par_iter()
        .map(|plane| {
            let mut violations = 0;
            let mut novel = 0;
            let mut nn_sum = 0.0;
            for p in &probe {
                let m = plane.reflect(p);
                if image.would_be_visible(&m, opts.depth_tolerance) {
                    violations += 1;
                }
                let d = grid.nearest_capped(&m, None);
                if d >= novelty_radius {
                    novel += 1;
                }
                nn_sum += d;
            }
            let n = probe.len();
            let bucket = violations * 100 / n;
            let adds_surface = novel * 4 >= n;
            (bucket, !adds_surface, nn_sum / n as f64)
        })
        .collect();

    let best = (0..candidates.len())
        .min_by(|&i, &j| {
            let (a, b) = (&scored[i], &scored[j]);
            a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)).then(i.cmp(&j))
        })
        .expect("at least one candidate plane");
    let plane = candidates[best];
    let violations = cloud
        .points
        .iter()
        .filter(|p| image.would_be_visible(&plane.reflect(p), opts.depth_tolerance))
        .count();
    let mut points = cloud.points.clone();
    points.extend(cloud.points.iter().map(|p| plane.reflect(p)));
    Ok(MirrorResult {
        cloud: PointCloud::new(points, cloud.viewpoint),
        plane,
        violations,
    })
}

/// Number of mirrored points the sensor would have seen for a given plane.
pub fn visibility_violations(cloud: &PointCloud, plane: &Plane, depth_tolerance: f64) -> Result<usize, CloudError> {
    cloud.check_fit_input()?;
    let viewpoint = cloud.viewpoint.ok_or(CloudError::MissingViewpoint)?;
    let spacing = median_spacing(&cloud.points).max(1e-6);
    let image = RangeImage::new(&cloud.points, viewpoint, cloud.centroid(), spacing);
    Ok(cloud
        .points
        .iter()
        .filter(|p| image.would_be_visible(&plane.reflect(p), depth_tolerance))
        .count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub sq: Superquadric,
    /// Mean squared residual per point.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub exponent_bounds: (f64, f64),
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            exponent_bounds: (MIN_EXPONENT, MAX_EXPONENT),
            max_iterations: 200,
            relative_tolerance: 1e-9,
        }
    }
}

type Params = SVector<f64, 11>;

/// Parameter vector `[a, b, c, e1, e2, tx, ty, tz, wx, wy, wz]`; the rotation
/// is `base · exp(w)` with `w` reset to zero after each accepted step.
struct Model {
    base: Matrix3<f64>,
    bounds: (f64, f64),
    max_extent: f64,
}

struct Evaluated {
    rot_t: Matrix3<f64>,
    t: Vec3,
    a: f64,
    b: f64,
    c: f64,
    e1: f64,
    e2: f64,
    scale: f64,
}

impl Model {
    fn clamp(&self, x: &mut Params) {
        for k in 0..3 {
            x[k] = x[k].clamp(1e-4, self.max_extent);
        }
        for k in 3..5 {
            x[k] = x[k].clamp(self.bounds.0, self.bounds.1);
        }
    }

    fn prepare(&self, x: &Params) -> Evaluated {
        let rot = self.base * rotation_exp(&Vec3::new(x[8], x[9], x[10]));
        Evaluated {
            rot_t: rot.transpose(),
            t: Vec3::new(x[5], x[6], x[7]),
            a: x[0],
            b: x[1],
            c: x[2],
            e1: x[3],
            e2: x[4],
            scale: (x[0] * x[1] * x[2]).sqrt(),
        }
    }
}

impl Evaluated {
    #[inline]
    fn residual(&self, p: &Vec3) -> f64 {
        let q = self.rot_t * (p - self.t);
        let tiny = 1e-12;
        let x = (q.x.abs() / self.a).max(tiny);
        let y = (q.y.abs() / self.b).max(tiny);
        let z = (q.z.abs() / self.c).max(tiny);
        let xy = x.powf(2.0 / self.e2) + y.powf(2.0 / self.e2);
        let f = xy.powf(self.e2 / self.e1) + z.powf(2.0 / self.e1);
        self.scale * (f.powf(self.e1) - 1.0)
    }
}

fn cloud_diagonal(points: &[Vec3]) -> f64 {
    let (lo, hi) = points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    (hi - lo).norm()
}

fn cost(model: &Model, x: &Params, points: &[Vec3]) -> f64 {
    let ev = model.prepare(x);
    points.iter().map(|p| ev.residual(p).powi(2)).sum()
}

/// Axis-aligned PCA initialisation: centroid, principal axes and 1.05× the
/// half-extent along each. `z_axis` picks which principal axis becomes z.
fn pca_init(points: &[Vec3], z_axis: usize) -> (Matrix3<f64>, Params) {
    let n = points.len() as f64;
    let centroid: Vec3 = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let axes: Vec<Vec3> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    let z = axes[z_axis];
    let x = axes[(z_axis + 1) % 3];
    let y = z.cross(&x);
    let rot = Matrix3::from_columns(&[x, y, z]);
    let mut half = [0.0f64; 3];
    for p in points {
        let q = rot.transpose() * (p - centroid);
        for k in 0..3 {
            half[k] = half[k].max(q[k].abs());
        }
    }
    let mut x0 = Params::zeros();
    for k in 0..3 {
        x0[k] = (1.05 * half[k]).max(1e-3);
    }
    x0[3] = 1.0;
    x0[4] = 1.0;
    x0[5] = centroid.x;
    x0[6] = centroid.y;
    x0[7] = centroid.z;
    (rot, x0)
}

fn levenberg_marquardt(points: &[Vec3], base: Matrix3<f64>, x0: Params, opts: &FitOptions) -> Result<(Superquadric, f64, usize), CloudError> {
    let mut model = Model {
        base,
        bounds: opts.exponent_bounds,
        max_extent: cloud_diagonal(points).max(1e-3),
    };
    let mut x = x0;
    model.clamp(&mut x);
    let mut current = cost(&model, &x, points);
    if !current.is_finite() {
        return Err(CloudError::FitDiverged);
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut residuals = vec![0.0; points.len()];
    let mut jac = vec![[0.0f64; 11]; points.len()];

    while iterations < opts.max_iterations {
        iterations += 1;
        let ev = model.prepare(&x);
        for (r, p) in residuals.iter_mut().zip(points) {
            *r = ev.residual(p);
        }
        for k in 0..11 {
            let h = if k < 3 {
                1e-7 * x[k].abs().max(1e-3)
            } else if k < 5 {
                // step inward at the bounds so the difference stays feasible
                if x[k] + 1e-7 > model.bounds.1 {
                    -1e-7
                } else {
                    1e-7
                }
            } else {
                1e-8
            };
            let mut xp = x;
            xp[k] += h;
            let evp = model.prepare(&xp);
            for (i, p) in points.iter().enumerate() {
                jac[i][k] = (evp.residual(p) - residuals[i]) / h;
            }
        }
        let mut jtj = SMatrix::<f64, 11, 11>::zeros();
        let mut jtr = Params::zeros();
        for (row, r) in jac.iter().zip(&residuals) {
            let j = Params::from_row_slice(row);
            jtj += j * j.transpose();
            jtr += j * *r;
        }

        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = jtj;
            for k in 0..11 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-jtr));
            let mut trial = x + step;
            model.clamp(&mut trial);
            let trial_cost = cost(&model, &trial, points);
            if trial_cost.is_finite() && trial_cost < current {
                let decrease = (current - trial_cost) / current.max(f64::MIN_POSITIVE);
                // fold the rotation increment into the base frame
                model.base *= rotation_exp(&Vec3::new(trial[8], trial[9], trial[10]));
                trial[8] = 0.0;
                trial[9] = 0.0;
                trial[10] = 0.0;
                x = trial;
                current = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if decrease < opts.relative_tolerance {
                    return finish(&model, &x, current, points.len(), iterations);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    finish(&model, &x, current, points.len(), iterations)
}

fn finish(model: &Model, x: &Params, cost: f64, n: usize, iterations: usize) -> Result<(Superquadric, f64, usize), CloudError> {
    if !cost.is_finite() {
        return Err(CloudError::FitDiverged);
    }
    // re-orthonormalise the accumulated rotation
    let svd = model.base.svd(true, true);
    let rot = svd.u.unwrap() * svd.v_t.unwrap();
    let pose = Transform::new(rot, Vec3::new(x[5], x[6], x[7]));
    let sq = Superquadric::new(x[0], x[1], x[2], x[3], x[4], pose)?;
    Ok((sq, cost / n as f64, iterations))
}

pub fn fit_superquadric(cloud: &PointCloud) -> Result<FitResult, CloudError> {
    fit_superquadric_with(cloud, &FitOptions::default())
}

/// Damped least-squares superquadric fit from three PCA initialisations
/// (each principal axis tried as the local z axis); the lowest cost wins.
pub fn fit_superquadric_with(cloud: &PointCloud, opts: &FitOptions) -> Result<FitResult, CloudError> {
    cloud.check_fit_input()?;
    let runs: Vec<Result<FitResult, CloudError>> = (0..3)
        .into_par_iter()
        .map(|z_axis| {
            let (base, x0) = pca_init(&cloud.points, z_axis);
            let (sq, residual, iterations) = levenberg_marquardt(&cloud.points, base, x0, opts)?;
            Ok(FitResult { sq, residual, iterations })
        })
        .collect();
    let mut best: Option<FitResult> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().map_or(true, |b| run.residual < b.residual) {
            best = Some(run);
        }
    }
    Ok(best.expect("three initialisations ran"))
}
