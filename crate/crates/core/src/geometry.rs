//! Geometric kernels: marker-plane circle fitting, whole-body spline
//! reconstruction, tip tangent estimation and ray/plane intersection.

use nalgebra::{Matrix3, SymmetricEigen, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Position in millimetres.
pub type Point3 = nalgebra::Point3<f64>;
/// Direction or displacement in millimetres.
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("ray is parallel to the plane")]
    NoIntersection,
    #[error("plane lies behind the ray origin (t = {0})")]
    BehindOrigin(f64),
}

/// Ordered key feature points of the robot body; point 0 is the fixed base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPointSet {
    points: Vec<Point3>,
}

impl KeyPointSet {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints {
                needed: 2,
                got: points.len(),
            });
        }
        if points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { points })
    }

    /// Builds from `[x1, y1, z1, x2, ...]`.
    pub fn from_flat(values: &[f64]) -> Result<Self, GeometryError> {
        if !values.len().is_multiple_of(3) {
            return Err(GeometryError::Degenerate("flat key-point length not a multiple of 3"));
        }
        Self::new(
            values
                .chunks_exact(3)
                .map(|c| Point3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .collect()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn base(&self) -> Point3 {
        self.points[0]
    }

    pub fn tip(&self) -> Point3 {
        self.points[self.points.len() - 1]
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> Self {
        Self {
            points: self.points.iter().map(f).collect(),
        }
    }
}

/// Plane `{ p : normal · p = offset }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    normal: Unit<Vec3>,
    offset: f64,
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64) -> Result<Self, GeometryError> {
        if !normal.iter().all(|c| c.is_finite()) || !offset.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let norm = normal.norm();
        if norm < 1e-12 {
            return Err(GeometryError::Degenerate("zero plane normal"));
        }
        Ok(Self {
            normal: Unit::new_unchecked(normal / norm),
            offset: offset / norm,
        })
    }

    pub fn through_point(point: &Point3, normal: Vec3) -> Result<Self, GeometryError> {
        let unit = normal.try_normalize(1e-12).ok_or(GeometryError::Degenerate("zero plane normal"))?;
        Self::new(unit, unit.dot(&point.coords))
    }

    /// The horizontal plane `z = height`.
    pub fn horizontal(height: f64) -> Self {
        Self {
            normal: Vec3::z_axis(),
            offset: height,
        }
    }

    pub fn normal(&self) -> Vec3 {
        self.normal.into_inner()
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }

    pub fn project(&self, p: &Point3) -> Point3 {
        p - self.normal.into_inner() * self.signed_distance(p)
    }

    /// Orthonormal in-plane basis `(u, v)` with `u × v = normal`.
    pub fn basis(&self) -> (Vec3, Vec3) {
        in_plane_basis(&self.normal())
    }
}

fn in_plane_basis(normal: &Vec3) -> (Vec3, Vec3) {
    let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = (helper - normal * normal.dot(&helper)).normalize();
    let v = normal.cross(&u);
    (u, v)
}

/// Flips `n` so its z component is positive; falls back to x, then y, when
/// the vector lies in the corresponding coordinate plane.
pub fn canonical_normal(n: Vec3) -> Vec3 {
    const EPS: f64 = 1e-12;
    let flip = if n.z.abs() > EPS {
        n.z < 0.0
    } else if n.x.abs() > EPS {
        n.x < 0.0
    } else {
        n.y < 0.0
    };
    if flip {
        -n
    } else {
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit {
    pub center: Point3,
    pub radius: f64,
    pub normal: Vec3,
    /// Root-mean-square radial residual in millimetres.
    pub residual: f64,
}

/// Least-squares circle through 3D markers.
///
/// The supporting plane comes from the scatter matrix (smallest-variance
/// direction is the normal). In that plane an algebraic Kåsa fit gives the
/// initial circle, and a single Gauss-Newton step on the geometric radial
/// residual refines it.
pub fn fit_circle_3d(markers: &[Point3]) -> Result<CircleFit, GeometryError> {
    if markers.len() < 3 {
        return Err(GeometryError::TooFewPoints {
            needed: 3,
            got: markers.len(),
        });
    }
    if markers.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
        return Err(GeometryError::NonFinite);
    }
    let count = markers.len() as f64;
    let centroid: Vec3 = markers.iter().map(|p| p.coords).sum::<Vec3>() / count;
    let scatter: Matrix3<f64> = markers
        .iter()
        .map(|p| {
            let d = p.coords - centroid;
            d * d.transpose()
        })
        .sum();

    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_mid, l_max) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if l_max <= 1e-24 {
        return Err(GeometryError::Degenerate("markers coincide"));
    }
    if l_mid <= 1e-12 * l_max {
        return Err(GeometryError::Degenerate("markers are collinear"));
    }
    let normal = canonical_normal(eig.eigenvectors.column(order[0]).into_owned().normalize());
    let (u, v) = in_plane_basis(&normal);

    let planar: Vec<(f64, f64)> = markers
        .iter()
        .map(|p| {
            let d = p.coords - centroid;
            (d.dot(&u), d.dot(&v))
        })
        .collect();

    // Kåsa: x² + y² + D x + E y + F = 0 in the least-squares sense.
    let mut normal_mat = Matrix3::<f64>::zeros();
    let mut rhs = Vec3::zeros();
    for &(x, y) in &planar {
        let row = Vec3::new(x, y, 1.0);
        normal_mat += row * row.transpose();
        rhs -= row * (x * x + y * y);
    }
    let sol = normal_mat
        .lu()
        .solve(&rhs)
        .ok_or(GeometryError::Degenerate("singular circle system"))?;
    let (mut a, mut b) = (-0.5 * sol.x, -0.5 * sol.y);
    let r2 = a * a + b * b - sol.z;
    if !(r2 > 0.0) {
        return Err(GeometryError::Degenerate("non-positive fitted radius"));
    }
    let mut radius = r2.sqrt();

    // One Gauss-Newton step on r_i = |q_i - c| - R.
    let mut jtj = Matrix3::<f64>::zeros();
    let mut jtr = Vec3::zeros();
    for &(x, y) in &planar {
        let dist = ((x - a).powi(2) + (y - b).powi(2)).sqrt();
        if dist < 1e-15 {
            continue;
        }
        let j = Vec3::new(-(x - a) / dist, -(y - b) / dist, -1.0);
        jtj += j * j.transpose();
        jtr += j * (dist - radius);
    }
    if let Some(step) = jtj.lu().solve(&jtr) {
        if step.iter().all(|s| s.is_finite()) && radius - step.z > 0.0 {
            a -= step.x;
            b -= step.y;
            radius -= step.z;
        }
    }

    let residual = (planar
        .iter()
        .map(|&(x, y)| (((x - a).powi(2) + (y - b).powi(2)).sqrt() - radius).powi(2))
        .sum::<f64>()
        / count)
        .sqrt();

    Ok(CircleFit {
        center: Point3::from(centroid + u * a + v * b),
        radius,
        normal,
        residual,
    })
}

/// Clamped B-spline with explicit knot vector and control points.
#[derive(Debug, Clone)]
pub struct BSplineCurve {
    degree: usize,
    knots: Vec<f64>,
    control: Vec<Vec3>,
}

impl BSplineCurve {
    /// Interpolating clamped cubic through `keys`, chord-length parameterised,
    /// knots by averaging.
    pub fn interpolate_cubic(keys: &[Point3]) -> Result<Self, GeometryError> {
        const DEGREE: usize = 3;
        if keys.len() < DEGREE + 1 {
            return Err(GeometryError::TooFewPoints {
                needed: DEGREE + 1,
                got: keys.len(),
            });
        }
        let params = chord_length_params(keys)?;
        let n = keys.len() - 1;
        let mut knots = vec![0.0; DEGREE + 1];
        for j in 1..=(n - DEGREE) {
            knots.push(params[j..j + DEGREE].iter().sum::<f64>() / DEGREE as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, DEGREE + 1));

        let size = n + 1;
        let mut system = nalgebra::DMatrix::<f64>::zeros(size, size);
        for (row, &u) in params.iter().enumerate() {
            let span = find_span(n, DEGREE, u, &knots);
            let basis = basis_functions(span, u, DEGREE, &knots);
            for (k, value) in basis.iter().enumerate() {
                system[(row, span - DEGREE + k)] = *value;
            }
        }
        let mut rhs = nalgebra::DMatrix::<f64>::zeros(size, 3);
        for (row, p) in keys.iter().enumerate() {
            rhs[(row, 0)] = p.x;
            rhs[(row, 1)] = p.y;
            rhs[(row, 2)] = p.z;
        }
        let sol = system
            .lu()
            .solve(&rhs)
            .ok_or(GeometryError::Degenerate("singular interpolation system"))?;
        let control = (0..size)
            .map(|i| Vec3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]))
            .collect();
        Ok(Self {
            degree: DEGREE,
            knots,
            control,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn control_points(&self) -> &[Vec3] {
        &self.control
    }

    pub fn point(&self, u: f64) -> Point3 {
        Point3::from(eval_bspline(self.degree, &self.knots, &self.control, u))
    }

    /// First derivative with respect to the curve parameter.
    pub fn derivative(&self, u: f64) -> Vec3 {
        let p = self.degree;
        if p == 0 {
            return Vec3::zeros();
        }
        let deriv_ctrl: Vec<Vec3> = (0..self.control.len() - 1)
            .map(|i| {
                let span = self.knots[i + p + 1] - self.knots[i + 1];
                if span > 0.0 {
                    (self.control[i + 1] - self.control[i]) * (p as f64 / span)
                } else {
                    Vec3::zeros()
                }
            })
            .collect();
        let knots = &self.knots[1..self.knots.len() - 1];
        eval_bspline(p - 1, knots, &deriv_ctrl, u)
    }
}

fn chord_length_params(keys: &[Point3]) -> Result<Vec<f64>, GeometryError> {
    let chords: Vec<f64> = keys.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    if chords.iter().any(|&c| c < 1e-12) {
        return Err(GeometryError::Degenerate("coincident consecutive key points"));
    }
    let total: f64 = chords.iter().sum();
    let mut params = Vec::with_capacity(keys.len());
    let mut acc = 0.0;
    params.push(0.0);
    for c in &chords[..chords.len() - 1] {
        acc += c;
        params.push(acc / total);
    }
    params.push(1.0);
    Ok(params)
}

/// Knot span index for parameter `u` (last control index is `n`).
fn find_span(n: usize, degree: usize, u: f64, knots: &[f64]) -> usize {
    if u >= knots[n + 1] {
        return n;
    }
    if u <= knots[degree] {
        return degree;
    }
    let (mut low, mut high) = (degree, n + 1);
    let mut mid = (low + high) / 2;
    while u < knots[mid] || u >= knots[mid + 1] {
        if u < knots[mid] {
            high = mid;
        } else {
            low = mid;
        }
        mid = (low + high) / 2;
    }
    mid
}

/// Non-vanishing basis functions `N_{span-p..=span, p}(u)`.
fn basis_functions(span: usize, u: f64, degree: usize, knots: &[f64]) -> Vec<f64> {
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

fn eval_bspline(degree: usize, knots: &[f64], control: &[Vec3], u: f64) -> Vec3 {
    let n = control.len() - 1;
    let u = u.clamp(knots[degree], knots[n + 1]);
    let span = find_span(n, degree, u, knots);
    let basis = basis_functions(span, u, degree, knots);
    basis
        .iter()
        .enumerate()
        .map(|(k, b)| control[span - degree + k] * *b)
        .sum()
}

/// Dense whole-body polyline.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub points: Vec<Point3>,
    /// Set when fewer than four keys forced a piecewise-linear polyline.
    pub linear_fallback: bool,
}

impl Reconstruction {
    pub fn length(&self) -> f64 {
        polyline_length(&self.points)
    }
}

pub fn polyline_length(points: &[Point3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Samples the whole body at `samples` parameter values evenly spaced in
/// `[0, 1]`.
pub fn bspline_reconstruct(
    keys: &KeyPointSet,
    samples: usize,
) -> Result<Reconstruction, GeometryError> {
    if samples < 2 {
        return Err(GeometryError::TooFewPoints {
            needed: 2,
            got: samples,
        });
    }
    let pts = keys.points();
    let last = (samples - 1) as f64;
    if pts.len() < 4 {
        let params = chord_length_params(pts)?;
        let points = (0..samples)
            .map(|i| {
                let u = i as f64 / last;
                let seg = params
                    .windows(2)
                    .position(|w| u <= w[1])
                    .unwrap_or(params.len() - 2);
                let t = (u - params[seg]) / (params[seg + 1] - params[seg]);
                pts[seg] + (pts[seg + 1] - pts[seg]) * t
            })
            .collect();
        return Ok(Reconstruction {
            points,
            linear_fallback: true,
        });
    }
    let curve = BSplineCurve::interpolate_cubic(pts)?;
    let mut points: Vec<Point3> = (0..samples).map(|i| curve.point(i as f64 / last)).collect();
    points[0] = pts[0];
    points[samples - 1] = pts[pts.len() - 1];
    Ok(Reconstruction {
        points,
        linear_fallback: false,
    })
}

fn spline_tangent(keys: &KeyPointSet, at_end: bool) -> Result<Vec3, GeometryError> {
    let pts = keys.points();
    let raw = if pts.len() < 4 {
        if at_end {
            pts[pts.len() - 1] - pts[pts.len() - 2]
        } else {
            pts[1] - pts[0]
        }
    } else {
        let curve = BSplineCurve::interpolate_cubic(pts)?;
        curve.derivative(if at_end { 1.0 } else { 0.0 })
    };
    raw.try_normalize(1e-12)
        .ok_or(GeometryError::Degenerate("zero-length tangent"))
}

/// Unit tangent of the reconstructed body at the last key point.
pub fn tip_tangent(keys: &KeyPointSet) -> Result<Vec3, GeometryError> {
    spline_tangent(keys, true)
}

/// Unit tangent of the reconstructed body at the first key point.
pub fn base_tangent(keys: &KeyPointSet) -> Result<Vec3, GeometryError> {
    spline_tangent(keys, false)
}

pub fn ray_plane_intersect(
    origin: &Point3,
    dir: &Vec3,
    plane: &Plane,
) -> Result<Point3, GeometryError> {
    let normal = plane.normal();
    let denom = normal.dot(dir);
    if denom.abs() < 1e-12 {
        return Err(GeometryError::NoIntersection);
    }
    let t = (plane.offset() - normal.dot(&origin.coords)) / denom;
    if t < 0.0 {
        return Err(GeometryError::BehindOrigin(t));
    }
    let hit = origin + dir * t;
    // Snap out the rounding error along the normal.
    Ok(hit - normal * plane.signed_distance(&hit))
}
