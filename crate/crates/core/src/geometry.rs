//! Points, oriented hyperplanes, bounded walls and reflections in ℝⁿ.
//!
//! The dimension is a runtime property of every value. Planar examples
//! (symmetry analysis) use n = 2, the self-location pipeline uses n = 3.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value threshold used for numerical ranks.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// Hyperplane normals must have unit length within this tolerance.
pub const UNIT_NORMAL_TOL: f64 = 1e-12;

/// Boundary vertices must lie on the wall plane within this distance (m).
pub const BOUNDARY_PLANE_TOL: f64 = 1e-9;

/// A point in ℝⁿ with finite coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point(DVector<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument(
                "point needs at least one coordinate".into(),
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "point coordinates must be finite, got {coords:?}"
            )));
        }
        Ok(Self(DVector::from_vec(coords)))
    }

    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        Self::new(v.as_slice().to_vec())
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Self(DVector::from_vec(vec![x, y]))
    }

    pub fn xyz(x: f64, y: f64, z: f64) -> Self {
        Self(DVector::from_vec(vec![x, y, z]))
    }

    pub fn origin(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn distance_squared(&self, other: &Point) -> f64 {
        (&self.0 - &other.0).norm_squared()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        self.distance_squared(other).sqrt()
    }

    /// The point as a fixed-size 3-vector. Panics if `dim() != 3`.
    pub fn to_vector3(&self) -> Vector3<f64> {
        assert_eq!(self.dim(), 3, "expected a point in 3D");
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }
}

impl From<Vector3<f64>> for Point {
    fn from(v: Vector3<f64>) -> Self {
        Self::xyz(v.x, v.y, v.z)
    }
}

impl From<Vector2<f64>> for Point {
    fn from(v: Vector2<f64>) -> Self {
        Self::xy(v.x, v.y)
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Self {
        p.0.as_slice().to_vec()
    }
}

/// An affine hyperplane `{x : ⟨normal, x⟩ = offset}` with unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    normal: DVector<f64>,
    offset: f64,
}

impl Hyperplane {
    /// Builds a hyperplane from an arbitrary nonzero normal. Normal and
    /// offset are rescaled together so the normal has unit length.
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let n = DVector::from_vec(normal);
        if n.is_empty() || n.iter().any(|c| !c.is_finite()) || !offset.is_finite() {
            return Err(Error::InvalidArgument(
                "hyperplane data must be finite and nonempty".into(),
            ));
        }
        let len = n.norm();
        if len == 0.0 {
            return Err(Error::InvalidArgument(
                "hyperplane normal must be nonzero".into(),
            ));
        }
        Ok(Self {
            normal: n / len,
            offset: offset / len,
        })
    }

    /// Builds a hyperplane whose normal is already unit length.
    pub fn with_unit_normal(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let n = DVector::from_vec(normal);
        let len = n.norm();
        if (len - 1.0).abs() > UNIT_NORMAL_TOL || !offset.is_finite() {
            return Err(Error::InvariantViolation(format!(
                "hyperplane normal must have unit length, got |n| = {len}"
            )));
        }
        Ok(Self { normal: n, offset })
    }

    /// Hyperplane through `point` with the given normal direction.
    pub fn through(point: &Point, normal: Vec<f64>) -> Result<Self> {
        let n = DVector::from_vec(normal);
        let offset = n.dot(point.coords());
        Self::new(n.as_slice().to_vec(), offset)
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn normal(&self) -> &DVector<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: &Point) -> f64 {
        self.normal.dot(p.coords()) - self.offset
    }

    pub fn contains(&self, p: &Point, tol: f64) -> bool {
        self.signed_distance(p).abs() <= tol
    }

    /// Equality as point sets: same (normal, offset) up to a common sign.
    pub fn same_set(&self, other: &Hyperplane, tol: f64) -> bool {
        if self.dim() != other.dim() {
            return false;
        }
        let same = (&self.normal - &other.normal).amax() <= tol
            && (self.offset - other.offset).abs() <= tol;
        let flipped = (&self.normal + &other.normal).amax() <= tol
            && (self.offset + other.offset).abs() <= tol;
        same || flipped
    }
}

/// Reflection of `v` in the hyperplane `h`.
pub fn reflect_point(h: &Hyperplane, v: &Point) -> Point {
    assert_eq!(
        h.dim(),
        v.dim(),
        "dimension mismatch between hyperplane and point"
    );
    let s = h.signed_distance(v);
    Point(v.coords() - h.normal() * (2.0 * s))
}

/// A planar surface, optionally bounded by a simple polygon lying in its plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Wall {
    plane: Hyperplane,
    boundary: Option<Vec<Point>>,
}

impl Wall {
    /// An unbounded wall (the whole plane reflects).
    pub fn unbounded(plane: Hyperplane) -> Self {
        Self {
            plane,
            boundary: None,
        }
    }

    /// A wall bounded by the polygon `boundary`, which must be simple and lie in `plane`.
    pub fn bounded(plane: Hyperplane, boundary: Vec<Point>) -> Result<Self> {
        if plane.dim() != 3 {
            return Err(Error::InvalidArgument(
                "bounded walls are only supported in 3D".into(),
            ));
        }
        if boundary.len() < 3 {
            return Err(Error::InvariantViolation(format!(
                "wall boundary needs at least 3 vertices, got {}",
                boundary.len()
            )));
        }
        for (i, p) in boundary.iter().enumerate() {
            if p.dim() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "boundary vertex {i} is not 3D"
                )));
            }
            let d = plane.signed_distance(p);
            if d.abs() > BOUNDARY_PLANE_TOL {
                return Err(Error::InvariantViolation(format!(
                    "boundary vertex {i} lies {d:e} m off the wall plane"
                )));
            }
        }
        let wall = Self {
            plane,
            boundary: Some(boundary),
        };
        let poly = wall.projected_boundary().expect("boundary present");
        if !is_simple_polygon(&poly) {
            return Err(Error::InvariantViolation(
                "wall boundary is not a simple polygon".into(),
            ));
        }
        Ok(wall)
    }

    /// Axis-aligned rectangular wall spanning `[lo, hi]` in the two axes other than `axis`,
    /// at coordinate `at` along `axis`.
    pub fn axis_rectangle(axis: usize, at: f64, lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        if axis > 2 {
            return Err(Error::InvalidArgument("axis must be 0, 1 or 2".into()));
        }
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let corner = |ua: f64, ub: f64| {
            let mut c = [0.0; 3];
            c[axis] = at;
            c[a] = ua;
            c[b] = ub;
            Point::xyz(c[0], c[1], c[2])
        };
        let boundary = vec![
            corner(lo[a], lo[b]),
            corner(hi[a], lo[b]),
            corner(hi[a], hi[b]),
            corner(lo[a], hi[b]),
        ];
        let mut normal = vec![0.0; 3];
        normal[axis] = 1.0;
        Self::bounded(Hyperplane::new(normal, at)?, boundary)
    }

    pub fn plane(&self) -> &Hyperplane {
        &self.plane
    }

    pub fn boundary(&self) -> Option<&[Point]> {
        self.boundary.as_deref()
    }

    pub fn is_bounded(&self) -> bool {
        self.boundary.is_some()
    }

    /// Whether the segment `a`–`b` hits the reflecting surface. Unbounded walls
    /// are hit by every segment; segments lying in the plane never hit.
    pub fn segment_hits(&self, a: &Point, b: &Point) -> bool {
        let Some(poly) = self.projected_boundary() else {
            return true;
        };
        let sa = self.plane.signed_distance(a);
        let sb = self.plane.signed_distance(b);
        if (sa > 0.0 && sb > 0.0) || (sa < 0.0 && sb < 0.0) || (sa == 0.0 && sb == 0.0) {
            return false;
        }
        let t = sa / (sa - sb);
        let hit = a.coords() + (b.coords() - a.coords()) * t;
        let (u, w) = plane_basis(&self.plane);
        let q = Vector2::new(hit.dot(&u), hit.dot(&w));
        point_in_polygon(&q, &poly)
    }

    fn projected_boundary(&self) -> Option<Vec<Vector2<f64>>> {
        let boundary = self.boundary.as_ref()?;
        let (u, w) = plane_basis(&self.plane);
        Some(
            boundary
                .iter()
                .map(|p| Vector2::new(p.coords().dot(&u), p.coords().dot(&w)))
                .collect(),
        )
    }
}

/// The mirror point of a wall: the loudspeaker reflected in the wall's plane.
pub fn mirror_point(wall: &Wall, speaker: &Point) -> Point {
    reflect_point(wall.plane(), speaker)
}

fn plane_basis(h: &Hyperplane) -> (DVector<f64>, DVector<f64>) {
    let n = Vector3::new(h.normal()[0], h.normal()[1], h.normal()[2]);
    let helper = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = n.cross(&helper).normalize();
    let w = n.cross(&u);
    (
        DVector::from_column_slice(u.as_slice()),
        DVector::from_column_slice(w.as_slice()),
    )
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn segments_intersect(
    p1: &Vector2<f64>,
    p2: &Vector2<f64>,
    q1: &Vector2<f64>,
    q2: &Vector2<f64>,
) -> bool {
    let d1 = cross2(&(q2 - q1), &(p1 - q1));
    let d2 = cross2(&(q2 - q1), &(p2 - q1));
    let d3 = cross2(&(p2 - p1), &(q1 - p1));
    let d4 = cross2(&(p2 - p1), &(q2 - p1));
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0)) && d1 != 0.0 && d2 != 0.0
}

fn is_simple_polygon(poly: &[Vector2<f64>]) -> bool {
    let n = poly.len();
    let area2: f64 = (0..n).map(|i| cross2(&poly[i], &poly[(i + 1) % n])).sum();
    if area2.abs() < 1e-12 {
        return false;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(&poly[i], &poly[(i + 1) % n], &poly[j], &poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

// Crossing-number test; points on the boundary count as inside.
fn point_in_polygon(q: &Vector2<f64>, poly: &[Vector2<f64>]) -> bool {
    let n = poly.len();
    let scale = poly.iter().map(|p| p.amax()).fold(1.0, f64::max);
    let eps = 1e-12 * scale;
    let mut inside = false;
    for i in 0..n {
        let a = &poly[i];
        let b = &poly[(i + 1) % n];
        let edge = b - a;
        let len = edge.norm();
        if len > 0.0 {
            let dist = cross2(&edge, &(q - a)).abs() / len;
            let t = (q - a).dot(&edge) / (len * len);
            if dist <= eps && (-eps..=1.0 + eps).contains(&t) {
                return true;
            }
        }
        if (a.y > q.y) != (b.y > q.y) {
            let x = a.x + (q.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if q.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Numerical rank: number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Dimension of the affine span of `points`, i.e. the numerical rank of the
/// matrix of differences `pᵢ − p₀`.
pub fn affine_dimension(points: &[Point], tol: f64) -> Result<usize> {
    let first = points.first().ok_or_else(|| {
        Error::InvalidArgument("affine_dimension needs at least one point".into())
    })?;
    let dim = first.dim();
    if points.iter().any(|p| p.dim() != dim) {
        return Err(Error::InvalidArgument(
            "points have mixed dimensions".into(),
        ));
    }
    if points.len() == 1 {
        return Ok(0);
    }
    let diffs = DMatrix::from_fn(dim, points.len() - 1, |r, c| {
        points[c + 1].coords()[r] - first.coords()[r]
    });
    Ok(numerical_rank(&diffs, tol))
}

/// True iff the normals of `hs` are linearly independent.
pub fn linearly_independent_hyperplanes(hs: &[&Hyperplane], tol: f64) -> bool {
    let Some(first) = hs.first() else {
        return true;
    };
    let dim = first.dim();
    if hs.len() > dim {
        return false;
    }
    let normals = DMatrix::from_fn(dim, hs.len(), |r, c| hs[c].normal()[r]);
    numerical_rank(&normals, tol) == hs.len()
}
