//! Symmetry breaking by mirror points.
//!
//! A loudspeaker position `v` is *generic* for a hyperplane arrangement when
//! none of the polynomial factors below vanish at `v`. For such positions the
//! set of reflections of `v` has no nontrivial distance-preserving
//! relabeling, and every speaker-to-mirror distance is unique.
//!
//! Factors (with `wᵢ = ref_{Hᵢ}(v)`):
//! - `g(H₁,H₂,H₃) = ‖w₁ − w₃‖² − ‖w₂ − v‖²` over all triples,
//! - `h(H₁,H₂) = ‖w₁ − v‖² − ‖w₂ − v‖²` over distinct pairs,
//! - spatial form: `Σ_{i<j} (‖wᵢ − wⱼ‖² − ‖w′ᵢ − w′ⱼ‖²)²` for a linearly
//!   independent triple against every other ordered triple,
//! - planar form: `‖w₁ − w₂‖² − ‖w′₁ − w′₂‖²` for a non-parallel pair against
//!   every other unordered pair (requires that no three hyperplanes meet in
//!   codimension two).

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{
    linearly_independent_hyperplanes, numerical_rank, reflect_point, Hyperplane, Point,
    DEFAULT_RANK_TOL,
};

/// Default relative threshold for factor nonvanishing.
pub const DEFAULT_GENERICITY_TOL: f64 = 1e-9;

/// Hyperplanes are treated as equal when normal and offset agree to this tolerance.
const SAME_PLANE_TOL: f64 = 1e-12;

/// Automorphism search is a brute-force permutation search; cap the input size.
pub const MAX_AUTOMORPHISM_POINTS: usize = 10;

/// A finite set of distinct affine hyperplanes in ℝⁿ.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrangement {
    hyperplanes: Vec<Hyperplane>,
    dim: usize,
}

impl Arrangement {
    pub fn new(hyperplanes: Vec<Hyperplane>) -> Result<Self> {
        let dim = hyperplanes.first().map(Hyperplane::dim).ok_or_else(|| {
            Error::InvalidArgument("arrangement needs at least one hyperplane".into())
        })?;
        for (i, h) in hyperplanes.iter().enumerate() {
            if h.dim() != dim {
                return Err(Error::InvalidArgument(format!(
                    "hyperplane {i} has dimension {}, expected {dim}",
                    h.dim()
                )));
            }
            for (j, other) in hyperplanes[..i].iter().enumerate() {
                if h.same_set(other, SAME_PLANE_TOL) {
                    return Err(Error::InvariantViolation(format!(
                        "hyperplanes {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(Self { hyperplanes, dim })
    }

    pub fn hyperplanes(&self) -> &[Hyperplane] {
        &self.hyperplanes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.hyperplanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyperplanes.is_empty()
    }

    /// Reflections of `v` in every hyperplane, in arrangement order.
    pub fn reflections(&self, v: &Point) -> Vec<Point> {
        self.hyperplanes
            .iter()
            .map(|h| reflect_point(h, v))
            .collect()
    }

    /// Some triple of hyperplanes whose common intersection is nonempty of
    /// codimension two (three concurrent lines in the plane), if any.
    pub fn codim2_triple(&self) -> Option<[usize; 3]> {
        let k = self.len();
        for a in 0..k {
            for b in (a + 1)..k {
                for c in (b + 1)..k {
                    if meet_in_codim2(&[
                        &self.hyperplanes[a],
                        &self.hyperplanes[b],
                        &self.hyperplanes[c],
                    ]) {
                        return Some([a, b, c]);
                    }
                }
            }
        }
        None
    }
}

fn meet_in_codim2(hs: &[&Hyperplane]) -> bool {
    let dim = hs[0].dim();
    let normals = DMatrix::from_fn(hs.len(), dim, |r, c| hs[r].normal()[c]);
    let augmented = DMatrix::from_fn(hs.len(), dim + 1, |r, c| {
        if c < dim {
            hs[r].normal()[c]
        } else {
            hs[r].offset()
        }
    });
    let rank = numerical_rank(&normals, DEFAULT_RANK_TOL);
    rank == 2 && numerical_rank(&augmented, DEFAULT_RANK_TOL) == rank
}

/// `‖ref_{h1}(v) − ref_{h3}(v)‖² − ‖ref_{h2}(v) − v‖²`.
pub fn eval_g(h1: &Hyperplane, h2: &Hyperplane, h3: &Hyperplane, v: &Point) -> f64 {
    reflect_point(h1, v).distance_squared(&reflect_point(h3, v))
        - reflect_point(h2, v).distance_squared(v)
}

/// `‖ref_{h1}(v) − v‖² − ‖ref_{h2}(v) − v‖²`; the hyperplanes must differ.
pub fn eval_h(h1: &Hyperplane, h2: &Hyperplane, v: &Point) -> Result<f64> {
    if h1.same_set(h2, SAME_PLANE_TOL) {
        return Err(Error::InvalidArgument(
            "h factor needs two distinct hyperplanes".into(),
        ));
    }
    Ok(reflect_point(h1, v).distance_squared(v) - reflect_point(h2, v).distance_squared(v))
}

/// Which form of the pair/triple factor to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Triples with three linearly independent normals (n ≥ 3).
    Spatial,
    /// Non-parallel pairs; requires that no three hyperplanes meet in codimension 2.
    Planar,
}

impl Variant {
    pub fn for_dimension(dim: usize) -> Self {
        if dim >= 3 {
            Variant::Spatial
        } else {
            Variant::Planar
        }
    }
}

/// A vanishing factor, identified by hyperplane indices into the arrangement.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    G { h1: usize, h2: usize, h3: usize },
    H { h1: usize, h2: usize },
    SpatialPair { lhs: [usize; 3], rhs: [usize; 3] },
    PlanarPair { lhs: [usize; 2], rhs: [usize; 2] },
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::G { h1, h2, h3 } => write!(f, "g[H{h1},H{h2},H{h3}]"),
            Factor::H { h1, h2 } => write!(f, "h[H{h1},H{h2}]"),
            Factor::SpatialPair { lhs, rhs } => write!(
                f,
                "f[(H{},H{},H{}),(H{},H{},H{})]",
                lhs[0], lhs[1], lhs[2], rhs[0], rhs[1], rhs[2]
            ),
            Factor::PlanarPair { lhs, rhs } => {
                write!(f, "f[(H{},H{}),(H{},H{})]", lhs[0], lhs[1], rhs[0], rhs[1])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailedFactor {
    pub factor: Factor,
    /// Magnitude compared against the threshold (a squared distance, m²).
    pub magnitude: f64,
    pub threshold: f64,
}

/// Outcome of a genericity check; passes iff no factor vanished.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericityReport {
    pub variant: Variant,
    pub failed_factor: Option<FailedFactor>,
    /// Number of factors evaluated before the verdict.
    pub factors_checked: usize,
}

impl GenericityReport {
    pub fn passed(&self) -> bool {
        self.failed_factor.is_none()
    }
}

impl fmt::Display for GenericityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failed_factor {
            None => write!(
                f,
                "passed ({:?} variant, {} factors nonzero)",
                self.variant, self.factors_checked
            ),
            Some(ff) => write!(
                f,
                "failed: factor {} vanishes (|value| = {:.3e} <= threshold {:.3e}, {:?} variant)",
                ff.factor, ff.magnitude, ff.threshold, self.variant
            ),
        }
    }
}

/// Checks genericity of `v` with the variant matching the arrangement's dimension.
///
/// The planar variant is rejected with a precondition error when three
/// hyperplanes meet in codimension two.
pub fn genericity_check(a: &Arrangement, v: &Point, tol: f64) -> Result<GenericityReport> {
    genericity_check_with(a, v, tol, Variant::for_dimension(a.dim()))
}

pub fn genericity_check_with(
    a: &Arrangement,
    v: &Point,
    tol: f64,
    variant: Variant,
) -> Result<GenericityReport> {
    if variant == Variant::Planar {
        if let Some([i, j, k]) = a.codim2_triple() {
            return Err(Error::Precondition(format!(
                "hyperplanes H{i}, H{j}, H{k} meet in codimension 2; the planar variant does not apply"
            )));
        }
    }
    evaluate_factors(a, v, tol, variant)
}

/// Evaluates all factors without checking the arrangement hypothesis.
///
/// Useful for demonstrating arrangements (such as [`dihedral_counterexample`])
/// where symmetry breaking is impossible.
pub fn evaluate_factors(
    a: &Arrangement,
    v: &Point,
    tol: f64,
    variant: Variant,
) -> Result<GenericityReport> {
    if v.dim() != a.dim() {
        return Err(Error::InvalidArgument(format!(
            "point has dimension {}, arrangement has dimension {}",
            v.dim(),
            a.dim()
        )));
    }
    let hs = a.hyperplanes();
    let k = hs.len();
    let w = a.reflections(v);
    // Squared distances: to_v[i] = ‖wᵢ − v‖², pair[i][j] = ‖wᵢ − wⱼ‖².
    let to_v: Vec<f64> = w.iter().map(|wi| wi.distance_squared(v)).collect();
    let pair: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| w[i].distance_squared(&w[j])).collect())
        .collect();
    let scale = to_v.iter().cloned().fold(0.0, f64::max).sqrt();
    let threshold = tol * scale * scale;

    let mut checked = 0usize;
    let report = |factor: Factor, magnitude: f64, checked: usize| GenericityReport {
        variant,
        failed_factor: Some(FailedFactor {
            factor,
            magnitude,
            threshold,
        }),
        factors_checked: checked,
    };

    for h1 in 0..k {
        for h2 in 0..k {
            for h3 in 0..k {
                checked += 1;
                let g = pair[h1][h3] - to_v[h2];
                if g.abs() <= threshold {
                    return Ok(report(Factor::G { h1, h2, h3 }, g.abs(), checked));
                }
            }
        }
    }
    for h1 in 0..k {
        for h2 in (h1 + 1)..k {
            checked += 1;
            let h = to_v[h1] - to_v[h2];
            if h.abs() <= threshold {
                return Ok(report(Factor::H { h1, h2 }, h.abs(), checked));
            }
        }
    }
    match variant {
        Variant::Spatial => {
            let triples: Vec<[usize; 3]> = (0..k)
                .flat_map(|a| (0..k).flat_map(move |b| (0..k).map(move |c| [a, b, c])))
                .collect();
            for lhs in triples.iter().filter(|t| {
                t[0] != t[1]
                    && t[0] != t[2]
                    && t[1] != t[2]
                    && linearly_independent_hyperplanes(
                        &[&hs[t[0]], &hs[t[1]], &hs[t[2]]],
                        DEFAULT_RANK_TOL,
                    )
            }) {
                for rhs in triples.iter().filter(|t| *t != lhs) {
                    checked += 1;
                    let sum: f64 = [(0, 1), (0, 2), (1, 2)]
                        .iter()
                        .map(|&(i, j)| (pair[lhs[i]][lhs[j]] - pair[rhs[i]][rhs[j]]).powi(2))
                        .sum();
                    // The sum of squares is quartic in distances; compare its root.
                    let magnitude = sum.sqrt();
                    if magnitude <= threshold {
                        return Ok(report(
                            Factor::SpatialPair {
                                lhs: *lhs,
                                rhs: *rhs,
                            },
                            magnitude,
                            checked,
                        ));
                    }
                }
            }
        }
        Variant::Planar => {
            for a1 in 0..k {
                for a2 in 0..k {
                    if a1 == a2
                        || !linearly_independent_hyperplanes(&[&hs[a1], &hs[a2]], DEFAULT_RANK_TOL)
                    {
                        continue;
                    }
                    for b1 in 0..k {
                        for b2 in 0..k {
                            if (b1 == a1 && b2 == a2) || (b1 == a2 && b2 == a1) {
                                continue;
                            }
                            checked += 1;
                            let f = pair[a1][a2] - pair[b1][b2];
                            if f.abs() <= threshold {
                                return Ok(report(
                                    Factor::PlanarPair {
                                        lhs: [a1, a2],
                                        rhs: [b1, b2],
                                    },
                                    f.abs(),
                                    checked,
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(GenericityReport {
        variant,
        failed_factor: None,
        factors_checked: checked,
    })
}

/// `k` lines through the origin of ℝ² at angles `iπ/k`, `i = 0..k`. The
/// reflections of any point in these lines form a regular `k`-gon.
pub fn dihedral_counterexample(k: usize) -> Result<Arrangement> {
    if k < 3 {
        return Err(Error::InvalidArgument(format!(
            "need k >= 3 lines, got {k}"
        )));
    }
    let lines = (0..k)
        .map(|i| {
            let t = i as f64 * std::f64::consts::PI / k as f64;
            Hyperplane::new(vec![-t.sin(), t.cos()], 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Arrangement::new(lines)
}

/// All permutations `π` of `points` preserving every pairwise distance within
/// `tol`. The identity is always included; results are in lexicographic order.
pub fn distance_automorphisms(points: &[Point], tol: f64) -> Result<Vec<Vec<usize>>> {
    if points.len() > MAX_AUTOMORPHISM_POINTS {
        return Err(Error::TooLarge(format!(
            "{} points exceed the brute-force limit of {MAX_AUTOMORPHISM_POINTS}",
            points.len()
        )));
    }
    let n = points.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| points[i].distance(&points[j])).collect())
        .collect();
    let mut out = Vec::new();
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    extend_automorphism(&dist, tol, &mut perm, &mut used, &mut out);
    Ok(out)
}

fn extend_automorphism(
    dist: &[Vec<f64>],
    tol: f64,
    perm: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<Vec<usize>>,
) {
    let i = perm.len();
    if i == dist.len() {
        out.push(perm.clone());
        return;
    }
    for cand in 0..dist.len() {
        if used[cand] {
            continue;
        }
        if perm
            .iter()
            .enumerate()
            .all(|(j, &pj)| (dist[cand][pj] - dist[i][j]).abs() <= tol)
        {
            used[cand] = true;
            perm.push(cand);
            extend_automorphism(dist, tol, perm, used, out);
            perm.pop();
            used[cand] = false;
        }
    }
}
