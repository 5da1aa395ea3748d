//! Squared-distance matrices, their Cayley-Menger bordering, and the
//! distance-only identities used by the reconstruction pipeline:
//! bordered rank, the Cayley-Menger polynomial, barycentric point recovery,
//! and mutual distances of points known only through their distances to a basis.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{numerical_rank, Point};

/// Relative tolerance used to decide whether the Cayley-Menger or inner-product
/// matrix of a basis is invertible.
const INVERTIBILITY_TOL: f64 = 1e-12;

/// Relative tolerance (w.r.t. the largest entry) below which tiny negative
/// squared distances are considered round-off.
pub const CLAMP_TOL: f64 = 1e-9;

/// Symmetric matrix of squared distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(DMatrix<f64>);

impl DistanceMatrix {
    /// Validates the invariants exactly: square, symmetric, zero diagonal, nonnegative.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::InvariantViolation(
                "distance matrix must be square".into(),
            ));
        }
        let k = entries.nrows();
        for i in 0..k {
            if entries[(i, i)] != 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "diagonal entry {i} is nonzero"
                )));
            }
            for j in 0..k {
                let e = entries[(i, j)];
                if !e.is_finite() || e < 0.0 {
                    return Err(Error::InvariantViolation(format!(
                        "entry ({i},{j}) = {e} is not a squared distance"
                    )));
                }
                if e != entries[(j, i)] {
                    return Err(Error::InvariantViolation(format!(
                        "entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        Ok(Self(entries))
    }

    pub fn from_points(points: &[Point]) -> Self {
        let k = points.len();
        Self(DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                0.0
            } else {
                points[i].distance_squared(&points[j])
            }
        }))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// The principal submatrix on `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> DistanceMatrix {
        let r = indices.len();
        Self(DMatrix::from_fn(r, r, |a, b| {
            self.0[(indices[a], indices[b])]
        }))
    }
}

/// A distance matrix bordered by a leading zero and a row/column of ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CmMatrix(DMatrix<f64>);

impl CmMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Number of points the matrix was built from.
    pub fn points(&self) -> usize {
        self.0.nrows() - 1
    }
}

fn border(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    DMatrix::from_fn(k + 1, k + 1, |i, j| match (i, j) {
        (0, 0) => 0.0,
        (0, _) | (_, 0) => 1.0,
        _ => m[(i - 1, j - 1)],
    })
}

/// Cayley-Menger matrix of a squared-distance matrix.
pub fn cm_matrix(d: &DistanceMatrix) -> CmMatrix {
    CmMatrix(border(d.as_matrix()))
}

/// Rank of `m` bordered like a Cayley-Menger matrix, minus two.
///
/// For the squared-distance matrix of a point set this is the dimension of
/// its affine span. The rank uses the relative singular-value threshold `tol`.
pub fn bordered_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    assert!(m.is_square(), "bordered_rank needs a square matrix");
    // Scaling the inner block by a positive constant leaves the rank of the
    // bordered matrix unchanged; normalizing balances it against the ones.
    let scale = m.amax();
    let inner = if scale > 0.0 { m / scale } else { m.clone() };
    numerical_rank(&border(&inner), tol).saturating_sub(2)
}

/// Rank of a Cayley-Menger matrix, computed with the same normalization as
/// [`bordered_rank`].
pub fn cm_rank(c: &CmMatrix, tol: f64) -> usize {
    let k = c.points();
    bordered_rank(&c.as_matrix().view((1, 1), (k, k)).into_owned(), tol) + 2
}

/// Gram matrix `⟨vᵢ, vⱼ⟩` of a point set.
pub fn gram_matrix(points: &[Point]) -> DMatrix<f64> {
    let k = points.len();
    DMatrix::from_fn(k, k, |i, j| points[i].coords().dot(points[j].coords()))
}

/// Cayley-Menger polynomial of four microphones evaluated at the squared
/// distances `x`: the determinant of `c` bordered by the column `(1, x)` and
/// a zero corner. It vanishes exactly when `x` is the squared-distance
/// profile of a point of ℝ³ to the microphones.
pub fn cm_polynomial(c: &CmMatrix, x: &[f64; 4]) -> Result<f64> {
    if c.as_matrix().shape() != (5, 5) {
        return Err(Error::InvalidArgument(format!(
            "expected the 5x5 Cayley-Menger matrix of four microphones, got {:?}",
            c.as_matrix().shape()
        )));
    }
    let inner = c.as_matrix();
    let m = DMatrix::from_fn(6, 6, |i, j| match (i, j) {
        (5, 5) => 0.0,
        (5, 0) | (0, 5) => 1.0,
        (5, j) => x[j - 1],
        (i, 5) => x[i - 1],
        (i, j) => inner[(i, j)],
    });
    Ok(m.lu().determinant())
}

fn check_invertible(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if numerical_rank(m, INVERTIBILITY_TOL) < m.nrows() {
        return Err(Error::Degenerate(format!(
            "{what} is singular (basis points are affinely dependent)"
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate(format!("{what} could not be inverted")))
}

/// Recovers a point from its squared distances `d` to `n + 1` basis points
/// affinely spanning ℝⁿ.
pub fn recover_point(basis: &[Point], d: &[f64]) -> Result<Point> {
    let (_, offset) = centered_solve(basis, d)?;
    Point::from_vector(basis[0].coords() + offset)
}

/// Barycentric coordinates `α` of the point with squared distances `d` to
/// `basis`; they satisfy `Σ αᵢ = 1` and `w = Σ αᵢ vᵢ`.
pub fn barycentric_coordinates(basis: &[Point], d: &[f64]) -> Result<Vec<f64>> {
    let (edges, offset) = centered_solve(basis, d)?;
    let tail = edges
        .transpose()
        .col_piv_qr()
        .solve(&offset)
        .ok_or_else(|| Error::Degenerate("basis edge matrix could not be inverted".into()))?;
    let mut alpha = vec![1.0 - tail.sum()];
    alpha.extend(tail.iter());
    Ok(alpha)
}

/// Solves `2 eᵢ·(w − v₀) = |eᵢ|² + d₀ − dᵢ` with `eᵢ = vᵢ − v₀`, working in
/// coordinates relative to `v₀` so that the basis location does not cost
/// precision. Returns the edge matrix (rows `eᵢ`) and `w − v₀`.
fn centered_solve(basis: &[Point], d: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let Some(first) = basis.first() else {
        return Err(Error::InvalidArgument("empty basis".into()));
    };
    let dim = first.dim();
    if basis.len() != dim + 1 {
        return Err(Error::InvalidArgument(format!(
            "a basis of ℝ^{dim} needs {} points, got {}",
            dim + 1,
            basis.len()
        )));
    }
    if d.len() != basis.len() {
        return Err(Error::InvalidArgument(
            "need one squared distance per basis point".into(),
        ));
    }
    if basis.iter().any(|p| p.dim() != dim) {
        return Err(Error::InvalidArgument(
            "basis points have mixed dimensions".into(),
        ));
    }
    check_invertible(&border(&gram_matrix(basis)), "inner-product matrix")?;
    let origin = first.coords();
    let edges = DMatrix::from_fn(dim, dim, |i, j| basis[i + 1].coords()[j] - origin[j]);
    let rhs = DVector::from_fn(dim, |i, _| {
        0.5 * (edges.row(i).norm_squared() + d[0] - d[i + 1])
    });
    let offset = edges
        .clone()
        .col_piv_qr()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("basis edge matrix could not be inverted".into()))?;
    Ok((edges, offset))
}

/// Builds the `(n+2) × m` matrix whose columns are `(1, d₀, …, dₙ)` from
/// per-point squared-distance profiles.
pub fn delta_bar(profiles: &[Vec<f64>], basis_len: usize) -> Result<DMatrix<f64>> {
    if profiles.iter().any(|p| p.len() != basis_len) {
        return Err(Error::InvalidArgument(
            "every profile needs one entry per basis point".into(),
        ));
    }
    Ok(DMatrix::from_fn(basis_len + 1, profiles.len(), |r, c| {
        if r == 0 {
            1.0
        } else {
            profiles[c][r - 1]
        }
    }))
}

/// Mutual squared distances `ΔᵀC⁻¹Δ` of points known through their squared
/// distances to a basis whose Cayley-Menger matrix is `c`.
///
/// The result is symmetrized, the diagonal is set to zero, and small negative
/// entries are clamped to zero so the output is a valid [`DistanceMatrix`].
pub fn mutual_distances(c: &CmMatrix, delta: &DMatrix<f64>) -> Result<DistanceMatrix> {
    let cm = c.as_matrix();
    if delta.nrows() != cm.nrows() {
        return Err(Error::InvalidArgument(format!(
            "delta has {} rows, Cayley-Menger matrix has size {}",
            delta.nrows(),
            cm.nrows()
        )));
    }
    if delta.row(0).iter().any(|&v| v != 1.0) {
        return Err(Error::InvalidArgument(
            "first row of delta must be all ones".into(),
        ));
    }
    let inv = check_invertible(cm, "Cayley-Menger matrix")?;
    let raw = delta.transpose() * inv * delta;
    let m = raw.nrows();
    let scale = raw.amax().max(delta.amax());
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let mut v = 0.5 * (raw[(i, j)] + raw[(j, i)]);
            if v < 0.0 {
                if v < -CLAMP_TOL * scale {
                    log::debug!("clamping squared distance {v:e} at ({i},{j}) to zero");
                }
                v = 0.0;
            }
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    DistanceMatrix::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{affine_dimension, DEFAULT_RANK_TOL};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_mics() -> Vec<Point> {
        vec![
            Point::xyz(0.0, 0.0, 0.0),
            Point::xyz(1.0, 0.0, 0.0),
            Point::xyz(0.0, 1.0, 0.0),
            Point::xyz(0.0, 0.0, 1.0),
        ]
    }

    fn square() -> Vec<Point> {
        vec![
            Point::xy(0.0, 0.0),
            Point::xy(1.0, 0.0),
            Point::xy(1.0, 1.0),
            Point::xy(0.0, 1.0),
        ]
    }

    fn tetra_distances() -> DistanceMatrix {
        DistanceMatrix::new(DMatrix::from_fn(
            4,
            4,
            |i, j| if i == j { 0.0 } else { 1.0 },
        ))
        .unwrap()
    }

    #[test]
    fn cm_matrix_of_single_point() {
        let d = DistanceMatrix::new(DMatrix::zeros(1, 1)).unwrap();
        let c = cm_matrix(&d);
        assert_eq!(
            c.as_matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
    }

    #[test]
    fn cm_matrix_borders_square_and_tetrahedron() {
        let d = DistanceMatrix::from_points(&square());
        let c = cm_matrix(&d);
        assert_eq!(c.as_matrix().shape(), (5, 5));
        assert_eq!(c.as_matrix()[(0, 0)], 0.0);
        assert!((1..5).all(|k| c.as_matrix()[(0, k)] == 1.0 && c.as_matrix()[(k, 0)] == 1.0));
        assert_eq!(c.as_matrix()[(1, 3)], 2.0);

        let t = cm_matrix(&tetra_distances());
        for i in 1..5 {
            for j in 1..5 {
                assert_eq!(t.as_matrix()[(i, j)], if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn bordered_rank_examples() {
        assert_eq!(
            bordered_rank(
                DistanceMatrix::from_points(&square()).as_matrix(),
                DEFAULT_RANK_TOL
            ),
            2
        );
        assert_eq!(
            bordered_rank(tetra_distances().as_matrix(), DEFAULT_RANK_TOL),
            3
        );
        assert_eq!(bordered_rank(&DMatrix::zeros(1, 1), DEFAULT_RANK_TOL), 0);
    }

    #[test]
    fn distance_matrix_rejects_invalid_entries() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(DistanceMatrix::new(asym).is_err());
        let diag = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        assert!(DistanceMatrix::new(diag).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(DistanceMatrix::new(neg).is_err());
    }

    #[test]
    fn cm_polynomial_vanishes_on_real_profiles() {
        let c = cm_matrix(&DistanceMatrix::from_points(&unit_mics()));
        // source (2,3,4)
        let f = cm_polynomial(&c, &[29.0, 26.0, 24.0, 22.0]).unwrap();
        assert!(f.abs() < 1e-9, "{f}");
        assert!(cm_polynomial(&c, &[0.0, 1.0, 1.0, 1.0]).unwrap().abs() < 1e-12);
        // perturbed profile; value from an independent determinant evaluation
        let g = cm_polynomial(&c, &[30.0, 26.0, 24.0, 22.0]).unwrap();
        assert_relative_eq!(g, 140.0, max_relative = 1e-12);
    }

    #[test]
    fn cm_polynomial_rejects_wrong_size() {
        let c = cm_matrix(&DistanceMatrix::from_points(&square()[..3]));
        assert!(matches!(
            cm_polynomial(&c, &[1.0; 4]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn recover_point_examples() {
        let w = recover_point(&unit_mics(), &[29.0, 26.0, 24.0, 22.0]).unwrap();
        assert_relative_eq!(
            w.coords(),
            Point::xyz(2.0, 3.0, 4.0).coords(),
            epsilon = 1e-12
        );

        let mics = unit_mics();
        let d: Vec<f64> = mics.iter().map(|m| m.distance_squared(&mics[0])).collect();
        let w0 = recover_point(&mics, &d).unwrap();
        assert_relative_eq!(w0.coords(), mics[0].coords(), epsilon = 1e-12);

        let simplex = [
            Point::xy(0.0, 0.0),
            Point::xy(1.0, 0.0),
            Point::xy(0.0, 1.0),
        ];
        let target = Point::xy(5.0, -1.0);
        let d: Vec<f64> = simplex
            .iter()
            .map(|v| v.distance_squared(&target))
            .collect();
        let w2 = recover_point(&simplex, &d).unwrap();
        assert_relative_eq!(w2.coords(), target.coords(), epsilon = 1e-12);

        let alpha = barycentric_coordinates(&simplex, &d).unwrap();
        assert_relative_eq!(alpha.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn recover_point_rejects_degenerate_basis() {
        let flat = [
            Point::xy(0.0, 0.0),
            Point::xy(1.0, 0.0),
            Point::xy(2.0, 0.0),
        ];
        assert!(matches!(
            recover_point(&flat, &[1.0, 1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn mutual_distances_examples() {
        let mics = unit_mics();
        let c = cm_matrix(&DistanceMatrix::from_points(&mics));
        let profile = |w: &Point| {
            mics.iter()
                .map(|m| m.distance_squared(w))
                .collect::<Vec<_>>()
        };

        let single = mutual_distances(
            &c,
            &delta_bar(&[profile(&Point::xyz(2.0, 3.0, 4.0))], 4).unwrap(),
        )
        .unwrap();
        assert_eq!(single.as_matrix(), &DMatrix::zeros(1, 1));

        let pair = [Point::xyz(2.0, 3.0, 4.0), Point::xyz(-1.0, 0.0, 2.0)];
        let delta = delta_bar(&pair.iter().map(profile).collect::<Vec<_>>(), 4).unwrap();
        let d = mutual_distances(&c, &delta).unwrap();
        assert_relative_eq!(d.get(0, 1), 22.0, max_relative = 1e-12);
        assert_eq!(d.get(0, 1), d.get(1, 0));
    }

    #[test]
    fn mutual_distances_rejects_singular_basis() {
        let flat = [
            Point::xyz(0.0, 0.0, 0.0),
            Point::xyz(1.0, 0.0, 0.0),
            Point::xyz(0.0, 1.0, 0.0),
            Point::xyz(1.0, 1.0, 0.0),
        ];
        let c = cm_matrix(&DistanceMatrix::from_points(&flat));
        let delta = delta_bar(&[vec![1.0, 1.0, 1.0, 1.0]], 4).unwrap();
        assert!(matches!(
            mutual_distances(&c, &delta),
            Err(Error::Degenerate(_))
        ));
    }

    // Random sets whose affine span is well conditioned: the nonzero singular
    // values of the difference matrix stay within 1e-2 of the largest one.
    fn arb_points(dim: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::collection::vec(-5.0..5.0f64, dim), 2..=8)
            .prop_map(|v| {
                v.into_iter()
                    .map(|c| Point::new(c).unwrap())
                    .collect::<Vec<_>>()
            })
            .prop_filter("well-conditioned span", |pts| {
                let d = affine_dimension(pts, 1e-2).unwrap();
                d == affine_dimension(pts, 1e-12).unwrap()
            })
    }

    proptest! {
        #[test]
        fn bordered_rank_matches_affine_dimension(pts in prop_oneof![arb_points(2), arb_points(3)]) {
            let dim = affine_dimension(&pts, DEFAULT_RANK_TOL).unwrap();
            let d = DistanceMatrix::from_points(&pts);
            prop_assert_eq!(bordered_rank(d.as_matrix(), DEFAULT_RANK_TOL), dim);
            prop_assert_eq!(bordered_rank(&gram_matrix(&pts), DEFAULT_RANK_TOL), dim);
            prop_assert_eq!(cm_rank(&cm_matrix(&d), DEFAULT_RANK_TOL), dim + 2);
        }

        #[test]
        fn recover_point_round_trips(w in prop::array::uniform3(-30.0..30.0f64)) {
            let basis = [
                Point::xyz(0.3, -0.2, 0.1),
                Point::xyz(1.1, 0.2, -0.3),
                Point::xyz(-0.4, 0.9, 0.2),
                Point::xyz(0.2, 0.1, 1.3),
            ];
            let w = Point::new(w.to_vec()).unwrap();
            let d: Vec<f64> = basis.iter().map(|b| b.distance_squared(&w)).collect();
            let back = recover_point(&basis, &d).unwrap();
            prop_assert!((back.coords() - w.coords()).amax() <= 1e-9 * (1.0 + w.coords().amax()));
        }

        #[test]
        fn cm_polynomial_sign_is_permutation_invariant(
            w in prop::array::uniform3(-10.0..10.0f64),
            bump in -3.0..3.0f64,
            perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let mics = [
                Point::xyz(0.0, 0.0, 0.0),
                Point::xyz(0.7, 0.1, 0.0),
                Point::xyz(0.1, 0.8, 0.1),
                Point::xyz(-0.1, 0.2, 0.9),
            ];
            let w = Point::new(w.to_vec()).unwrap();
            let mut x = [0.0; 4];
            for (k, m) in mics.iter().enumerate() {
                x[k] = m.distance_squared(&w);
            }
            let c = cm_matrix(&DistanceMatrix::from_points(&mics));
            let on_root = cm_polynomial(&c, &x).unwrap();
            let scale = x.iter().cloned().fold(1.0, f64::max).powi(3);
            prop_assert!(on_root.abs() <= 1e-9 * scale);

            x[0] += bump;
            let permuted_mics: Vec<Point> = perm.iter().map(|&i| mics[i].clone()).collect();
            let permuted_x = [x[perm[0]], x[perm[1]], x[perm[2]], x[perm[3]]];
            let cp = cm_matrix(&DistanceMatrix::from_points(&permuted_mics));
            let a = cm_polynomial(&c, &x).unwrap();
            let b = cm_polynomial(&cp, &permuted_x).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
