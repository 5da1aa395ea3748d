//! Self-location of a four-microphone vehicle from first-order echoes.
//!
//! Each call of [`locate_step`] processes one emission: echoes are sorted
//! into per-source distance profiles, the mutual distances of the detected
//! sources are computed, a rigid sub-configuration is matched against the
//! sources found earlier, and the pose and any newly heard sources follow in
//! closed form. All coordinates are expressed in the frozen frame, which is
//! the vehicle frame at the first successful call.

use std::fmt;

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Matrix5, Vector3, Vector4, Vector5};

use crate::cayley_menger::{bordered_rank, cm_matrix, delta_bar, mutual_distances, DistanceMatrix};
use crate::error::{Error, Result};
use crate::geometry::{affine_dimension, numerical_rank, Point, DEFAULT_RANK_TOL};
use crate::simulator::{EchoSet, Pose};

/// Relative singular-value threshold for inverting the 4×4 point matrices.
const INVERTIBILITY_TOL: f64 = 1e-12;

/// The sound sources found so far, in the frozen frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceRegistry {
    sources: Vec<Vector3<f64>>,
    frame_frozen: bool,
}

impl SourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sources(&self) -> &[Vector3<f64>] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn frame_frozen(&self) -> bool {
        self.frame_frozen
    }

    pub fn distance_matrix(&self) -> DistanceMatrix {
        let pts: Vec<Point> = self.sources.iter().map(|s| Point::from(*s)).collect();
        DistanceMatrix::from_points(&pts)
    }

    fn is_new(&self, t: &Vector3<f64>, dedup_eps: f64) -> bool {
        self.sources.iter().all(|s| (s - t).norm() > dedup_eps)
    }
}

/// Distance profiles of the detected sources: column `j` holds the squared
/// distances from the four microphones to source `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoAssignment {
    delta: DMatrix<f64>,
}

impl EchoAssignment {
    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    pub fn len(&self) -> usize {
        self.delta.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.ncols() == 0
    }

    pub fn column(&self, j: usize) -> [f64; 4] {
        let c = self.delta.column(j);
        [c[0], c[1], c[2], c[3]]
    }
}

/// Acceptance rule for candidate echo combinations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootTest {
    /// Relative threshold on `|f_D|` normalized by [`root_scale`].
    pub rel_tol: f64,
    /// Travel-distance noise level; when positive, the threshold is widened
    /// by a four-sigma first-order bound on the perturbation of `f_D`.
    pub noise_sigma: f64,
}

impl Default for RootTest {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            noise_sigma: 0.0,
        }
    }
}

/// The Cayley-Menger polynomial of a fixed microphone array, evaluated as
/// `f(x) = −det(C)·uᵀC⁻¹u` with `u = (1, x)`, which also yields the gradient.
struct CmPolynomial {
    inv: Matrix5<f64>,
    det: f64,
    mic_scale: f64,
}

impl CmPolynomial {
    fn new(mics: &[Vector3<f64>; 4]) -> Result<Self> {
        let pts: Vec<Point> = mics.iter().map(|m| Point::from(*m)).collect();
        if affine_dimension(&pts, DEFAULT_RANK_TOL)? != 3 {
            return Err(Error::Precondition("microphones are coplanar".into()));
        }
        let d = DistanceMatrix::from_points(&pts);
        let mic_scale = d.as_matrix().amax();
        let c = cm_matrix(&d);
        let c = Matrix5::from_fn(|i, j| c.as_matrix()[(i, j)]);
        let inv = c
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("microphone Cayley-Menger matrix".into()))?;
        Ok(Self {
            inv,
            det: c.determinant(),
            mic_scale,
        })
    }

    fn scale(&self, x: &[f64; 4]) -> f64 {
        x.iter().fold(0.0_f64, |a, &b| a.max(b)).powi(2) * self.mic_scale.powi(2)
    }

    fn eval(&self, x: &[f64; 4]) -> (f64, [f64; 4]) {
        let u = Vector5::new(1.0, x[0], x[1], x[2], x[3]);
        let w = self.inv * u;
        let f = -self.det * u.dot(&w);
        let grad = [1, 2, 3, 4].map(|i| -2.0 * self.det * w[i]);
        (f, grad)
    }
}

/// Evaluates the Cayley-Menger polynomial of `mics` at the squared distances `x`.
pub fn cm_polynomial_at(mics: &[Vector3<f64>; 4], x: &[f64; 4]) -> Result<f64> {
    Ok(CmPolynomial::new(mics)?.eval(x).0)
}

/// Normalization for the root test: `(max dᵢ)²·(max |mᵢ − mⱼ|²)²`.
///
/// `f_D` is homogeneous of degree four in all squared distances and of
/// degree two in the candidate's, so this makes `|f_D| / scale` invariant
/// under rescaling the scene and the array.
pub fn root_scale(mics: &[Vector3<f64>; 4], x: &[f64; 4]) -> Result<f64> {
    Ok(CmPolynomial::new(mics)?.scale(x))
}

/// Keeps every combination `(d₁,d₂,d₃,d₄) ∈ 𝒟₁×…×𝒟₄` on which the
/// microphones' Cayley-Menger polynomial vanishes. Columns appear in
/// lexicographic order of the sorted echo sets.
pub fn echo_match(mics: &[Vector3<f64>; 4], e: &EchoSet, test: RootTest) -> Result<EchoAssignment> {
    let poly = CmPolynomial::new(mics)?;
    let s = e.sets();
    let mut cols: Vec<[f64; 4]> = Vec::new();
    for &d1 in &s[0] {
        for &d2 in &s[1] {
            for &d3 in &s[2] {
                for &d4 in &s[3] {
                    let x = [d1, d2, d3, d4];
                    let (f, grad) = poly.eval(&x);
                    let mut threshold = test.rel_tol * poly.scale(&x);
                    if test.noise_sigma > 0.0 {
                        let slack: f64 = grad
                            .iter()
                            .zip(&x)
                            .map(|(g, xi)| (g * 2.0 * xi.sqrt()).powi(2))
                            .sum();
                        threshold += 4.0 * test.noise_sigma * slack.sqrt();
                    }
                    if f.abs() <= threshold {
                        cols.push(x);
                    }
                }
            }
        }
    }
    cols.dedup();
    let delta = DMatrix::from_fn(4, cols.len(), |r, c| cols[c][r]);
    Ok(EchoAssignment { delta })
}

/// Mutual squared distances of the detected sources, computed from their
/// distance profiles alone.
pub fn detected_distance_matrix(
    mics: &[Vector3<f64>; 4],
    a: &EchoAssignment,
) -> Result<DistanceMatrix> {
    let pts: Vec<Point> = mics.iter().map(|m| Point::from(*m)).collect();
    let c = cm_matrix(&DistanceMatrix::from_points(&pts));
    let profiles: Vec<Vec<f64>> = (0..a.len()).map(|j| a.column(j).to_vec()).collect();
    mutual_distances(&c, &delta_bar(&profiles, 4)?)
}

/// A matching `A_{i₁…i_r} = B_{j₁…j_r}` (zero-based indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmatrixMatch {
    pub rows_a: Vec<usize>,
    pub rows_b: Vec<usize>,
}

/// Work done by one matcher invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchStats {
    /// Entry comparisons `a_{i,i'} = b_{j,j'}` performed.
    pub comparisons: u64,
    /// Bordered-rank evaluations performed.
    pub rank_checks: u64,
}

/// Lexicographically least `(i₁,j₁,…,i_r,j_r)` with `i` strictly increasing,
/// `j` pairwise distinct, equal submatrices within `eq_tol`, and `A_{i₁…i_r}`
/// of bordered rank `r − 1`. `None` if no such tuple exists or `r` is out of range.
pub fn match_submatrices(
    a: &DistanceMatrix,
    b: &DistanceMatrix,
    r: usize,
    eq_tol: f64,
) -> Option<SubmatrixMatch> {
    match_submatrices_counted(a, b, r, eq_tol, DEFAULT_RANK_TOL).0
}

/// [`match_submatrices`] with an explicit bordered-rank threshold, together
/// with its comparison counts.
pub fn match_submatrices_counted(
    a: &DistanceMatrix,
    b: &DistanceMatrix,
    r: usize,
    eq_tol: f64,
    rank_tol: f64,
) -> (Option<SubmatrixMatch>, MatchStats) {
    let (m, n) = (a.len(), b.len());
    let mut stats = MatchStats::default();
    if r == 0 || r > m.min(n) {
        return (None, stats);
    }
    let am = a.as_matrix();
    let bm = b.as_matrix();
    let mut i = vec![0usize; r];
    let mut j = vec![0usize; r];
    let mut k = 0usize;
    loop {
        let mut ok = j[k] < n && !j[..k].contains(&j[k]);
        if ok {
            for nu in 0..=k {
                stats.comparisons += 1;
                if (am[(i[k], i[nu])] - bm[(j[k], j[nu])]).abs() > eq_tol {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            stats.rank_checks += 1;
            let sub = a.select(&i[..=k]);
            ok = bordered_rank(sub.as_matrix(), rank_tol) == k;
        }
        if ok {
            if k + 1 == r {
                return (
                    Some(SubmatrixMatch {
                        rows_a: i,
                        rows_b: j,
                    }),
                    stats,
                );
            }
            i[k + 1] = i[k] + 1;
            j[k + 1] = 0;
            k += 1;
        } else if j[k] + 1 < n {
            j[k] += 1;
        } else if i[k] + r < m + k {
            i[k] += 1;
            j[k] = 0;
        } else if k > 0 {
            k -= 1;
            j[k] += 1;
        } else {
            return (None, stats);
        }
    }
}

fn inverse4(m: Matrix4<f64>, what: &str) -> Result<Matrix4<f64>> {
    let dm = DMatrix::from_fn(4, 4, |i, j| m[(i, j)]);
    if numerical_rank(&dm, INVERTIBILITY_TOL) < 4 {
        return Err(Error::Degenerate(format!("{what} are coplanar")));
    }
    m.try_inverse()
        .ok_or_else(|| Error::Degenerate(format!("{what} could not be inverted")))
}

fn homogeneous(points: &[Vector3<f64>; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| if r < 3 { points[c][r] } else { 1.0 })
}

/// Upper 3×4 block of `[b; 1]⁻ᵀ`; maps `(‖b_j‖² − dist²_j)_j` to twice the point.
fn trilateration_operator(b: &[Vector3<f64>; 4]) -> Result<Matrix3x4<f64>> {
    let inv_t = inverse4(homogeneous(b), "basis points")?.transpose();
    Ok(inv_t.fixed_view::<3, 4>(0, 0).into_owned())
}

fn trilaterate(op: &Matrix3x4<f64>, b: &[Vector3<f64>; 4], d: [f64; 4]) -> Vector3<f64> {
    let rhs = Vector4::from_fn(|j, _| b[j].norm_squared() - d[j]);
    0.5 * op * rhs
}

/// Project onto the nearest orthogonal matrix (polar factor).
fn nearest_orthogonal(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = a.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => u * v_t,
        _ => *a,
    }
}

/// Pose `(A, v)` of the vehicle from the squared distances
/// `delta_cols[(k, j)]` between microphone `k` and known source `b_j`.
///
/// The raw estimate must satisfy `|AᵀA − I| ≤ ortho_tol`; the returned
/// orientation is its nearest orthogonal matrix.
pub fn self_locate(
    mic_local: &[Vector3<f64>; 4],
    b: &[Vector3<f64>; 4],
    delta_cols: &Matrix4<f64>,
    ortho_tol: f64,
) -> Result<Pose> {
    let op = trilateration_operator(b)?;
    let m_inv = inverse4(homogeneous(mic_local), "microphones")?;
    let mut world = Matrix4::zeros();
    for k in 0..4 {
        let d = [0, 1, 2, 3].map(|j| delta_cols[(k, j)]);
        let p = trilaterate(&op, b, d);
        world.fixed_view_mut::<3, 1>(0, k).copy_from(&p);
        world[(3, k)] = 1.0;
    }
    let av = world * m_inv;
    let a: Matrix3<f64> = av.fixed_view::<3, 3>(0, 0).into_owned();
    let v: Vector3<f64> = av.fixed_view::<3, 1>(0, 3).into_owned();
    let err = (a.transpose() * a - Matrix3::identity()).amax();
    if !(err <= ortho_tol) {
        return Err(Error::Inconsistent(format!(
            "recovered orientation is not orthogonal (|AᵀA − I| = {err:e})"
        )));
    }
    Pose::new(v, nearest_orthogonal(&a))
}

/// Yaw, pitch and roll (radians) with `A = Rz(yaw)·Ry(pitch)·Rx(roll)`.
/// At the gimbal lock `|a₃₁| = 1` the roll is set to zero.
pub fn pose_to_euler(a: &Matrix3<f64>) -> (f64, f64, f64) {
    let a31 = a[(2, 0)];
    if a31.abs() >= 1.0 - 1e-12 {
        let a31 = a31.signum();
        let pitch = -a31 * std::f64::consts::FRAC_PI_2;
        let yaw = (-a[(0, 1)]).atan2(a[(1, 1)]);
        return (yaw, pitch, 0.0);
    }
    let yaw = a[(1, 0)].atan2(a[(0, 0)]);
    let pitch = -a31.asin();
    let roll = a[(2, 1)].atan2(a[(2, 2)]);
    (yaw, pitch, roll)
}

/// Positions of the sources whose squared distances to `b` are the columns
/// of `delta` (4×m), and those among them farther than `dedup_eps` from every
/// registered source and from each other. The new ones are appended.
pub fn update_sources(
    b: &[Vector3<f64>; 4],
    delta: &DMatrix<f64>,
    registry: &mut SourceRegistry,
    dedup_eps: f64,
) -> Result<Vec<Vector3<f64>>> {
    if delta.nrows() != 4 {
        return Err(Error::InvalidArgument(format!(
            "delta must have 4 rows, got {}",
            delta.nrows()
        )));
    }
    let op = trilateration_operator(b)?;
    let candidates: Vec<Vector3<f64>> = (0..delta.ncols())
        .map(|k| trilaterate(&op, b, [0, 1, 2, 3].map(|j| delta[(j, k)])))
        .collect();
    let mut added = Vec::new();
    for t in candidates {
        if registry.is_new(&t, dedup_eps) {
            registry.sources.push(t);
            added.push(t);
        }
    }
    registry.frame_frozen = true;
    Ok(added)
}

/// Tolerances for one self-location step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocateConfig {
    pub root_tol: f64,
    /// Absolute tolerance (m²) for equality of squared distances while matching.
    pub eq_tol: f64,
    pub dedup_eps: f64,
    pub rank_tol: f64,
    pub ortho_tol: f64,
    /// Travel-distance noise level the tolerances should accommodate.
    pub noise_sigma: f64,
}

impl Default for LocateConfig {
    fn default() -> Self {
        Self {
            root_tol: 1e-9,
            eq_tol: 1e-6,
            dedup_eps: 1e-3,
            rank_tol: DEFAULT_RANK_TOL,
            ortho_tol: 1e-6,
            noise_sigma: 0.0,
        }
    }
}

impl LocateConfig {
    /// Defaults widened for travel-distance noise of standard deviation `sigma`.
    ///
    /// Detected source positions are inferred through the small microphone
    /// baseline, so their error is amplified by roughly `range / baseline`.
    /// `eq_tol` is ten times the resulting squared-distance error; `rank_tol`
    /// rises so that quadruples made non-coplanar only by noise are rejected.
    pub fn for_noise(sigma: f64, range: f64, baseline: f64) -> Self {
        let mut cfg = Self::default();
        if sigma > 0.0 {
            let pos_noise = sigma * range / baseline;
            cfg.noise_sigma = sigma;
            cfg.eq_tol = cfg.eq_tol.max(10.0 * 2.0 * range * pos_noise);
            cfg.rank_tol = cfg.rank_tol.max(5.0 * sigma / baseline);
            cfg.ortho_tol = cfg.ortho_tol.max(50.0 * pos_noise / baseline);
            cfg.dedup_eps = cfg.dedup_eps.max(10.0 * pos_noise);
        }
        cfg
    }
}

/// Why a step returned FAIL.
#[derive(Debug, Clone, PartialEq)]
pub enum FailReason {
    /// The detected sources span less than three dimensions.
    Coplanar { detected: usize, rank: usize },
    /// No four detected sources match four known ones.
    NoMatch { detected: usize, known: usize },
    /// An internal computation failed (singular basis, non-rigid estimate, …).
    Numerical(Error),
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailReason::Coplanar { detected, rank } => {
                write!(
                    f,
                    "coplanar: {detected} detected sources of bordered rank {rank}"
                )
            }
            FailReason::NoMatch { detected, known } => {
                write!(f, "no-match: {detected} detected vs {known} known sources")
            }
            FailReason::Numerical(e) => write!(f, "numerical: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocateResult {
    /// `pose` is absent on the bootstrap call that seeds the registry.
    Success {
        pose: Option<Pose>,
        new_sources: Vec<Vector3<f64>>,
    },
    Fail(FailReason),
}

impl LocateResult {
    pub fn is_success(&self) -> bool {
        matches!(self, LocateResult::Success { .. })
    }

    pub fn pose(&self) -> Option<&Pose> {
        match self {
            LocateResult::Success { pose, .. } => pose.as_ref(),
            LocateResult::Fail(_) => None,
        }
    }
}

/// Processes one emission. On FAIL the registry is left untouched.
pub fn locate_step(
    state: &mut SourceRegistry,
    mic_local: &[Vector3<f64>; 4],
    e: &EchoSet,
    cfg: &LocateConfig,
) -> LocateResult {
    match try_locate(state, mic_local, e, cfg) {
        Ok((next, result)) => {
            *state = next;
            result
        }
        Err(reason) => LocateResult::Fail(reason),
    }
}

fn try_locate(
    state: &SourceRegistry,
    mic_local: &[Vector3<f64>; 4],
    e: &EchoSet,
    cfg: &LocateConfig,
) -> std::result::Result<(SourceRegistry, LocateResult), FailReason> {
    let test = RootTest {
        rel_tol: cfg.root_tol,
        noise_sigma: cfg.noise_sigma,
    };
    let assignment = echo_match(mic_local, e, test).map_err(FailReason::Numerical)?;
    let detected = assignment.len();
    log::debug!("{detected} sources detected");
    let d_det = detected_distance_matrix(mic_local, &assignment).map_err(FailReason::Numerical)?;
    let rank = if detected == 0 {
        0
    } else {
        bordered_rank(d_det.as_matrix(), cfg.rank_tol)
    };
    if detected < 4 || rank < 3 {
        return Err(FailReason::Coplanar { detected, rank });
    }

    let mut next = state.clone();
    if state.is_empty() {
        let new_sources = update_sources(mic_local, assignment.delta(), &mut next, cfg.dedup_eps)
            .map_err(FailReason::Numerical)?;
        return Ok((
            next,
            LocateResult::Success {
                pose: None,
                new_sources,
            },
        ));
    }

    let known = state.distance_matrix();
    let found = match_submatrices_counted(&d_det, &known, 4, cfg.eq_tol, cfg.rank_tol)
        .0
        .ok_or(FailReason::NoMatch {
            detected,
            known: known.len(),
        })?;
    let b = found.rows_b.iter().map(|&j| state.sources[j]);
    let b: Vec<Vector3<f64>> = b.collect();
    let b = [b[0], b[1], b[2], b[3]];
    let delta_cols = Matrix4::from_fn(|k, j| assignment.delta()[(k, found.rows_a[j])]);
    let pose =
        self_locate(mic_local, &b, &delta_cols, cfg.ortho_tol).map_err(FailReason::Numerical)?;

    let delta = DMatrix::from_fn(4, detected, |j, k| d_det.get(found.rows_a[j], k));
    let new_sources =
        update_sources(&b, &delta, &mut next, cfg.dedup_eps).map_err(FailReason::Numerical)?;
    Ok((
        next,
        LocateResult::Success {
            pose: Some(pose),
            new_sources,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cayley_menger::cm_polynomial;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn mics() -> [Vector3<f64>; 4] {
        [
            Vector3::new(0.3, 0.0, -0.1),
            Vector3::new(-0.2, 0.25, -0.1),
            Vector3::new(-0.15, -0.3, -0.05),
            Vector3::new(0.05, 0.05, 0.35),
        ]
    }

    fn profile(mics: &[Vector3<f64>; 4], s: &Vector3<f64>) -> Vec<f64> {
        mics.iter().map(|m| (m - s).norm_squared()).collect()
    }

    fn echoes(mics: &[Vector3<f64>; 4], sources: &[Vector3<f64>]) -> EchoSet {
        let sets = [0, 1, 2, 3].map(|k| {
            sources
                .iter()
                .map(|s| (mics[k] - s).norm_squared())
                .collect()
        });
        EchoSet::new(sets).unwrap()
    }

    fn dm(points: &[[f64; 3]]) -> DistanceMatrix {
        let pts: Vec<Point> = points
            .iter()
            .map(|p| Point::xyz(p[0], p[1], p[2]))
            .collect();
        DistanceMatrix::from_points(&pts)
    }

    #[test]
    fn quadratic_form_matches_determinant() {
        let m = mics();
        let pts: Vec<Point> = m.iter().map(|v| Point::from(*v)).collect();
        let c = cm_matrix(&DistanceMatrix::from_points(&pts));
        for x in [
            [1.0, 2.0, 3.0, 4.0],
            [29.0, 26.0, 24.0, 22.0],
            [0.1, 0.2, 0.3, 0.2],
        ] {
            let direct = cm_polynomial(&c, &x).unwrap();
            assert_relative_eq!(
                cm_polynomial_at(&m, &x).unwrap(),
                direct,
                max_relative = 1e-9,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn single_source_echo_match() {
        let m = mics();
        let s = Vector3::new(2.0, 3.0, 4.0);
        let a = echo_match(&m, &echoes(&m, &[s]), RootTest::default()).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a.column(0).to_vec(), profile(&m, &s));
    }

    #[test]
    fn two_sources_reject_cross_combinations() {
        let m = mics();
        let s = [Vector3::new(2.0, 3.0, 4.0), Vector3::new(-1.0, 0.0, 2.0)];
        let a = echo_match(&m, &echoes(&m, &s), RootTest::default()).unwrap();
        assert_eq!(a.len(), 2);
        let mut got: Vec<Vec<f64>> = (0..2).map(|j| a.column(j).to_vec()).collect();
        let mut want: Vec<Vec<f64>> = s.iter().map(|p| profile(&m, p)).collect();
        got.sort_by(|x, y| x.partial_cmp(y).unwrap());
        want.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn coplanar_mics_are_rejected() {
        let mut m = mics();
        m[3] = Vector3::new(0.1, 0.1, -0.1);
        let e = echoes(&m, &[Vector3::new(1.0, 1.0, 1.0)]);
        assert!(matches!(
            echo_match(&m, &e, RootTest::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn detected_distances_of_two_sources() {
        let m = mics();
        let s = [Vector3::new(2.0, 3.0, 4.0), Vector3::new(-1.0, 0.0, 2.0)];
        let a = echo_match(&m, &echoes(&m, &s), RootTest::default()).unwrap();
        let d = detected_distance_matrix(&m, &a).unwrap();
        assert_relative_eq!(d.get(0, 1), 22.0, epsilon = 1e-9);

        let one = echo_match(&m, &echoes(&m, &s[..1]), RootTest::default()).unwrap();
        assert_eq!(
            detected_distance_matrix(&m, &one).unwrap().as_matrix(),
            &DMatrix::zeros(1, 1)
        );
    }

    fn tetra() -> Vec<[f64; 3]> {
        vec![
            [0.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [0.5, 2.0, 0.0],
            [1.0, 0.7, 2.5],
            [2.2, -1.3, 0.9],
        ]
    }

    #[test]
    fn identical_matrices_match_identity() {
        let a = dm(&tetra()[..4]);
        let got = match_submatrices(&a, &a, 4, 1e-9).unwrap();
        assert_eq!(got.rows_a, vec![0, 1, 2, 3]);
        assert_eq!(got.rows_b, vec![0, 1, 2, 3]);
    }

    #[test]
    fn permuted_matrix_matches_permutation() {
        let pts = tetra();
        let perm = [3, 0, 4, 2, 1];
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&p| pts[p]).collect();
        let got = match_submatrices(&dm(&pts), &dm(&permuted), 4, 1e-9).unwrap();
        // A's row i sits at B's row j_i with perm[j_i] = i
        for (i, j) in got.rows_a.iter().zip(&got.rows_b) {
            assert_eq!(perm[*j], *i);
        }
        assert_eq!(got.rows_a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn coplanar_a_never_matches() {
        let flat = dm(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        assert!(match_submatrices(&flat, &flat, 4, 1e-9).is_none());
        assert!(match_submatrices(&flat, &flat, 3, 1e-9).is_some());
    }

    #[test]
    fn out_of_range_r_is_absent() {
        let a = dm(&tetra());
        assert!(match_submatrices(&a, &a, 0, 1e-9).is_none());
        assert!(match_submatrices(&a, &dm(&tetra()[..3]), 4, 1e-9).is_none());
    }

    #[test]
    fn self_locate_identity_translation_and_yaw() {
        let m = mics();
        let b = [
            Vector3::new(5.0, 1.0, 0.5),
            Vector3::new(-3.0, 4.0, 1.0),
            Vector3::new(0.5, -6.0, 2.0),
            Vector3::new(1.0, 2.0, -4.0),
        ];
        let cases = [
            Pose::identity(),
            Pose::new(Vector3::new(1.0, 2.0, 3.0), Matrix3::identity()).unwrap(),
            Pose::from_euler(Vector3::new(0.4, -0.2, 0.1), FRAC_PI_2, 0.0, 0.0),
        ];
        for truth in cases {
            let world = m.map(|mk| truth.transform(&mk));
            let delta = Matrix4::from_fn(|k, j| (world[k] - b[j]).norm_squared());
            let got = self_locate(&m, &b, &delta, 1e-6).unwrap();
            assert_relative_eq!(got.rotation(), truth.rotation(), epsilon = 1e-9);
            assert_relative_eq!(got.position(), truth.position(), epsilon = 1e-9);
        }
    }

    #[test]
    fn self_locate_rejects_nonrigid_distances() {
        let m = mics();
        let b = [
            Vector3::new(5.0, 1.0, 0.5),
            Vector3::new(-3.0, 4.0, 1.0),
            Vector3::new(0.5, -6.0, 2.0),
            Vector3::new(1.0, 2.0, -4.0),
        ];
        let delta = Matrix4::from_fn(|k, j| (2.0 * m[k] - b[j]).norm_squared());
        assert!(matches!(
            self_locate(&m, &b, &delta, 1e-6),
            Err(Error::Inconsistent(_))
        ));
        let flat = [b[0], b[1], (b[0] + b[1]) * 0.5, b[0] * 2.0 - b[1]];
        assert!(matches!(
            self_locate(&m, &flat, &delta, 1e-6),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn euler_examples() {
        assert_eq!(pose_to_euler(&Matrix3::identity()), (0.0, 0.0, 0.0));
        let yaw = Pose::from_euler(Vector3::zeros(), FRAC_PI_2, 0.0, 0.0);
        let (y, p, r) = pose_to_euler(yaw.rotation());
        assert_relative_eq!(y, FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(p, 0.0, epsilon = 1e-12);
        assert_relative_eq!(r, 0.0, epsilon = 1e-12);
        let lock = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        let (y, p, r) = pose_to_euler(&lock);
        assert_relative_eq!(p, FRAC_PI_2);
        assert_eq!(r, 0.0);
        assert_relative_eq!(y, 0.0);
    }

    proptest! {
        #[test]
        fn euler_round_trip(yaw in -3.1f64..3.1, pitch in -1.5f64..1.5, roll in -3.1f64..3.1) {
            let p = Pose::from_euler(Vector3::zeros(), yaw, pitch, roll);
            let (y, q, r) = pose_to_euler(p.rotation());
            prop_assert!((y - yaw).abs() < 1e-9 && (q - pitch).abs() < 1e-9 && (r - roll).abs() < 1e-9);
        }
    }

    #[test]
    fn update_sources_dedups() {
        let m = mics();
        let s = [Vector3::new(2.0, 3.0, 4.0), Vector3::new(-1.0, 0.0, 2.0)];
        let delta = DMatrix::from_fn(4, 3, |k, j| (m[k] - s[j.min(1)]).norm_squared());
        let mut reg = SourceRegistry::new();
        let added = update_sources(&m, &delta, &mut reg, 1e-3).unwrap();
        assert_eq!(added.len(), 2);
        assert_relative_eq!(added[0], s[0], epsilon = 1e-9);
        assert!(reg.frame_frozen());
        let again = update_sources(&m, &delta, &mut reg, 1e-3).unwrap();
        assert!(again.is_empty());
        assert_eq!(reg.len(), 2);
    }

    fn room_sources(speaker: Vector3<f64>) -> Vec<Vector3<f64>> {
        let (lo, hi) = ([0.0, 0.0, 0.0], [8.0, 6.0, 3.0]);
        let mut out = vec![speaker];
        for axis in 0..3 {
            for at in [lo[axis], hi[axis]] {
                let mut s = speaker;
                s[axis] = 2.0 * at - s[axis];
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn three_sources_fail_and_leave_registry() {
        let m = mics();
        let s = [
            Vector3::new(2.0, 3.0, 4.0),
            Vector3::new(-1.0, 0.0, 2.0),
            Vector3::new(0.0, 5.0, -1.0),
        ];
        let mut reg = SourceRegistry::new();
        let r = locate_step(&mut reg, &m, &echoes(&m, &s), &LocateConfig::default());
        assert!(matches!(
            r,
            LocateResult::Fail(FailReason::Coplanar { detected: 3, .. })
        ));
        assert_eq!(reg, SourceRegistry::new());
    }

    #[test]
    fn bootstrap_then_locate() {
        let m = mics();
        let sources = room_sources(Vector3::new(2.3, 4.1, 1.7));
        let p0 = Pose::from_euler(Vector3::new(4.0, 3.0, 1.2), 0.3, 0.1, -0.05);
        let p1 = Pose::from_euler(Vector3::new(5.1, 2.2, 1.4), -0.8, 0.2, 0.15);
        let observe = |p: &Pose| echoes(&m.map(|mk| p.transform(&mk)), &sources);
        let cfg = LocateConfig::default();
        let mut reg = SourceRegistry::new();
        let r0 = locate_step(&mut reg, &m, &observe(&p0), &cfg);
        assert!(
            matches!(&r0, LocateResult::Success { pose: None, new_sources } if new_sources.len() == 7)
        );
        for (s, t) in reg.sources().iter().zip(reg.sources().iter().skip(1)) {
            assert!((s - t).norm() > 1e-3);
        }
        let r1 = locate_step(&mut reg, &m, &observe(&p1), &cfg);
        let truth = p1.relative_to(&p0);
        let pose = r1.pose().expect("second step locates the vehicle");
        assert_relative_eq!(pose.position(), truth.position(), epsilon = 1e-6);
        assert_relative_eq!(pose.rotation(), truth.rotation(), epsilon = 1e-6);
        assert!(matches!(&r1, LocateResult::Success { new_sources, .. } if new_sources.is_empty()));
        assert_eq!(reg.len(), 7);
        let before = reg.clone();
        locate_step(&mut reg, &m, &observe(&p1), &cfg);
        assert_eq!(reg, before);
    }

    #[test]
    fn unmatched_geometry_fails_without_mutation() {
        let m = mics();
        let mut reg = SourceRegistry::new();
        let cfg = LocateConfig::default();
        let room = room_sources(Vector3::new(2.3, 4.1, 1.7));
        assert!(locate_step(&mut reg, &m, &echoes(&m, &room), &cfg).is_success());
        let other = room_sources(Vector3::new(1.1, 0.9, 2.6))
            .iter()
            .map(|s| s * 1.7)
            .collect::<Vec<_>>();
        let before = reg.clone();
        let r = locate_step(&mut reg, &m, &echoes(&m, &other), &cfg);
        assert!(
            matches!(r, LocateResult::Fail(FailReason::NoMatch { .. })),
            "{r:?}"
        );
        assert_eq!(reg, before);
    }
}
