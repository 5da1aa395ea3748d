//! Deterministic first-order image-source simulator.
//!
//! Given walls, a loudspeaker and a vehicle pose, produces for each of the
//! four microphones the set of squared travel distances of the direct sound
//! and of every first-order echo. Noise, when requested, perturbs each
//! travel distance before squaring and is keyed by
//! `(seed, emission, microphone, source)` so that results are reproducible
//! and independent of evaluation order.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{affine_dimension, mirror_point, Point, Wall, DEFAULT_RANK_TOL};

/// Orientation matrices must satisfy `AᵀA = I` within this tolerance.
pub const POSE_ORTHO_TOL: f64 = 1e-9;

/// Position and orientation of the vehicle. The columns of `rotation` are
/// the vehicle's principal axes expressed in the reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    position: Vector3<f64>,
    rotation: Matrix3<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err > POSE_ORTHO_TOL || !err.is_finite() || position.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "pose orientation is not orthogonal (|AᵀA − I| = {err:e})"
            )));
        }
        Ok(Self { position, rotation })
    }

    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    /// `rotation = Rz(yaw) · Ry(pitch) · Rx(roll)`, angles in radians.
    pub fn from_euler(position: Vector3<f64>, yaw: f64, pitch: f64, roll: f64) -> Self {
        let rotation = Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
        Self { position, rotation }
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Maps vehicle-frame coordinates to the reference frame: `A·m + v`.
    pub fn transform(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * local + self.position
    }

    /// This pose expressed in the coordinate frame attached to `frame`.
    pub fn relative_to(&self, frame: &Pose) -> Pose {
        let rt = frame.rotation.transpose();
        Pose {
            position: rt * (self.position - frame.position),
            rotation: rt * self.rotation,
        }
    }

    /// `self ∘ other`: the pose `other`, given in the frame of `self`, mapped to the reference frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.transform(&other.position),
            rotation: self.rotation * other.rotation,
        }
    }
}

/// A simulated environment plus the ground-truth vehicle path.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Ambient dimension (2 for planar symmetry demos, 3 for self-location).
    pub dim: usize,
    pub walls: Vec<Wall>,
    /// Loudspeaker position in the world frame, or, when `speaker_on_vehicle`
    /// is set, its fixed offset in the vehicle frame.
    pub speaker: Point,
    /// Microphone coordinates in the vehicle frame (exactly four in 3D; empty in 2D).
    pub mic_local: Vec<Vector3<f64>>,
    pub path: Vec<Pose>,
    /// Standard deviation of the travel-distance error in meters.
    pub noise_sigma: f64,
    pub seed: u64,
    pub occlusion_enabled: bool,
    pub speaker_on_vehicle: bool,
}

impl Scenario {
    /// Checks every invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, msg: String| Err(Error::InvariantViolation(format!("{field}: {msg}")));
        if self.dim != 2 && self.dim != 3 {
            return bad("dimension", format!("must be 2 or 3, got {}", self.dim));
        }
        if self.speaker.dim() != self.dim {
            return bad(
                "speaker",
                format!(
                    "expected {} coordinates, got {}",
                    self.dim,
                    self.speaker.dim()
                ),
            );
        }
        for (i, w) in self.walls.iter().enumerate() {
            if w.plane().dim() != self.dim {
                return bad(
                    &format!("walls[{i}]"),
                    format!("expected a {}-dimensional plane", self.dim),
                );
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(
                "noise_sigma",
                format!("must be finite and nonnegative, got {}", self.noise_sigma),
            );
        }
        if self.dim == 2 {
            if !self.mic_local.is_empty() || !self.path.is_empty() {
                return bad(
                    "mic_local",
                    "planar scenarios carry no microphones or path".into(),
                );
            }
            return Ok(());
        }
        if self.mic_local.len() != 4 {
            return bad(
                "mic_local",
                format!(
                    "exactly four microphones required, got {}",
                    self.mic_local.len()
                ),
            );
        }
        let mics: Vec<Point> = self.mic_local.iter().map(|m| Point::from(*m)).collect();
        if affine_dimension(&mics, DEFAULT_RANK_TOL)? != 3 {
            return bad("mic_local", "microphones must not be coplanar".into());
        }
        for (i, p) in self.path.iter().enumerate() {
            let err = (p.rotation.transpose() * p.rotation - Matrix3::identity()).amax();
            if err > POSE_ORTHO_TOL {
                return bad(
                    &format!("path[{i}].rotation"),
                    format!("not orthogonal (|AᵀA − I| = {err:e})"),
                );
            }
        }
        Ok(())
    }

    fn mic_array(&self) -> [Vector3<f64>; 4] {
        [
            self.mic_local[0],
            self.mic_local[1],
            self.mic_local[2],
            self.mic_local[3],
        ]
    }
}

/// Microphone positions in the world frame: `m̃ₖ = A·mₖ + v`.
pub fn world_microphones(s: &Scenario, p: &Pose) -> [Vector3<f64>; 4] {
    s.mic_array().map(|m| p.transform(&m))
}

/// Loudspeaker position in the world frame for pose `p`.
pub fn speaker_position(s: &Scenario, p: &Pose) -> Vector3<f64> {
    let offset = s.speaker.to_vector3();
    if s.speaker_on_vehicle {
        p.transform(&offset)
    } else {
        offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Speaker,
    /// Mirror point of the wall with this index.
    Mirror(usize),
}

/// A sound source together with the microphones that hear it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueSource {
    pub kind: SourceKind,
    pub position: Vector3<f64>,
    pub heard_by: [bool; 4],
}

impl TrueSource {
    pub fn heard_by_all(&self) -> bool {
        self.heard_by.iter().all(|&h| h)
    }
}

/// The loudspeaker and every mirror point, with per-microphone audibility.
///
/// With occlusion enabled, a mirror point is heard by microphone `k` only if
/// the segment from `m̃ₖ` to the mirror point crosses the wall's boundary
/// polygon; the direct path is heard unless a bounded wall blocks it.
/// Unbounded walls are always heard.
pub fn ground_truth_sources(s: &Scenario, p: &Pose) -> Vec<TrueSource> {
    let mics = world_microphones(s, p);
    let speaker = speaker_position(s, p);
    let speaker_pt = Point::from(speaker);
    let mut out = Vec::with_capacity(s.walls.len() + 1);

    let mut direct = [true; 4];
    if s.occlusion_enabled {
        for (k, m) in mics.iter().enumerate() {
            let mp = Point::from(*m);
            direct[k] = !s
                .walls
                .iter()
                .any(|w| w.is_bounded() && w.segment_hits(&speaker_pt, &mp));
        }
    }
    out.push(TrueSource {
        kind: SourceKind::Speaker,
        position: speaker,
        heard_by: direct,
    });

    for (i, wall) in s.walls.iter().enumerate() {
        let mirror = mirror_point(wall, &speaker_pt);
        let mut heard = [true; 4];
        if s.occlusion_enabled {
            for (k, m) in mics.iter().enumerate() {
                heard[k] = wall.segment_hits(&Point::from(*m), &mirror);
            }
        }
        out.push(TrueSource {
            kind: SourceKind::Mirror(i),
            position: mirror.to_vector3(),
            heard_by: heard,
        });
    }
    out
}

/// Per-microphone sets of squared travel distances for one emission.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoSet {
    sets: [Vec<f64>; 4],
}

impl EchoSet {
    /// Builds an echo set; entries must be positive and finite. Each set is
    /// sorted and exact duplicates are merged.
    pub fn new(mut sets: [Vec<f64>; 4]) -> Result<Self> {
        for (k, set) in sets.iter_mut().enumerate() {
            if let Some(bad) = set.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
                return Err(Error::InvariantViolation(format!(
                    "microphone {k}: invalid squared distance {bad}"
                )));
            }
            set.sort_by(f64::total_cmp);
            set.dedup();
        }
        Ok(Self { sets })
    }

    pub fn sets(&self) -> &[Vec<f64>; 4] {
        &self.sets
    }

    pub fn get(&self, mic: usize) -> &[f64] {
        &self.sets[mic]
    }

    /// Largest entrywise difference of the sorted sets (m²); infinite when
    /// some microphone's sets differ in size.
    pub fn max_entry_difference(&self, other: &EchoSet) -> f64 {
        let mut worst = 0.0_f64;
        for (a, b) in self.sets.iter().zip(&other.sets) {
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    /// Hausdorff distance between the per-microphone sets of travel
    /// distances (meters, not squared).
    pub fn set_differences(&self, other: &EchoSet) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (k, slot) in out.iter_mut().enumerate() {
            let a: Vec<f64> = self.sets[k].iter().map(|d| d.sqrt()).collect();
            let b: Vec<f64> = other.sets[k].iter().map(|d| d.sqrt()).collect();
            *slot = hausdorff(&a, &b);
        }
        out
    }
}

fn hausdorff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let directed = |x: &[f64], y: &[f64]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| (p - q).abs())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

fn noise_key(emission: u64, mic: usize, source: usize) -> u64 {
    (emission << 24) ^ ((mic as u64) << 20) ^ source as u64
}

/// Simulates one emission at pose `p`. `emission` identifies the emission in
/// the noise stream (normally the pose index along the path).
pub fn generate_echoes(s: &Scenario, p: &Pose, emission: u64) -> Result<EchoSet> {
    let mics = world_microphones(s, p);
    let sources = ground_truth_sources(s, p);
    let normal = if s.noise_sigma > 0.0 {
        Some(Normal::new(0.0, s.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut sets: [Vec<f64>; 4] = Default::default();
    for (k, m) in mics.iter().enumerate() {
        for (j, src) in sources.iter().enumerate() {
            if !src.heard_by[k] {
                continue;
            }
            let dist = (src.position - m).norm();
            if dist <= 1e-12 {
                return Err(Error::Degenerate(format!(
                    "microphone {k} coincides with sound source {j}"
                )));
            }
            let eps = match &normal {
                Some(n) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
                    rng.set_stream(noise_key(emission, k, j));
                    n.sample(&mut rng)
                }
                None => 0.0,
            };
            sets[k].push((dist + eps).powi(2));
        }
    }
    EchoSet::new(sets)
}

/// Two poses of the vehicle together with their noiseless echo sets.
#[derive(Debug, Clone)]
pub struct AmbiguityPair {
    pub pose_a: Pose,
    pub pose_b: Pose,
    pub echoes_a: EchoSet,
    pub echoes_b: EchoSet,
}

impl AmbiguityPair {
    pub fn max_set_difference(&self) -> f64 {
        self.echoes_a
            .set_differences(&self.echoes_b)
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn min_set_difference(&self) -> f64 {
        self.echoes_a
            .set_differences(&self.echoes_b)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Noiseless echo sets of path poses `a` and `b`. The caller chooses poses
/// related by a symmetry of the room to demonstrate indistinguishability.
pub fn ambiguity_pair(s: &Scenario, a: usize, b: usize) -> Result<AmbiguityPair> {
    let get = |i: usize| {
        s.path.get(i).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "pose index {i} out of range (path has {} poses)",
                s.path.len()
            ))
        })
    };
    let (pose_a, pose_b) = (get(a)?, get(b)?);
    let quiet = Scenario {
        noise_sigma: 0.0,
        ..s.clone()
    };
    Ok(AmbiguityPair {
        pose_a,
        pose_b,
        echoes_a: generate_echoes(&quiet, &pose_a, a as u64)?,
        echoes_b: generate_echoes(&quiet, &pose_b, b as u64)?,
    })
}

/// Six bounded walls of the axis-aligned box `[lo, hi]`.
pub fn box_walls(lo: [f64; 3], hi: [f64; 3]) -> Result<Vec<Wall>> {
    let mut walls = Vec::with_capacity(6);
    for axis in 0..3 {
        walls.push(Wall::axis_rectangle(axis, lo[axis], lo, hi)?);
        walls.push(Wall::axis_rectangle(axis, hi[axis], lo, hi)?);
    }
    Ok(walls)
}
