//! Scenario files, batch simulate-and-reconstruct runs, metrics and export.
//!
//! Scenario files are TOML. A complete box-room example:
//!
//! ```toml
//! dimension = 3
//! speaker = [2.3, 4.1, 1.7]
//! mic_local = [[0.3, 0.0, -0.1], [-0.2, 0.25, -0.1], [-0.15, -0.3, -0.05], [0.05, 0.05, 0.35]]
//! noise_sigma = 0.0
//! seed = 1
//! occlusion_enabled = true
//! speaker_on_vehicle = false
//!
//! [room]              # six bounded walls of an axis-aligned box (four lines in 2D)
//! min = [0.0, 0.0, 0.0]
//! max = [8.0, 6.0, 3.0]
//!
//! [[walls]]           # further walls: plane n·x = offset, optional polygon
//! normal = [1.0, 1.0, 0.0]
//! offset = 9.0
//!
//! [[path]]            # orientation as [yaw, pitch, roll] or a row-major `rotation`
//! position = [4.0, 3.0, 1.2]
//! euler = [0.3, 0.1, -0.05]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Hyperplane, Point, Wall, UNIT_NORMAL_TOL};
use crate::reconstruction::{
    locate_step, pose_to_euler, LocateConfig, LocateResult, SourceRegistry,
};
use crate::simulator::{
    ambiguity_pair, box_walls, generate_echoes, ground_truth_sources, world_microphones,
    AmbiguityPair, Pose, Scenario,
};
use crate::symmetry::{
    dihedral_counterexample, distance_automorphisms, genericity_check, Arrangement,
    GenericityReport, DEFAULT_GENERICITY_TOL,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    dimension: usize,
    speaker: Vec<f64>,
    #[serde(default)]
    mic_local: Vec<[f64; 3]>,
    #[serde(default)]
    noise_sigma: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    occlusion_enabled: bool,
    #[serde(default)]
    speaker_on_vehicle: bool,
    room: Option<RoomSpec>,
    #[serde(default)]
    walls: Vec<WallSpec>,
    #[serde(default)]
    path: Vec<PoseSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoomSpec {
    min: Vec<f64>,
    max: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WallSpec {
    normal: Vec<f64>,
    offset: f64,
    boundary: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseSpec {
    position: [f64; 3],
    euler: Option<[f64; 3]>,
    rotation: Option<[[f64; 3]; 3]>,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvariantViolation(format!("{field}: {msg}"))
}

/// Parses and validates a scenario document. Returns the scenario and any
/// warnings (e.g. renormalized wall normals), which are also logged.
pub fn parse_scenario(text: &str) -> Result<(Scenario, Vec<String>)> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("parse error: {e}")))?;
    let dim = file.dimension;
    let mut warnings = Vec::new();
    let mut walls = Vec::new();

    if let Some(room) = &file.room {
        if room.min.len() != dim || room.max.len() != dim {
            return Err(field_err(
                "room",
                format!("min and max need {dim} coordinates"),
            ));
        }
        if room.min.iter().zip(&room.max).any(|(a, b)| !(a < b)) {
            return Err(field_err("room", "min must be strictly below max"));
        }
        if dim == 3 {
            let lo = [room.min[0], room.min[1], room.min[2]];
            let hi = [room.max[0], room.max[1], room.max[2]];
            walls.extend(box_walls(lo, hi).map_err(|e| field_err("room", e))?);
        } else {
            for axis in 0..dim {
                for at in [room.min[axis], room.max[axis]] {
                    let mut n = vec![0.0; dim];
                    n[axis] = 1.0;
                    walls.push(Wall::unbounded(
                        Hyperplane::new(n, at).map_err(|e| field_err("room", e))?,
                    ));
                }
            }
        }
    }

    for (i, w) in file.walls.iter().enumerate() {
        let field = format!("walls[{i}]");
        if w.normal.len() != dim {
            return Err(field_err(&field, format!("normal needs {dim} coordinates")));
        }
        let norm = w.normal.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORMAL_TOL {
            let msg =
                format!("{field}: normal has length {norm}; renormalized and offset rescaled");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let plane =
            Hyperplane::new(w.normal.clone(), w.offset).map_err(|e| field_err(&field, e))?;
        let wall = match &w.boundary {
            None => Wall::unbounded(plane),
            Some(b) => {
                let pts = b.iter().map(|p| Point::xyz(p[0], p[1], p[2])).collect();
                Wall::bounded(plane, pts).map_err(|e| field_err(&format!("{field}.boundary"), e))?
            }
        };
        walls.push(wall);
    }

    let mut path = Vec::with_capacity(file.path.len());
    for (i, p) in file.path.iter().enumerate() {
        let field = format!("path[{i}]");
        let position = Vector3::from(p.position);
        let pose = match (p.euler, p.rotation) {
            (Some([yaw, pitch, roll]), None) => Pose::from_euler(position, yaw, pitch, roll),
            (None, Some(rows)) => {
                let r = Matrix3::from_fn(|i, j| rows[i][j]);
                Pose::new(position, r).map_err(|e| field_err(&format!("{field}.rotation"), e))?
            }
            (None, None) => {
                Pose::new(position, Matrix3::identity()).expect("identity is orthogonal")
            }
            (Some(_), Some(_)) => {
                return Err(field_err(&field, "give either euler or rotation, not both"))
            }
        };
        path.push(pose);
    }

    let speaker = Point::new(file.speaker).map_err(|e| field_err("speaker", e))?;
    let scenario = Scenario {
        dim,
        walls,
        speaker,
        mic_local: file.mic_local.iter().map(|m| Vector3::from(*m)).collect(),
        path,
        noise_sigma: file.noise_sigma,
        seed: file.seed,
        occlusion_enabled: file.occlusion_enabled,
        speaker_on_vehicle: file.speaker_on_vehicle,
    };
    scenario.validate()?;
    Ok((scenario, warnings))
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<(Scenario, Vec<String>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

/// Microphone baseline (smallest pairwise distance) and the largest
/// microphone-to-source range at the first pose; used to scale tolerances.
fn tolerance_scales(s: &Scenario) -> (f64, f64) {
    let mut baseline = f64::INFINITY;
    for i in 0..s.mic_local.len() {
        for j in (i + 1)..s.mic_local.len() {
            baseline = baseline.min((s.mic_local[i] - s.mic_local[j]).norm());
        }
    }
    let mut range = 0.0_f64;
    if let Some(p) = s.path.first() {
        let mics = world_microphones(s, p);
        for src in ground_truth_sources(s, p) {
            for m in &mics {
                range = range.max((src.position - m).norm());
            }
        }
    }
    (range, baseline)
}

/// Locate configuration derived from the scenario's noise level.
pub fn default_config(s: &Scenario) -> LocateConfig {
    let (range, baseline) = tolerance_scales(s);
    LocateConfig::for_noise(s.noise_sigma, range, baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Bootstrap,
    Success,
    Fail,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Bootstrap => "bootstrap",
            StepStatus::Success => "success",
            StepStatus::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub position: [f64; 3],
    /// Row-major orientation matrix.
    pub rotation: [[f64; 3]; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl PoseRecord {
    fn from_pose(p: &Pose) -> Self {
        let r = p.rotation();
        let (yaw, pitch, roll) = pose_to_euler(r);
        Self {
            position: [p.position().x, p.position().y, p.position().z],
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            yaw,
            pitch,
            roll,
        }
    }

    fn rounded(&self) -> Self {
        Self {
            position: self.position.map(round12),
            rotation: self.rotation.map(|row| row.map(round12)),
            yaw: round12(self.yaw),
            pitch: round12(self.pitch),
            roll: round12(self.roll),
        }
    }
}

/// Outcome of one emission along the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub status: StepStatus,
    pub fail_reason: Option<String>,
    /// Estimated pose in the frozen frame (absent on bootstrap and FAIL).
    pub est_pose: Option<PoseRecord>,
    /// Ground truth in the frozen frame (absent before the bootstrap step).
    pub true_pose: Option<PoseRecord>,
    pub position_error: Option<f64>,
    pub orientation_error: Option<f64>,
    pub n_sources_known: usize,
    pub n_sources_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub position_rmse: Option<f64>,
    pub max_position_error: Option<f64>,
    pub orientation_rmse: Option<f64>,
    pub max_orientation_error: Option<f64>,
    pub fail_count: usize,
    pub bootstrap_step_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<RunRecord>,
    pub metrics: Metrics,
}

/// Rotation angle of `a_estᵀ·a_true`, robust near 0 and π.
pub fn orientation_error(a_est: &Matrix3<f64>, a_true: &Matrix3<f64>) -> f64 {
    let r = a_est.transpose() * a_true;
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    (vee.norm() / 2.0).atan2((r.trace() - 1.0) / 2.0)
}

/// Simulates each pose of the path and feeds it to the locator, threading
/// the source registry through the calls. Step failures are recorded and
/// the run continues.
pub fn run(s: &Scenario, cfg: &LocateConfig) -> Result<RunReport> {
    s.validate()?;
    if s.dim != 3 {
        return Err(Error::Precondition(
            "self-location runs need a 3-dimensional scenario".into(),
        ));
    }
    let mics = [
        s.mic_local[0],
        s.mic_local[1],
        s.mic_local[2],
        s.mic_local[3],
    ];
    let mut registry = SourceRegistry::new();
    let mut frame: Option<Pose> = None;
    let mut records = Vec::with_capacity(s.path.len());

    for (step, pose) in s.path.iter().enumerate() {
        let echoes = generate_echoes(s, pose, step as u64)?;
        let result = locate_step(&mut registry, &mics, &echoes, cfg);
        let mut rec = RunRecord {
            step,
            status: StepStatus::Fail,
            fail_reason: None,
            est_pose: None,
            true_pose: None,
            position_error: None,
            orientation_error: None,
            n_sources_known: registry.len(),
            n_sources_new: 0,
        };
        match result {
            LocateResult::Fail(reason) => {
                log::info!("step {step}: FAIL ({reason})");
                rec.fail_reason = Some(reason.to_string());
            }
            LocateResult::Success {
                pose: est,
                new_sources,
            } => {
                rec.n_sources_new = new_sources.len();
                let origin = *frame.get_or_insert(*pose);
                let truth = pose.relative_to(&origin);
                rec.true_pose = Some(PoseRecord::from_pose(&truth));
                match est {
                    None => rec.status = StepStatus::Bootstrap,
                    Some(est) => {
                        rec.status = StepStatus::Success;
                        rec.position_error = Some((est.position() - truth.position()).norm());
                        rec.orientation_error =
                            Some(orientation_error(est.rotation(), truth.rotation()));
                        rec.est_pose = Some(PoseRecord::from_pose(&est));
                    }
                }
            }
        }
        if rec.status == StepStatus::Fail {
            if let Some(origin) = frame {
                rec.true_pose = Some(PoseRecord::from_pose(&pose.relative_to(&origin)));
            }
        }
        records.push(rec);
    }
    let metrics = compute_metrics(&records);
    Ok(RunReport { records, metrics })
}

pub fn compute_metrics(records: &[RunRecord]) -> Metrics {
    let ok: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.status == StepStatus::Success)
        .collect();
    let pos: Vec<f64> = ok.iter().filter_map(|r| r.position_error).collect();
    let ori: Vec<f64> = ok.iter().filter_map(|r| r.orientation_error).collect();
    let rmse = |v: &[f64]| {
        (!v.is_empty()).then(|| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt())
    };
    let max = |v: &[f64]| v.iter().copied().reduce(f64::max);
    Metrics {
        position_rmse: rmse(&pos),
        max_position_error: max(&pos),
        orientation_rmse: rmse(&ori),
        max_orientation_error: max(&ori),
        fail_count: records
            .iter()
            .filter(|r| r.status == StepStatus::Fail)
            .count(),
        bootstrap_step_index: records
            .iter()
            .find(|r| r.status == StepStatus::Bootstrap)
            .map(|r| r.step),
    }
}

/// Rounds to 12 significant digits.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Formats with at most 12 significant digits, switching to exponent
/// notation for very small or very large magnitudes.
pub fn fmt12(x: f64) -> String {
    let r = round12(x);
    let a = r.abs();
    if r != 0.0 && !(1e-4..1e12).contains(&a) {
        format!("{r:e}")
    } else {
        format!("{r}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown format '{other}' (expected csv or json)")),
        }
    }
}

pub const CSV_HEADER: &str = "step,status,vx,vy,vz,yaw,pitch,roll,pos_err,ori_err,n_known,n_new";

pub fn to_csv(records: &[RunRecord]) -> String {
    let opt = |x: Option<f64>| x.map(fmt12).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let p = r.est_pose.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.status.as_str(),
            opt(p.map(|p| p.position[0])),
            opt(p.map(|p| p.position[1])),
            opt(p.map(|p| p.position[2])),
            opt(p.map(|p| p.yaw)),
            opt(p.map(|p| p.pitch)),
            opt(p.map(|p| p.roll)),
            opt(r.position_error),
            opt(r.orientation_error),
            r.n_sources_known,
            r.n_sources_new,
        );
    }
    out
}

/// The report with every float rounded to 12 significant digits, exactly
/// as it is written by the JSON export.
pub fn rounded_report(report: &RunReport) -> RunReport {
    let o = |x: Option<f64>| x.map(round12);
    RunReport {
        records: report
            .records
            .iter()
            .map(|r| RunRecord {
                est_pose: r.est_pose.as_ref().map(PoseRecord::rounded),
                true_pose: r.true_pose.as_ref().map(PoseRecord::rounded),
                position_error: o(r.position_error),
                orientation_error: o(r.orientation_error),
                ..r.clone()
            })
            .collect(),
        metrics: Metrics {
            position_rmse: o(report.metrics.position_rmse),
            max_position_error: o(report.metrics.max_position_error),
            orientation_rmse: o(report.metrics.orientation_rmse),
            max_orientation_error: o(report.metrics.max_orientation_error),
            ..report.metrics.clone()
        },
    }
}

pub fn to_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(&rounded_report(report)).expect("report is serializable") + "\n"
}

pub fn export(report: &RunReport, path: impl AsRef<Path>, format: ExportFormat) -> io::Result<()> {
    let text = match format {
        ExportFormat::Csv => to_csv(&report.records),
        ExportFormat::Json => to_json(report),
    };
    fs::write(path, text)
}

pub fn load_report_json(path: impl AsRef<Path>) -> io::Result<RunReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Human-readable run summary, one line per step plus the metrics.
pub fn summarize(report: &RunReport) -> String {
    let mut out = String::new();
    for r in &report.records {
        let _ = write!(out, "step {:>3}  {:<9}", r.step, r.status.as_str());
        if let (Some(p), Some(e), Some(o)) = (&r.est_pose, r.position_error, r.orientation_error) {
            let [x, y, z] = p.position;
            let _ = write!(
                out,
                "  v = ({}, {}, {})  pos_err = {}  ori_err = {}",
                fmt12(x),
                fmt12(y),
                fmt12(z),
                fmt12(e),
                fmt12(o)
            );
        }
        if let Some(reason) = &r.fail_reason {
            let _ = write!(out, "  {reason}");
        }
        let _ = writeln!(
            out,
            "  known = {}  new = {}",
            r.n_sources_known, r.n_sources_new
        );
    }
    let m = &report.metrics;
    let opt = |x: Option<f64>| x.map(fmt12).unwrap_or_else(|| "n/a".into());
    let _ = writeln!(
        out,
        "position rmse = {}  max = {}  orientation rmse = {}  fails = {}",
        opt(m.position_rmse),
        opt(m.max_position_error),
        opt(m.orientation_rmse),
        m.fail_count
    );
    out
}

/// The wall planes of a scenario as a hyperplane arrangement.
pub fn scenario_arrangement(s: &Scenario) -> Result<Arrangement> {
    Arrangement::new(s.walls.iter().map(|w| w.plane().clone()).collect())
}

/// Genericity check for the scenario's walls at `speaker`.
pub fn scenario_genericity(s: &Scenario, speaker: &Point) -> Result<GenericityReport> {
    if speaker.dim() != s.dim {
        return Err(Error::InvalidArgument(format!(
            "speaker needs {} coordinates, got {}",
            s.dim,
            speaker.dim()
        )));
    }
    genericity_check(&scenario_arrangement(s)?, speaker, DEFAULT_GENERICITY_TOL)
}

/// The dihedral arrangement of `k` lines, the reflections of `point` and
/// their pairwise distances.
pub fn counterexample_text(k: usize, point: &Point) -> Result<String> {
    if point.dim() != 2 {
        return Err(Error::InvalidArgument(
            "the counterexample point must be planar".into(),
        ));
    }
    let a = dihedral_counterexample(k)?;
    let refl = a.reflections(point);
    let mut out = String::new();
    let _ = writeln!(out, "arrangement: {k} lines through the origin");
    for (i, h) in a.hyperplanes().iter().enumerate() {
        let n = h.normal();
        let _ = writeln!(
            out,
            "  line {i}: {} x + {} y = {}",
            fmt12(n[0]),
            fmt12(n[1]),
            fmt12(h.offset())
        );
    }
    let _ = writeln!(
        out,
        "point: ({}, {})",
        fmt12(point.as_slice()[0]),
        fmt12(point.as_slice()[1])
    );
    let _ = writeln!(out, "reflections:");
    for (i, p) in refl.iter().enumerate() {
        let _ = writeln!(
            out,
            "  r{i} = ({}, {})",
            fmt12(p.as_slice()[0]),
            fmt12(p.as_slice()[1])
        );
    }
    let _ = writeln!(out, "pairwise distances:");
    for i in 0..refl.len() {
        for j in (i + 1)..refl.len() {
            let _ = writeln!(
                out,
                "  |r{i} - r{j}| = {}",
                fmt12(refl[i].distance(&refl[j]))
            );
        }
    }
    if refl.len() <= crate::symmetry::MAX_AUTOMORPHISM_POINTS {
        let autos = distance_automorphisms(&refl, 1e-9)?;
        let _ = writeln!(out, "distance-preserving permutations: {}", autos.len());
    }
    Ok(out)
}

/// Both noiseless echo sets of the path poses `a` and `b` and how far apart they are.
pub fn ambiguity_text(pair: &AmbiguityPair) -> String {
    let mut out = String::new();
    for (name, e) in [("pose a", &pair.echoes_a), ("pose b", &pair.echoes_b)] {
        let _ = writeln!(out, "{name} echoes (squared travel distances):");
        for (k, set) in e.sets().iter().enumerate() {
            let vals: Vec<String> = set.iter().map(|d| fmt12(*d)).collect();
            let _ = writeln!(out, "  mic {k}: [{}]", vals.join(", "));
        }
    }
    let diffs = pair.echoes_a.set_differences(&pair.echoes_b);
    let _ = writeln!(
        out,
        "per-microphone set difference (m): {:?}",
        diffs.map(fmt12)
    );
    let _ = writeln!(
        out,
        "max entry difference (m^2): {}",
        fmt12(pair.echoes_a.max_entry_difference(&pair.echoes_b))
    );
    let _ = writeln!(
        out,
        "max set difference (m): {}",
        fmt12(pair.max_set_difference())
    );
    out
}

pub fn scenario_ambiguity(s: &Scenario, a: usize, b: usize) -> Result<AmbiguityPair> {
    ambiguity_pair(s, a, b)
}
