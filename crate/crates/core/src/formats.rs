//! On-disk formats: demonstration, trajectory and chunk files (JSON Lines
//! with a header line), run configuration and the IK convergence CSV.
//!
//! Layouts are documented in `docs/formats.md`.

use std::fmt;
use std::io::Write;

use log::warn;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_codec::{ActionChunk, KeypointFrame, ACTION_DIM, LAYOUT_VERSION};
use crate::controller::{initial_frame, ControllerConfig, EpisodeConfig, PlantParams};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat};
use crate::kinematics::{Keypoint, KinematicModel};
use crate::skr::{keypoints_of, scale_keypoints, IkReport, RobotMotionFrame, SkrConfig};

pub const DEMO_FORMAT: &str = "kpwbc-demo/1";
pub const TRAJECTORY_FORMAT: &str = "kpwbc-traj/1";
pub const CHUNK_FORMAT: &str = "kpwbc-chunks/1";
pub const CONFIG_FORMAT: &str = "kpwbc-config/1";

/// Quaternions further than this from unit norm are rejected.
pub const QUAT_REJECT: f64 = 1e-6;
/// Quaternions further than this (but within [`QUAT_REJECT`]) are renormalized.
pub const QUAT_RENORMALIZE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoHeader {
    pub format_version: String,
    /// Recording rate (Hz).
    pub rate: f64,
    /// Standing pelvis height of the demonstrator (m).
    pub calibration_height: f64,
    /// Valid gripper widths `[min, max]` (m).
    pub gripper_range: [f64; 2],
}

/// One demonstration line: keypoints as `[tx, ty, tz, qw, qx, qy, qz]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoRecord {
    pub t: f64,
    pub pelvis: [f64; 7],
    pub left_tcp: [f64; 7],
    pub right_tcp: [f64; 7],
    pub left_foot: [f64; 7],
    pub right_foot: [f64; 7],
    pub gripper: [f64; 2],
}

impl DemoRecord {
    fn slots(&self) -> [&[f64; 7]; 5] {
        [
            &self.pelvis,
            &self.left_tcp,
            &self.right_tcp,
            &self.left_foot,
            &self.right_foot,
        ]
    }

    pub fn from_frame(kf: &KeypointFrame) -> Self {
        let enc = |p: &Pose| {
            let t = p.translation;
            let q = p.rotation;
            [t.x, t.y, t.z, q.w, q.x, q.y, q.z]
        };
        DemoRecord {
            t: kf.timestamp,
            pelvis: enc(&kf.poses[0]),
            left_tcp: enc(&kf.poses[1]),
            right_tcp: enc(&kf.poses[2]),
            left_foot: enc(&kf.poses[3]),
            right_foot: enc(&kf.poses[4]),
            gripper: kf.gripper,
        }
    }

    /// Converts without any norm checks; quaternions are taken verbatim.
    pub fn to_frame(&self) -> KeypointFrame {
        let dec = |v: &[f64; 7]| {
            Pose::new(
                Vector3::new(v[0], v[1], v[2]),
                Quat::from_array([v[3], v[4], v[5], v[6]]),
            )
        };
        KeypointFrame {
            timestamp: self.t,
            poses: self.slots().map(dec),
            gripper: self.gripper,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub header: DemoHeader,
    pub frames: Vec<KeypointFrame>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// A validation problem tied to a 1-based line number.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub line: usize,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "line {}: {s}: {}", self.line, self.message)
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Checks a demonstration file and reports every problem found.
pub fn validate_demo(text: &str) -> (Option<Demonstration>, Vec<Finding>) {
    let mut findings = Vec::new();
    let mut err = |line, message: String| {
        findings.push(Finding {
            line,
            severity: Severity::Error,
            message,
        })
    };
    let mut lines = content_lines(text);
    let header: DemoHeader = match lines.next() {
        None => {
            err(1, "empty file".into());
            return (None, findings);
        }
        Some((n, l)) => match serde_json::from_str(l) {
            Ok(h) => h,
            Err(e) => {
                err(n, format!("bad header: {e}"));
                return (None, findings);
            }
        },
    };
    if header.format_version != DEMO_FORMAT {
        err(
            1,
            format!(
                "unsupported format_version `{}` (expected {DEMO_FORMAT})",
                header.format_version
            ),
        );
    }
    if !(header.rate > 0.0 && header.rate.is_finite()) {
        err(1, format!("rate must be positive, got {}", header.rate));
    }
    if !(header.calibration_height > 0.0 && header.calibration_height.is_finite()) {
        err(
            1,
            format!("calibration_height must be positive, got {}", header.calibration_height),
        );
    }
    let [glo, ghi] = header.gripper_range;
    if !(glo.is_finite() && ghi.is_finite() && glo <= ghi) {
        err(1, format!("gripper_range must be [min, max], got [{glo}, {ghi}]"));
    }

    let mut frames = Vec::new();
    let mut warnings = Vec::new();
    let mut last_t: Option<f64> = None;
    for (n, l) in lines {
        let rec: DemoRecord = match serde_json::from_str(l) {
            Ok(r) => r,
            Err(e) => {
                err(n, format!("bad record: {e}"));
                continue;
            }
        };
        let mut ok = true;
        let all = rec.slots().into_iter().flatten().chain(&rec.gripper).chain([&rec.t]);
        if all.clone().any(|v| !v.is_finite()) {
            err(n, "non-finite value".into());
            ok = false;
        }
        if let Some(prev) = last_t {
            if rec.t <= prev {
                err(n, format!("timestamp {} does not increase (previous {prev})", rec.t));
                ok = false;
            }
        }
        last_t = Some(rec.t);
        let mut frame = rec.to_frame();
        for kp in Keypoint::ALL {
            let q = frame.poses[kp.index()].rotation;
            let dev = (q.norm() - 1.0).abs();
            if dev > QUAT_REJECT {
                err(n, format!("{kp} quaternion norm {} is not unit", q.norm()));
                ok = false;
            } else if dev > QUAT_RENORMALIZE {
                warnings.push(Finding {
                    line: n,
                    severity: Severity::Warning,
                    message: format!("{kp} quaternion renormalized (norm {})", q.norm()),
                });
                frame.poses[kp.index()].rotation = Quat::new_normalize(q.w, q.x, q.y, q.z);
            }
        }
        for (side, g) in ["left", "right"].iter().zip(rec.gripper) {
            if g < glo || g > ghi {
                err(n, format!("{side} gripper width {g} outside [{glo}, {ghi}]"));
                ok = false;
            }
        }
        if ok {
            frames.push(frame);
        }
    }
    if frames.is_empty() && findings.is_empty() {
        findings.push(Finding {
            line: 1,
            severity: Severity::Error,
            message: "no frames".into(),
        });
    }
    findings.extend(warnings);
    findings.sort_by_key(|f| f.line);
    let clean = !findings.iter().any(|f| f.severity == Severity::Error);
    (clean.then_some(Demonstration { header, frames }), findings)
}

/// Strict loader: the first error becomes [`Error::Parse`]; warnings are logged.
pub fn read_demo(text: &str) -> Result<Demonstration> {
    let (demo, findings) = validate_demo(text);
    for f in &findings {
        if f.severity == Severity::Error {
            return Err(parse_err(f.line, f.message.clone()));
        }
        warn!("{f}");
    }
    demo.ok_or_else(|| parse_err(1, "invalid demonstration"))
}

pub fn write_demo<W: Write>(mut w: W, demo: &Demonstration) -> Result<()> {
    serde_json::to_writer(&mut w, &demo.header)?;
    writeln!(w)?;
    for f in &demo.frames {
        serde_json::to_writer(&mut w, &DemoRecord::from_frame(f))?;
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryHeader {
    pub format_version: String,
    pub model: String,
    pub rate: f64,
    pub dof: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    t: f64,
    /// Root position, root quaternion (wxyz), joints.
    x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub timestamps: Vec<f64>,
    pub frames: Vec<RobotMotionFrame>,
}

pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    serde_json::to_writer(&mut w, &traj.header)?;
    writeln!(w)?;
    for (t, f) in traj.timestamps.iter().zip(&traj.frames) {
        serde_json::to_writer(&mut w, &TrajectoryRecord { t: *t, x: f.to_vec() })?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_trajectory(text: &str) -> Result<Trajectory> {
    let mut lines = content_lines(text);
    let (n, l) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let header: TrajectoryHeader = serde_json::from_str(l).map_err(|e| parse_err(n, format!("bad header: {e}")))?;
    if header.format_version != TRAJECTORY_FORMAT {
        return Err(parse_err(
            n,
            format!("unsupported format_version `{}`", header.format_version),
        ));
    }
    let width = 7 + header.dof;
    let mut timestamps = Vec::new();
    let mut frames = Vec::new();
    for (n, l) in lines {
        let r: TrajectoryRecord = serde_json::from_str(l).map_err(|e| parse_err(n, e.to_string()))?;
        if r.x.len() != width {
            return Err(parse_err(n, format!("expected {width} values, got {}", r.x.len())));
        }
        timestamps.push(r.t);
        frames.push(RobotMotionFrame::from_slice(&r.x)?);
    }
    Ok(Trajectory {
        header,
        timestamps,
        frames,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkHeader {
    pub format_version: String,
    pub layout_version: String,
    pub horizon: usize,
    /// Seconds between rows.
    pub step_period: f64,
}

/// One encoded chunk with the frame it is relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRecord {
    /// Index of the anchor frame in the source demonstration.
    pub index: usize,
    pub anchor: KeypointFrame,
    pub chunk: ActionChunk,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChunkLine {
    index: usize,
    anchor: DemoRecord,
    rows: Vec<Vec<f64>>,
}

pub fn write_chunks<W: Write>(mut w: W, header: &ChunkHeader, chunks: &[ChunkRecord]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    writeln!(w)?;
    for c in chunks {
        let line = ChunkLine {
            index: c.index,
            anchor: DemoRecord::from_frame(&c.anchor),
            rows: c.chunk.rows.iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_chunks(text: &str) -> Result<(ChunkHeader, Vec<ChunkRecord>)> {
    let mut lines = content_lines(text);
    let (n, l) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let header: ChunkHeader = serde_json::from_str(l).map_err(|e| parse_err(n, format!("bad header: {e}")))?;
    if header.format_version != CHUNK_FORMAT {
        return Err(parse_err(
            n,
            format!("unsupported format_version `{}`", header.format_version),
        ));
    }
    if header.layout_version != LAYOUT_VERSION {
        return Err(parse_err(n, format!("unsupported layout `{}`", header.layout_version)));
    }
    let mut out = Vec::new();
    for (n, l) in lines {
        let c: ChunkLine = serde_json::from_str(l).map_err(|e| parse_err(n, e.to_string()))?;
        if c.rows.len() != header.horizon {
            return Err(parse_err(
                n,
                format!("expected {} rows, got {}", header.horizon, c.rows.len()),
            ));
        }
        let rows = c
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                <[f64; ACTION_DIM]>::try_from(r.as_slice())
                    .map_err(|_| parse_err(n, format!("row {i} has {} values, expected {ACTION_DIM}", r.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ChunkRecord {
            index: c.index,
            anchor: c.anchor.to_frame(),
            chunk: ActionChunk {
                rows,
                normalized: true,
                step_period: header.step_period,
                clamped: 0,
            },
        });
    }
    Ok((header, out))
}

pub const DECODED_FORMAT: &str = "kpwbc-decoded/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodedHeader {
    pub format_version: String,
    pub horizon: usize,
}

/// Absolute keypoint frames recovered from one chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodedLine {
    pub index: usize,
    pub frames: Vec<DemoRecord>,
}

pub fn write_decoded<W: Write>(mut w: W, header: &DecodedHeader, lines: &[DecodedLine]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    writeln!(w)?;
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_decoded(text: &str) -> Result<(DecodedHeader, Vec<DecodedLine>)> {
    let mut lines = content_lines(text);
    let (n, l) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let header: DecodedHeader = serde_json::from_str(l).map_err(|e| parse_err(n, format!("bad header: {e}")))?;
    if header.format_version != DECODED_FORMAT {
        return Err(parse_err(
            n,
            format!("unsupported format_version `{}`", header.format_version),
        ));
    }
    let body = lines
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| parse_err(n, e.to_string())))
        .collect::<Result<Vec<DecodedLine>>>()?;
    Ok((header, body))
}

/// A per-joint value given once for all joints or as a full vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerJoint {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerJoint {
    pub fn resolve(&self, dof: usize) -> Result<Vec<f64>> {
        match self {
            PerJoint::Uniform(v) => Ok(vec![*v; dof]),
            PerJoint::Each(v) if v.len() == dof => Ok(v.clone()),
            PerJoint::Each(v) => Err(Error::DimensionMismatch {
                expected: dof,
                actual: v.len(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerDoc {
    pub q0: PerJoint,
    pub s: PerJoint,
    pub a_max: f64,
    pub kp: PerJoint,
    pub kd: PerJoint,
    pub control_rate: f64,
}

impl Default for ControllerDoc {
    fn default() -> Self {
        let c = ControllerConfig::uniform(1);
        ControllerDoc {
            q0: PerJoint::Uniform(c.q0[0]),
            s: PerJoint::Uniform(c.s[0]),
            a_max: c.a_max,
            kp: PerJoint::Uniform(c.kp[0]),
            kd: PerJoint::Uniform(c.kd[0]),
            control_rate: c.control_rate,
        }
    }
}

impl ControllerDoc {
    pub fn resolve(&self, dof: usize) -> Result<ControllerConfig> {
        let c = ControllerConfig {
            q0: self.q0.resolve(dof)?,
            s: self.s.resolve(dof)?,
            a_max: self.a_max,
            kp: self.kp.resolve(dof)?,
            kd: self.kd.resolve(dof)?,
            control_rate: self.control_rate,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Everything the CLI can be configured with; every section is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: String,
    pub skr: SkrConfig,
    pub controller: ControllerDoc,
    pub plant: PlantParams,
    pub episode: EpisodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT.into(),
            skr: SkrConfig::default(),
            controller: ControllerDoc::default(),
            plant: PlantParams::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        if c.format_version != CONFIG_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "unsupported config format_version `{}`",
                c.format_version
            )));
        }
        c.skr.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const CONVERGENCE_HEADER: [&str; 8] = [
    "frame",
    "timestamp",
    "converged",
    "iterations",
    "attempts",
    "max_position_error",
    "max_orientation_error",
    "residual",
];

pub fn write_convergence_csv<W: Write>(w: W, timestamps: &[f64], reports: &[IkReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CONVERGENCE_HEADER)?;
    for (i, (t, r)) in timestamps.iter().zip(reports).enumerate() {
        wr.write_record([
            i.to_string(),
            t.to_string(),
            (r.converged as u8).to_string(),
            r.iterations.to_string(),
            r.attempts.to_string(),
            r.max_position_error().to_string(),
            r.max_orientation_error().to_string(),
            r.residual.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Parameters of [`make_demo`].
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSpec {
    pub rate: f64,
    pub duration: f64,
    /// Demonstrator pelvis height; feet are rescaled from robot to this size.
    pub calibration_height: f64,
    pub seed: u64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        DemoSpec {
            rate: 30.0,
            duration: 10.0,
            calibration_height: 0.95,
            seed: 0,
        }
    }
}

/// Synthetic demonstration made by FK playback of smooth random joint motion
/// on `model`, with feet moved to a demonstrator of `calibration_height`.
/// Returns the demo and the joint trajectory that produced it.
pub fn make_demo(model: &KinematicModel, spec: &DemoSpec) -> Result<(Demonstration, Vec<RobotMotionFrame>)> {
    if !(spec.rate > 0.0 && spec.duration > 0.0 && spec.calibration_height > 0.0) {
        return Err(Error::InvalidConfig(
            "rate, duration and calibration height must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = initial_frame(model, model.dof() > 12);
    let limits = model.limits();
    let waves: Vec<(f64, f64, f64)> = (0..model.dof())
        .map(|_| {
            (
                rng.random_range(0.05..0.25),
                rng.random_range(0.1..0.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let drift = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
    let ratio = spec.calibration_height / model.default_root_height().max(1e-9);
    let n = (spec.duration * spec.rate).round() as usize + 1;
    let mut frames = Vec::with_capacity(n);
    let mut joints = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / spec.rate;
        let mut f = base.clone();
        for (j, (amp, freq, phase)) in waves.iter().enumerate() {
            let (lo, hi) = limits[j];
            let v = f.joints[j] + amp * ((std::f64::consts::TAU * freq * t + phase).sin() - phase.sin());
            f.joints[j] = v.clamp(lo + 0.05, hi - 0.05);
        }
        f.root_position += drift * t;
        let mut kf = keypoints_of(model, &f, t)?;
        kf.gripper = [0.04 + 0.03 * (0.7 * t).sin(), 0.04 + 0.03 * (0.9 * t + 1.0).sin()];
        frames.push(scale_keypoints(&kf, ratio));
        joints.push(f);
    }
    Ok((
        Demonstration {
            header: DemoHeader {
                format_version: DEMO_FORMAT.into(),
                rate: spec.rate,
                calibration_height: spec.calibration_height,
                gripper_range: [0.0, 0.08],
            },
            frames,
        },
        joints,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_codec::testutil::smooth_random_traj;
    use crate::kinematics::bundled_model;

    fn demo_text(frames: &[KeypointFrame]) -> String {
        let demo = Demonstration {
            header: DemoHeader {
                format_version: DEMO_FORMAT.into(),
                rate: 30.0,
                calibration_height: 0.9,
                gripper_range: [-1.0, 1.0],
            },
            frames: frames.to_vec(),
        };
        let mut out = Vec::new();
        write_demo(&mut out, &demo).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn demo_round_trip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj = smooth_random_traj(&mut rng, 20, 30.0);
        let text = demo_text(&traj);
        let (demo, findings) = validate_demo(&text);
        assert!(findings.is_empty(), "{findings:?}");
        assert_eq!(demo.unwrap().frames, traj);
        assert_eq!(read_demo(&text).unwrap().frames, traj);
    }

    #[test]
    fn demo_findings_have_line_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut traj = smooth_random_traj(&mut rng, 6, 30.0);
        let q = traj[2].poses[1].rotation;
        traj[2].poses[1].rotation = Quat {
            w: q.w * 0.9,
            x: q.x * 0.9,
            y: q.y * 0.9,
            z: q.z * 0.9,
        };
        traj[4].timestamp = traj[3].timestamp;
        let text = demo_text(&traj);
        let (demo, findings) = validate_demo(&text);
        assert!(demo.is_none());
        let lines: Vec<usize> = findings.iter().map(|f| f.line).collect();
        assert_eq!(lines, vec![4, 6]);
        assert!(findings[0].message.contains("left_tcp"));
        assert!(matches!(read_demo(&text), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn demo_renormalizes_small_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut traj = smooth_random_traj(&mut rng, 3, 30.0);
        let q = traj[1].poses[0].rotation;
        let s = 1.0 + 1e-7;
        traj[1].poses[0].rotation = Quat {
            w: q.w * s,
            x: q.x * s,
            y: q.y * s,
            z: q.z * s,
        };
        let (demo, findings) = validate_demo(&demo_text(&traj));
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].severity, Severity::Warning);
        let r = demo.unwrap().frames[1].poses[0].rotation;
        assert!((r.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn demo_bad_lines() {
        assert!(!validate_demo("").1.is_empty());
        let (_, f) = validate_demo("{\"format_version\":\"x\"}");
        assert_eq!(f[0].line, 1);
        let mut text = demo_text(&smooth_random_traj(&mut ChaCha8Rng::seed_from_u64(1), 2, 30.0));
        text.push_str("{\"t\": 5.0}\n");
        let (_, f) = validate_demo(&text);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].line, 4);
    }

    #[test]
    fn gripper_range_checked() {
        let mut traj = smooth_random_traj(&mut ChaCha8Rng::seed_from_u64(2), 2, 30.0);
        traj[1].gripper[1] = 3.0;
        let (_, f) = validate_demo(&demo_text(&traj));
        assert_eq!(f.len(), 1);
        assert!(f[0].message.contains("right gripper"));
    }

    #[test]
    fn trajectory_round_trip() {
        let model = bundled_model("biped29").unwrap();
        let (_, joints) = make_demo(
            &model,
            &DemoSpec {
                duration: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        let traj = Trajectory {
            header: TrajectoryHeader {
                format_version: TRAJECTORY_FORMAT.into(),
                model: "biped29".into(),
                rate: 30.0,
                dof: 29,
            },
            timestamps: (0..joints.len()).map(|i| i as f64 / 30.0).collect(),
            frames: joints,
        };
        let mut out = Vec::new();
        write_trajectory(&mut out, &traj).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(read_trajectory(&text).unwrap(), traj);
        let bad = text.replacen("\"dof\":29", "\"dof\":28", 1);
        assert!(matches!(read_trajectory(&bad), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn chunk_round_trip() {
        use crate::action_codec::{compute_stats, encode, relative_chunk};
        let traj = smooth_random_traj(&mut ChaCha8Rng::seed_from_u64(3), 20, 10.0);
        let stats = compute_stats(std::slice::from_ref(&traj), 4).unwrap();
        let recs: Vec<ChunkRecord> = (0..3)
            .map(|i| ChunkRecord {
                index: i,
                anchor: traj[i].clone(),
                chunk: encode(&relative_chunk(&traj, i, 4).unwrap(), &stats),
            })
            .collect();
        let header = ChunkHeader {
            format_version: CHUNK_FORMAT.into(),
            layout_version: LAYOUT_VERSION.into(),
            horizon: 4,
            step_period: recs[0].chunk.step_period,
        };
        let mut out = Vec::new();
        write_chunks(&mut out, &header, &recs).unwrap();
        let text = String::from_utf8(out).unwrap();
        let (h, back) = read_chunks(&text).unwrap();
        assert_eq!(h, header);
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.anchor, b.anchor);
            assert_eq!(a.chunk.rows, b.chunk.rows);
        }
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        v["rows"][2].as_array_mut().unwrap().pop();
        lines[1] = v.to_string();
        assert!(matches!(
            read_chunks(&lines.join("\n")),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let c = RunConfig::from_json(r#"{"format_version": "kpwbc-config/1", "controller": {"kp": 200.0}}"#).unwrap();
        let ctrl = c.controller.resolve(3).unwrap();
        assert_eq!(ctrl.kp, vec![200.0; 3]);
        assert_eq!(ctrl.kd, vec![10.0; 3]);
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"format_version": "kpwbc-config/1", "bogus": 1}"#).is_err());
        let c =
            RunConfig::from_json(r#"{"format_version": "kpwbc-config/1", "controller": {"kp": [1.0, 2.0]}}"#).unwrap();
        assert!(c.controller.resolve(3).is_err());
    }

    #[test]
    fn make_demo_is_valid_and_seeded() {
        let model = bundled_model("biped29").unwrap();
        let spec = DemoSpec {
            duration: 1.0,
            ..Default::default()
        };
        let (a, joints) = make_demo(&model, &spec).unwrap();
        let (b, _) = make_demo(&model, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 31);
        assert!(joints.iter().all(|f| model.within_limits(&f.joints)));
        let mut out = Vec::new();
        write_demo(&mut out, &a).unwrap();
        let (back, findings) = validate_demo(std::str::from_utf8(&out).unwrap());
        assert!(findings.is_empty(), "{findings:?}");
        assert_eq!(back.unwrap(), a);
    }
}
