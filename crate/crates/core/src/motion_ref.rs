//! Reference-motion buffering and observation assembly for the 50 Hz
//! tracking layer.
//!
//! Layouts (all versioned as `obs-v1`):
//! - command block per offset `k`: `dp(3) dq(4, wxyz) h_ref(1) g_ref(3) q_ref(dof)`
//! - proprio: `h(1) g(3) omega(3N) q(dof*N) qd(dof*N) a_prev(dof*N)`, every
//!   history block oldest first, newest last.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::{Arc, Condvar, Mutex};

use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{projected_gravity, slerp, yaw_of, Quat};
use crate::kinematics::KinematicModel;
use crate::skr::RobotMotionFrame;

pub const OBS_LAYOUT_VERSION: &str = "obs-v1";
pub const CONTROL_RATE: f64 = 50.0;
pub const DEFAULT_HISTORY: usize = 4;
pub const DEFAULT_RETAIN: usize = 16;
pub const DEFAULT_OFFSETS: [i64; 11] = [0, 1, 2, 3, 4, -1, -2, -4, -8, -12, -16];

/// Scalars per command block besides the joints.
pub const COMMAND_ROOT_WIDTH: usize = 11;

/// Leg (12) and waist (3) joints of the bundled biped, in model order.
pub const LOWER_BODY_JOINTS: [usize; 15] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14];
pub const HIGH_LEVEL_HISTORY: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionChunk {
    pub frames: Vec<RobotMotionFrame>,
    pub source_rate: f64,
}

impl MotionChunk {
    pub fn new(frames: Vec<RobotMotionFrame>, source_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidConfig("motion chunk has no frames".into()));
        }
        if !(source_rate > 0.0 && source_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "source rate must be positive, got {source_rate}"
            )));
        }
        let dof = frames[0].joints.len();
        if let Some(bad) = frames.iter().find(|f| f.joints.len() != dof) {
            return Err(Error::DimensionMismatch {
                expected: dof,
                actual: bad.joints.len(),
            });
        }
        Ok(MotionChunk { frames, source_rate })
    }

    /// Seconds from first to last frame.
    pub fn span(&self) -> f64 {
        (self.frames.len() - 1) as f64 / self.source_rate
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn interpolate(a: &RobotMotionFrame, b: &RobotMotionFrame, t: f64) -> RobotMotionFrame {
    RobotMotionFrame {
        root_position: Vector3::from_fn(|i, _| lerp(a.root_position[i], b.root_position[i], t)),
        root_orientation: slerp(&a.root_orientation, &b.root_orientation, t),
        joints: a.joints.iter().zip(&b.joints).map(|(x, y)| lerp(*x, *y, t)).collect(),
    }
}

/// Resamples to `target_rate` over the chunk's span. Root position and joints
/// are interpolated linearly, root orientation by slerp. Both endpoints are
/// copied verbatim; when the span is not a whole number of target periods the
/// grid is rounded to the nearest count and the last frame still lands on the
/// last input frame.
pub fn resample(chunk: &MotionChunk, target_rate: f64) -> Result<Vec<RobotMotionFrame>> {
    if !(target_rate > 0.0 && target_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "target rate must be positive, got {target_rate}"
        )));
    }
    let n = chunk.frames.len();
    if n == 1 {
        warn!("resampling a single-frame chunk; returned unchanged");
        return Ok(chunk.frames.clone());
    }
    if chunk.source_rate == target_rate {
        return Ok(chunk.frames.clone());
    }
    let last = (n - 1) as f64;
    let count = (last * target_rate / chunk.source_rate).round() as usize;
    if count == 0 {
        return Ok(vec![chunk.frames[0].clone(), chunk.frames[n - 1].clone()]);
    }
    let ratio = last / count as f64;
    let mut out = Vec::with_capacity(count + 1);
    for j in 0..=count {
        if j == count {
            out.push(chunk.frames[n - 1].clone());
            break;
        }
        let s = j as f64 * ratio;
        let i = (s.floor() as usize).min(n - 2);
        let t = s - i as f64;
        if t == 0.0 {
            out.push(chunk.frames[i].clone());
        } else {
            out.push(interpolate(&chunk.frames[i], &chunk.frames[i + 1], t));
        }
    }
    Ok(out)
}

/// Control-rate reference frames with a read cursor.
///
/// Indices are absolute (frame 0 is the first frame ever pushed). Frames more
/// than `retain` behind the cursor are dropped; reads outside the stored range
/// clamp to the oldest or newest stored frame.
#[derive(Clone, Debug)]
pub struct ReferenceBuffer {
    frames: VecDeque<RobotMotionFrame>,
    base: usize,
    cursor: usize,
    retain: usize,
}

impl ReferenceBuffer {
    pub fn new(initial: RobotMotionFrame) -> Self {
        Self::with_retention(initial, DEFAULT_RETAIN).expect("default retention is valid")
    }

    pub fn with_retention(initial: RobotMotionFrame, retain: usize) -> Result<Self> {
        if retain < DEFAULT_RETAIN {
            return Err(Error::InvalidConfig(format!(
                "reference buffer must retain at least {DEFAULT_RETAIN} past frames, got {retain}"
            )));
        }
        Ok(ReferenceBuffer {
            frames: VecDeque::from([initial]),
            base: 0,
            cursor: 0,
            retain,
        })
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// One past the newest published frame.
    pub fn watermark(&self) -> usize {
        self.base + self.frames.len()
    }

    /// Oldest retained absolute index.
    pub fn oldest(&self) -> usize {
        self.base
    }

    pub fn dof(&self) -> usize {
        self.frames[0].joints.len()
    }

    pub fn get(&self, index: usize) -> Option<&RobotMotionFrame> {
        index.checked_sub(self.base).and_then(|i| self.frames.get(i))
    }

    pub fn current(&self) -> &RobotMotionFrame {
        self.at_offset(0)
    }

    /// Frame at `cursor + k`, clamped to the stored range.
    pub fn at_offset(&self, k: i64) -> &RobotMotionFrame {
        let lo = self.base as i64;
        let hi = self.watermark() as i64 - 1;
        let idx = (self.cursor as i64 + k).clamp(lo, hi);
        &self.frames[(idx - lo) as usize]
    }

    fn check_dof(&self, f: &RobotMotionFrame) -> Result<()> {
        if f.joints.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                actual: f.joints.len(),
            });
        }
        Ok(())
    }

    pub fn push(&mut self, frame: RobotMotionFrame) -> Result<()> {
        self.check_dof(&frame)?;
        self.frames.push_back(frame);
        Ok(())
    }

    pub fn extend<I: IntoIterator<Item = RobotMotionFrame>>(&mut self, frames: I) -> Result<()> {
        for f in frames {
            self.push(f)?;
        }
        Ok(())
    }

    /// Drops every frame after `index` and appends `frames`. `index` must not be
    /// behind the cursor, so frames already consumed are never rewritten.
    pub fn replace_after<I: IntoIterator<Item = RobotMotionFrame>>(&mut self, index: usize, frames: I) -> Result<()> {
        if index < self.cursor || index >= self.watermark() {
            return Err(Error::InvalidConfig(format!(
                "cannot replace after frame {index} (cursor {}, watermark {})",
                self.cursor,
                self.watermark()
            )));
        }
        self.frames.truncate(index - self.base + 1);
        self.extend(frames)
    }

    /// Moves the cursor one frame forward. At the newest frame the cursor holds
    /// and `false` is returned.
    pub fn advance(&mut self) -> bool {
        if self.cursor + 1 >= self.watermark() {
            return false;
        }
        self.cursor += 1;
        while self.cursor - self.base > self.retain {
            self.frames.pop_front();
            self.base += 1;
        }
        true
    }
}

struct Shared {
    buffer: ReferenceBuffer,
    closed: bool,
}

/// Two-party view of a [`ReferenceBuffer`]: one producer appends frames, one
/// consumer reads at or behind the watermark and moves the cursor.
#[derive(Clone)]
pub struct SharedReferenceBuffer {
    inner: Arc<(Mutex<Shared>, Condvar)>,
}

impl SharedReferenceBuffer {
    pub fn new(buffer: ReferenceBuffer) -> Self {
        SharedReferenceBuffer {
            inner: Arc::new((Mutex::new(Shared { buffer, closed: false }), Condvar::new())),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Shared> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn publish<I: IntoIterator<Item = RobotMotionFrame>>(&self, frames: I) -> Result<()> {
        let mut g = self.lock();
        let r = g.buffer.extend(frames);
        self.inner.1.notify_all();
        r
    }

    /// Marks the stream finished; waiting readers fall back to clamping.
    pub fn close(&self) {
        self.lock().closed = true;
        self.inner.1.notify_all();
    }

    /// Blocks until `lookahead` frames past the cursor are published (or the
    /// producer closed), then runs `f` on the buffer.
    pub fn read<T>(&self, lookahead: usize, f: impl FnOnce(&ReferenceBuffer) -> T) -> T {
        let mut g = self.lock();
        while !g.closed && g.buffer.watermark() <= g.buffer.cursor() + lookahead {
            g = self.inner.1.wait(g).unwrap_or_else(|p| p.into_inner());
        }
        f(&g.buffer)
    }

    /// Advances the cursor, waiting for the next frame unless closed.
    pub fn advance(&self) -> bool {
        let mut g = self.lock();
        while !g.closed && g.buffer.watermark() <= g.buffer.cursor() + 1 {
            g = self.inner.1.wait(g).unwrap_or_else(|p| p.into_inner());
        }
        g.buffer.advance()
    }

    pub fn snapshot(&self) -> ReferenceBuffer {
        self.lock().buffer.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub timestamp: f64,
    /// World root position; its z is the root height.
    pub root_position: Vector3<f64>,
    pub root_orientation: Quat,
    /// Base-frame angular velocity (rad/s).
    pub angular_velocity: Vector3<f64>,
    pub joints: Vec<f64>,
    pub joint_velocities: Vec<f64>,
    pub previous_action: Vec<f64>,
}

impl RobotState {
    /// State at rest in the pose of a reference frame.
    pub fn at_rest(frame: &RobotMotionFrame, timestamp: f64) -> Self {
        let dof = frame.joints.len();
        RobotState {
            timestamp,
            root_position: frame.root_position,
            root_orientation: frame.root_orientation,
            angular_velocity: Vector3::zeros(),
            joints: frame.joints.clone(),
            joint_velocities: vec![0.0; dof],
            previous_action: vec![0.0; dof],
        }
    }

    pub fn root_height(&self) -> f64 {
        self.root_position.z
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    fn validate(&self) -> Result<()> {
        let dof = self.dof();
        for v in [&self.joint_velocities, &self.previous_action] {
            if v.len() != dof {
                return Err(Error::DimensionMismatch {
                    expected: dof,
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Last `N` robot states. The first pushed state fills every slot.
#[derive(Clone, Debug)]
pub struct ProprioHistory {
    len: usize,
    states: VecDeque<RobotState>,
}

impl ProprioHistory {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidConfig("history length must be at least 1".into()));
        }
        Ok(ProprioHistory {
            len,
            states: VecDeque::with_capacity(len),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, state: RobotState) -> Result<()> {
        state.validate()?;
        if let Some(first) = self.states.front() {
            if first.dof() != state.dof() {
                return Err(Error::DimensionMismatch {
                    expected: first.dof(),
                    actual: state.dof(),
                });
            }
        }
        if self.states.is_empty() {
            for _ in 1..self.len {
                self.states.push_back(state.clone());
            }
        } else {
            self.states.pop_front();
        }
        self.states.push_back(state);
        Ok(())
    }

    /// Oldest first.
    pub fn states(&self) -> impl Iterator<Item = &RobotState> {
        self.states.iter()
    }

    pub fn newest(&self) -> Option<&RobotState> {
        self.states.back()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct OffsetSet(Vec<i64>);

impl OffsetSet {
    pub fn new(offsets: Vec<i64>) -> Result<Self> {
        if !offsets.contains(&0) {
            return Err(Error::InvalidConfig("offset set must contain 0".into()));
        }
        Ok(OffsetSet(offsets))
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_future(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0).max(0) as usize
    }
}

impl Default for OffsetSet {
    fn default() -> Self {
        OffsetSet(DEFAULT_OFFSETS.to_vec())
    }
}

impl TryFrom<Vec<i64>> for OffsetSet {
    type Error = Error;
    fn try_from(v: Vec<i64>) -> Result<Self> {
        OffsetSet::new(v)
    }
}

impl From<OffsetSet> for Vec<i64> {
    fn from(o: OffsetSet) -> Self {
        o.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommandFrame {
    /// Reference minus current root position, in the current heading frame.
    pub dp: Vector3<f64>,
    /// `inverse(current) * reference`.
    pub dq: Quat,
    pub h_ref: f64,
    pub g_ref: Vector3<f64>,
    pub joints: Vec<f64>,
}

impl CommandFrame {
    pub fn width(&self) -> usize {
        COMMAND_ROOT_WIDTH + self.joints.len()
    }

    pub fn write_to(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.dp.as_slice());
        out.extend_from_slice(&self.dq.to_array());
        out.push(self.h_ref);
        out.extend_from_slice(self.g_ref.as_slice());
        out.extend_from_slice(&self.joints);
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        self.write_to(&mut v);
        v
    }
}

pub fn command_frame(buffer: &ReferenceBuffer, state: &RobotState, k: i64) -> CommandFrame {
    let r = buffer.at_offset(k);
    let heading = Quat::from_axis_angle(&Vector3::z(), -yaw_of(&state.root_orientation));
    CommandFrame {
        dp: heading.rotate(&(r.root_position - state.root_position)),
        dq: state.root_orientation.inverse().mul(&r.root_orientation),
        h_ref: r.root_position.z,
        g_ref: projected_gravity(&r.root_orientation),
        joints: r.joints.clone(),
    }
}

/// Command blocks concatenated in offset order.
pub fn assemble_command(buffer: &ReferenceBuffer, state: &RobotState, offsets: &OffsetSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(offsets.len() * (COMMAND_ROOT_WIDTH + buffer.dof()));
    for &k in offsets.as_slice() {
        command_frame(buffer, state, k).write_to(&mut out);
    }
    out
}

pub fn proprio_width(dof: usize, history: usize) -> usize {
    4 + history * (3 + 3 * dof)
}

pub fn assemble_proprio(history: &ProprioHistory) -> Result<Vec<f64>> {
    let now = history
        .newest()
        .ok_or_else(|| Error::InvalidConfig("proprioceptive history is empty".into()))?;
    let mut out = Vec::with_capacity(proprio_width(now.dof(), history.len()));
    out.push(now.root_height());
    out.extend_from_slice(projected_gravity(&now.root_orientation).as_slice());
    for s in history.states() {
        out.extend_from_slice(s.angular_velocity.as_slice());
    }
    for s in history.states() {
        out.extend_from_slice(&s.joints);
    }
    for s in history.states() {
        out.extend_from_slice(&s.joint_velocities);
    }
    for s in history.states() {
        out.extend_from_slice(&s.previous_action);
    }
    Ok(out)
}

/// Picks the leg and waist joints out of a full joint vector.
pub fn lower_body(joints: &[f64]) -> Result<[f64; 15]> {
    if joints.len() <= LOWER_BODY_JOINTS[14] {
        return Err(Error::DimensionMismatch {
            expected: LOWER_BODY_JOINTS[14] + 1,
            actual: joints.len(),
        });
    }
    Ok(LOWER_BODY_JOINTS.map(|i| joints[i]))
}

/// Checks that [`LOWER_BODY_JOINTS`] names hip, knee, ankle and waist joints
/// of `model`.
pub fn check_lower_body_indices(model: &KinematicModel) -> Result<()> {
    let names = model.joint_names();
    for &i in &LOWER_BODY_JOINTS {
        let name = names
            .get(i)
            .ok_or_else(|| Error::InvalidModel(format!("model has no joint {i}")))?;
        if !["hip", "knee", "ankle", "waist"].iter().any(|p| name.contains(p)) {
            return Err(Error::InvalidModel(format!(
                "joint {i} ({name}) is not a leg or waist joint"
            )));
        }
    }
    Ok(())
}

/// Three frames of 15 lower-body values, oldest first.
pub fn high_level_proprio(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    if frames.len() != HIGH_LEVEL_HISTORY {
        return Err(Error::DimensionMismatch {
            expected: HIGH_LEVEL_HISTORY,
            actual: frames.len(),
        });
    }
    let mut out = Vec::with_capacity(HIGH_LEVEL_HISTORY * 15);
    for f in frames {
        if f.len() != 15 {
            return Err(Error::DimensionMismatch {
                expected: 15,
                actual: f.len(),
            });
        }
        out.extend_from_slice(f);
    }
    Ok(out)
}

fn offset_label(k: i64) -> String {
    if k < 0 {
        format!("k{k}")
    } else {
        format!("k+{k}")
    }
}

/// Column names for [`assemble_command`], e.g. `cmd.k+2.dq.w`.
pub fn command_names(offsets: &OffsetSet, joint_names: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for &k in offsets.as_slice() {
        let p = format!("cmd.{}", offset_label(k));
        for c in ["x", "y", "z"] {
            out.push(format!("{p}.dp.{c}"));
        }
        for c in ["w", "x", "y", "z"] {
            out.push(format!("{p}.dq.{c}"));
        }
        out.push(format!("{p}.h_ref"));
        for c in ["x", "y", "z"] {
            out.push(format!("{p}.g_ref.{c}"));
        }
        for j in joint_names {
            out.push(format!("{p}.q.{j}"));
        }
    }
    out
}

/// Column names for [`assemble_proprio`]; history slot 0 is the oldest.
pub fn proprio_names(joint_names: &[&str], history: usize) -> Vec<String> {
    let mut out = vec!["prop.h".to_string()];
    for c in ["x", "y", "z"] {
        out.push(format!("prop.g.{c}"));
    }
    for h in 0..history {
        for c in ["x", "y", "z"] {
            out.push(format!("prop.h{h}.omega.{c}"));
        }
    }
    for block in ["q", "qd", "a_prev"] {
        for h in 0..history {
            for j in joint_names {
                out.push(format!("prop.h{h}.{block}.{j}"));
            }
        }
    }
    out
}

/// Writes observation rows as CSV under a header row.
pub fn write_observation_csv<W: Write>(w: W, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header)?;
    for (i, r) in rows.iter().enumerate() {
        if r.len() != header.len() {
            return Err(Error::DimensionMismatch {
                expected: header.len(),
                actual: r.len(),
            }
            .at_frame(i));
        }
        wr.write_record(r.iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}
