//! Keypoint trajectories to 47-wide normalized relative action chunks and back.
//!
//! Row layout (fixed, versioned as [`LAYOUT_VERSION`]):
//!
//! ```text
//! [ pelvis(t3, r6) | left_tcp(t3, r6) | right_tcp(t3, r6) | left_foot(t3, r6) | right_foot(t3, r6) | grip_l | grip_r ]
//! ```
//!
//! `t3` is the translation relative to the keypoint's own pose at the query
//! frame, `r6` the first two columns of the relative rotation. Translations
//! and gripper widths are min-max normalized to `[-1, 1]`; rotation columns
//! are never rescaled.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot6d_decode, rot6d_encode, Pose, Quat, Rot6D};
use crate::kinematics::Keypoint;

pub const ACTION_DIM: usize = 47;
pub const SCALAR_DIMS: usize = 17;
pub const DEFAULT_HORIZON: usize = 48;
pub const LAYOUT_VERSION: &str = "kp47-v1";

const GRIPPER_COL: usize = 45;

/// Column of keypoint `kp`'s translation x in an action row.
pub fn translation_col(kp: Keypoint) -> usize {
    kp.index() * 9
}

/// Column of keypoint `kp`'s first Rot6D entry in an action row.
pub fn rotation_col(kp: Keypoint) -> usize {
    kp.index() * 9 + 3
}

/// Action-row column for each of the 17 normalized scalar dims.
pub fn scalar_dim_columns() -> [usize; SCALAR_DIMS] {
    let mut out = [0; SCALAR_DIMS];
    for kp in Keypoint::ALL {
        for a in 0..3 {
            out[kp.index() * 3 + a] = translation_col(kp) + a;
        }
    }
    out[15] = GRIPPER_COL;
    out[16] = GRIPPER_COL + 1;
    out
}

/// Names of the 47 action columns, e.g. `left_tcp.tx`, `pelvis.r6_4`, `gripper.left`.
pub fn action_column_names() -> Vec<String> {
    let mut names = Vec::with_capacity(ACTION_DIM);
    for kp in Keypoint::ALL {
        for a in ["tx", "ty", "tz"] {
            names.push(format!("{kp}.{a}"));
        }
        for i in 0..6 {
            names.push(format!("{kp}.r6_{i}"));
        }
    }
    names.push("gripper.left".into());
    names.push("gripper.right".into());
    names
}

/// One demonstration sample: five keypoint poses, two gripper widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub timestamp: f64,
    pub poses: [Pose; 5],
    pub gripper: [f64; 2],
}

impl KeypointFrame {
    pub fn pose(&self, kp: Keypoint) -> &Pose {
        &self.poses[kp.index()]
    }

    pub fn pose_mut(&mut self, kp: Keypoint) -> &mut Pose {
        &mut self.poses[kp.index()]
    }
}

/// One future step of a relative chunk. `offset` is seconds after the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeStep {
    pub offset: f64,
    pub poses: [Pose; 5],
    pub gripper: [f64; 2],
}

impl RelativeStep {
    fn scalars(&self) -> [f64; SCALAR_DIMS] {
        let mut s = [0.0; SCALAR_DIMS];
        for (k, p) in self.poses.iter().enumerate() {
            s[3 * k..3 * k + 3].copy_from_slice(p.translation.as_slice());
        }
        s[15] = self.gripper[0];
        s[16] = self.gripper[1];
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelativeChunk {
    pub steps: Vec<RelativeStep>,
}

impl RelativeChunk {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Per-keypoint relative poses for frames `t+1 ..= t+horizon`, each expressed
/// in that keypoint's own frame at `t`. Gripper widths stay absolute.
pub fn relative_chunk(traj: &[KeypointFrame], t: usize, horizon: usize) -> Result<RelativeChunk> {
    let required = t + horizon + 1;
    if traj.len() < required {
        return Err(Error::InsufficientFrames {
            required,
            available: traj.len(),
        });
    }
    let anchor = &traj[t];
    let inv: [Pose; 5] = anchor.poses.map(|p| p.inverse());
    let steps = traj[t + 1..=t + horizon]
        .iter()
        .map(|f| RelativeStep {
            offset: f.timestamp - anchor.timestamp,
            poses: std::array::from_fn(|k| inv[k].compose(&f.poses[k])),
            gripper: f.gripper,
        })
        .collect();
    Ok(RelativeChunk { steps })
}

/// Inverse of [`relative_chunk`]: re-anchors every step on `anchor`.
pub fn absolute_from_chunk(chunk: &RelativeChunk, anchor: &KeypointFrame) -> Vec<KeypointFrame> {
    chunk
        .steps
        .iter()
        .map(|s| KeypointFrame {
            timestamp: anchor.timestamp + s.offset,
            poses: std::array::from_fn(|k| anchor.poses[k].compose(&s.poses[k])),
            gripper: s.gripper,
        })
        .collect()
}

/// Min/max over the 15 translation dims and 2 gripper dims.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub min: [f64; SCALAR_DIMS],
    pub max: [f64; SCALAR_DIMS],
}

#[derive(Serialize, Deserialize)]
struct StatsDim {
    name: String,
    min: f64,
    max: f64,
}

#[derive(Serialize, Deserialize)]
struct StatsDoc {
    layout_version: String,
    dims: Vec<StatsDim>,
}

impl NormalizationStats {
    pub fn dim_names() -> Vec<String> {
        let names = action_column_names();
        scalar_dim_columns().iter().map(|&c| names[c].clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = StatsDoc {
            layout_version: LAYOUT_VERSION.into(),
            dims: Self::dim_names()
                .into_iter()
                .enumerate()
                .map(|(i, name)| StatsDim {
                    name,
                    min: self.min[i],
                    max: self.max[i],
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: StatsDoc = serde_json::from_str(text)?;
        if doc.layout_version != LAYOUT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "stats layout `{}` does not match `{LAYOUT_VERSION}`",
                doc.layout_version
            )));
        }
        if doc.dims.len() != SCALAR_DIMS {
            return Err(Error::DimensionMismatch {
                expected: SCALAR_DIMS,
                actual: doc.dims.len(),
            });
        }
        let expected = Self::dim_names();
        let mut stats = NormalizationStats {
            min: [0.0; SCALAR_DIMS],
            max: [0.0; SCALAR_DIMS],
        };
        for (i, d) in doc.dims.iter().enumerate() {
            if d.name != expected[i] {
                return Err(Error::InvalidConfig(format!(
                    "stats dim {i} is `{}`, expected `{}`",
                    d.name, expected[i]
                )));
            }
            if !(d.min <= d.max) {
                return Err(Error::InvalidConfig(format!(
                    "stats dim `{}` has min {} > max {}",
                    d.name, d.min, d.max
                )));
            }
            stats.min[i] = d.min;
            stats.max[i] = d.max;
        }
        Ok(stats)
    }
}

/// Elementwise min/max over every relative chunk of every trajectory.
pub fn compute_stats(dataset: &[Vec<KeypointFrame>], horizon: usize) -> Result<NormalizationStats> {
    let mut min = [f64::INFINITY; SCALAR_DIMS];
    let mut max = [f64::NEG_INFINITY; SCALAR_DIMS];
    let mut any = false;
    for traj in dataset {
        if traj.len() < horizon + 1 {
            continue;
        }
        for t in 0..traj.len() - horizon {
            for step in relative_chunk(traj, t, horizon)?.steps {
                for (i, v) in step.scalars().into_iter().enumerate() {
                    min[i] = min[i].min(v);
                    max[i] = max[i].max(v);
                }
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::EmptyDataset);
    }
    Ok(NormalizationStats { min, max })
}

/// A horizon of 47-wide action rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub rows: Vec<[f64; ACTION_DIM]>,
    pub normalized: bool,
    /// Seconds between consecutive rows.
    pub step_period: f64,
    /// Scalars clamped into range during encoding.
    pub clamped: usize,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.rows.len()
    }
}

fn normalize(x: f64, lo: f64, hi: f64, clamped: &mut usize) -> f64 {
    if x < lo || x > hi {
        *clamped += 1;
    }
    if hi <= lo {
        return 0.0;
    }
    let c = x.clamp(lo, hi);
    2.0 * (c - lo) / (hi - lo) - 1.0
}

fn denormalize(y: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (y + 1.0) * 0.5 * (hi - lo) + lo
}

/// Relative chunk to normalized 47-wide rows. Out-of-range scalars are clamped
/// and counted in [`ActionChunk::clamped`].
pub fn encode(chunk: &RelativeChunk, stats: &NormalizationStats) -> ActionChunk {
    let cols = scalar_dim_columns();
    let mut clamped = 0;
    let rows = chunk
        .steps
        .iter()
        .map(|s| {
            let mut row = [0.0; ACTION_DIM];
            for (i, v) in s.scalars().into_iter().enumerate() {
                row[cols[i]] = normalize(v, stats.min[i], stats.max[i], &mut clamped);
            }
            for kp in Keypoint::ALL {
                let r6 = rot6d_encode(&s.poses[kp.index()].rotation.to_matrix());
                let c = rotation_col(kp);
                row[c..c + 6].copy_from_slice(&r6.0);
            }
            row
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} action scalars clamped into the normalization range");
    }
    ActionChunk {
        rows,
        normalized: true,
        step_period: step_period_of(chunk),
        clamped,
    }
}

fn step_period_of(chunk: &RelativeChunk) -> f64 {
    chunk.steps.first().map(|s| s.offset).unwrap_or(0.0)
}

/// Normalized rows back to relative poses; each Rot6D block is re-orthonormalized.
pub fn decode(chunk: &ActionChunk, stats: &NormalizationStats) -> Result<RelativeChunk> {
    if !chunk.normalized {
        return Err(Error::InvalidConfig("action chunk is not normalized".into()));
    }
    let cols = scalar_dim_columns();
    let steps = chunk
        .rows
        .iter()
        .enumerate()
        .map(|(step, row)| {
            let mut scalars = [0.0; SCALAR_DIMS];
            for i in 0..SCALAR_DIMS {
                scalars[i] = denormalize(row[cols[i]], stats.min[i], stats.max[i]);
            }
            let mut poses = [Pose::identity(); 5];
            for kp in Keypoint::ALL {
                let c = rotation_col(kp);
                let mut r6 = [0.0; 6];
                r6.copy_from_slice(&row[c..c + 6]);
                let m = rot6d_decode(&Rot6D(r6)).map_err(|_| Error::DegenerateActionRotation {
                    keypoint: kp.name(),
                    step,
                })?;
                let k = kp.index();
                poses[k] = Pose::new(
                    Vector3::new(scalars[3 * k], scalars[3 * k + 1], scalars[3 * k + 2]),
                    Quat::from_matrix(&m),
                );
            }
            Ok(RelativeStep {
                offset: (step + 1) as f64 * chunk.step_period,
                poses,
                gripper: [scalars[15], scalars[16]],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RelativeChunk { steps })
}
