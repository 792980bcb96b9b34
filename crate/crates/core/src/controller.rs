//! Residual action decoding, joint PD and a per-joint second-order plant, plus
//! the receding-horizon loop that feeds them from keypoint chunks.

use std::io::Write;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::action_codec::{
    absolute_from_chunk, compute_stats, decode, encode, relative_chunk, ActionChunk, KeypointFrame, NormalizationStats,
    DEFAULT_HORIZON,
};
use crate::error::{Error, Result};
use crate::geometry::{slerp, Pose};
use crate::kinematics::{forward_kinematics, Keypoint, KinematicModel};
use crate::motion_ref::{resample, MotionChunk, ReferenceBuffer, CONTROL_RATE};
use crate::skr::{keypoints_of, retarget_stream, scale_keypoints, RobotMotionFrame, SkrConfig};

/// Minimum integration rate of [`plant_step`].
pub const PLANT_RATE: f64 = 500.0;

fn check_len(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub q0: Vec<f64>,
    /// Per-joint action scale.
    pub s: Vec<f64>,
    pub a_max: f64,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    #[serde(default = "default_control_rate")]
    pub control_rate: f64,
}

fn default_control_rate() -> f64 {
    CONTROL_RATE
}

impl ControllerConfig {
    /// Desk defaults: zero posture, scale 0.25, clip 12 (so residuals span
    /// +-3 rad), Kp 100, Kd 10, 50 Hz.
    pub fn uniform(dof: usize) -> Self {
        ControllerConfig {
            q0: vec![0.0; dof],
            s: vec![0.25; dof],
            a_max: 12.0,
            kp: vec![100.0; dof],
            kd: vec![10.0; dof],
            control_rate: CONTROL_RATE,
        }
    }

    pub fn dof(&self) -> usize {
        self.q0.len()
    }

    pub fn with_kp(mut self, kp: f64) -> Self {
        self.kp.iter_mut().for_each(|k| *k = kp);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        for v in [&self.s, &self.kp, &self.kd] {
            check_len(n, v)?;
        }
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !self.s.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return bad("action scale s must be positive");
        }
        if !(self.a_max > 0.0 && self.a_max.is_finite()) {
            return bad("a_max must be positive");
        }
        if !self.kp.iter().chain(&self.kd).all(|k| *k >= 0.0 && k.is_finite()) {
            return bad("gains must be non-negative");
        }
        if !self.q0.iter().all(|q| q.is_finite()) {
            return bad("q0 must be finite");
        }
        if !(self.control_rate > 0.0 && self.control_rate.is_finite()) {
            return bad("control_rate must be positive");
        }
        Ok(())
    }
}

/// `q0 + s * clip(a, -a_max, a_max)`.
pub fn decode_action(a: &[f64], cfg: &ControllerConfig) -> Result<Vec<f64>> {
    check_len(cfg.dof(), a)?;
    Ok(a.iter()
        .enumerate()
        .map(|(j, a)| cfg.q0[j] + cfg.s[j] * a.clamp(-cfg.a_max, cfg.a_max))
        .collect())
}

/// Residual action that reproduces `q_ref` through [`decode_action`],
/// saturated at `a_max`.
pub fn action_for_reference(q_ref: &[f64], cfg: &ControllerConfig) -> Result<Vec<f64>> {
    check_len(cfg.dof(), q_ref)?;
    Ok(q_ref
        .iter()
        .enumerate()
        .map(|(j, q)| ((q - cfg.q0[j]) / cfg.s[j]).clamp(-cfg.a_max, cfg.a_max))
        .collect())
}

/// `Kp (q_des - q) - Kd qd`.
pub fn pd_torque(q_des: &[f64], q: &[f64], qd: &[f64], cfg: &ControllerConfig) -> Result<Vec<f64>> {
    let n = cfg.dof();
    check_len(n, q_des)?;
    check_len(n, q)?;
    check_len(n, qd)?;
    Ok((0..n)
        .map(|j| cfg.kp[j] * (q_des[j] - q[j]) - cfg.kd[j] * qd[j])
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    pub inertia: f64,
    pub damping: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            inertia: 1.0,
            damping: 0.5,
        }
    }
}

/// Decoupled per-joint plant `I qdd = tau - c qd`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
}

impl PlantState {
    pub fn at_rest(q: Vec<f64>, params: &PlantParams) -> Result<Self> {
        let n = q.len();
        let s = PlantState {
            q,
            qd: vec![0.0; n],
            inertia: vec![params.inertia; n],
            damping: vec![params.damping; n],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.qd.iter().zip(&self.inertia).map(|(v, m)| 0.5 * m * v * v).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        check_len(n, &self.qd)?;
        check_len(n, &self.inertia)?;
        check_len(n, &self.damping)?;
        if !self.q.iter().chain(&self.qd).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("plant state"));
        }
        if !self.inertia.iter().all(|m| *m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidConfig("plant inertia must be positive".into()));
        }
        if !self.damping.iter().all(|c| *c >= 0.0 && c.is_finite()) {
            return Err(Error::InvalidConfig("plant damping must be non-negative".into()));
        }
        Ok(())
    }
}

/// Holds `tau` over `dt`, integrating with semi-implicit Euler at no less than
/// [`PLANT_RATE`].
pub fn plant_step(state: &PlantState, tau: &[f64], dt: f64) -> Result<PlantState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    check_len(state.dof(), tau)?;
    if !tau.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFinite("torque"));
    }
    let substeps = ((dt * PLANT_RATE - 1e-9).ceil() as usize).max(1);
    let h = dt / substeps as f64;
    let mut next = state.clone();
    for _ in 0..substeps {
        for (j, t) in tau.iter().enumerate() {
            next.qd[j] += h * (t - next.damping[j] * next.qd[j]) / next.inertia[j];
            next.q[j] += h * next.qd[j];
        }
    }
    Ok(next)
}

/// One policy inference: a normalized chunk and the keypoint frame it is
/// relative to.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    pub anchor: KeypointFrame,
    pub chunk: ActionChunk,
}

/// Stand-in for the high-level policy.
pub trait PolicySource {
    fn stats(&self) -> &NormalizationStats;
    /// Called at each handover; `time` is seconds since episode start.
    fn next_chunk(&mut self, time: f64) -> Result<PolicyOutput>;
}

/// Replays a keypoint trajectory: at time `t` the anchor is the latest frame
/// at or before `t` and the chunk holds the next `horizon` frames. The last
/// frame is held to pad the tail.
#[derive(Clone, Debug)]
pub struct ReplaySource {
    frames: Vec<KeypointFrame>,
    real_len: usize,
    horizon: usize,
    stats: NormalizationStats,
}

impl ReplaySource {
    /// Uses stats computed from the (padded) trajectory itself when none are
    /// given.
    pub fn new(traj: Vec<KeypointFrame>, horizon: usize, stats: Option<NormalizationStats>) -> Result<Self> {
        if traj.len() < 2 {
            return Err(Error::InsufficientFrames {
                required: 2,
                available: traj.len(),
            });
        }
        if horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        let period = traj[1].timestamp - traj[0].timestamp;
        if !(period > 0.0) || traj.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::InvalidConfig("replay timestamps must increase".into()));
        }
        let real_len = traj.len();
        let mut frames = traj;
        let last = frames[real_len - 1].clone();
        for i in 1..=horizon {
            let mut f = last.clone();
            f.timestamp = last.timestamp + i as f64 * period;
            frames.push(f);
        }
        let stats = match stats {
            Some(s) => s,
            None => compute_stats(std::slice::from_ref(&frames), horizon)?,
        };
        Ok(ReplaySource {
            frames,
            real_len,
            horizon,
            stats,
        })
    }

    pub fn rate(&self) -> f64 {
        1.0 / (self.frames[1].timestamp - self.frames[0].timestamp)
    }
}

impl PolicySource for ReplaySource {
    fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    fn next_chunk(&mut self, time: f64) -> Result<PolicyOutput> {
        let t = self.frames[0].timestamp + time + 1e-9;
        let i = self.frames[..self.real_len]
            .partition_point(|f| f.timestamp <= t)
            .saturating_sub(1);
        let rel = relative_chunk(&self.frames, i, self.horizon)?;
        Ok(PolicyOutput {
            anchor: self.frames[i].clone(),
            chunk: encode(&rel, &self.stats),
        })
    }
}

/// Resamples keypoint frames onto a uniform `rate` grid starting at the first
/// timestamp (translations and grippers linear, rotations slerp).
pub fn retime(frames: &[KeypointFrame], rate: f64) -> Result<Vec<KeypointFrame>> {
    if frames.is_empty() || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidConfig("retime needs frames and a positive rate".into()));
    }
    let t0 = frames[0].timestamp;
    let span = frames[frames.len() - 1].timestamp - t0;
    let n = (span * rate + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    for j in 0..n {
        let t = t0 + j as f64 / rate;
        while i + 2 < frames.len() && frames[i + 1].timestamp <= t {
            i += 1;
        }
        if frames.len() == 1 {
            out.push(frames[0].clone());
            continue;
        }
        let (a, b) = (&frames[i], &frames[i + 1]);
        let u = ((t - a.timestamp) / (b.timestamp - a.timestamp)).clamp(0.0, 1.0);
        out.push(KeypointFrame {
            timestamp: t,
            poses: std::array::from_fn(|k| {
                let (pa, pb) = (&a.poses[k], &b.poses[k]);
                Pose::new(
                    pa.translation + u * (pb.translation - pa.translation),
                    slerp(&pa.rotation, &pb.rotation, u),
                )
            }),
            gripper: std::array::from_fn(|g| a.gripper[g] + u * (b.gripper[g] - a.gripper[g])),
        });
    }
    Ok(out)
}

/// Keypoint trajectory of a robot held still at `initial`.
pub fn static_demo(
    model: &KinematicModel,
    initial: &RobotMotionFrame,
    rate: f64,
    duration: f64,
) -> Result<Vec<KeypointFrame>> {
    sine_demo(model, initial, 0, 0.0, 0.0, rate, duration)
}

/// Keypoint trajectory of `initial` with one joint offset by
/// `amplitude * sin(2 pi freq t)`.
pub fn sine_demo(
    model: &KinematicModel,
    initial: &RobotMotionFrame,
    joint: usize,
    amplitude: f64,
    freq: f64,
    rate: f64,
    duration: f64,
) -> Result<Vec<KeypointFrame>> {
    if joint >= model.dof() {
        return Err(Error::InvalidConfig(format!(
            "joint {joint} out of range for dof {}",
            model.dof()
        )));
    }
    if !(rate > 0.0 && duration >= 0.0) {
        return Err(Error::InvalidConfig(
            "rate must be positive and duration non-negative".into(),
        ));
    }
    let n = (duration * rate).round() as usize + 1;
    (0..n.max(2))
        .map(|i| {
            let t = i as f64 / rate;
            let mut f = initial.clone();
            f.joints[joint] += amplitude * (std::f64::consts::TAU * freq * t).sin();
            keypoints_of(model, &f, t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub duration: f64,
    /// Chunk handover rate (Hz).
    pub hl_rate: f64,
    pub seed: u64,
    /// Std-dev of Gaussian noise on measured q (rad); 0 disables.
    pub sensor_noise: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            duration: 10.0,
            hl_rate: 10.0,
            seed: 0,
            sensor_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub time: f64,
    /// First tick that reads a frame from a newly handed-over chunk.
    pub seam: bool,
    pub q_ref: Vec<f64>,
    pub q_des: Vec<f64>,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub tau: Vec<f64>,
    /// Max-abs `q_ref - q` over joints (rad).
    pub tracking_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub joint_names: Vec<String>,
    pub control_rate: f64,
    pub records: Vec<TickRecord>,
    pub ik_solves: usize,
    pub ik_converged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub ticks: usize,
    pub duration: f64,
    pub max_tracking_error: f64,
    pub mean_tracking_error: f64,
    /// Max tracking error over the second half of the episode.
    pub steady_state_error: f64,
    pub seams: usize,
    /// Largest max-abs change of q_des between consecutive ticks at a seam.
    pub max_seam_jump: f64,
    /// Same, over all other ticks.
    pub max_intra_chunk_jump: f64,
    pub ik_solves: usize,
    pub ik_converged: usize,
    pub ik_convergence_rate: f64,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl EpisodeLog {
    pub fn summary(&self) -> EpisodeSummary {
        let n = self.records.len();
        let errs: Vec<f64> = self.records.iter().map(|r| r.tracking_error).collect();
        let half = n / 2;
        let mut seam_jump = 0.0f64;
        let mut intra_jump = 0.0f64;
        for w in self.records.windows(2) {
            let d = max_abs_diff(&w[1].q_des, &w[0].q_des);
            if w[1].seam {
                seam_jump = seam_jump.max(d);
            } else {
                intra_jump = intra_jump.max(d);
            }
        }
        EpisodeSummary {
            ticks: n,
            duration: n as f64 / self.control_rate,
            max_tracking_error: errs.iter().copied().fold(0.0, f64::max),
            mean_tracking_error: if n == 0 {
                0.0
            } else {
                errs.iter().sum::<f64>() / n as f64
            },
            steady_state_error: errs[half..].iter().copied().fold(0.0, f64::max),
            seams: self.records.iter().filter(|r| r.seam).count(),
            max_seam_jump: seam_jump,
            max_intra_chunk_jump: intra_jump,
            ik_solves: self.ik_solves,
            ik_converged: self.ik_converged,
            ik_convergence_rate: if self.ik_solves == 0 {
                1.0
            } else {
                self.ik_converged as f64 / self.ik_solves as f64
            },
        }
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["tick", "time", "seam", "tracking_error"].map(String::from).to_vec();
        for block in ["q_ref", "q_des", "q", "qd", "tau"] {
            h.extend(self.joint_names.iter().map(|j| format!("{block}.{j}")));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.csv_header())?;
        for r in &self.records {
            let mut row = vec![
                r.tick.to_string(),
                r.time.to_string(),
                (r.seam as u8).to_string(),
                r.tracking_error.to_string(),
            ];
            for block in [&r.q_ref, &r.q_des, &r.q, &r.qd, &r.tau] {
                row.extend(block.iter().map(|v| v.to_string()));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Receding-horizon episode. At every handover the source's chunk is decoded,
/// re-anchored, height-scaled and retargeted (warm-started from the reference
/// frame under the cursor); that frame is prepended, the sequence resampled to
/// the control rate and written over the buffer tail. Every control tick
/// tracks the reference under the cursor with PD on the plant.
pub fn run_episode(
    source: &mut dyn PolicySource,
    model: &KinematicModel,
    skr_cfg: &SkrConfig,
    ctrl: &ControllerConfig,
    plant: PlantState,
    initial: &RobotMotionFrame,
    episode: &EpisodeConfig,
) -> Result<EpisodeLog> {
    ctrl.validate()?;
    skr_cfg.validate()?;
    plant.validate()?;
    let dof = model.dof();
    check_len(dof, &ctrl.q0)?;
    check_len(dof, &plant.q)?;
    check_len(dof, &initial.joints)?;
    if !(episode.duration >= 0.0 && episode.hl_rate > 0.0 && episode.sensor_noise >= 0.0) {
        return Err(Error::InvalidConfig(
            "duration, hl_rate and sensor_noise must be non-negative".into(),
        ));
    }
    let ratio = ctrl.control_rate / episode.hl_rate;
    let per_handover = ratio.round() as usize;
    if per_handover == 0 || (ratio - per_handover as f64).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "control rate {} must be a whole multiple of hl rate {}",
            ctrl.control_rate, episode.hl_rate
        )));
    }
    let ticks = (episode.duration * ctrl.control_rate).round() as usize;
    let dt = 1.0 / ctrl.control_rate;
    let noise = Normal::new(0.0, episode.sensor_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode.seed);

    let mut buffer = ReferenceBuffer::new(initial.clone());
    let mut state = plant;
    let mut log = EpisodeLog {
        joint_names: model.joint_names().iter().map(|s| s.to_string()).collect(),
        control_rate: ctrl.control_rate,
        records: Vec::with_capacity(ticks),
        ik_solves: 0,
        ik_converged: 0,
    };
    let mut seam_next = false;

    for tick in 0..ticks {
        let time = tick as f64 * dt;
        let seam = seam_next;
        seam_next = false;
        if tick % per_handover == 0 {
            handover(source, model, skr_cfg, ctrl.control_rate, &mut buffer, time, &mut log)
                .map_err(|e| e.at_tick(tick))?;
            seam_next = true;
        }

        let q_ref = buffer.current().joints.clone();
        let a = action_for_reference(&q_ref, ctrl)?;
        let q_des = decode_action(&a, ctrl)?;
        let q_meas: Vec<f64> = if episode.sensor_noise > 0.0 {
            state.q.iter().map(|q| q + noise.sample(&mut rng)).collect()
        } else {
            state.q.clone()
        };
        let tau = pd_torque(&q_des, &q_meas, &state.qd, ctrl)?;
        log.records.push(TickRecord {
            tick,
            time,
            seam,
            tracking_error: max_abs_diff(&q_ref, &state.q),
            q_ref,
            q_des,
            q: state.q.clone(),
            qd: state.qd.clone(),
            tau: tau.clone(),
        });
        state = plant_step(&state, &tau, dt).map_err(|e| e.at_tick(tick))?;
        buffer.advance();
    }
    Ok(log)
}

fn handover(
    source: &mut dyn PolicySource,
    model: &KinematicModel,
    skr_cfg: &SkrConfig,
    control_rate: f64,
    buffer: &mut ReferenceBuffer,
    time: f64,
    log: &mut EpisodeLog,
) -> Result<()> {
    let out = source.next_chunk(time)?;
    if !(out.chunk.step_period > 0.0) {
        return Err(Error::InvalidConfig("policy chunk has no positive step period".into()));
    }
    let rel = decode(&out.chunk, source.stats())?;
    let targets: Vec<KeypointFrame> = absolute_from_chunk(&rel, &out.anchor)
        .iter()
        .map(|kf| scale_keypoints(kf, skr_cfg.height_scale))
        .collect();
    let seed = buffer.current().clone();
    let (frames, reports) = retarget_stream(model, &targets, &seed, skr_cfg)?;
    log.ik_solves += reports.len();
    log.ik_converged += reports.iter().filter(|r| r.converged).count();
    let mut all = Vec::with_capacity(frames.len() + 1);
    all.push(seed);
    all.extend(frames);
    let dense = resample(&MotionChunk::new(all, 1.0 / out.chunk.step_period)?, control_rate)?;
    buffer.replace_after(buffer.cursor(), dense.into_iter().skip(1))
}

/// Horizon used by the bundled sources.
pub const SOURCE_HORIZON: usize = DEFAULT_HORIZON;

/// Initial frame standing at the model's default root height, nudged to a
/// slightly bent posture when `bent` is set (keeps the biped knees off the
/// straight-leg singularity).
pub fn initial_frame(model: &KinematicModel, bent: bool) -> RobotMotionFrame {
    let mut f = RobotMotionFrame::standing(model);
    if bent {
        for (j, name) in model.joint_names().iter().enumerate() {
            let v = if name.contains("knee") {
                0.3
            } else if name.contains("hip_pitch") || name.contains("ankle_pitch") {
                -0.15
            } else if name.contains("elbow") {
                0.5
            } else {
                0.0
            };
            f.joints[j] = v;
        }
        if let Ok(fk) = forward_kinematics(model, &f.joints, &f.root_pose()) {
            // drop the root so the lowest foot rests on z = 0
            let lowest = fk
                .keypoints
                .iter()
                .enumerate()
                .filter(|(k, _)| Keypoint::ALL[*k].is_foot())
                .map(|(_, p)| p.translation.z)
                .fold(f64::INFINITY, f64::min);
            if lowest.is_finite() {
                f.root_position -= Vector3::new(0.0, 0.0, lowest);
            }
        }
    }
    f
}
