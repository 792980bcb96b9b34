//! Spatial keypoint retargeting: vertical pelvis-to-foot scaling followed by
//! whole-body damped-least-squares IK over the five keypoint tasks.
//!
//! Decision variables are the floating root (a world-frame twist: translation
//! increment plus rotation vector applied on the left) and every movable
//! joint. Joint limits are enforced by projection after each step.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_codec::KeypointFrame;
use crate::error::{Error, Result};
use crate::geometry::{skew, Pose, Quat};
use crate::kinematics::{forward_kinematics, keypoint_jacobian_from_fk, FkResult, Keypoint, KinematicModel};

const MAX_BACKTRACKS: usize = 5;
const STALL_WINDOW: usize = 6;
const STALL_RATIO: f64 = 0.5;
const STALL_FLOOR: f64 = 1e-4;
const RESEED_POSITION: f64 = 1e-4;
const RESEED_ORIENTATION: f64 = 1e-3;

/// Root position, root orientation (wxyz) and joint positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotMotionFrame {
    pub root_position: Vector3<f64>,
    pub root_orientation: Quat,
    pub joints: Vec<f64>,
}

impl RobotMotionFrame {
    pub fn new(root: Pose, joints: Vec<f64>) -> Self {
        RobotMotionFrame {
            root_position: root.translation,
            root_orientation: root.rotation,
            joints,
        }
    }

    /// Standing frame at the model's default root height with all joints zero.
    pub fn standing(model: &KinematicModel) -> Self {
        RobotMotionFrame::new(
            Pose::from_translation(Vector3::new(0.0, 0.0, model.default_root_height())),
            vec![0.0; model.dof()],
        )
    }

    pub fn root_pose(&self) -> Pose {
        Pose::new(self.root_position, self.root_orientation)
    }

    pub fn width(&self) -> usize {
        7 + self.joints.len()
    }

    /// Flat `[px, py, pz, qw, qx, qy, qz, q_0 .. q_dof]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        v.extend_from_slice(self.root_position.as_slice());
        v.extend_from_slice(&self.root_orientation.to_array());
        v.extend_from_slice(&self.joints);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 7 {
            return Err(Error::DimensionMismatch {
                expected: 7,
                actual: v.len(),
            });
        }
        Ok(RobotMotionFrame {
            root_position: Vector3::new(v[0], v[1], v[2]),
            root_orientation: Quat::from_array([v[3], v[4], v[5], v[6]]),
            joints: v[7..].to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskWeight {
    pub position_weight: f64,
    pub orientation_weight: f64,
}

impl Default for TaskWeight {
    fn default() -> Self {
        TaskWeight {
            position_weight: 1.0,
            orientation_weight: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskWeights {
    pub pelvis: TaskWeight,
    pub left_tcp: TaskWeight,
    pub right_tcp: TaskWeight,
    pub left_foot: TaskWeight,
    pub right_foot: TaskWeight,
}

impl TaskWeights {
    pub fn get(&self, kp: Keypoint) -> TaskWeight {
        match kp {
            Keypoint::Pelvis => self.pelvis,
            Keypoint::LeftTcp => self.left_tcp,
            Keypoint::RightTcp => self.right_tcp,
            Keypoint::LeftFoot => self.left_foot,
            Keypoint::RightFoot => self.right_foot,
        }
    }

    pub fn get_mut(&mut self, kp: Keypoint) -> &mut TaskWeight {
        match kp {
            Keypoint::Pelvis => &mut self.pelvis,
            Keypoint::LeftTcp => &mut self.left_tcp,
            Keypoint::RightTcp => &mut self.right_tcp,
            Keypoint::LeftFoot => &mut self.left_foot,
            Keypoint::RightFoot => &mut self.right_foot,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkParams {
    pub max_iterations: usize,
    /// Levenberg damping added to the normal equations.
    pub damping: f64,
    /// Stop when the accepted step norm falls below this.
    pub step_tolerance: f64,
    /// Converged when the weighted residual norm falls below this.
    pub residual_tolerance: f64,
    pub max_step_norm: f64,
    /// Extra seeds tried when the warm start does not converge. All attempts
    /// share the `max_iterations` budget.
    pub restarts: usize,
    pub restart_seed: u64,
}

impl Default for IkParams {
    fn default() -> Self {
        IkParams {
            max_iterations: 200,
            damping: 1e-4,
            step_tolerance: 1e-12,
            residual_tolerance: 1e-8,
            max_step_norm: 2.0,
            restarts: 40,
            restart_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkrConfig {
    /// Robot / demonstrator vertical ratio applied to pelvis-to-foot heights.
    pub height_scale: f64,
    pub task_weights: TaskWeights,
    pub ik: IkParams,
}

impl Default for SkrConfig {
    fn default() -> Self {
        SkrConfig {
            height_scale: 1.0,
            task_weights: TaskWeights::default(),
            ik: IkParams::default(),
        }
    }
}

impl SkrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.height_scale > 0.0 && self.height_scale.is_finite()) {
            return bad("height_scale must be positive");
        }
        let mut any_positive = false;
        for kp in Keypoint::ALL {
            let w = self.task_weights.get(kp);
            if !(w.position_weight >= 0.0 && w.orientation_weight >= 0.0) {
                return bad("task weights must be non-negative");
            }
            any_positive |= w.position_weight > 0.0 || w.orientation_weight > 0.0;
        }
        if !any_positive {
            return bad("at least one task weight must be positive");
        }
        if !(self.ik.damping > 0.0) {
            return bad("ik.damping must be positive");
        }
        if !(self.ik.max_step_norm > 0.0) {
            return bad("ik.max_step_norm must be positive");
        }
        Ok(())
    }
}

/// Robot default root height over the demonstrator's standing pelvis height.
pub fn height_scale_from_calibration(robot_root_height: f64, demo_pelvis_height: f64) -> Result<f64> {
    if !(robot_root_height > 0.0 && demo_pelvis_height > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "calibration heights must be positive (robot {robot_root_height}, demo {demo_pelvis_height})"
        )));
    }
    Ok(robot_root_height / demo_pelvis_height)
}

/// Scales only the vertical pelvis-to-foot distance of both feet.
pub fn scale_keypoints(kf: &KeypointFrame, height_scale: f64) -> KeypointFrame {
    let mut out = kf.clone();
    let pelvis_z = kf.pose(Keypoint::Pelvis).translation.z;
    for foot in [Keypoint::LeftFoot, Keypoint::RightFoot] {
        let z = kf.pose(foot).translation.z;
        out.pose_mut(foot).translation.z = pelvis_z + height_scale * (z - pelvis_z);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IkReport {
    /// Accepted steps summed over all attempts.
    pub iterations: usize,
    /// Seeds tried, including the warm start.
    pub attempts: usize,
    /// Per-keypoint position error (m), keypoint order.
    pub position_error: [f64; 5],
    /// Per-keypoint orientation error (rad), keypoint order.
    pub orientation_error: [f64; 5],
    /// Weighted residual norm at exit.
    pub residual: f64,
    pub converged: bool,
    /// Weighted residual norm before the first and after every accepted step.
    #[serde(skip)]
    pub residual_history: Vec<f64>,
}

impl IkReport {
    pub fn max_position_error(&self) -> f64 {
        self.position_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_orientation_error(&self) -> f64 {
        self.orientation_error.iter().copied().fold(0.0, f64::max)
    }
}

struct Evaluation {
    fk: FkResult,
    residual: DVector<f64>,
    cost: f64,
}

fn evaluate(
    model: &KinematicModel,
    targets: &KeypointFrame,
    root: &Pose,
    q: &[f64],
    sqrt_w: &[f64; 30],
) -> Result<Evaluation> {
    let fk = forward_kinematics(model, q, root)?;
    let mut residual = DVector::zeros(30);
    for kp in Keypoint::ALL {
        let cur = fk.keypoint(kp);
        let tgt = targets.pose(kp);
        let ep = tgt.translation - cur.translation;
        let eo = tgt.rotation.mul(&cur.rotation.inverse()).scaled_axis();
        let r = kp.index() * 6;
        residual.fixed_rows_mut::<3>(r).copy_from(&ep);
        residual.fixed_rows_mut::<3>(r + 3).copy_from(&eo);
    }
    let mut cost = 0.0;
    for i in 0..30 {
        let v = residual[i] * sqrt_w[i];
        cost += v * v;
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("IK residual"));
    }
    Ok(Evaluation { fk, residual, cost })
}

fn report_errors(eval: &Evaluation) -> ([f64; 5], [f64; 5]) {
    let mut pos = [0.0; 5];
    let mut ori = [0.0; 5];
    for k in 0..5 {
        pos[k] = eval.residual.fixed_rows::<3>(6 * k).norm();
        ori[k] = eval.residual.fixed_rows::<3>(6 * k + 3).norm();
    }
    (pos, ori)
}

fn check_targets(targets: &KeypointFrame) -> Result<()> {
    if targets.poses.iter().all(|p| p.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("keypoint targets"))
    }
}

/// Solves whole-body IK for one frame of keypoint targets.
///
/// Targets are used as given; apply [`scale_keypoints`] first when retargeting
/// human demonstrations. Non-convergence is reported, not returned as an error.
pub fn retarget(
    model: &KinematicModel,
    targets: &KeypointFrame,
    seed: &RobotMotionFrame,
    cfg: &SkrConfig,
) -> Result<(RobotMotionFrame, IkReport)> {
    cfg.validate()?;
    check_targets(targets)?;
    if seed.joints.len() != model.dof() {
        return Err(Error::DimensionMismatch {
            expected: model.dof(),
            actual: seed.joints.len(),
        });
    }
    let mut sqrt_w = [0.0; 30];
    for kp in Keypoint::ALL {
        let w = cfg.task_weights.get(kp);
        let r = kp.index() * 6;
        sqrt_w[r..r + 3].fill(w.position_weight.sqrt());
        sqrt_w[r + 3..r + 6].fill(w.orientation_weight.sqrt());
    }

    let mut root = seed.root_pose();
    root.rotation = Quat::try_new(root.rotation.w, root.rotation.x, root.rotation.y, root.rotation.z)?;
    let mut q = seed.joints.clone();
    model.clamp_to_limits(&mut q);

    let budget = cfg.ik.max_iterations;
    let mut best = descend(
        model,
        targets,
        root,
        q,
        &sqrt_w,
        &cfg.ik,
        budget,
        cfg.ik.restarts > 0,
        false,
    )?;
    let mut used = best.iterations;
    let mut attempts = 1;

    // deterministic multi-start: fresh joint seeds, root placed under the pelvis target
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ik.restart_seed);
    let pelvis = model.keypoint_binding(Keypoint::Pelvis);
    let pin_root = pelvis.link == model.root_link();
    let restart_root = if pin_root {
        targets.pose(Keypoint::Pelvis).compose(&pelvis.offset.inverse())
    } else {
        root
    };
    while !best.converged && attempts <= cfg.ik.restarts && used < budget {
        // keep limbs that already reach their targets; re-seed the chains of the rest
        let (pos_err, ori_err) = report_errors(&best.eval);
        let mut q = best.q.clone();
        let limits = model.limits();
        for kp in Keypoint::ALL {
            let k = kp.index();
            if pos_err[k] > RESEED_POSITION || ori_err[k] > RESEED_ORIENTATION {
                for d in model.path_dofs(model.keypoint_binding(kp).link) {
                    let (lo, hi) = limits[d];
                    q[d] = rng.random_range(lo..=hi);
                }
            }
        }
        let last = attempts == cfg.ik.restarts;
        let attempt = descend(
            model,
            targets,
            restart_root,
            q,
            &sqrt_w,
            &cfg.ik,
            budget - used,
            !last,
            pin_root,
        )?;
        used += attempt.iterations;
        attempts += 1;
        if attempt.converged || attempt.eval.cost < best.eval.cost {
            best = attempt;
        }
    }

    let (position_error, orientation_error) = report_errors(&best.eval);
    let report = IkReport {
        iterations: used,
        attempts,
        position_error,
        orientation_error,
        residual: best.eval.cost.sqrt(),
        converged: best.converged,
        residual_history: best.history,
    };
    Ok((RobotMotionFrame::new(best.root, best.q), report))
}

struct Attempt {
    root: Pose,
    q: Vec<f64>,
    eval: Evaluation,
    history: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Projected damped-least-squares descent from one seed. With
/// `abandon_stalls`, gives up once progress over a window becomes negligible
/// so the remaining budget can go to another seed.
#[allow(clippy::too_many_arguments)]
fn descend(
    model: &KinematicModel,
    targets: &KeypointFrame,
    mut root: Pose,
    mut q: Vec<f64>,
    sqrt_w: &[f64; 30],
    params: &IkParams,
    budget: usize,
    abandon_stalls: bool,
    pin_root: bool,
) -> Result<Attempt> {
    let n = 6 + model.dof();
    let limits = model.limits();
    let mut eval = evaluate(model, targets, &root, &q, sqrt_w)?;
    let mut history = vec![eval.cost.sqrt()];
    let mut iterations = 0;
    let mut converged = eval.cost.sqrt() <= params.residual_tolerance;

    while !converged && iterations < budget {
        // weighted Jacobian rows: sqrt(W) J
        let mut jw = DMatrix::zeros(30, n);
        let mut rw = DVector::zeros(30);
        for kp in Keypoint::ALL {
            let r = kp.index() * 6;
            let p = eval.fk.keypoint(kp).translation - root.translation;
            let mut block = DMatrix::zeros(6, n);
            block.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            block.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&p)));
            block.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
            let jq = keypoint_jacobian_from_fk(model, &eval.fk, kp);
            block.view_mut((0, 6), (6, model.dof())).copy_from(&jq);
            for i in 0..6 {
                let s = sqrt_w[r + i];
                jw.row_mut(r + i).copy_from(&(block.row(i) * s));
                rw[r + i] = eval.residual[r + i] * s;
            }
        }
        let mut locked = vec![false; model.dof()];
        let mut delta;
        // joints resting on a limit with an outward step are held for this iteration
        loop {
            let mut jl = jw.clone();
            for (d, _) in locked.iter().enumerate().filter(|(_, l)| **l) {
                jl.column_mut(6 + d).fill(0.0);
            }
            if pin_root {
                jl.columns_mut(0, 6).fill(0.0);
            }
            let mut lhs = jl.transpose() * &jl;
            for i in 0..n {
                lhs[(i, i)] += params.damping;
            }
            let rhs = jl.transpose() * &rw;
            delta = lhs
                .cholesky()
                .ok_or(Error::NonFinite("IK normal equations"))?
                .solve(&rhs);
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("IK step"));
            }
            let mut changed = false;
            for d in 0..model.dof() {
                let (lo, hi) = limits[d];
                let step = delta[6 + d];
                if !locked[d] && ((q[d] <= lo && step < 0.0) || (q[d] >= hi && step > 0.0)) {
                    locked[d] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let norm = delta.norm();
        if norm > params.max_step_norm {
            delta *= params.max_step_norm / norm;
        }

        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=MAX_BACKTRACKS {
            let step = &delta * alpha;
            let trial_root = Pose::new(
                root.translation + Vector3::new(step[0], step[1], step[2]),
                renormalize(Quat::from_scaled_axis(&Vector3::new(step[3], step[4], step[5])).mul(&root.rotation)),
            );
            let mut trial_q: Vec<f64> = q
                .iter()
                .zip(step.rows(6, model.dof()).iter())
                .map(|(a, b)| a + b)
                .collect();
            model.clamp_to_limits(&mut trial_q);
            let trial = evaluate(model, targets, &trial_root, &trial_q, sqrt_w)?;
            if trial.cost <= eval.cost {
                accepted = Some((trial_root, trial_q, trial, step.norm()));
                break;
            }
            alpha *= 0.5;
        }
        let Some((new_root, new_q, new_eval, step_norm)) = accepted else {
            break;
        };
        root = new_root;
        q = new_q;
        eval = new_eval;
        iterations += 1;
        history.push(eval.cost.sqrt());
        converged = eval.cost.sqrt() <= params.residual_tolerance;
        if step_norm < params.step_tolerance {
            break;
        }
        let h = history.len();
        if abandon_stalls
            && !converged
            && h > STALL_WINDOW
            && history[h - 1] > STALL_FLOOR
            && history[h - 1] > STALL_RATIO * history[h - 1 - STALL_WINDOW]
        {
            break;
        }
    }

    Ok(Attempt {
        root,
        q,
        eval,
        history,
        iterations,
        converged,
    })
}

/// Retargets a sequence, warm-starting each frame from the previous solution.
pub fn retarget_stream(
    model: &KinematicModel,
    target_frames: &[KeypointFrame],
    initial: &RobotMotionFrame,
    cfg: &SkrConfig,
) -> Result<(Vec<RobotMotionFrame>, Vec<IkReport>)> {
    if target_frames.is_empty() {
        return Err(Error::InvalidConfig("empty target sequence".into()));
    }
    let mut frames = Vec::with_capacity(target_frames.len());
    let mut reports = Vec::with_capacity(target_frames.len());
    let mut seed = initial.clone();
    for (i, t) in target_frames.iter().enumerate() {
        let (frame, report) = retarget(model, t, &seed, cfg).map_err(|e| e.at_frame(i))?;
        seed = frame.clone();
        frames.push(frame);
        reports.push(report);
    }
    Ok((frames, reports))
}

/// Keypoint poses of a robot frame, as IK targets.
pub fn keypoints_of(model: &KinematicModel, frame: &RobotMotionFrame, timestamp: f64) -> Result<KeypointFrame> {
    let fk = forward_kinematics(model, &frame.joints, &frame.root_pose())?;
    Ok(KeypointFrame {
        timestamp,
        poses: fk.keypoints,
        gripper: [0.0, 0.0],
    })
}

fn renormalize(q: Quat) -> Quat {
    Quat::new_normalize(q.w, q.x, q.y, q.z)
}
