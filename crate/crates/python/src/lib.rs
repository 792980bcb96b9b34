use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use kpwbc::action_codec::{self as codec, ActionChunk, ACTION_DIM};
use kpwbc::controller::{self, initial_frame, EpisodeConfig, PlantState, ReplaySource, SOURCE_HORIZON};
use kpwbc::formats::{self, DemoRecord, RunConfig};
use kpwbc::geometry::{self, Pose, Quat, Rot6D};
use kpwbc::kinematics::{self, Keypoint, KinematicModel};
use kpwbc::motion_ref::{self, MotionChunk};
use kpwbc::skr::{self, IkReport, RobotMotionFrame};

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for kpwbc::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

fn keypoint(name: &str) -> PyResult<Keypoint> {
    name.parse()
        .map_err(|e: kpwbc::Error| PyValueError::new_err(e.to_string()))
}

fn pose7(p: &Pose) -> [f64; 7] {
    let t = p.translation;
    let q = p.rotation;
    [t.x, t.y, t.z, q.w, q.x, q.y, q.z]
}

fn pose_from7(v: &[f64]) -> PyResult<Pose> {
    if v.len() != 7 {
        return Err(PyValueError::new_err(format!("pose needs 7 values, got {}", v.len())));
    }
    let q = Quat::try_new(v[3], v[4], v[5], v[6]).py()?;
    Ok(Pose::new(nalgebra::Vector3::new(v[0], v[1], v[2]), q))
}

fn config(json: Option<&str>) -> PyResult<RunConfig> {
    match json {
        Some(text) => RunConfig::from_json(text).py(),
        None => Ok(RunConfig::default()),
    }
}

/// Kinematic tree with the five keypoint bindings.
#[pyclass(name = "Model", frozen)]
struct PyModel(KinematicModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        Ok(PyModel(kinematics::bundled_model(name).py()?))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel(kinematics::load_model_json(text).py()?))
    }

    #[getter]
    fn name(&self) -> &str {
        self.0.name()
    }

    #[getter]
    fn dof(&self) -> usize {
        self.0.dof()
    }

    #[getter]
    fn joint_names(&self) -> Vec<String> {
        self.0.joint_names().into_iter().map(str::to_owned).collect()
    }

    #[getter]
    fn limits(&self) -> Vec<(f64, f64)> {
        self.0.limits()
    }

    #[getter]
    fn default_root_height(&self) -> f64 {
        self.0.default_root_height()
    }

    /// Keypoint poses `[tx, ty, tz, qw, qx, qy, qz]` by name. The root
    /// defaults to the standing pose.
    #[pyo3(signature = (joints, root=None))]
    fn fk(&self, joints: Vec<f64>, root: Option<Vec<f64>>) -> PyResult<HashMap<String, [f64; 7]>> {
        let root = match root {
            Some(r) => pose_from7(&r)?,
            None => RobotMotionFrame::standing(&self.0).root_pose(),
        };
        let fk = kinematics::forward_kinematics(&self.0, &joints, &root).py()?;
        Ok(Keypoint::ALL
            .iter()
            .map(|&k| (k.name().to_owned(), pose7(fk.keypoint(k))))
            .collect())
    }

    /// 6 x dof Jacobian of one keypoint, rows [linear; angular].
    #[pyo3(signature = (joints, keypoint, root=None))]
    fn jacobian(&self, joints: Vec<f64>, keypoint: &str, root: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let root = match root {
            Some(r) => pose_from7(&r)?,
            None => RobotMotionFrame::standing(&self.0).root_pose(),
        };
        let j = kinematics::keypoint_jacobian(&self.0, &joints, &root, self::keypoint(keypoint)?).py()?;
        Ok((0..j.nrows()).map(|r| j.row(r).iter().copied().collect()).collect())
    }

    /// Bent-knee standing posture as `(root7, joints)`.
    #[pyo3(signature = (bent=true))]
    fn initial_frame(&self, bent: bool) -> ([f64; 7], Vec<f64>) {
        let f = initial_frame(&self.0, bent);
        (pose7(&f.root_pose()), f.joints)
    }

    fn __repr__(&self) -> String {
        format!("Model(name={:?}, dof={})", self.0.name(), self.0.dof())
    }
}

/// Five keypoint poses plus two gripper widths at one instant.
#[pyclass(name = "KeypointFrame")]
#[derive(Clone)]
struct PyKeypointFrame(codec::KeypointFrame);

#[pymethods]
impl PyKeypointFrame {
    #[new]
    #[pyo3(signature = (t, pelvis, left_tcp, right_tcp, left_foot, right_foot, gripper=(0.0, 0.0)))]
    fn new(
        t: f64,
        pelvis: Vec<f64>,
        left_tcp: Vec<f64>,
        right_tcp: Vec<f64>,
        left_foot: Vec<f64>,
        right_foot: Vec<f64>,
        gripper: (f64, f64),
    ) -> PyResult<Self> {
        Ok(PyKeypointFrame(codec::KeypointFrame {
            timestamp: t,
            poses: [
                pose_from7(&pelvis)?,
                pose_from7(&left_tcp)?,
                pose_from7(&right_tcp)?,
                pose_from7(&left_foot)?,
                pose_from7(&right_foot)?,
            ],
            gripper: [gripper.0, gripper.1],
        }))
    }

    #[getter]
    fn t(&self) -> f64 {
        self.0.timestamp
    }

    #[getter]
    fn gripper(&self) -> (f64, f64) {
        (self.0.gripper[0], self.0.gripper[1])
    }

    fn pose(&self, keypoint: &str) -> PyResult<[f64; 7]> {
        Ok(pose7(self.0.pose(self::keypoint(keypoint)?)))
    }

    /// Same keys as one line of a demonstration file.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        let r = DemoRecord::from_frame(&self.0);
        d.set_item("t", r.t)?;
        for (k, v) in [
            ("pelvis", r.pelvis),
            ("left_tcp", r.left_tcp),
            ("right_tcp", r.right_tcp),
            ("left_foot", r.left_foot),
            ("right_foot", r.right_foot),
        ] {
            d.set_item(k, v.to_vec())?;
        }
        d.set_item("gripper", r.gripper.to_vec())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("KeypointFrame(t={})", self.0.timestamp)
    }
}

fn frames_of(frames: &[PyKeypointFrame]) -> Vec<codec::KeypointFrame> {
    frames.iter().map(|f| f.0.clone()).collect()
}

/// Per-dimension min/max of the 17 normalized action scalars.
#[pyclass(name = "Stats", frozen)]
struct PyStats(codec::NormalizationStats);

#[pymethods]
impl PyStats {
    #[staticmethod]
    #[pyo3(signature = (demos, horizon=codec::DEFAULT_HORIZON))]
    fn fit(demos: Vec<Vec<PyKeypointFrame>>, horizon: usize) -> PyResult<Self> {
        let data: Vec<_> = demos.iter().map(|d| frames_of(d)).collect();
        Ok(PyStats(codec::compute_stats(&data, horizon).py()?))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyStats(codec::NormalizationStats::from_json(text).py()?))
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().py()
    }

    #[getter]
    fn min(&self) -> Vec<f64> {
        self.0.min.to_vec()
    }

    #[getter]
    fn max(&self) -> Vec<f64> {
        self.0.max.to_vec()
    }

    #[staticmethod]
    fn dim_names() -> Vec<String> {
        codec::NormalizationStats::dim_names()
    }
}

/// Normalized 47-wide action rows for the chunk anchored at frame `t`.
#[pyfunction]
#[pyo3(signature = (frames, t, stats, horizon=codec::DEFAULT_HORIZON))]
fn encode_chunk(frames: Vec<PyKeypointFrame>, t: usize, stats: &PyStats, horizon: usize) -> PyResult<Vec<Vec<f64>>> {
    let rel = codec::relative_chunk(&frames_of(&frames), t, horizon).py()?;
    Ok(codec::encode(&rel, &stats.0).rows.iter().map(|r| r.to_vec()).collect())
}

/// Absolute keypoint frames from action rows and the anchor frame.
#[pyfunction]
fn decode_chunk(
    rows: Vec<Vec<f64>>,
    anchor: &PyKeypointFrame,
    stats: &PyStats,
    step_period: f64,
) -> PyResult<Vec<PyKeypointFrame>> {
    let rows = rows
        .iter()
        .map(|r| {
            <[f64; ACTION_DIM]>::try_from(r.as_slice()).map_err(|_| {
                PyValueError::new_err(format!("action rows must have {ACTION_DIM} values, got {}", r.len()))
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let chunk = ActionChunk {
        rows,
        normalized: true,
        step_period,
        clamped: 0,
    };
    let rel = codec::decode(&chunk, &stats.0).py()?;
    Ok(codec::absolute_from_chunk(&rel, &anchor.0)
        .into_iter()
        .map(PyKeypointFrame)
        .collect())
}

#[pyfunction]
fn action_column_names() -> Vec<String> {
    codec::action_column_names()
}

#[pyfunction]
fn rot6d_encode(matrix: [[f64; 3]; 3]) -> [f64; 6] {
    let m = nalgebra::Matrix3::from_fn(|r, c| matrix[r][c]);
    geometry::rot6d_encode(&m).0
}

#[pyfunction]
fn rot6d_decode(v: [f64; 6]) -> PyResult<[[f64; 3]; 3]> {
    let m = geometry::rot6d_decode(&Rot6D(v)).py()?;
    Ok([0, 1, 2].map(|r| [0, 1, 2].map(|c| m[(r, c)])))
}

#[pyfunction]
fn slerp(q0: [f64; 4], q1: [f64; 4], t: f64) -> PyResult<[f64; 4]> {
    let a = Quat::try_new(q0[0], q0[1], q0[2], q0[3]).py()?;
    let b = Quat::try_new(q1[0], q1[1], q1[2], q1[3]).py()?;
    Ok(geometry::slerp(&a, &b, t).to_array())
}

#[pyfunction]
fn height_scale_from_calibration(robot_root_height: f64, demo_pelvis_height: f64) -> PyResult<f64> {
    skr::height_scale_from_calibration(robot_root_height, demo_pelvis_height).py()
}

#[pyfunction]
fn scale_keypoints(frame: &PyKeypointFrame, height_scale: f64) -> PyKeypointFrame {
    PyKeypointFrame(skr::scale_keypoints(&frame.0, height_scale))
}

fn report_dict<'py>(py: Python<'py>, r: &IkReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("converged", r.converged)?;
    d.set_item("iterations", r.iterations)?;
    d.set_item("attempts", r.attempts)?;
    d.set_item("residual", r.residual)?;
    d.set_item("position_error", r.position_error.to_vec())?;
    d.set_item("orientation_error", r.orientation_error.to_vec())?;
    Ok(d)
}

fn seed_frame(model: &KinematicModel, seed: Option<(Vec<f64>, Vec<f64>)>) -> PyResult<RobotMotionFrame> {
    match seed {
        Some((root, joints)) => Ok(RobotMotionFrame::new(pose_from7(&root)?, joints)),
        None => Ok(initial_frame(model, true)),
    }
}

/// Whole-body IK for one keypoint frame. Returns `(root7, joints, report)`.
#[pyfunction]
#[pyo3(signature = (model, target, seed=None, config_json=None))]
fn retarget<'py>(
    py: Python<'py>,
    model: &PyModel,
    target: &PyKeypointFrame,
    seed: Option<(Vec<f64>, Vec<f64>)>,
    config_json: Option<&str>,
) -> PyResult<([f64; 7], Vec<f64>, Bound<'py, PyDict>)> {
    let cfg = config(config_json)?.skr;
    let seed = seed_frame(&model.0, seed)?;
    let (f, rep) = skr::retarget(&model.0, &target.0, &seed, &cfg).py()?;
    Ok((pose7(&f.root_pose()), f.joints, report_dict(py, &rep)?))
}

type Reports<'py> = Vec<Bound<'py, PyDict>>;

/// Warm-started IK over a keypoint trajectory. Targets are used as given;
/// call `scale_keypoints` first to bridge a height gap.
#[pyfunction]
#[pyo3(signature = (model, targets, seed=None, config_json=None))]
fn retarget_stream<'py>(
    py: Python<'py>,
    model: &PyModel,
    targets: Vec<PyKeypointFrame>,
    seed: Option<(Vec<f64>, Vec<f64>)>,
    config_json: Option<&str>,
) -> PyResult<(Vec<Vec<f64>>, Reports<'py>)> {
    let cfg = config(config_json)?.skr;
    let seed = seed_frame(&model.0, seed)?;
    let (frames, reports) = skr::retarget_stream(&model.0, &frames_of(&targets), &seed, &cfg).py()?;
    let reports = reports.iter().map(|r| report_dict(py, r)).collect::<PyResult<_>>()?;
    Ok((frames.iter().map(RobotMotionFrame::to_vec).collect(), reports))
}

/// Resamples rows of `[root7, joints...]` from `rate` to `target_rate`.
#[pyfunction]
fn resample(frames: Vec<Vec<f64>>, rate: f64, target_rate: f64) -> PyResult<Vec<Vec<f64>>> {
    let frames = frames
        .iter()
        .map(|f| RobotMotionFrame::from_slice(f))
        .collect::<kpwbc::Result<Vec<_>>>()
        .py()?;
    let chunk = MotionChunk::new(frames, rate).py()?;
    Ok(motion_ref::resample(&chunk, target_rate)
        .py()?
        .iter()
        .map(RobotMotionFrame::to_vec)
        .collect())
}

/// `(command, proprio, high_level_proprio)` observation widths.
#[pyfunction]
#[pyo3(signature = (dof, history=motion_ref::DEFAULT_HISTORY))]
fn observation_widths(dof: usize, history: usize) -> (usize, usize, usize) {
    let offsets = motion_ref::OffsetSet::default();
    (
        (motion_ref::COMMAND_ROOT_WIDTH + dof) * offsets.len(),
        motion_ref::proprio_width(dof, history),
        motion_ref::LOWER_BODY_JOINTS.len() * motion_ref::HIGH_LEVEL_HISTORY,
    )
}

/// Reads a demonstration file; returns `(header, frames)`.
#[pyfunction]
fn read_demo<'py>(py: Python<'py>, path: &str) -> PyResult<(Bound<'py, PyDict>, Vec<PyKeypointFrame>)> {
    let text = std::fs::read_to_string(path)?;
    let demo = formats::read_demo(&text).py()?;
    let h = PyDict::new(py);
    h.set_item("format_version", &demo.header.format_version)?;
    h.set_item("rate", demo.header.rate)?;
    h.set_item("calibration_height", demo.header.calibration_height)?;
    h.set_item("gripper_range", demo.header.gripper_range.to_vec())?;
    Ok((h, demo.frames.into_iter().map(PyKeypointFrame).collect()))
}

/// Validation findings as `(line, severity, message)`.
#[pyfunction]
fn validate_demo(path: &str) -> PyResult<Vec<(usize, String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let (_, findings) = formats::validate_demo(&text);
    Ok(findings
        .into_iter()
        .map(|f| (f.line, format!("{:?}", f.severity).to_lowercase(), f.message))
        .collect())
}

/// Closed-loop episode on a synthetic keypoint source ("static" or "sine").
/// Returns the episode summary as a dict.
#[pyfunction]
#[pyo3(signature = (model, source="static", duration=10.0, seed=0, hl_rate=10.0, kp=None, sine_joint=None, config_json=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    model: &PyModel,
    source: &str,
    duration: f64,
    seed: u64,
    hl_rate: f64,
    kp: Option<f64>,
    sine_joint: Option<&str>,
    config_json: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = &model.0;
    let cfg = config(config_json)?;
    let mut ctrl = cfg.controller.resolve(m.dof()).py()?;
    if let Some(kp) = kp {
        ctrl = ctrl.with_kp(kp);
    }
    let initial = initial_frame(m, true);
    let frames = match source {
        "static" => controller::static_demo(m, &initial, hl_rate, duration + 1.0).py()?,
        "sine" => {
            let name = sine_joint.unwrap_or("left_elbow_joint");
            let j = m
                .joint_names()
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| PyValueError::new_err(format!("model has no joint `{name}`")))?;
            controller::sine_demo(m, &initial, j, 0.2, 0.5, hl_rate, duration + 1.0).py()?
        }
        other => return Err(PyValueError::new_err(format!("unknown source `{other}`"))),
    };
    let episode = EpisodeConfig {
        duration,
        hl_rate,
        seed,
        ..cfg.episode
    };
    let mut src = ReplaySource::new(frames, SOURCE_HORIZON, None).py()?;
    let plant = PlantState::at_rest(initial.joints.clone(), &cfg.plant).py()?;
    let log = py
        .allow_threads(|| controller::run_episode(&mut src, m, &cfg.skr, &ctrl, plant, &initial, &episode))
        .py()?;
    let s = log.summary();
    let d = PyDict::new(py);
    d.set_item("ticks", s.ticks)?;
    d.set_item("duration", s.duration)?;
    d.set_item("max_tracking_error", s.max_tracking_error)?;
    d.set_item("mean_tracking_error", s.mean_tracking_error)?;
    d.set_item("steady_state_error", s.steady_state_error)?;
    d.set_item("seams", s.seams)?;
    d.set_item("max_seam_jump", s.max_seam_jump)?;
    d.set_item("max_intra_chunk_jump", s.max_intra_chunk_jump)?;
    d.set_item("ik_convergence_rate", s.ik_convergence_rate)?;
    Ok(d)
}

#[pymodule(name = "kpwbc")]
pub fn kpwbc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ACTION_DIM", ACTION_DIM)?;
    m.add("LAYOUT_VERSION", codec::LAYOUT_VERSION)?;
    m.add("KEYPOINTS", Keypoint::ALL.map(|k| k.name()).to_vec())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyKeypointFrame>()?;
    m.add_class::<PyStats>()?;
    m.add_function(wrap_pyfunction!(encode_chunk, m)?)?;
    m.add_function(wrap_pyfunction!(decode_chunk, m)?)?;
    m.add_function(wrap_pyfunction!(action_column_names, m)?)?;
    m.add_function(wrap_pyfunction!(rot6d_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rot6d_decode, m)?)?;
    m.add_function(wrap_pyfunction!(slerp, m)?)?;
    m.add_function(wrap_pyfunction!(height_scale_from_calibration, m)?)?;
    m.add_function(wrap_pyfunction!(scale_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(retarget, m)?)?;
    m.add_function(wrap_pyfunction!(retarget_stream, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(observation_widths, m)?)?;
    m.add_function(wrap_pyfunction!(read_demo, m)?)?;
    m.add_function(wrap_pyfunction!(validate_demo, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
