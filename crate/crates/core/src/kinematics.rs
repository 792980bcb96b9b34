//! Kinematic trees loaded from JSON, forward kinematics and geometric
//! keypoint Jacobians.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat};

pub const MODEL_FORMAT_VERSION: &str = "kpwbc-model/1";

const AXIS_TOLERANCE: f64 = 1e-6;

/// The five task-space frames, in action-layout order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keypoint {
    Pelvis,
    LeftTcp,
    RightTcp,
    LeftFoot,
    RightFoot,
}

impl Keypoint {
    pub const ALL: [Keypoint; 5] = [
        Keypoint::Pelvis,
        Keypoint::LeftTcp,
        Keypoint::RightTcp,
        Keypoint::LeftFoot,
        Keypoint::RightFoot,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::Pelvis => "pelvis",
            Keypoint::LeftTcp => "left_tcp",
            Keypoint::RightTcp => "right_tcp",
            Keypoint::LeftFoot => "left_foot",
            Keypoint::RightFoot => "right_foot",
        }
    }

    pub fn is_foot(self) -> bool {
        matches!(self, Keypoint::LeftFoot | Keypoint::RightFoot)
    }
}

impl fmt::Display for Keypoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Keypoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Keypoint::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKeypoint(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

// --- on-disk document -------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseDoc {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "identity_wxyz")]
    pub rotation: [f64; 4],
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Default for PoseDoc {
    fn default() -> Self {
        PoseDoc {
            translation: [0.0; 3],
            rotation: identity_wxyz(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkDoc {
    pub name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointDoc {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    #[serde(default)]
    pub axis: Option<[f64; 3]>,
    #[serde(default)]
    pub origin: PoseDoc,
    #[serde(default)]
    pub limits: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeypointDoc {
    pub link: String,
    #[serde(default)]
    pub offset: PoseDoc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDoc {
    #[serde(default)]
    pub format_version: Option<String>,
    pub name: String,
    /// Root height of the default standing posture, used for height calibration.
    #[serde(default)]
    pub default_root_height: Option<f64>,
    pub links: Vec<LinkDoc>,
    pub joints: Vec<JointDoc>,
    pub keypoints: HashMap<String, KeypointDoc>,
}

// --- validated model --------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent: usize,
    pub child: usize,
    pub origin: Pose,
    /// Unit axis in the joint frame (after `origin`). Zero for fixed joints.
    pub axis: Vector3<f64>,
    pub limits: (f64, f64),
    /// Position in the joint vector, `None` for fixed joints.
    pub dof_index: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct KeypointBinding {
    pub link: usize,
    pub offset: Pose,
}

/// Validated, immutable kinematic tree.
#[derive(Clone, Debug)]
pub struct KinematicModel {
    name: String,
    links: Vec<String>,
    /// Topologically ordered: a joint's parent link is always placed before it.
    joints: Vec<Joint>,
    root: usize,
    parent_joint: Vec<Option<usize>>,
    keypoints: [KeypointBinding; 5],
    dof_joints: Vec<usize>,
    default_root_height: f64,
}

fn pose_from_doc(doc: &PoseDoc, what: &str) -> Result<Pose> {
    let r = doc.rotation;
    let q = Quat::try_new(r[0], r[1], r[2], r[3])
        .map_err(|_| Error::InvalidModel(format!("{what}: zero rotation quaternion")))?;
    let n = (r.iter().map(|v| v * v).sum::<f64>()).sqrt();
    if (n - 1.0).abs() > AXIS_TOLERANCE {
        return Err(Error::InvalidModel(format!(
            "{what}: rotation quaternion is not unit-norm (|q| = {n})"
        )));
    }
    Ok(Pose::new(Vector3::from(doc.translation), q))
}

/// Validates a model document.
pub fn load_model(doc: &ModelDoc) -> Result<KinematicModel> {
    let invalid = |m: String| Error::InvalidModel(m);

    let mut link_index = HashMap::new();
    for (i, l) in doc.links.iter().enumerate() {
        if link_index.insert(l.name.as_str(), i).is_some() {
            return Err(invalid(format!("duplicate link `{}`", l.name)));
        }
    }
    if doc.links.is_empty() {
        return Err(invalid("model has no links".into()));
    }

    let mut seen_joint = HashMap::new();
    let mut parent_joint: Vec<Option<usize>> = vec![None; doc.links.len()];
    let mut raw = Vec::with_capacity(doc.joints.len());
    for (ji, j) in doc.joints.iter().enumerate() {
        if seen_joint.insert(j.name.as_str(), ji).is_some() {
            return Err(invalid(format!("duplicate joint `{}`", j.name)));
        }
        let parent = *link_index
            .get(j.parent.as_str())
            .ok_or_else(|| invalid(format!("joint `{}`: unknown parent link `{}`", j.name, j.parent)))?;
        let child = *link_index
            .get(j.child.as_str())
            .ok_or_else(|| invalid(format!("joint `{}`: unknown child link `{}`", j.name, j.child)))?;
        if parent == child {
            return Err(invalid(format!("joint `{}`: link is its own parent", j.name)));
        }
        if let Some(prev) = parent_joint[child] {
            return Err(invalid(format!(
                "link `{}` has two parent joints (`{}` and `{}`)",
                j.child, doc.joints[prev].name, j.name
            )));
        }
        parent_joint[child] = Some(ji);

        let origin = pose_from_doc(&j.origin, &format!("joint `{}` origin", j.name))?;
        let (axis, limits) = match j.kind {
            JointKind::Fixed => (Vector3::zeros(), (0.0, 0.0)),
            JointKind::Revolute | JointKind::Prismatic => {
                let a = j
                    .axis
                    .ok_or_else(|| invalid(format!("joint `{}`: missing axis", j.name)))?;
                let a = Vector3::from(a);
                if !a.iter().all(|v| v.is_finite()) || (a.norm() - 1.0).abs() > AXIS_TOLERANCE {
                    return Err(invalid(format!(
                        "joint `{}`: axis is not unit-norm (|a| = {})",
                        j.name,
                        a.norm()
                    )));
                }
                let [lo, hi] = j
                    .limits
                    .ok_or_else(|| invalid(format!("joint `{}`: missing limits", j.name)))?;
                if !(lo < hi) {
                    return Err(invalid(format!(
                        "joint `{}`: lower limit {lo} is not below upper limit {hi}",
                        j.name
                    )));
                }
                (a, (lo, hi))
            }
        };
        raw.push(Joint {
            name: j.name.clone(),
            kind: j.kind,
            parent,
            child,
            origin,
            axis,
            limits,
            dof_index: None,
        });
    }

    let roots: Vec<usize> = (0..doc.links.len()).filter(|&l| parent_joint[l].is_none()).collect();
    let root = match roots.as_slice() {
        [r] => *r,
        [] => return Err(invalid("kinematic graph has a cycle (no root link)".into())),
        many => {
            let names: Vec<&str> = many.iter().map(|&l| doc.links[l].name.as_str()).collect();
            return Err(invalid(format!(
                "kinematic graph is not a single tree; root candidates: {}",
                names.join(", ")
            )));
        }
    };

    // breadth-first from the root; anything not reached sits on a cycle
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); doc.links.len()];
    for (ji, j) in raw.iter().enumerate() {
        children[j.parent].push(ji);
    }
    let mut order = Vec::with_capacity(raw.len());
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(l) = queue.pop_front() {
        for &ji in &children[l] {
            order.push(ji);
            queue.push_back(raw[ji].child);
        }
    }
    if order.len() != raw.len() {
        return Err(invalid("kinematic graph has a cycle".into()));
    }

    // joint vector order follows declaration order
    let mut next = 0;
    for j in raw.iter_mut() {
        if j.kind != JointKind::Fixed {
            j.dof_index = Some(next);
            next += 1;
        }
    }
    let mut remap = vec![0; raw.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let mut dof_joints = vec![0; next];
    let mut joints: Vec<Option<Joint>> = raw.into_iter().map(Some).collect();
    let joints: Vec<Joint> = order.iter().map(|&old| joints[old].take().unwrap()).collect();
    for (i, j) in joints.iter().enumerate() {
        if let Some(d) = j.dof_index {
            dof_joints[d] = i;
        }
    }
    let parent_joint = parent_joint.into_iter().map(|p| p.map(|old| remap[old])).collect();

    let mut bindings = [KeypointBinding {
        link: 0,
        offset: Pose::identity(),
    }; 5];
    for name in doc.keypoints.keys() {
        Keypoint::from_str(name).map_err(|_| invalid(format!("unknown keypoint binding `{name}`")))?;
    }
    for kp in Keypoint::ALL {
        let b = doc
            .keypoints
            .get(kp.name())
            .ok_or_else(|| invalid(format!("missing keypoint binding `{kp}`")))?;
        let link = *link_index
            .get(b.link.as_str())
            .ok_or_else(|| invalid(format!("keypoint `{kp}`: unknown link `{}`", b.link)))?;
        bindings[kp.index()] = KeypointBinding {
            link,
            offset: pose_from_doc(&b.offset, &format!("keypoint `{kp}` offset"))?,
        };
    }

    Ok(KinematicModel {
        name: doc.name.clone(),
        links: doc.links.iter().map(|l| l.name.clone()).collect(),
        joints,
        root,
        parent_joint,
        keypoints: bindings,
        dof_joints,
        default_root_height: doc.default_root_height.unwrap_or(0.0),
    })
}

/// Parses and validates a model from JSON text.
pub fn load_model_json(text: &str) -> Result<KinematicModel> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    load_model(&doc)
}

const PLANAR3_JSON: &str = include_str!("../models/planar3.json");
const BIPED29_JSON: &str = include_str!("../models/biped29.json");

/// Models shipped with the crate: `planar3` and `biped29`.
pub fn bundled_model(name: &str) -> Result<KinematicModel> {
    match name {
        "planar3" => load_model_json(PLANAR3_JSON),
        "biped29" => load_model_json(BIPED29_JSON),
        other => Err(Error::InvalidModel(format!("no bundled model named `{other}`"))),
    }
}

pub fn bundled_model_json(name: &str) -> Option<&'static str> {
    match name {
        "planar3" => Some(PLANAR3_JSON),
        "biped29" => Some(BIPED29_JSON),
        _ => None,
    }
}

impl KinematicModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.dof_joints.len()
    }

    pub fn links(&self) -> &[String] {
        &self.links
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l == name)
    }

    pub fn root_link(&self) -> usize {
        self.root
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    /// Movable joints in joint-vector order.
    pub fn dof_joints(&self) -> impl Iterator<Item = &Joint> {
        self.dof_joints.iter().map(|&i| &self.joints[i])
    }

    pub fn joint_names(&self) -> Vec<&str> {
        self.dof_joints().map(|j| j.name.as_str()).collect()
    }

    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.dof_joints().map(|j| j.limits).collect()
    }

    pub fn keypoint_binding(&self, kp: Keypoint) -> &KeypointBinding {
        &self.keypoints[kp.index()]
    }

    pub fn default_root_height(&self) -> f64 {
        self.default_root_height
    }

    /// Clamps each joint value to its limits in place.
    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(self.dof_joints()) {
            *v = v.clamp(j.limits.0, j.limits.1);
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(self.dof_joints())
            .all(|(v, j)| *v >= j.limits.0 && *v <= j.limits.1)
    }

    /// Movable joint indices (joint-vector positions) between the root and `link`.
    pub fn path_dofs(&self, link: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut l = link;
        while let Some(ji) = self.parent_joint[l] {
            let j = &self.joints[ji];
            if let Some(d) = j.dof_index {
                out.push(d);
            }
            l = j.parent;
        }
        out.reverse();
        out
    }
}

/// World-frame poses of every link and keypoint, plus the joint axes used by
/// the Jacobian.
#[derive(Clone, Debug)]
pub struct FkResult {
    pub links: Vec<Pose>,
    pub keypoints: [Pose; 5],
    /// World axis and origin of each movable joint, in joint-vector order.
    pub joint_axes: Vec<Vector3<f64>>,
    pub joint_origins: Vec<Vector3<f64>>,
}

impl FkResult {
    pub fn keypoint(&self, kp: Keypoint) -> &Pose {
        &self.keypoints[kp.index()]
    }

    pub fn link(&self, model: &KinematicModel, name: &str) -> Option<Pose> {
        model.link_index(name).map(|i| self.links[i])
    }

    pub fn to_map(&self, model: &KinematicModel) -> HashMap<String, Pose> {
        let mut m: HashMap<String, Pose> = model.links.iter().cloned().zip(self.links.iter().copied()).collect();
        for kp in Keypoint::ALL {
            m.insert(format!("keypoint:{kp}"), self.keypoints[kp.index()]);
        }
        m
    }
}

fn check_q(model: &KinematicModel, q: &[f64]) -> Result<()> {
    if q.len() != model.dof() {
        return Err(Error::DimensionMismatch {
            expected: model.dof(),
            actual: q.len(),
        });
    }
    if !q.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("joint vector"));
    }
    Ok(())
}

pub fn forward_kinematics(model: &KinematicModel, q: &[f64], root: &Pose) -> Result<FkResult> {
    check_q(model, q)?;
    let mut links = vec![Pose::identity(); model.links.len()];
    links[model.root] = *root;
    let mut joint_axes = vec![Vector3::zeros(); model.dof()];
    let mut joint_origins = vec![Vector3::zeros(); model.dof()];
    for j in &model.joints {
        let frame = links[j.parent].compose(&j.origin);
        let motion = match (j.kind, j.dof_index) {
            (JointKind::Revolute, Some(d)) => Pose::new(Vector3::zeros(), Quat::from_axis_angle(&j.axis, q[d])),
            (JointKind::Prismatic, Some(d)) => Pose::from_translation(j.axis * q[d]),
            _ => Pose::identity(),
        };
        if let Some(d) = j.dof_index {
            joint_axes[d] = frame.rotation.rotate(&j.axis);
            joint_origins[d] = frame.translation;
        }
        links[j.child] = frame.compose(&motion);
    }
    let keypoints = model.keypoints.map(|b| links[b.link].compose(&b.offset));
    Ok(FkResult {
        links,
        keypoints,
        joint_axes,
        joint_origins,
    })
}

/// Geometric Jacobian (rows: linear xyz, angular xyz) of a keypoint frame
/// w.r.t. the joint vector, in the world frame, from a precomputed FK.
pub fn keypoint_jacobian_from_fk(model: &KinematicModel, fk: &FkResult, keypoint: Keypoint) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(6, model.dof());
    let p = fk.keypoints[keypoint.index()].translation;
    for d in model.path_dofs(model.keypoints[keypoint.index()].link) {
        let j = &model.joints[model.dof_joints[d]];
        let a = fk.joint_axes[d];
        match j.kind {
            JointKind::Revolute => {
                let lin = a.cross(&(p - fk.joint_origins[d]));
                jac.fixed_view_mut::<3, 1>(0, d).copy_from(&lin);
                jac.fixed_view_mut::<3, 1>(3, d).copy_from(&a);
            }
            JointKind::Prismatic => {
                jac.fixed_view_mut::<3, 1>(0, d).copy_from(&a);
            }
            JointKind::Fixed => {}
        }
    }
    jac
}

pub fn keypoint_jacobian(model: &KinematicModel, q: &[f64], root: &Pose, keypoint: Keypoint) -> Result<DMatrix<f64>> {
    let fk = forward_kinematics(model, q, root)?;
    Ok(keypoint_jacobian_from_fk(model, &fk, keypoint))
}

#[cfg(test)]
pub(crate) fn prismatic_test_model() -> KinematicModel {
    load_model_json(
        r#"{
        "name": "slider",
        "links": [{"name": "base"}, {"name": "carriage"}, {"name": "arm"}, {"name": "side"}],
        "joints": [
          {"name": "slide", "type": "prismatic", "parent": "base", "child": "carriage",
           "axis": [1, 0, 0], "limits": [-1, 1]},
          {"name": "turn", "type": "revolute", "parent": "carriage", "child": "arm",
           "axis": [0, 1, 0], "origin": {"translation": [0, 0, 0.5]}, "limits": [-2, 2]},
          {"name": "side_turn", "type": "revolute", "parent": "base", "child": "side",
           "axis": [0, 0, 1], "origin": {"translation": [0, 1, 0]}, "limits": [-2, 2]}
        ],
        "keypoints": {
          "pelvis": {"link": "base"},
          "left_tcp": {"link": "arm", "offset": {"translation": [0.3, 0, 0]}},
          "right_tcp": {"link": "side", "offset": {"translation": [0.2, 0, 0]}},
          "left_foot": {"link": "carriage"},
          "right_foot": {"link": "side"}
        }
    }"#,
    )
    .unwrap()
}
