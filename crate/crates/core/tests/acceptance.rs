//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kpwbc::action_codec::{absolute_from_chunk, relative_chunk, KeypointFrame, DEFAULT_HORIZON};
use kpwbc::controller::{
    initial_frame, retime, run_episode, sine_demo, static_demo, ControllerConfig, EpisodeConfig, EpisodeLog,
    PlantParams, PlantState, ReplaySource,
};
use kpwbc::formats::{make_demo, DemoSpec};
use kpwbc::geometry::{rot6d_decode, rot6d_encode, Pose, Quat, Rot6D};
use kpwbc::kinematics::{bundled_model, forward_kinematics, keypoint_jacobian, Keypoint, KinematicModel};
use kpwbc::motion_ref::{
    assemble_command, assemble_proprio, high_level_proprio, lower_body, resample, MotionChunk, OffsetSet,
    ProprioHistory, ReferenceBuffer, RobotState,
};
use kpwbc::skr::{keypoints_of, retarget, scale_keypoints, RobotMotionFrame, SkrConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return Quat::new_normalize(v[0], v[1], v[2], v[3]);
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(
        Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.0..2.0),
        ),
        random_quat(rng),
    )
}

/// Smooth SE(3) paths: constant linear and angular velocity plus a wobble.
fn smooth_traj(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<KeypointFrame> {
    let base: [Pose; 5] = std::array::from_fn(|_| random_pose(rng));
    let vel: [Vector3<f64>; 5] = std::array::from_fn(|_| Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)));
    let omega: [Vector3<f64>; 5] = std::array::from_fn(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
    let freq = rng.random_range(0.2..1.0);
    (0..len)
        .map(|i| {
            let t = i as f64 / rate;
            let wobble = 0.05 * (std::f64::consts::TAU * freq * t).sin();
            KeypointFrame {
                timestamp: t,
                poses: std::array::from_fn(|k| {
                    Pose::new(
                        base[k].translation + vel[k] * t + Vector3::repeat(wobble),
                        Quat::from_scaled_axis(&(omega[k] * t)).mul(&base[k].rotation),
                    )
                }),
                gripper: [0.04 + 0.02 * wobble, 0.03],
            }
        })
        .collect()
}

fn c1_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = DEFAULT_HORIZON;
    let (mut et, mut er) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let traj = smooth_traj(&mut rng, 2 * h, 30.0);
        for t in [0, h / 2, h - 1] {
            let chunk = relative_chunk(&traj, t, h).unwrap();
            let back = absolute_from_chunk(&chunk, &traj[t]);
            for (b, src) in back.iter().zip(&traj[t + 1..]) {
                for k in 0..5 {
                    et = et.max((b.poses[k].translation - src.poses[k].translation).norm());
                    er = er.max(b.poses[k].rotation.angle_to(&src.poses[k].rotation));
                }
            }
        }
    }
    let dt = start.elapsed();
    outcome(
        et < 1e-9 && er < 1e-9 && dt < Duration::from_secs(5),
        format!("max translation err {et:.2e} m, rotation err {er:.2e} rad, {:.2?}", dt),
    )
}

fn c2_world_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut et, mut er) = (0.0f64, 0.0f64);
    let mut bitwise = true;
    for _ in 0..50 {
        let traj = smooth_traj(&mut rng, 60, 30.0);
        let w = random_pose(&mut rng);
        let moved: Vec<KeypointFrame> = traj
            .iter()
            .map(|f| KeypointFrame {
                poses: f.poses.map(|p| w.compose(&p)),
                ..f.clone()
            })
            .collect();
        let a = relative_chunk(&traj, 3, DEFAULT_HORIZON).unwrap();
        let b = relative_chunk(&moved, 3, DEFAULT_HORIZON).unwrap();
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            for k in 0..5 {
                let d = (sa.poses[k].translation - sb.poses[k].translation).norm();
                bitwise &= d == 0.0;
                et = et.max(d);
                er = er.max(sa.poses[k].rotation.angle_to(&sb.poses[k].rotation));
            }
            bitwise &= sa.gripper == sb.gripper;
        }
    }
    outcome(
        et < 1e-12 && er < 1e-12,
        format!("max translation delta {et:.2e} m, rotation delta {er:.2e} rad (bitwise: {bitwise})"),
    )
}

fn c3_rot6d() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut frob, mut ortho, mut min_det) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..10_000 {
        let m = random_quat(&mut rng).to_matrix();
        let r = rot6d_decode(&rot6d_encode(&m)).unwrap();
        frob = frob.max((r - m).norm());
        let mut v = rot6d_encode(&m).0;
        for x in v.iter_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
        let n = rot6d_decode(&Rot6D(v)).unwrap();
        ortho = ortho.max((n.transpose() * n - Matrix3::identity()).abs().max());
        min_det = min_det.min(n.determinant());
    }
    outcome(
        frob < 1e-9 && ortho < 1e-10 && min_det > 0.0,
        format!("round-trip Frobenius {frob:.2e}, noisy orthonormality {ortho:.2e}, min det {min_det:.6}"),
    )
}

fn c4_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut exact = true;
    let mut rel = 0.0f64;
    for _ in 0..1000 {
        let kf = smooth_traj(&mut rng, 2, 30.0).remove(1);
        let s = rng.random_range(0.3..3.0);
        let out = scale_keypoints(&kf, s);
        exact &= out.gripper == kf.gripper && out.timestamp == kf.timestamp;
        for kp in Keypoint::ALL {
            let (a, b) = (kf.pose(kp), out.pose(kp));
            exact &= a.rotation == b.rotation;
            exact &= a.translation.x == b.translation.x && a.translation.y == b.translation.y;
            if !kp.is_foot() {
                exact &= a == b;
            } else {
                let pz = kf.pose(Keypoint::Pelvis).translation.z;
                let d0 = a.translation.z - pz;
                let d1 = b.translation.z - pz;
                rel = rel.max(((d1 - s * d0) / (s * d0)).abs());
            }
        }
    }
    outcome(
        exact && rel < 1e-12,
        format!("unchanged parts exact: {exact}, max relative foot-z error {rel:.2e}"),
    )
}

fn sample_frame(model: &KinematicModel, rng: &mut ChaCha8Rng) -> RobotMotionFrame {
    let q = model
        .limits()
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..hi))
        .collect();
    let root = Pose::new(
        Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.75),
        Quat::from_axis_angle(&Vector3::z(), rng.random_range(-0.5..0.5)),
    );
    RobotMotionFrame::new(root, q)
}

fn c5_ik() -> Outcome {
    let model = bundled_model("biped29").unwrap();
    let cfg = SkrConfig::default();
    let seed = RobotMotionFrame::standing(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let start = Instant::now();
    let (mut ok, mut in_limits, mut in_budget) = (0, true, true);
    for i in 0..100 {
        let truth = sample_frame(&model, &mut rng);
        let targets = keypoints_of(&model, &truth, i as f64).unwrap();
        let (sol, rep) = retarget(&model, &targets, &seed, &cfg).unwrap();
        in_limits &= model.within_limits(&sol.joints);
        in_budget &= rep.iterations <= 200;
        if rep.max_position_error() < 1e-3 && rep.max_orientation_error() < 1e-2 {
            ok += 1;
        }
    }
    let dt = start.elapsed();
    outcome(
        ok >= 90 && in_limits && in_budget && dt < Duration::from_secs(60),
        format!("{ok}/100 converged, joints within limits: {in_limits}, within 200 iterations: {in_budget}, {dt:.2?}"),
    )
}

fn c6_jacobian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let h = 1e-6;
    let mut worst = Vec::new();
    for name in ["planar3", "biped29"] {
        let model = bundled_model(name).unwrap();
        let mut err = 0.0f64;
        for _ in 0..50 {
            let root = random_pose(&mut rng);
            let q: Vec<f64> = model
                .limits()
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..hi))
                .collect();
            for kp in Keypoint::ALL {
                let j = keypoint_jacobian(&model, &q, &root, kp).unwrap();
                for c in 0..model.dof() {
                    let (mut qp, mut qm) = (q.clone(), q.clone());
                    qp[c] += h;
                    qm[c] -= h;
                    let p = *forward_kinematics(&model, &qp, &root).unwrap().keypoint(kp);
                    let m = *forward_kinematics(&model, &qm, &root).unwrap().keypoint(kp);
                    let dp = (p.translation - m.translation) / (2.0 * h);
                    let dr = p.rotation.mul(&m.rotation.inverse()).scaled_axis() / (2.0 * h);
                    for r in 0..3 {
                        err = err.max((j[(r, c)] - dp[r]).abs());
                        err = err.max((j[(r + 3, c)] - dr[r]).abs());
                    }
                }
            }
        }
        worst.push((name, err));
    }
    let pass = worst.iter().all(|(_, e)| *e < 1e-6);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("max-abs analytic vs central difference: {detail}"))
}

fn c7_resampling() -> Outcome {
    let f = |yaw: f64, j: f64, x: f64| {
        RobotMotionFrame::new(
            Pose::new(Vector3::new(x, 0.0, 0.8), Quat::from_axis_angle(&Vector3::z(), yaw)),
            vec![j, -j],
        )
    };
    // 10 Hz ramp, 5 source frames
    let src: Vec<_> = (0..5)
        .map(|i| f(0.4 * i as f64, 0.5 * i as f64, 0.1 * i as f64))
        .collect();
    let out = resample(&MotionChunk::new(src.clone(), 10.0).unwrap(), 50.0).unwrap();
    let mut endpoint = 0.0f64;
    for (a, b) in [(&out[0], &src[0]), (out.last().unwrap(), src.last().unwrap())] {
        let va = a.to_vec();
        let vb = b.to_vec();
        endpoint = endpoint.max(va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let mut ramp = 0.0f64;
    let mut unit = 0.0f64;
    let mut spacing = 0.0f64;
    for (j, fr) in out.iter().enumerate() {
        ramp = ramp.max((fr.joints[0] - 0.1 * j as f64).abs());
        ramp = ramp.max((fr.joints[1] + 0.1 * j as f64).abs());
        unit = unit.max((fr.root_orientation.norm() - 1.0).abs());
    }
    for w in out.windows(2) {
        let step = w[0].root_orientation.angle_to(&w[1].root_orientation);
        spacing = spacing.max((step - 0.08).abs());
    }
    let count_ok = out.len() == 21;
    outcome(
        count_ok && endpoint < 1e-12 && ramp < 1e-12 && unit < 1e-12 && spacing < 1e-9,
        format!(
            "{} frames, endpoint {endpoint:.1e}, ramp {ramp:.1e}, quat norm {unit:.1e}, angle spacing {spacing:.1e}",
            out.len()
        ),
    )
}

fn c8_dimensions() -> Outcome {
    let model = bundled_model("biped29").unwrap();
    let frame = RobotMotionFrame::standing(&model);
    let buffer = ReferenceBuffer::new(frame.clone());
    let state = RobotState::at_rest(&frame, 0.0);
    let cmd = assemble_command(&buffer, &state, &OffsetSet::default()).len();
    let mut hist = ProprioHistory::new(4).unwrap();
    hist.push(state).unwrap();
    let prop = assemble_proprio(&hist).unwrap().len();
    let lb = lower_body(&frame.joints).unwrap().to_vec();
    let hl = high_level_proprio(&[lb.clone(), lb.clone(), lb]).unwrap().len();
    outcome(
        cmd == 11 * 40 && prop == 4 + 90 * 4 && hl == 45,
        format!("command {cmd} (expect 440), proprio {prop} (expect 364), high-level {hl} (expect 45)"),
    )
}

fn biped_episode(demo: Vec<KeypointFrame>, initial: &RobotMotionFrame, kp: f64, ep: &EpisodeConfig) -> EpisodeLog {
    let model = bundled_model("biped29").unwrap();
    let mut src = ReplaySource::new(demo, DEFAULT_HORIZON, None).unwrap();
    let ctrl = ControllerConfig::uniform(model.dof()).with_kp(kp);
    let plant = PlantState::at_rest(initial.joints.clone(), &PlantParams::default()).unwrap();
    run_episode(&mut src, &model, &SkrConfig::default(), &ctrl, plant, initial, ep).unwrap()
}

fn csv_bytes(log: &EpisodeLog) -> Vec<u8> {
    let mut out = Vec::new();
    log.write_csv(&mut out).unwrap();
    out
}

fn c9_closed_loop() -> Outcome {
    let model = bundled_model("biped29").unwrap();
    let initial = initial_frame(&model, true);
    let ep = EpisodeConfig {
        duration: 10.0,
        ..Default::default()
    };

    let start = Instant::now();
    let demo = static_demo(&model, &initial, ep.hl_rate, ep.duration).unwrap();
    let stat = biped_episode(demo, &initial, 100.0, &ep);
    let static_time = start.elapsed();
    let static_err = stat.summary().max_tracking_error;

    // left elbow, 0.2 rad at 0.5 Hz
    let elbow = model
        .joint_names()
        .iter()
        .position(|n| *n == "left_elbow_joint")
        .unwrap();
    let sine = sine_demo(&model, &initial, elbow, 0.2, 0.5, ep.hl_rate, ep.duration + 1.0).unwrap();
    let amps: Vec<f64> = [100.0, 200.0, 400.0, 800.0]
        .iter()
        .map(|kp| {
            biped_episode(sine.clone(), &initial, *kp, &ep)
                .summary()
                .steady_state_error
        })
        .collect();
    let decreasing = amps.windows(2).all(|w| w[1] < w[0]);

    let noisy = EpisodeConfig {
        sensor_noise: 1e-3,
        seed: 7,
        ..ep.clone()
    };
    let a = csv_bytes(&biped_episode(sine.clone(), &initial, 100.0, &noisy));
    let b = csv_bytes(&biped_episode(sine.clone(), &initial, 100.0, &noisy));
    let c = csv_bytes(&biped_episode(
        sine,
        &initial,
        100.0,
        &EpisodeConfig { seed: 8, ..noisy },
    ));
    let deterministic = a == b && a != c;

    outcome(
        static_err < 1e-3 && decreasing && deterministic && static_time < Duration::from_secs(30),
        format!(
            "static max err {static_err:.2e} rad in {static_time:.2?}; sine amplitude by Kp 100/200/400/800: {}; same seed identical, new seed differs: {deterministic}",
            amps.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" / ")
        ),
    )
}

fn c10_seams() -> Outcome {
    let model = bundled_model("biped29").unwrap();
    let spec = DemoSpec {
        rate: 30.0,
        duration: 12.0,
        calibration_height: model.default_root_height(),
        seed: 110,
    };
    let (demo, joints) = make_demo(&model, &spec).unwrap();
    let ep = EpisodeConfig::default();
    let frames = retime(&demo.frames, ep.hl_rate).unwrap();
    let s = biped_episode(frames, &joints[0], 100.0, &ep).summary();
    outcome(
        // 1e-12 rad slack: the seam tick and the ticks after it share one
        // interpolation slope, so the two maxima agree up to rounding
        s.max_seam_jump <= s.max_intra_chunk_jump + 1e-12 && s.seams == 100,
        format!(
            "{} seams, max seam |dq_des| {:.3e} rad, max intra-chunk |dq_des| {:.3e} rad (margin {:.1e}), IK convergence {:.3}",
            s.seams,
            s.max_seam_jump,
            s.max_intra_chunk_jump,
            s.max_intra_chunk_jump - s.max_seam_jump,
            s.ik_convergence_rate
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("relative chunk round trip", c1_round_trip),
        ("world-frame invariance", c2_world_invariance),
        ("Rot6D contract", c3_rot6d),
        ("height scaling preserves metrics", c4_scaling),
        ("IK oracle on biped29", c5_ik),
        ("Jacobian vs finite differences", c6_jacobian),
        ("resampling contract", c7_resampling),
        ("observation dimensions", c8_dimensions),
        ("closed-loop episode", c9_closed_loop),
        ("seam continuity", c10_seams),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 10 acceptance criteria passed");
}
