use std::io::Write;

use kpwbc::action_codec::{ActionChunk, KeypointFrame, ACTION_DIM};
use kpwbc::formats::*;
use kpwbc::geometry::{Pose, Quat};
use kpwbc::skr::RobotMotionFrame;
use nalgebra::Vector3;
use proptest::prelude::*;

fn quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 0.1)
        .prop_map(|v| Quat::new_normalize(v[0], v[1], v[2], v[3]))
}

fn pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-2.0f64..2.0), quat()).prop_map(|(t, q)| Pose::new(Vector3::from(t), q))
}

fn keypoint_frames() -> impl Strategy<Value = Vec<KeypointFrame>> {
    prop::collection::vec(
        (prop::array::uniform5(pose()), prop::array::uniform2(0.0f64..0.08)),
        1..12,
    )
    .prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (poses, gripper))| KeypointFrame {
                timestamp: i as f64 / 30.0,
                poses,
                gripper,
            })
            .collect()
    })
}

fn round_trip_file(bytes: &[u8]) -> String {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(bytes).unwrap();
    std::fs::read_to_string(f.path()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn demo_round_trips(frames in keypoint_frames(), calib in 0.5f64..1.2) {
        let demo = Demonstration {
            header: DemoHeader {
                format_version: DEMO_FORMAT.into(),
                rate: 30.0,
                calibration_height: calib,
                gripper_range: [0.0, 0.08],
            },
            frames,
        };
        let mut buf = Vec::new();
        write_demo(&mut buf, &demo).unwrap();
        let back = read_demo(&round_trip_file(&buf)).unwrap();
        prop_assert_eq!(back, demo);
    }

    #[test]
    fn trajectory_round_trips(
        rows in prop::collection::vec((pose(), prop::collection::vec(-3.0f64..3.0, 29)), 1..8)
    ) {
        let traj = Trajectory {
            header: TrajectoryHeader {
                format_version: TRAJECTORY_FORMAT.into(),
                model: "biped29".into(),
                rate: 50.0,
                dof: 29,
            },
            timestamps: (0..rows.len()).map(|i| i as f64 * 0.02).collect(),
            frames: rows.into_iter().map(|(p, q)| RobotMotionFrame::new(p, q)).collect(),
        };
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        prop_assert_eq!(read_trajectory(&round_trip_file(&buf)).unwrap(), traj);
    }

    #[test]
    fn chunks_round_trip(frames in keypoint_frames(), vals in prop::collection::vec(-1.0f64..1.0, ACTION_DIM * 3)) {
        let rows: Vec<[f64; ACTION_DIM]> = vals.chunks(ACTION_DIM).map(|c| c.try_into().unwrap()).collect();
        let header = ChunkHeader {
            format_version: CHUNK_FORMAT.into(),
            layout_version: "kp47-v1".into(),
            horizon: 3,
            step_period: 1.0 / 30.0,
        };
        let records: Vec<ChunkRecord> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| ChunkRecord {
                index: i,
                anchor: f.clone(),
                chunk: ActionChunk { rows: rows.clone(), normalized: true, step_period: 1.0 / 30.0, clamped: 0 },
            })
            .collect();
        let mut buf = Vec::new();
        write_chunks(&mut buf, &header, &records).unwrap();
        let (h, back) = read_chunks(&round_trip_file(&buf)).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(back, records);
    }

    #[test]
    fn decoded_round_trips(frames in keypoint_frames()) {
        let header = DecodedHeader { format_version: DECODED_FORMAT.into(), horizon: frames.len() };
        let lines = vec![DecodedLine { index: 4, frames: frames.iter().map(DemoRecord::from_frame).collect() }];
        let mut buf = Vec::new();
        write_decoded(&mut buf, &header, &lines).unwrap();
        let (h, back) = read_decoded(&round_trip_file(&buf)).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(back, lines);
    }

    #[test]
    fn config_round_trips(kp in 1.0f64..500.0, damping in 1e-6f64..1e-2, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.skr.ik.damping = damping;
        cfg.controller.kp = PerJoint::Uniform(kp);
        cfg.episode.seed = seed;
        let text = cfg.to_json().unwrap();
        prop_assert_eq!(RunConfig::from_json(&round_trip_file(text.as_bytes())).unwrap(), cfg);
    }
}

#[test]
fn demo_rejects_wrong_version() {
    let text = "{\"format_version\":\"kpwbc-demo/9\",\"rate\":30.0,\"calibration_height\":0.95,\"gripper_range\":[0.0,0.08]}\n";
    assert!(read_demo(text).is_err());
}
