"""Smoke test for the kpwbc Python bindings.

Build and install first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/kpwbc-*.whl
    python python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

import kpwbc


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def fk_frame(model, t, joints, root=None):
    kp = model.fk(joints, root)
    return kpwbc.KeypointFrame(t, kp["pelvis"], kp["left_tcp"], kp["right_tcp"], kp["left_foot"], kp["right_foot"], (0.02, 0.03))


def main():
    planar = kpwbc.Model.bundled("planar3")
    end = planar.fk([0.0, 0.0, 0.0], [0, 0, 0, 1, 0, 0, 0])["right_tcp"]
    assert close(end[:3], [3.0, 0.0, 0.0], 1e-12), end

    model = kpwbc.Model.bundled("biped29")
    assert model.dof == 29 and len(model.joint_names) == 29
    root, q0 = model.initial_frame()
    assert len(model.jacobian(q0, "left_tcp")) == 6

    # smooth joint motion, FK to keypoints
    rate = 30.0
    frames = []
    for i in range(80):
        t = i / rate
        q = [v + 0.1 * math.sin(0.7 * t + j) for j, v in enumerate(q0)]
        q = [min(max(v, lo + 0.01), hi - 0.01) for v, (lo, hi) in zip(q, model.limits)]
        frames.append(fk_frame(model, t, q, root))

    stats = kpwbc.Stats.fit([frames], horizon=16)
    assert len(stats.min) == 17
    stats = kpwbc.Stats.from_json(stats.to_json())
    rows = kpwbc.encode_chunk(frames, 5, stats, horizon=16)
    assert len(rows) == 16 and all(len(r) == kpwbc.ACTION_DIM for r in rows)
    decoded = kpwbc.decode_chunk(rows, frames[5], stats, 1.0 / rate)
    err = max(
        max(abs(a - b) for a, b in zip(d.pose(k), frames[6 + i].pose(k)))
        for i, d in enumerate(decoded)
        for k in kpwbc.KEYPOINTS
    )
    assert err < 1e-9, err

    m = kpwbc.rot6d_decode(kpwbc.rot6d_encode([[0, -1, 0], [1, 0, 0], [0, 0, 1]]))
    assert close(m[0], [0, -1, 0], 1e-12)
    half = kpwbc.slerp([1, 0, 0, 0], [0, 0, 0, 1], 0.5)
    assert close(half, [math.sqrt(0.5), 0, 0, math.sqrt(0.5)], 1e-12)

    s = kpwbc.height_scale_from_calibration(model.default_root_height, 0.95)
    scaled = kpwbc.scale_keypoints(frames[0], s)
    assert scaled.pose("left_tcp") == frames[0].pose("left_tcp")

    sol_root, sol_q, report = kpwbc.retarget(model, frames[10])
    assert report["converged"], report
    assert max(report["position_error"]) < 1e-3

    traj, reports = kpwbc.retarget_stream(model, frames[:20])
    assert len(traj) == 20 and len(traj[0]) == 36
    assert sum(r["converged"] for r in reports) == 20

    dense = kpwbc.resample(traj, rate, 50.0)
    assert close(dense[0], traj[0], 1e-12) and close(dense[-1], traj[-1], 1e-12)

    assert kpwbc.observation_widths(29) == (440, 364, 45)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "demo.jsonl")
        with open(path, "w") as f:
            f.write(json.dumps({"format_version": "kpwbc-demo/1", "rate": rate, "calibration_height": 0.95, "gripper_range": [0.0, 0.08]}) + "\n")
            for fr in frames:
                f.write(json.dumps(fr.to_dict()) + "\n")
        assert kpwbc.validate_demo(path) == []
        header, back = kpwbc.read_demo(path)
        assert header["rate"] == rate and len(back) == len(frames)

    summary = kpwbc.simulate(model, "static", duration=1.0)
    assert summary["ticks"] == 50
    assert summary["max_tracking_error"] < 1e-3, summary

    try:
        kpwbc.Model.bundled("no_such_model")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
