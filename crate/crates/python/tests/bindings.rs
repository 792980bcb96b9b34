use pyo3::ffi::c_str;
use pyo3::prelude::*;

use kpwbc_py::kpwbc_py;

fn run(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(kpwbc_py);
    pyo3::prepare_freethreaded_python();
    Python::with_gil(|py| py.run(code, None, None).inspect_err(|e| e.print(py))).expect("python snippet failed");
}

#[test]
fn module_surface() {
    run(c_str!(
        r#"
import math
import kpwbc
m = kpwbc.Model.bundled("planar3")
end = m.fk([0.0, 0.0, 0.0], [0, 0, 0, 1, 0, 0, 0])["right_tcp"]
assert abs(end[0] - 3.0) < 1e-12 and abs(end[1]) < 1e-12, end
assert kpwbc.ACTION_DIM == 47 and len(kpwbc.action_column_names()) == 47
assert kpwbc.observation_widths(29) == (440, 364, 45)

b = kpwbc.Model.bundled("biped29")
root, q = b.initial_frame()
kp = b.fk(q, root)
f = kpwbc.KeypointFrame(0.0, kp["pelvis"], kp["left_tcp"], kp["right_tcp"], kp["left_foot"], kp["right_foot"])
_, sol, rep = kpwbc.retarget(b, f)
assert rep["converged"] and max(rep["position_error"]) < 1e-3, rep
lo_hi = b.limits
assert all(lo <= v <= hi for v, (lo, hi) in zip(sol, lo_hi))

try:
    f.pose("nose")
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#
    ));
}
