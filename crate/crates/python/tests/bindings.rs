use pyo3::prelude::*;
use pyo3::types::PyDict;
use surfelflow_py::surfelflow_module;

fn with_module(code: &std::ffi::CStr) -> PyResult<()> {
    static INIT: std::sync::Once = std::sync::Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(surfelflow_module);
        Python::initialize();
    });
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("sf", py.import("surfelflow")?)?;
        py.run(code, Some(&globals), None)
    })
}

#[test]
fn python_surface_round_trip() {
    with_module(
        cr#"
import math, os, tempfile
scene = sf.Scene()
scene.add([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.5, 0.5], 0.9, [1.0, 0.0, 0.0])
scene.add([0.0, 0.0, 0.5], [1.0, 0.0, 0.0, 0.0], [0.5, 0.5], 0.001, [0.0, 1.0, 0.0])
assert len(scene) == 2
assert scene.utilization() == 0.5
cam = sf.Camera.orbit(0.0, 0.0, resolution=8)
r = scene.render(cam)
assert (cam.width, cam.height) == (8, 8)
assert len(r.color()) == 8 and len(r.color()[0][0]) == 3
assert all(0.0 <= a <= 1.0 for row in r.alpha() for a in row)
assert r.distortion_loss() >= 0.0
assert r.psnr(r) == math.inf or r.psnr(r) > 100
path = os.path.join(tempfile.mkdtemp(), "s.ply")
scene.save(path)
again = sf.Scene.load(path)
flat = lambda img: [c for row in img for px in row for c in px]
assert max(abs(x - y) for x, y in zip(flat(again.render(cam).color()), flat(r.color()))) < 1e-5

a, b, da, db = sf.schedule(0.5)
assert abs(a * a + b * b - 1.0) < 1e-12
assert abs(sf.fm_weight(0.5, "linear") - 4.0) < 1e-12
pts = sf.shape_cloud("cube", 40, seed=3)
assert sf.fps(pts, 5)[0] == 0
assert sf.chamfer(pts, pts) == 0.0
"#,
    )
    .unwrap();
}

#[test]
fn python_errors_are_typed() {
    with_module(
        cr#"
for bad in (lambda: sf.schedule(0.5, "cosine"),
            lambda: sf.shape_cloud("cone", 4),
            lambda: sf.Camera.orbit(0.0, 0.0, resolution=0)):
    try:
        bad()
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
try:
    sf.Scene.load("/nonexistent/scene.ply")
except OSError:
    pass
else:
    raise AssertionError("expected OSError")
"#,
    )
    .unwrap();
}
