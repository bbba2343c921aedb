"""Smoke test for the surfelflow Python module.

Build and install first:
    pip install ./crates/python
then run:
    python python/smoke_test.py
"""

import math
import os
import tempfile

import surfelflow as sf


def main():
    scene = sf.Scene()
    scene.add([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.6, 0.6], 0.9, [0.8, 0.2, 0.1])
    scene.add([0.0, 0.0, -0.3], [1.0, 0.0, 0.0, 0.0], [0.4, 0.4], 0.5, [0.1, 0.2, 0.8])
    cam = sf.Camera.orbit(0.0, 10.0, resolution=16)
    render = scene.render(cam)
    alpha = render.alpha()
    assert len(alpha) == 16 and len(alpha[0]) == 16
    assert max(max(row) for row in alpha) > 0.5
    print(f"render 16x16, peak alpha {max(max(row) for row in alpha):.3f}, L_d {render.distortion_loss():.4f}")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "scene.ply")
        scene.save(path)
        assert len(sf.Scene.load(path)) == 2
    assert scene.utilization(sf.UTILIZATION_TAU) == 1.0

    a, b, _, _ = sf.schedule(0.5, "gvp")
    assert abs(a * a + b * b - 1.0) < 1e-12
    assert abs(sf.fm_weight(0.5, "gvp") - math.pi ** 2 / 2) < 1e-9

    cube = sf.shape_cloud("cube", 64, seed=1)
    torus = sf.shape_cloud("torus", 64, seed=2)
    picks = sf.fps(cube, 8)
    assert len(set(picks)) == 8
    print(f"chamfer cube/torus {sf.chamfer(cube, torus):.4f}")

    checks = sf.gradcheck()
    worst = max(err for _, _, err in checks)
    assert worst < 1e-4, worst
    print(f"{len(checks)} gradient checks, worst relative error {worst:.2e}")
    print("OK")


if __name__ == "__main__":
    main()
