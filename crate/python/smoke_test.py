"""Smoke test for the Python extension.

Build and stage the module first:

    cargo build --release -p vasplat-py --features extension-module
    cp target/release/libvasplat_py.so python/vasplat.so
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import vasplat  # noqa: E402


def main() -> None:
    scene = vasplat.Scene.synthetic("desk", seed=1, gaussians=30, sh_degree=2)
    assert len(scene) == 90 and scene.sh_degree == 2

    cam = vasplat.Camera.from_fov_y(24, 24, 50.0)
    pose = vasplat.Pose.look_at([0.0, 0.6, 2.4], [0.0, 0.0, 0.0])
    assert abs(pose.rotation_error_deg(vasplat.Pose.from_6d(pose.to_6d(), pose.translation()))) < 1e-9

    static = vasplat.Model.static_only(scene)
    adaptive = vasplat.Model.with_head(scene, hidden_dim=8, seed=3)
    a = static.render(pose, cam)
    b = adaptive.render(pose, cam)
    assert len(a) == 24 * 24 * 3
    # a fresh head renders exactly like the static model
    assert max(abs(x - y) for x, y in zip(a, b)) <= 1e-6
    assert math.isinf(vasplat.psnr(a, b, 24, 24)) or vasplat.psnr(a, b, 24, 24) >= 100.0
    assert abs(vasplat.ssim(a, a, 24, 24) - 1.0) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        ply = os.path.join(tmp, "scene.ply")
        scene.write_ply(ply)
        back = vasplat.Scene.read_ply(ply)
        assert len(back) == len(scene)

        data = os.path.join(tmp, "data")
        n = vasplat.synth_dataset(data, "desk", seed=2, gaussians=20, train_views=4, test_views=2, size=16)
        assert n == 6
        base = vasplat.fit_static(data, steps=3, sh_degree=2)
        view = vasplat.fit_view(base, data, steps=3)
        psnr, ssim, mse = vasplat.evaluate(view, data, "test")
        assert psnr > 10.0 and 0.0 < ssim <= 1.0 and mse >= 0.0

        ckpt = os.path.join(tmp, "model.ckpt")
        view.write_checkpoint(ckpt)
        again = vasplat.Model.read_checkpoint(ckpt)
        assert again.is_adaptive
        assert again.render(pose, cam) == view.render(pose, cam)

    print("python smoke test ok")


if __name__ == "__main__":
    main()
