"""Tiny models and the finite-difference gradient harness shared by several test modules."""
import numpy as np

from objlidar.conditioning import condition_input, format_prompt
from objlidar.diffusion import scaled_schedule
from objlidar.geometry import MaskStack, ObjectBox
from objlidar.nn import (
    ObjectNetConfig,
    SceneNetConfig,
    init_controller_params,
    init_object_params,
    init_scene_params,
    object_loss,
    scene_loss,
)
from objlidar.osa import build_masked_channels, combined_scene_loss, osa_loss

from oracles import central_difference, relative_errors

TINY_OBJECT = ObjectNetConfig(
    voxel=4, patch=2, d_model=4, blocks=1, ff_hidden=6, cond_dim=4, text_dim=6, fourier_freqs=1, n_points=6
)
TINY_SCENE = SceneNetConfig(width=2, depth=1, time_dim=4)
TINY_HW = (2, 4)


class _SixDimEncoder:
    dim = 6

    def encode(self, prompt):
        v = np.arange(1.0, 7.0)
        return v / np.linalg.norm(v)


def tiny_object_problem(seed=0):
    rng = np.random.default_rng(seed)
    params = init_object_params(TINY_OBJECT, rng)
    params.randomize(rng, 0.5)
    x0 = rng.uniform(-0.9, 0.9, size=(2, TINY_OBJECT.n_points, 4))
    eps = rng.standard_normal(x0.shape)
    cond = np.stack([
        condition_input(format_prompt("car"), ObjectBox(3, -2, 0, 1.8, 4.2, 1.6, 0.4), _SixDimEncoder(), 1),
        condition_input(format_prompt("truck"), ObjectBox(-9, 5, 0, 2.5, 8, 3.2, -1.0), _SixDimEncoder(), 1),
    ])
    sched = scaled_schedule(10)
    t = np.array([3, 8])

    def loss():
        return object_loss(x0, t, eps, cond, sched, params, TINY_OBJECT)

    return params, loss


def tiny_scene_images(rng, n=2):
    H, W = TINY_HW
    img = rng.uniform(0, 1, size=(n, H, W, 2))
    labels = rng.integers(-1, 2, size=(n, H, W))
    masks = [MaskStack(np.stack([lab == 0, lab == 1], -1).astype(np.uint8), ("car", "truck")) for lab in labels]
    obj = np.stack([im * m.masks.any(-1)[..., None] for im, m in zip(img, masks)])
    return img, obj, masks


def tiny_scene_problem(kind, seed=0, lambda_osa=1.0):
    """``kind`` is one of "scene", "osa", "combined"."""
    rng = np.random.default_rng(seed)
    params = init_scene_params(TINY_SCENE, rng)
    init_controller_params(TINY_SCENE, rng, params)
    params.randomize(rng, 0.5)
    img, obj, masks = tiny_scene_images(rng)
    sched = scaled_schedule(10)
    t = np.array([2, 7])
    if kind == "scene":
        eps = rng.standard_normal(img.shape)
        return params, lambda: scene_loss(img, obj, t, eps, sched, params, TINY_SCENE)
    if kind == "osa":
        masked = [build_masked_channels(im, m) for im, m in zip(img, masks)]
        eps = [rng.standard_normal(mt.groups.shape) for mt in masked]
        return params, lambda: osa_loss(masked, list(t), eps, sched, params, TINY_SCENE)
    if kind == "combined":
        return params, lambda: combined_scene_loss(
            img, obj, masks, t, np.random.default_rng(99), sched, params, TINY_SCENE, lambda_osa
        )
    raise ValueError(kind)


def gradient_check(params, loss, h=1e-4):
    """Worst relative error between analytic and central-difference gradients over all parameters."""
    loss()
    analytic = {n: g.copy() for n, g in params.grads.items()}
    worst = 0.0
    for name, value in params.values.items():
        numeric = central_difference(loss, value, h)
        worst = max(worst, float(relative_errors(analytic[name], numeric).max()))
    return worst


TOY_CONFIG = """\
[sensor]
height = 32
width = 256
[object]
n_points = 128
[scene]
width = 8
[train_object]
steps = 20
batch_size = 4
[train_scene]
steps = 10
batch_size = 1
[data]
n_objects = 8
n_scenes = 4
[diffusion]
steps = 10
"""


def run_e2e(root, seed=0):
    """synth -> train-object -> train-scene -> gen-scene -> eval under ``root``.

    Returns the exit codes and a map of every produced file (relative path) to its bytes.
    """
    from pathlib import Path

    from objlidar.cli import dispatch

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "toy.ini"
    cfg.write_text(TOY_CONFIG)
    g = ["--config", str(cfg), "--seed", str(seed)]
    steps = [
        ["synth", "--out", str(root / "data")],
        ["train-object", "--data", str(root / "data"), "--out", str(root / "obj")],
        ["train-scene", "--data", str(root / "data"), "--osa-lambda", "1", "--out", str(root / "scene")],
        ["gen-scene", "--objects", str(root / "data/objects/scenario.txt"), "--object-ckpt", str(root / "obj/object.ckpt"),
         "--ckpt", str(root / "scene/scene.ckpt"), "--count", "2", "--out", str(root / "gen")],
        ["eval", "--real", str(root / "data/scenes"), "--gen", str(root / "gen/scenes"), "--out", str(root / "eval")],
    ]
    codes = [dispatch(g + s) for s in steps]
    files = {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file() and p.name != "toy.ini"
    }
    return codes, files
