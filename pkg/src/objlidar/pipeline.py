"""Object-first, scene-later generation, completion and augmentation."""
import shlex

import numpy as np
from shapely.geometry import Polygon

from .conditioning import condition_input, format_prompt
from .diffusion import repaint_loop, sample_loop
from .errors import CapacityError, CheckpointError, ConfigError, ValidationError
from .geometry import (
    ObjectBox,
    as_cloud,
    denormalize_object,
    points_in_box,
    project_to_range,
    rasterize_boxes,
    unproject_range,
)
from .nn.object_denoiser import ObjectNetConfig, object_denoiser_forward
from .nn.scene_unet import SceneNetConfig, controller_forward, scene_denoiser_forward

EGO_BOX = ObjectBox(0.0, 0.0, 0.0, 2.0, 4.5, 2.0, 0.0)
MAX_PLACEMENT_TRIES = 100


def _child_rngs(rng, n):
    return rng.spawn(n) if n else []


# ---------------------------------------------------------------- objects

def generate_objects(conds, params, sched, rng, cfg=None, encoder=None, cat_scale=None):
    """Sample one world-frame cloud per ``(TextPrompt, ObjectBox)`` condition.

    Each condition gets its own child generator spawned from ``rng``.
    ``cat_scale`` maps category to normalization half-extent and defaults
    to the synthetic priors.
    """
    if not conds:
        return []
    if params is None or not params.names("obj."):
        raise CheckpointError("object denoiser parameters are missing")
    if cat_scale is None:
        from .datagen import category_scale as cat_scale
    cfg = ObjectNetConfig.from_params(params, 1024) if cfg is None else cfg
    out = []
    for (prompt, box), child in zip(conds, _child_rngs(rng, len(conds))):
        cond = condition_input(prompt, box, encoder, cfg.fourier_freqs)

        def denoiser(x, t, cond=cond):
            return object_denoiser_forward(x, t, cond, params, cfg)

        x0 = np.clip(sample_loop((cfg.n_points, 4), denoiser, sched, child), -1.0, 1.0)
        out.append(denormalize_object(x0, box, cat_scale(prompt.category)))
    return out


def compose_object_image(objects, cfg, labels):
    """Project world-frame objects into one range image plus box masks.

    ``objects`` is a list of ``(cloud, ObjectBox, category)``.
    """
    labels = tuple(labels)
    for _, _, cat in objects:
        if cat not in labels:
            raise ConfigError(f"unknown category {cat!r}; expected one of {labels}")
    cloud = np.concatenate([as_cloud(c) for c, _, _ in objects]) if objects else np.zeros((0, 4))
    img, _ = project_to_range(cloud, cfg)
    masks = rasterize_boxes([(b, c) for _, b, c in objects], cloud, cfg, labels)
    return img, masks


# ---------------------------------------------------------------- scenes

def _scene_cfg(params, cfg):
    if params is None or not params.names("den."):
        raise CheckpointError("scene denoiser parameters are missing")
    return SceneNetConfig.from_params(params) if cfg is None else cfg


def _finish_image(x):
    img = np.clip(x, 0.0, 1.0)
    img[..., 1] *= img[..., 0] > 0  # no intensity without a return
    return img


def scene_denoiser(params, cfg, obj_img=None):
    """``f(x_t, t)`` for the sampler; with ``obj_img`` the controller adds its maps."""
    def denoiser(x, t):
        xb = x[None]
        control = None
        if obj_img is not None:
            control = controller_forward(obj_img[None], xb, t, params, cfg)
        return scene_denoiser_forward(xb, t, params, cfg, control)[0]

    return denoiser


def generate_scene(obj_img, params, sched, rng, cfg=None, sensor=None):
    """Controller-guided scene sample; ``obj_img=None`` samples unconditionally.

    Returns the clamped range image and, when ``sensor`` is given, its
    unprojected cloud (otherwise ``None``).
    """
    cfg = _scene_cfg(params, cfg)
    if obj_img is not None:
        obj_img = np.asarray(obj_img, dtype=np.float64)
        if obj_img.ndim != 3 or obj_img.shape[-1] != 2:
            raise ValidationError(f"object image must be (H, W, 2), got {obj_img.shape}")
        if sensor is not None and obj_img.shape[:2] != (sensor.height, sensor.width):
            raise ValidationError("object image does not match the sensor resolution")
        if not params.names("ctl."):
            raise CheckpointError("controller parameters are missing")
        shape = obj_img.shape
    else:
        if sensor is None:
            raise ValidationError("unconditional generation needs a sensor config for the image size")
        shape = (sensor.height, sensor.width, 2)
    cfg.check_shape(shape[0], shape[1])
    x = sample_loop(shape, scene_denoiser(params, cfg, obj_img), sched, rng)
    img = _finish_image(x)
    cloud = unproject_range(img, sensor) if sensor is not None else None
    return img, cloud


def sparse_rows_mask(height, stride=4):
    if height % stride:
        raise ValidationError(f"image height {height} is not divisible by {stride}")
    return (np.arange(height) % stride == 0).astype(np.uint8)


def _complete(known, mask, params, sched, rng, cfg, obj_img):
    cfg = _scene_cfg(params, cfg)
    cfg.check_shape(known.shape[0], known.shape[1])
    x = repaint_loop(known, mask, scene_denoiser(params, cfg, obj_img), sched, rng)
    return np.where(mask.astype(bool), known, _finish_image(x))


def sparse_to_dense(sparse, params, sched, rng, cfg=None, stride=4, obj_img=None):
    """Fill the rows between every ``stride``-th row; known rows are returned verbatim.

    Returns ``(image, n_conditioning_rows)``.
    """
    sparse = np.asarray(sparse, dtype=np.float64)
    if sparse.ndim != 3 or sparse.shape[-1] != 2:
        raise ValidationError(f"range image must be (H, W, 2), got {sparse.shape}")
    if np.any(sparse < 0) or np.any(sparse > 1):
        raise ValidationError("range image values must lie in [0, 1]")
    rows = sparse_rows_mask(sparse.shape[0], stride)
    if not np.any(sparse[rows.astype(bool), :, 0] > 0):
        raise ValidationError("the conditioning rows carry no returns")
    out = _complete(sparse, rows[:, None, None], params, sched, rng, cfg, obj_img)
    return out, int(rows.sum())


def partial_completion(partial, known_mask, params, sched, rng, cfg=None, obj_img=None):
    """Repaint-conditioned completion with an arbitrary ``(H, W)`` binary mask."""
    partial = np.asarray(partial, dtype=np.float64)
    mask = np.asarray(known_mask)
    if partial.ndim != 3 or partial.shape[-1] != 2:
        raise ValidationError(f"range image must be (H, W, 2), got {partial.shape}")
    if mask.shape != partial.shape[:2]:
        raise ValidationError(f"mask {mask.shape} does not match image {partial.shape[:2]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("known mask must be binary")
    if np.any(partial < 0) or np.any(partial > 1):
        raise ValidationError("range image values must lie in [0, 1]")
    return _complete(partial, mask[..., None], params, sched, rng, cfg, obj_img)


# ---------------------------------------------------------------- augmentation

def _footprint(box):
    return Polygon(box.bev_corners())


def place_objects_uniform(n, extent, priors, rng, ground_z=-1.73, categories=None, avoid_ego=True):
    """Collision-free boxes with uniformly drawn BEV centres.

    ``extent`` is ``(x_min, x_max, y_min, y_max)`` and ``priors`` maps
    category to mean ``(w, l, h)`` (jittered +-10 %).  Returns a list of
    ``(ObjectBox, category)``.  The ego vehicle counts as an occupied box
    unless ``avoid_ego`` is false.
    """
    if n < 0:
        raise ValidationError("n must be non-negative")
    names = list(priors) if categories is None else list(categories)
    x0, x1, y0, y1 = extent
    taken = [_footprint(EGO_BOX)] if avoid_ego else []
    out = []
    for _ in range(n):
        for _attempt in range(MAX_PLACEMENT_TRIES):
            cat = names[int(rng.integers(len(names)))]
            w, l, h = np.asarray(priors[cat]) * rng.uniform(0.9, 1.1, size=3)
            # (-pi, pi]: flip the excluded endpoint of a half-open draw
            yaw = -rng.uniform(-np.pi, np.pi)
            box = ObjectBox(rng.uniform(x0, x1), rng.uniform(y0, y1), ground_z + h / 2.0, w, l, h, yaw)
            poly = _footprint(box)
            if all(poly.intersection(p).area == 0.0 for p in taken):
                taken.append(poly)
                out.append((box, cat))
                break
        else:
            raise CapacityError(f"placed only {len(out)} of {n} boxes", len(out))
    return out


def augment_scene(scene, inserts):
    """Drop scene points inside any insert box, then append the insert clouds."""
    scene = as_cloud(scene)
    keep = np.ones(scene.shape[0], dtype=bool)
    for _, box in inserts:
        keep &= ~points_in_box(scene[:, :3], box)
    return np.concatenate([scene[keep]] + [as_cloud(c) for c, _ in inserts])


# ---------------------------------------------------------------- scenario files

def parse_scenario(text):
    """``category x y z w l h r "description"`` per line; ``#`` starts a comment."""
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = shlex.split(line)
        if len(parts) not in (8, 9):
            raise ValidationError(f"scenario line {lineno}: expected 8 or 9 fields, got {len(parts)}")
        try:
            values = [float(v) for v in parts[1:8]]
        except ValueError as exc:
            raise ValidationError(f"scenario line {lineno}: {exc}") from None
        box = ObjectBox(*values)
        items.append((format_prompt(parts[0], parts[8] if len(parts) == 9 else ""), box))
    return items


def read_scenario(path):
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def format_scenario(items):
    lines = []
    for prompt, b in items:
        nums = " ".join(repr(float(v)) for v in b.as_array())
        desc = prompt.description.replace("\\", "\\\\").replace('"', '\\"')
        lines.append(f'{prompt.category} {nums} "{desc}"')
    return "".join(line + "\n" for line in lines)


def write_scenario(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_scenario(items))
