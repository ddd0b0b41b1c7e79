"""Synthetic ray-cast worlds: a ground plane plus yaw-rotated cuboids.

Rays leave the sensor at pixel-centre angles, so object point counts fall
off with distance just as they do for a real spinning LiDAR.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .conditioning import TextPrompt, condition_input, format_prompt
from .errors import ConfigError
from .geometry import MaskStack, ObjectBox, SensorConfig, normalize_object

log = logging.getLogger(__name__)

GROUND_Z = -1.73
GROUND_INTENSITY = 0.2
BOX_INTENSITY = 0.7
INTENSITY_NOISE = 0.05

# mean (w, l, h) in metres; sizes are jittered by +-10 % when sampled
SIZE_PRIORS = {
    "car": (1.8, 4.2, 1.6),
    "pedestrian": (0.7, 0.8, 1.75),
    "truck": (2.5, 8.0, 3.2),
}
CATEGORIES = tuple(SIZE_PRIORS)
DESCRIPTIONS = {
    "car": ("parked", "driving", "small hatchback", "sedan"),
    "pedestrian": ("walking", "standing", "crossing the road"),
    "truck": ("parked", "box truck", "driving"),
}
SIZE_JITTER = 0.1


def category_scale(category):
    """Half-extent (x, y, z) used to normalize objects of ``category``.

    Covers the largest jittered box so normalized points stay in [-1, 1].
    """
    if category not in SIZE_PRIORS:
        raise ConfigError(f"unknown category {category!r}")
    w, l, h = SIZE_PRIORS[category]
    return 0.5 * (1.0 + SIZE_JITTER) * np.array([l, w, h]) * 1.05


def sample_size(category, rng):
    base = np.array(SIZE_PRIORS[category])
    return base * rng.uniform(1.0 - SIZE_JITTER, 1.0 + SIZE_JITTER, size=3)


def ray_directions(cfg):
    """Unit ray per pixel, ``(H, W, 3)``."""
    theta, phi = cfg.pixel_angles()
    cp = np.cos(phi)[:, None]
    return np.stack(
        [cp * np.cos(theta)[None, :], cp * np.sin(theta)[None, :], np.broadcast_to(np.sin(phi)[:, None], (cfg.height, cfg.width))],
        axis=-1,
    )


def _cast(cfg, boxes, ground_z, use_ground, backend):
    dirs = ray_directions(cfg).reshape(-1, 3)
    arr = np.array([b.as_array() for b in boxes]).reshape(-1, 7)
    dist, hit = _kernels.raycast(dirs, arr, ground_z, cfg.r_max, use_ground, backend=backend)
    return dirs, dist, hit


def _points(dirs, dist, hit, rng):
    sel = np.flatnonzero(hit >= 0)
    xyz = dirs[sel] * dist[sel, None]
    base = np.where(hit[sel] == 0, GROUND_INTENSITY, BOX_INTENSITY)
    inten = np.clip(base + rng.uniform(-INTENSITY_NOISE, INTENSITY_NOISE, sel.size), 0.0, 1.0)
    return np.column_stack([xyz, inten]), sel


def synth_scene(cfg, layout, ground_z=GROUND_Z, rng=None, categories=CATEGORIES, backend=None):
    """Ray-cast one scene; returns the cloud (row-major pixel order) and hit masks.

    ``layout`` is a list of ``(ObjectBox, category)``.  Mask pixels mark
    rays whose nearest hit is a box of that category.
    """
    rng = np.random.default_rng() if rng is None else rng
    categories = tuple(categories)
    for _, cat in layout:
        if cat not in categories:
            raise ConfigError(f"unknown category {cat!r}")
    dirs, dist, hit = _cast(cfg, [b for b, _ in layout], ground_z, True, backend)
    cloud, _ = _points(dirs, dist, hit, rng)
    masks = MaskStack.empty(cfg.height, cfg.width, categories)
    flat = masks.masks.reshape(-1, len(categories))
    for k, (_, cat) in enumerate(layout):
        flat[hit == k + 1, categories.index(cat)] = 1
    return cloud, masks


def synth_object(category, box, cfg, rng=None, backend=None):
    """Box-only ray cast; an empty cloud (with a warning) when nothing is hit."""
    rng = np.random.default_rng() if rng is None else rng
    if category not in SIZE_PRIORS:
        raise ConfigError(f"unknown category {category!r}")
    dirs, dist, hit = _cast(cfg, [box], 0.0, False, backend)
    cloud, _ = _points(dirs, dist, hit, rng)
    if cloud.shape[0] == 0:
        log.warning("box %s is outside the sensor field of view", box)
    return cloud


def random_box(category, rng, r_range=(5.0, 30.0), ground_z=GROUND_Z):
    """One box at a random bearing and distance, resting on the ground."""
    w, l, h = sample_size(category, rng)
    dist = rng.uniform(*r_range)
    bearing = rng.uniform(-np.pi, np.pi)
    yaw = rng.uniform(-np.pi, np.pi)
    return ObjectBox(dist * np.cos(bearing), dist * np.sin(bearing), ground_z + h / 2.0, w, l, h, yaw)


def resample_points(points, n, rng):
    """Exactly ``n`` rows: without replacement when possible, else with."""
    replace = points.shape[0] < n
    return points[rng.choice(points.shape[0], n, replace=replace)]


@dataclass
class ObjectSample:
    category: str
    box: ObjectBox
    prompt: TextPrompt
    cloud: np.ndarray  # world frame, as ray-cast
    x0: np.ndarray  # (N, 4) normalized training points
    cond_in: np.ndarray


def build_object_dataset(n, rng, cfg=None, n_points=1024, min_hits=16, encoder=None, categories=CATEGORIES):
    """``n`` ray-cast objects with prompts, normalized point sets and conditions."""
    cfg = SensorConfig() if cfg is None else cfg
    out = []
    while len(out) < n:
        cat = categories[int(rng.integers(len(categories)))]
        box = random_box(cat, rng)
        cloud = synth_object(cat, box, cfg, rng)
        if cloud.shape[0] < min_hits:
            continue
        desc = DESCRIPTIONS[cat][int(rng.integers(len(DESCRIPTIONS[cat])))]
        prompt = format_prompt(cat, desc)
        x0 = resample_points(normalize_object(cloud, box, category_scale(cat)), n_points, rng)
        out.append(ObjectSample(cat, box, prompt, cloud, x0, condition_input(prompt, box, encoder)))
    return out


def random_layout(n_objects, rng, extent=(-30.0, 30.0, -30.0, 30.0), ground_z=GROUND_Z, categories=CATEGORIES):
    from .pipeline import place_objects_uniform

    priors = {c: SIZE_PRIORS[c] for c in categories}
    return place_objects_uniform(n_objects, extent, priors, rng, ground_z=ground_z)


@dataclass
class SceneSample:
    cloud: np.ndarray
    image: np.ndarray  # (H, W, 2) scene range image
    object_image: np.ndarray  # (H, W, 2) object-only range image
    masks: MaskStack
    layout: list


def build_scene_dataset(n, rng, cfg, objects_per_scene=(2, 6), ground_z=GROUND_Z, categories=CATEGORIES):
    """Scenes with their range images; the object image is the scene image
    restricted to box-hit pixels."""
    from .geometry import project_to_range

    out = []
    for _ in range(n):
        k = int(rng.integers(objects_per_scene[0], objects_per_scene[1] + 1))
        layout = random_layout(k, rng, ground_z=ground_z, categories=categories)
        cloud, masks = synth_scene(cfg, layout, ground_z, rng, categories)
        img, _ = project_to_range(cloud, cfg)
        obj_img = img * masks.masks.any(axis=-1, keepdims=True)
        out.append(SceneSample(cloud, img, obj_img, masks, layout))
    return out
