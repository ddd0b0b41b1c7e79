"""Coordinate plumbing between point clouds, range images, BEV grids and voxels.

Point clouds are plain ``(N, 4)`` float arrays of ``x, y, z, intensity``.
Range images are ``(H, W, 2)`` arrays of normalized depth and intensity,
with ``(0, 0)`` marking a pixel that received no return.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, ValidationError

# slack (metres) for points that sit on a box face when masks are rasterized
SURFACE_TOL = 1e-9


@dataclass(frozen=True)
class SensorConfig:
    height: int = 64
    width: int = 1024
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(-25.0)
    r_max: float = 80.0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ConfigError(f"range image must be at least 2x2, got {self.height}x{self.width}")
        if not self.fov_up > self.fov_down:
            raise ConfigError("fov_up must exceed fov_down")
        if not self.r_max > 0:
            raise ConfigError("r_max must be positive")

    @property
    def fov(self):
        return self.fov_up - self.fov_down

    def pixel_angles(self):
        """Pixel-centre azimuth ``(W,)`` and elevation ``(H,)`` in radians."""
        u = np.arange(self.width)
        v = np.arange(self.height)
        theta = np.pi * (1.0 - 2.0 * (u + 0.5) / self.width)
        phi = self.fov_down + (1.0 - (v + 0.5) / self.height) * self.fov
        return theta, phi


@dataclass(frozen=True)
class ObjectBox:
    """Yaw-rotated 3D box. ``l`` spans the local x (heading) axis, ``w`` local y."""

    x_c: float
    y_c: float
    z_c: float
    w: float
    l: float
    h: float
    r: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValidationError(f"box dimensions must be positive: {self}")

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))

    def as_array(self):
        return np.array([self.x_c, self.y_c, self.z_c, self.w, self.l, self.h, self.r])

    @property
    def center(self):
        return np.array([self.x_c, self.y_c, self.z_c])

    def bev_corners(self):
        """Four ground-plane corners, counter-clockwise."""
        c, s = math.cos(self.r), math.sin(self.r)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x_c, self.y_c])


@dataclass
class ProjectionStats:
    n_input: int
    n_projected: int
    n_dropped: int
    winner: np.ndarray  # (H, W) index of the point owning each pixel, -1 if none

    @property
    def n_pixels(self):
        return int((self.winner >= 0).sum())


@dataclass
class MaskStack:
    masks: np.ndarray  # (H, W, C) uint8
    categories: tuple

    def __post_init__(self):
        if self.masks.ndim != 3 or self.masks.shape[2] != len(self.categories):
            raise ValidationError("mask channels must match the category list")
        if len(self.categories) < 1:
            raise ValidationError("a MaskStack needs at least one category")
        if self.masks.size and self.masks.max() > 1:
            raise ValidationError("mask entries must be 0 or 1")

    @classmethod
    def empty(cls, height, width, categories):
        categories = tuple(categories)
        return cls(np.zeros((height, width, len(categories)), dtype=np.uint8), categories)

    def channel(self, category):
        return self.masks[:, :, self.categories.index(category)]


def as_cloud(points):
    """Validate and return an ``(N, 4)`` float64 copy of ``points``."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4))
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValidationError(f"point cloud must be (N, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("point cloud contains non-finite values")
    return arr


def project_to_range(cloud, cfg, backend=None):
    """Spherical projection of ``cloud`` into a range image.

    Returns ``(image, stats)``.  Points outside the vertical field of view
    (beyond half a pixel of slack) or at the origin are dropped; colliding
    points resolve to the nearest one.
    """
    cloud = as_cloud(cloud)
    H, W = cfg.height, cfg.width
    img = np.zeros((H, W, 2))
    n = cloud.shape[0]
    if n == 0:
        return img, ProjectionStats(0, 0, 0, np.full((H, W), -1, dtype=np.int64))

    x, y, z = cloud[:, 0], cloud[:, 1], cloud[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    ok = r > 0
    safe_r = np.where(ok, r, 1.0)
    theta = np.arctan2(y, x)
    phi = np.arcsin(np.clip(z / safe_r, -1.0, 1.0))

    u_f = 0.5 * (1.0 - theta / np.pi) * W
    v_f = (1.0 - (phi - cfg.fov_down) / cfg.fov) * H
    ok &= (v_f >= -0.5) & (v_f <= H + 0.5) & (u_f >= -0.5) & (u_f <= W + 0.5)
    u = np.clip(np.floor(u_f), 0, W - 1).astype(np.int64)
    v = np.clip(np.floor(v_f), 0, H - 1).astype(np.int64)

    idx = np.flatnonzero(ok)
    flat_winner = _kernels.scatter_nearest(v[idx] * W + u[idx], r[idx], H * W, backend=backend)
    hit = flat_winner >= 0
    winner = np.full(H * W, -1, dtype=np.int64)
    winner[hit] = idx[flat_winner[hit]]

    flat = img.reshape(H * W, 2)
    flat[hit, 0] = np.minimum(r[winner[hit]] / cfg.r_max, 1.0)
    flat[hit, 1] = cloud[winner[hit], 3]
    stats = ProjectionStats(n, int(idx.size), int(n - idx.size), winner.reshape(H, W))
    return img, stats


def unproject_range(img, cfg):
    """Pixel-centre reconstruction of every pixel with positive depth."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[:2] != (cfg.height, cfg.width) or img.ndim != 3 or img.shape[2] < 2:
        raise ConfigError(f"range image {img.shape} does not match sensor {cfg.height}x{cfg.width}")
    theta, phi = cfg.pixel_angles()
    v, u = np.nonzero(img[:, :, 0] > 0)
    r = img[v, u, 0] * cfg.r_max
    cp = np.cos(phi[v])
    pts = np.column_stack([
        r * cp * np.cos(theta[u]),
        r * cp * np.sin(theta[u]),
        r * np.sin(phi[v]),
        img[v, u, 1],
    ])
    return pts.reshape(-1, 4)


def projection_error_bound(r, cfg):
    """Worst-case position error of a projection round trip at range ``r``."""
    return r * max(math.pi / cfg.width, cfg.fov / cfg.height) + cfg.r_max / 2.0**16


def bev_histogram(cloud, grid=100, extent=50.0):
    """Normalized ``grid x grid`` count histogram over ``[-extent, extent)^2``.

    Indexed ``[ix, iy]``.  All-zero when no point falls inside the extent.
    """
    if grid < 1 or not extent > 0:
        raise ConfigError("grid must be >= 1 and extent > 0")
    cloud = as_cloud(cloud)
    hist = np.zeros((grid, grid))
    if cloud.shape[0] == 0:
        return hist
    ix = np.floor((cloud[:, 0] + extent) / (2.0 * extent) * grid).astype(np.int64)
    iy = np.floor((cloud[:, 1] + extent) / (2.0 * extent) * grid).astype(np.int64)
    keep = (ix >= 0) & (ix < grid) & (iy >= 0) & (iy < grid)
    if not keep.any():
        return hist
    np.add.at(hist, (ix[keep], iy[keep]), 1.0)
    return hist / keep.sum()


def voxel_indices(xyz, resolution):
    """Clamped integer cell of normalized ``[-1, 1]`` coordinates."""
    idx = np.floor((np.asarray(xyz) + 1.0) / 2.0 * resolution).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def voxelize(cloud, resolution, backend=None):
    """``(V, V, V, 2)`` grid of max-normalized occupancy and mean intensity."""
    if resolution < 2:
        raise ConfigError("voxel resolution must be >= 2")
    V = resolution
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    grid = np.zeros((V, V, V, 2))
    if pts.shape[0] == 0:
        return grid
    idx = voxel_indices(pts[:, :3], V)
    flat = (idx[:, 0] * V + idx[:, 1]) * V + idx[:, 2]
    counts, sums = _kernels.voxel_accumulate(flat, pts[:, 3], V ** 3, backend=backend)
    occ = counts / counts.max()
    mean = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    grid[..., 0] = occ.reshape(V, V, V)
    grid[..., 1] = mean.reshape(V, V, V)
    return grid


def _check_scale(cat_scale):
    scale = np.asarray(cat_scale, dtype=np.float64).reshape(3)
    if np.any(scale <= 0):
        raise ConfigError(f"category scale must be positive, got {scale}")
    return scale


def to_box_frame(xyz, box):
    """World coordinates to the box-centred, yaw-aligned frame."""
    c, s = math.cos(box.r), math.sin(box.r)
    d = np.asarray(xyz, dtype=np.float64)[..., :3] - box.center
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)


def from_box_frame(local, box):
    c, s = math.cos(box.r), math.sin(box.r)
    local = np.asarray(local, dtype=np.float64)
    return np.stack([
        c * local[..., 0] - s * local[..., 1] + box.x_c,
        s * local[..., 0] + c * local[..., 1] + box.y_c,
        local[..., 2] + box.z_c,
    ], axis=-1)


def normalize_object(cloud, box, cat_scale):
    """Box-frame coordinates divided by the category half-extents, clamped to [-1, 1].

    Intensity is mapped from [0, 1] to [-1, 1].
    """
    scale = _check_scale(cat_scale)
    cloud = as_cloud(cloud)
    out = np.empty_like(cloud)
    out[:, :3] = np.clip(to_box_frame(cloud, box) / scale, -1.0, 1.0)
    out[:, 3] = np.clip(2.0 * cloud[:, 3] - 1.0, -1.0, 1.0)
    return out


def denormalize_object(normed, box, cat_scale):
    scale = _check_scale(cat_scale)
    normed = np.asarray(normed, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(normed)
    out[:, :3] = from_box_frame(normed[:, :3] * scale, box)
    out[:, 3] = (normed[:, 3] + 1.0) / 2.0
    return out


def points_in_box(xyz, box, tol=0.0):
    """Closed-interval containment test, boolean per point.

    ``tol`` widens every half-extent; surface points that went through the
    inverse-yaw rotation can land a few ulps outside otherwise.
    """
    local = to_box_frame(xyz, box)
    return (
        (np.abs(local[..., 0]) <= box.l / 2.0 + tol)
        & (np.abs(local[..., 1]) <= box.w / 2.0 + tol)
        & (np.abs(local[..., 2]) <= box.h / 2.0 + tol)
    )


def rasterize_boxes(boxes, cloud, cfg, categories, backend=None):
    """Per-category pixel masks of projection winners lying inside a box.

    ``boxes`` is a list of ``(ObjectBox, category)``.  A pixel whose winning
    point sits in several boxes takes the first matching box in list order.
    """
    categories = tuple(categories)
    for _, cat in boxes:
        if cat not in categories:
            raise ConfigError(f"unknown category {cat!r}; expected one of {categories}")
    stack = MaskStack.empty(cfg.height, cfg.width, categories)
    if not boxes:
        return stack
    cloud = as_cloud(cloud)
    _, stats = project_to_range(cloud, cfg, backend=backend)
    v, u = np.nonzero(stats.winner >= 0)
    pts = cloud[stats.winner[v, u]]
    assigned = np.zeros(v.size, dtype=bool)
    for box, cat in boxes:
        inside = points_in_box(pts, box, SURFACE_TOL) & ~assigned
        stack.masks[v[inside], u[inside], categories.index(cat)] = 1
        assigned |= inside
    return stack
