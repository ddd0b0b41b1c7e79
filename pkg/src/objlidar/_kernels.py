"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``OBJLIDAR_DISABLE_NUMBA`` is unset or ``0``.  Both paths return
bit-identical results; ``tests/test_kernels.py`` checks this.

Every public function accepts ``backend="numba" | "numpy" | None`` so the
two paths can be compared directly.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("OBJLIDAR_DISABLE_NUMBA", "0") not in ("", "0")
HAVE_NUMBA = numba is not None
DEFAULT_BACKEND = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def _resolve(backend):
    backend = backend or DEFAULT_BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend


if HAVE_NUMBA:
    njit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def njit(fn):
        return fn


# --------------------------------------------------------------------------
# nearest-wins scatter (range projection)
# --------------------------------------------------------------------------

@njit
def _scatter_nearest_nb(pix, r, n_pix):
    winner = np.full(n_pix, -1, dtype=np.int64)
    for i in range(pix.shape[0]):
        p = pix[i]
        w = winner[p]
        if w < 0 or r[i] < r[w]:
            winner[p] = i
    return winner


def _scatter_nearest_np(pix, r, n_pix):
    winner = np.full(n_pix, -1, dtype=np.int64)
    if pix.size == 0:
        return winner
    # sort by (r, index); the first entry per pixel is the nearest, lowest index on ties
    order = np.lexsort((np.arange(pix.size), r))
    uniq, first = np.unique(pix[order], return_index=True)
    winner[uniq] = order[first]
    return winner


def scatter_nearest(pix, r, n_pix, backend=None):
    """Index of the smallest-``r`` point landing in each flat pixel, or -1."""
    pix = np.ascontiguousarray(pix, dtype=np.int64)
    r = np.ascontiguousarray(r, dtype=np.float64)
    if _resolve(backend) == "numba":
        return _scatter_nearest_nb(pix, r, int(n_pix))
    return _scatter_nearest_np(pix, r, int(n_pix))


# --------------------------------------------------------------------------
# voxel accumulation
# --------------------------------------------------------------------------

@njit
def _voxel_accumulate_nb(cell, values, n_cells):
    counts = np.zeros(n_cells, dtype=np.float64)
    sums = np.zeros(n_cells, dtype=np.float64)
    for i in range(cell.shape[0]):
        counts[cell[i]] += 1.0
        sums[cell[i]] += values[i]
    return counts, sums


def _voxel_accumulate_np(cell, values, n_cells):
    counts = np.bincount(cell, minlength=n_cells).astype(np.float64)
    sums = np.bincount(cell, weights=values, minlength=n_cells)
    return counts, sums


def voxel_accumulate(cell, values, n_cells, backend=None):
    """Per-cell point count and value sum for flat cell indices."""
    cell = np.ascontiguousarray(cell, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if _resolve(backend) == "numba":
        return _voxel_accumulate_nb(cell, values, int(n_cells))
    return _voxel_accumulate_np(cell, values, int(n_cells))


# --------------------------------------------------------------------------
# nearest-neighbour squared distances (Chamfer)
# --------------------------------------------------------------------------

@njit
def _nn_sqdist_nb(p, q):
    out = np.empty(p.shape[0], dtype=np.float64)
    for i in range(p.shape[0]):
        best = np.inf
        px, py, pz = p[i, 0], p[i, 1], p[i, 2]
        for j in range(q.shape[0]):
            dx = px - q[j, 0]
            dy = py - q[j, 1]
            dz = pz - q[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        out[i] = best
    return out


def _nn_sqdist_np(p, q, chunk=2048):
    out = np.empty(p.shape[0], dtype=np.float64)
    for s in range(0, p.shape[0], chunk):
        blk = p[s:s + chunk]
        dx = blk[:, None, 0] - q[None, :, 0]
        dy = blk[:, None, 1] - q[None, :, 1]
        dz = blk[:, None, 2] - q[None, :, 2]
        out[s:s + chunk] = (dx * dx + dy * dy + dz * dz).min(axis=1)
    return out


def nn_sqdist(p, q, backend=None):
    """For each row of ``p`` the squared distance to its nearest row of ``q``."""
    p = np.ascontiguousarray(p[:, :3], dtype=np.float64)
    q = np.ascontiguousarray(q[:, :3], dtype=np.float64)
    if _resolve(backend) == "numba":
        return _nn_sqdist_nb(p, q)
    return _nn_sqdist_np(p, q)


# --------------------------------------------------------------------------
# ray casting against a ground plane and yaw-rotated cuboids
# --------------------------------------------------------------------------
# boxes rows: x_c, y_c, z_c, w, l, h, yaw; l spans the local x axis, w local y.
# hit ids: -1 miss, 0 ground, k + 1 for box k.

@njit
def _raycast_nb(dirs, boxes, ground_z, use_ground, r_max):
    n = dirs.shape[0]
    dist = np.full(n, np.inf)
    hit = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = np.inf
        best_id = -1
        if use_ground and dz < 0.0 and ground_z < 0.0:
            t = ground_z / dz
            if t < best:
                best = t
                best_id = 0
        for k in range(boxes.shape[0]):
            c = boxes[k, 7]
            s = boxes[k, 8]
            ox, oy, oz = -boxes[k, 0], -boxes[k, 1], -boxes[k, 2]
            lox = c * ox + s * oy
            loy = -s * ox + c * oy
            ldx = c * dx + s * dy
            ldy = -s * dx + c * dy
            half = (boxes[k, 4] * 0.5, boxes[k, 3] * 0.5, boxes[k, 5] * 0.5)
            o = (lox, loy, oz)
            d = (ldx, ldy, dz)
            tmin = -np.inf
            tmax = np.inf
            ok = True
            for a in range(3):
                if d[a] == 0.0:
                    if o[a] < -half[a] or o[a] > half[a]:
                        ok = False
                        break
                else:
                    t1 = (-half[a] - o[a]) / d[a]
                    t2 = (half[a] - o[a]) / d[a]
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tmin:
                        tmin = t1
                    if t2 < tmax:
                        tmax = t2
            if not ok or tmin > tmax or tmax <= 0.0:
                continue
            t = tmin if tmin > 0.0 else tmax
            if t < best:
                best = t
                best_id = k + 1
        if best <= r_max:
            dist[i] = best
            hit[i] = best_id
    return dist, hit


def _raycast_np(dirs, boxes, ground_z, use_ground, r_max):
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    if use_ground and ground_z < 0.0:
        down = dz < 0.0
        t = np.full(n, np.inf)
        t[down] = ground_z / dz[down]
        sel = t < best
        best[sel] = t[sel]
        best_id[sel] = 0
    for k in range(boxes.shape[0]):
        c = boxes[k, 7]
        s = boxes[k, 8]
        ox, oy, oz = -boxes[k, 0], -boxes[k, 1], -boxes[k, 2]
        o = (c * ox + s * oy, -s * ox + c * oy, oz)
        d = (c * dx + s * dy, -s * dx + c * dy, dz)
        half = (boxes[k, 4] * 0.5, boxes[k, 3] * 0.5, boxes[k, 5] * 0.5)
        tmin = np.full(n, -np.inf)
        tmax = np.full(n, np.inf)
        ok = np.ones(n, dtype=bool)
        for a in range(3):
            da = d[a]
            zero = da == 0.0
            ok &= ~(zero & ((o[a] < -half[a]) | (o[a] > half[a])))
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-half[a] - o[a]) / da
                t2 = (half[a] - o[a]) / da
            lo = np.where(zero, -np.inf, np.minimum(t1, t2))
            hi = np.where(zero, np.inf, np.maximum(t1, t2))
            tmin = np.maximum(tmin, lo)
            tmax = np.minimum(tmax, hi)
        ok &= (tmin <= tmax) & (tmax > 0.0)
        t = np.where(tmin > 0.0, tmin, tmax)
        sel = ok & (t < best)
        best[sel] = t[sel]
        best_id[sel] = k + 1
    keep = best <= r_max
    dist = np.where(keep, best, np.inf)
    hit = np.where(keep, best_id, -1)
    return dist, hit


def raycast(dirs, boxes, ground_z, r_max, use_ground=True, backend=None):
    """Nearest hit distance and surface id for unit rays from the origin."""
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    boxes = np.reshape(np.asarray(boxes, dtype=np.float64), (-1, 7))
    # trig is evaluated once here so both paths see identical values
    boxes = np.ascontiguousarray(
        np.column_stack([boxes, np.cos(boxes[:, 6]), np.sin(boxes[:, 6])])
    )
    if _resolve(backend) == "numba":
        return _raycast_nb(dirs, boxes, float(ground_z), bool(use_ground), float(r_max))
    return _raycast_np(dirs, boxes, float(ground_z), bool(use_ground), float(r_max))
