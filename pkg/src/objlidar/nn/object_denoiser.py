"""Voxel-token transformer that predicts per-point noise for object clouds.

Pipeline per sample: voxelize the noisy normalized points, cut the grid
into ``p^3`` patches, embed them as tokens, run ``blocks`` rounds of
cross-attention to the condition plus a GELU feed-forward, then read each
point's noise off the token of the patch it falls in together with a
point-wise embedding of its own coordinates.
"""
from dataclasses import dataclass

import numpy as np

from .. import conditioning
from ..errors import ConfigError, ValidationError
from ..geometry import voxel_indices, voxelize
from . import autograd as ag
from .params import ParamStore


@dataclass(frozen=True)
class ObjectNetConfig:
    voxel: int = 16
    patch: int = 4
    d_model: int = 32
    blocks: int = 2
    ff_hidden: int = 64
    cond_dim: int = 128
    text_dim: int = conditioning.TEXT_DIM
    fourier_freqs: int = conditioning.FOURIER_FREQS
    n_points: int = 1024
    scaled_attention: bool = True

    def __post_init__(self):
        if self.voxel % self.patch:
            raise ConfigError(f"voxel resolution {self.voxel} not divisible by patch {self.patch}")
        if self.cond_dim % 2:
            raise ConfigError("cond_dim must be even for the timestep embedding")

    @property
    def n_tokens(self):
        return (self.voxel // self.patch) ** 3

    @property
    def token_in(self):
        return self.patch ** 3 * 2

    @property
    def cond_in(self):
        return 14 * self.fourier_freqs + self.text_dim

    @classmethod
    def from_params(cls, params, n_points, text_dim=conditioning.TEXT_DIM, scaled_attention=True):
        """Recover the architecture from parameter shapes (checkpoints carry no config)."""
        token_in, d = params["obj.embed.w"].shape
        n_tokens = params["obj.pos"].shape[0]
        cond_in, cond_dim = params["obj.com.w"].shape
        blocks = len({n.split(".")[1] for n in params.names("obj.block")})
        ff_hidden = params["obj.block0.ff1.w"].shape[1]
        patch = round((token_in // 2) ** (1 / 3))
        voxel = round(n_tokens ** (1 / 3)) * patch
        freqs, rem = divmod(cond_in - text_dim, 14)
        if rem or freqs < 1:
            raise ConfigError(f"condition width {cond_in} inconsistent with text_dim {text_dim}")
        return cls(voxel, patch, d, blocks, ff_hidden, cond_dim, text_dim, freqs, n_points, scaled_attention)


def init_object_params(cfg, rng, params=None):
    params = params if params is not None else ParamStore()
    d = cfg.d_model
    params.add("obj.com.w", (cfg.cond_in, cfg.cond_dim), "uniform", rng)
    params.add("obj.com.b", (cfg.cond_dim,), "uniform", rng, fan_in=cfg.cond_in)
    params.add("obj.embed.w", (cfg.token_in, d), "uniform", rng)
    params.add("obj.embed.b", (d,), "uniform", rng, fan_in=cfg.token_in)
    params.add("obj.pos", (cfg.n_tokens, d), "uniform", rng, fan_in=d)
    for i in range(cfg.blocks):
        p = f"obj.block{i}."
        params.add(p + "q.w", (d, d), "uniform", rng)
        params.add(p + "k.w", (cfg.cond_dim, d), "uniform", rng)
        params.add(p + "k.b", (d,), "uniform", rng, fan_in=cfg.cond_dim)
        params.add(p + "v.w", (cfg.cond_dim, d), "uniform", rng)
        params.add(p + "v.b", (d,), "uniform", rng, fan_in=cfg.cond_dim)
        params.add(p + "ff1.w", (d, cfg.ff_hidden), "uniform", rng)
        params.add(p + "ff1.b", (cfg.ff_hidden,), "uniform", rng, fan_in=d)
        params.add(p + "ff2.w", (cfg.ff_hidden, d), "uniform", rng)
        params.add(p + "ff2.b", (d,), "uniform", rng, fan_in=cfg.ff_hidden)
    params.add("obj.point.w", (4, d), "uniform", rng)
    params.add("obj.point.b", (d,), "uniform", rng, fan_in=4)
    params.add("obj.mlp.w", (d, d), "uniform", rng)
    params.add("obj.mlp.b", (d,), "uniform", rng, fan_in=d)
    params.add("obj.head.w", (d, 4), "zeros", rng)
    params.add("obj.head.b", (4,), "zeros", rng)
    return params


def patchify(grids, patch):
    """``(B, V, V, V, C)`` grids to ``(B, T, p^3 C)`` non-overlapping patch tokens."""
    B, V, _, _, C = grids.shape
    g = V // patch
    x = grids.reshape(B, g, patch, g, patch, g, patch, C)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(B, g ** 3, patch ** 3 * C)


def point_patch_index(points, voxel, patch):
    """Flat patch index holding each point, ``(B, N)``."""
    cell = voxel_indices(points[..., :3], voxel) // patch
    g = voxel // patch
    return (cell[..., 0] * g + cell[..., 1]) * g + cell[..., 2]


def cross_attention(tokens, cond_t, leaves, prefix, scaled=True):
    """``tokens + softmax(q k^T) v`` with queries from tokens and a single key/value from the condition.

    ``tokens`` is ``(B, T, d)``, ``cond_t`` (condition plus timestep
    embedding) is ``(B, D_c)``.
    """
    B, T, d = tokens.shape
    if cond_t.shape[-1] != leaves[prefix + "k.w"].shape[0] or leaves[prefix + "q.w"].shape[0] != d:
        raise ConfigError("cross-attention dimensions do not match its parameters")
    q = ag.matmul(tokens, leaves[prefix + "q.w"])
    k = ag.reshape(ag.linear(cond_t, leaves[prefix + "k.w"], leaves[prefix + "k.b"]), (B, 1, d))
    v = ag.reshape(ag.linear(cond_t, leaves[prefix + "v.w"], leaves[prefix + "v.b"]), (B, 1, d))
    logits = ag.matmul(q, ag.swapaxes(k, 1, 2))  # (B, T, 1)
    if scaled:
        logits = ag.mul(logits, 1.0 / np.sqrt(d))
    weights = ag.softmax(logits, axis=-1)
    return ag.add(tokens, ag.matmul(weights, v))


def _as_batch(points, t, cond_in):
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 2
    if single:
        points = points[None]
    t = np.broadcast_to(np.asarray(t), (points.shape[0],))
    cond_in = np.asarray(cond_in, dtype=np.float64).reshape(points.shape[0], -1)
    return points, t, cond_in, single


def object_forward(points_t, t, cond_in, leaves, cfg, grids=None):
    """Noise estimate ``(B, N, 4)`` as an autograd tensor.

    ``cond_in`` is the raw ``[f_B ; f_T]`` vector per sample; the condition
    combiner is part of the graph so it trains with the rest.  ``grids``
    may carry precomputed voxel grids of ``points_t``.
    """
    points_t, t, cond_in, _ = _as_batch(points_t, t, cond_in)
    B = points_t.shape[0]
    if points_t.shape[1:] != (cfg.n_points, 4):
        raise ValidationError(f"expected (B, {cfg.n_points}, 4) points, got {points_t.shape}")
    if cond_in.shape[1] != cfg.cond_in:
        raise ConfigError(f"condition input has {cond_in.shape[1]} features, model expects {cfg.cond_in}")
    if grids is None:
        grids = np.stack([voxelize(p, cfg.voxel) for p in points_t])
    if grids.shape[1:4] != (cfg.voxel,) * 3:
        raise ConfigError(f"voxel grid {grids.shape[1:4]} does not match resolution {cfg.voxel}")

    tokens = ag.linear(patchify(grids, cfg.patch), leaves["obj.embed.w"], leaves["obj.embed.b"])
    tokens = ag.add(tokens, leaves["obj.pos"])
    cond = ag.linear(cond_in, leaves["obj.com.w"], leaves["obj.com.b"])
    cond_t = ag.add(cond, conditioning.timestep_embedding(t, cfg.cond_dim))
    for i in range(cfg.blocks):
        p = f"obj.block{i}."
        tokens = cross_attention(tokens, cond_t, leaves, p, cfg.scaled_attention)
        hidden = ag.gelu(ag.linear(tokens, leaves[p + "ff1.w"], leaves[p + "ff1.b"]))
        tokens = ag.add(tokens, ag.linear(hidden, leaves[p + "ff2.w"], leaves[p + "ff2.b"]))

    idx = point_patch_index(points_t, cfg.voxel, cfg.patch)
    feats = ag.add(ag.gather_rows(tokens, idx), ag.linear(points_t, leaves["obj.point.w"], leaves["obj.point.b"]))
    feats = ag.gelu(ag.linear(ag.gelu(feats), leaves["obj.mlp.w"], leaves["obj.mlp.b"]))
    out = ag.linear(feats, leaves["obj.head.w"], leaves["obj.head.b"])
    assert out.shape == (B, cfg.n_points, 4)
    return out


def object_denoiser_forward(points_t, t, cond_in, params, cfg, grids=None):
    """Numpy noise estimate; ``(N, 4)`` for a single sample or ``(B, N, 4)`` batched."""
    single = np.ndim(points_t) == 2
    leaves = {n: ag.Tensor(v) for n, v in params.values.items()}
    out = object_forward(points_t, t, cond_in, leaves, cfg, grids).data
    return out[0] if single else out


def object_loss_graph(leaves, cfg, x0, t, eps, cond_in, sched):
    from ..diffusion import forward_sample

    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, cfg.n_points, 4)
    eps = np.asarray(eps, dtype=np.float64).reshape(x0.shape)
    t = np.broadcast_to(np.asarray(t), (x0.shape[0],))
    x_t = forward_sample(x0, t, eps, sched)
    pred = object_forward(x_t, t, cond_in, leaves, cfg)
    diff = ag.add(pred, -eps)
    return ag.mean_all(ag.mul(diff, diff))


def object_loss(x0, t, eps, cond_in, sched, params, cfg):
    """Noise-prediction MSE; exact gradients are written to ``params.grads``."""
    leaves = params.leaves()
    loss = object_loss_graph(leaves, cfg, x0, t, eps, cond_in, sched)
    loss.backward()
    params.zero_grad()
    params.collect(leaves)
    return float(loss.data)
