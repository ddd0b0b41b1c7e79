"""Range-image U-Net denoiser and its zero-convolution controller branch.

Layout is NHWC throughout.  Encoder level ``l`` runs one timestep-modulated
3x3 conv block, stores a skip, then 2x average-pools; the decoder
upsamples, concatenates the skip and runs another block.  Control
features (one per skip plus one for the bottleneck) are added to the
skips and the bottleneck before the decoder consumes them.
"""
from dataclasses import dataclass

import numpy as np

from ..conditioning import timestep_embedding
from ..errors import ConfigError, ValidationError
from . import autograd as ag
from .params import ParamStore


@dataclass(frozen=True)
class SceneNetConfig:
    width: int = 16
    depth: int = 3
    time_dim: int = 32
    channels: int = 2

    def __post_init__(self):
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    def level_channels(self, level):
        return self.width * min(2 ** level, 2)

    @property
    def mid_channels(self):
        return self.level_channels(self.depth)

    def check_shape(self, height, width):
        f = 2 ** self.depth
        if height % f or width % f:
            raise ConfigError(f"range image {height}x{width} not divisible by 2^{self.depth}")

    @classmethod
    def from_params(cls, params):
        width = params["den.stem.w"].shape[3]
        channels = params["den.stem.w"].shape[2]
        time_dim = params["den.time1.w"].shape[0]
        depth = len({n.split(".")[1] for n in params.names("den.enc")})
        return cls(width, depth, time_dim, channels)


def _block_params(params, prefix, cin, cout, temb_dim, rng):
    params.add(prefix + "conv.w", (3, 3, cin, cout), "uniform", rng)
    params.add(prefix + "conv.b", (cout,), "uniform", rng, fan_in=9 * cin)
    params.add(prefix + "t.w", (temb_dim, cout), "uniform", rng)
    params.add(prefix + "t.b", (cout,), "uniform", rng, fan_in=temb_dim)


def _time_params(params, prefix, cfg, rng):
    params.add(prefix + "time1.w", (cfg.time_dim, cfg.time_dim), "uniform", rng)
    params.add(prefix + "time1.b", (cfg.time_dim,), "uniform", rng, fan_in=cfg.time_dim)
    params.add(prefix + "time2.w", (cfg.time_dim, cfg.time_dim), "uniform", rng)
    params.add(prefix + "time2.b", (cfg.time_dim,), "uniform", rng, fan_in=cfg.time_dim)


def _encoder_params(params, prefix, cfg, rng):
    cin = cfg.width
    for lvl in range(cfg.depth):
        cout = cfg.level_channels(lvl)
        _block_params(params, f"{prefix}enc{lvl}.", cin, cout, cfg.time_dim, rng)
        cin = cout
    _block_params(params, prefix + "mid.", cin, cfg.mid_channels, cfg.time_dim, rng)


def init_scene_params(cfg, rng, params=None):
    params = params if params is not None else ParamStore()
    _time_params(params, "den.", cfg, rng)
    params.add("den.stem.w", (3, 3, cfg.channels, cfg.width), "uniform", rng)
    params.add("den.stem.b", (cfg.width,), "uniform", rng, fan_in=9 * cfg.channels)
    _encoder_params(params, "den.", cfg, rng)
    cin = cfg.mid_channels
    for lvl in reversed(range(cfg.depth)):
        cout = cfg.level_channels(lvl)
        _block_params(params, f"den.dec{lvl}.", cin + cout, cout, cfg.time_dim, rng)
        cin = cout
    params.add("den.out.w", (3, 3, cin, cfg.channels), "zeros", rng)
    params.add("den.out.b", (cfg.channels,), "zeros", rng)
    return params


def init_controller_params(cfg, rng, params=None):
    params = params if params is not None else ParamStore()
    w = cfg.width
    _time_params(params, "ctl.", cfg, rng)
    for src in ("obj", "img"):
        params.add(f"ctl.stem_{src}.w", (3, 3, cfg.channels, w), "uniform", rng)
        params.add(f"ctl.stem_{src}.b", (w,), "uniform", rng, fan_in=9 * cfg.channels)
        params.add(f"ctl.zin_{src}.w", (w, w), "zeros", rng)
        params.add(f"ctl.zin_{src}.b", (w,), "zeros", rng)
    _encoder_params(params, "ctl.", cfg, rng)
    for lvl in range(cfg.depth):
        c = cfg.level_channels(lvl)
        params.add(f"ctl.zout{lvl}.w", (c, c), "zeros", rng)
        params.add(f"ctl.zout{lvl}.b", (c,), "zeros", rng)
    c = cfg.mid_channels
    params.add("ctl.zout_mid.w", (c, c), "zeros", rng)
    params.add("ctl.zout_mid.b", (c,), "zeros", rng)
    return params


def _time_embed(leaves, prefix, t, cfg):
    base = timestep_embedding(np.asarray(t, dtype=np.float64), cfg.time_dim)
    h = ag.gelu(ag.linear(base, leaves[prefix + "time1.w"], leaves[prefix + "time1.b"]))
    return ag.linear(h, leaves[prefix + "time2.w"], leaves[prefix + "time2.b"])


def _block(x, temb, leaves, prefix):
    h = ag.conv2d(x, leaves[prefix + "conv.w"], leaves[prefix + "conv.b"])
    tproj = ag.linear(temb, leaves[prefix + "t.w"], leaves[prefix + "t.b"])
    B, C = tproj.shape
    return ag.gelu(ag.add(h, ag.reshape(tproj, (B, 1, 1, C))))


def _encode(h, temb, leaves, prefix, cfg):
    skips = []
    for lvl in range(cfg.depth):
        h = _block(h, temb, leaves, f"{prefix}enc{lvl}.")
        skips.append(h)
        h = ag.avgpool2(h)
    return skips, _block(h, temb, leaves, prefix + "mid.")


def _prepare(x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return x, np.broadcast_to(np.asarray(t), (x.shape[0],))


def scene_forward(img_t, t, leaves, cfg, control=None):
    """Noise estimate ``(B, H, W, C)`` as an autograd tensor."""
    img_t, t = _prepare(img_t, t)
    _, H, W, C = img_t.shape
    cfg.check_shape(H, W)
    if C != cfg.channels:
        raise ValidationError(f"expected {cfg.channels} channels, got {C}")
    temb = _time_embed(leaves, "den.", t, cfg)
    h = ag.conv2d(img_t, leaves["den.stem.w"], leaves["den.stem.b"])
    skips, h = _encode(h, temb, leaves, "den.", cfg)
    if control is not None:
        if len(control) != cfg.depth + 1:
            raise ValidationError(f"expected {cfg.depth + 1} control maps, got {len(control)}")
        skips = [ag.add(s, c) for s, c in zip(skips, control[:-1])]
        h = ag.add(h, control[-1])
    for lvl in reversed(range(cfg.depth)):
        h = ag.concat([ag.upsample2(h), skips[lvl]], axis=-1)
        h = _block(h, temb, leaves, f"den.dec{lvl}.")
    return ag.conv2d(h, leaves["den.out.w"], leaves["den.out.b"])


def controller_forward_graph(obj_img, img_t, t, leaves, cfg):
    """Control maps ``[skip_0, ..., skip_{depth-1}, bottleneck]`` as autograd tensors."""
    obj_img, t = _prepare(obj_img, t)
    img_t, _ = _prepare(img_t, t)
    if obj_img.shape != img_t.shape:
        raise ValidationError("object image and noisy scene must share dimensions")
    temb = _time_embed(leaves, "ctl.", t, cfg)
    h_obj = ag.conv2d(obj_img, leaves["ctl.stem_obj.w"], leaves["ctl.stem_obj.b"])
    h_img = ag.conv2d(img_t, leaves["ctl.stem_img.w"], leaves["ctl.stem_img.b"])
    h = ag.add(
        ag.linear(h_obj, leaves["ctl.zin_obj.w"], leaves["ctl.zin_obj.b"]),
        ag.linear(h_img, leaves["ctl.zin_img.w"], leaves["ctl.zin_img.b"]),
    )
    skips, mid = _encode(h, temb, leaves, "ctl.", cfg)
    feats = [ag.linear(s, leaves[f"ctl.zout{lvl}.w"], leaves[f"ctl.zout{lvl}.b"]) for lvl, s in enumerate(skips)]
    feats.append(ag.linear(mid, leaves["ctl.zout_mid.w"], leaves["ctl.zout_mid.b"]))
    return feats


def _const_leaves(params):
    return {n: ag.Tensor(v) for n, v in params.values.items()}


def controller_forward(obj_img, img_t, t, params, cfg):
    """Numpy control features (list of NHWC arrays, batch axis kept)."""
    feats = controller_forward_graph(obj_img, img_t, t, _const_leaves(params), cfg)
    return [f.data for f in feats]


def scene_denoiser_forward(img_t, t, params, cfg, control=None):
    """Numpy noise estimate; accepts ``(H, W, C)`` or ``(B, H, W, C)``."""
    single = np.ndim(img_t) == 3
    ctrl = None if control is None else [ag.Tensor(c) for c in control]
    out = scene_forward(img_t, t, _const_leaves(params), cfg, ctrl).data
    return out[0] if single else out
