"""Per-category masked range tensors and the semantic alignment loss.

Each category group ``I * M_i`` is noised independently and passed through
the shared scene denoiser (no controller).  The squared error is counted
only inside the group's mask and normalized by the mask area so small
foreground categories weigh as much as large ones.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .diffusion import forward_sample
from .errors import ConfigError, ValidationError
from .geometry import MaskStack
from .nn import autograd as ag
from .nn.losses import scene_loss_graph
from .nn.scene_unet import scene_forward

log = logging.getLogger(__name__)


@dataclass
class MaskedRangeTensor:
    groups: np.ndarray  # (C, H, W, 2)
    masks: MaskStack

    @property
    def areas(self):
        return self.masks.masks.reshape(-1, self.groups.shape[0]).sum(axis=0)


def build_masked_channels(img, masks):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[:2] != masks.masks.shape[:2]:
        raise ValidationError(f"image {img.shape} and masks {masks.masks.shape} disagree")
    m = masks.masks.transpose(2, 0, 1)[..., None].astype(np.float64)
    return MaskedRangeTensor(img[None] * m, masks)


def osa_loss_graph(leaves, cfg, masked_batch, t, eps_batch, sched):
    """Graph for a batch of masked tensors; ``None`` when every mask is empty.

    ``masked_batch`` is a list of :class:`MaskedRangeTensor`, ``t`` one
    timestep per entry and ``eps_batch`` a ``(C, H, W, 2)`` noise array per entry.
    """
    t = np.broadcast_to(np.asarray(t), (len(masked_batch),))
    inputs, noises, masks, ts = [], [], [], []
    for mt, tb, eps in zip(masked_batch, t, eps_batch):
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != mt.groups.shape:
            raise ValidationError(f"noise {eps.shape} does not match groups {mt.groups.shape}")
        for i in np.flatnonzero(mt.areas > 0):
            inputs.append(forward_sample(mt.groups[i], tb, eps[i], sched))
            noises.append(eps[i])
            masks.append(mt.masks.masks[:, :, i].astype(np.float64))
            ts.append(tb)
    if not inputs:
        return None
    pred = scene_forward(np.stack(inputs), np.array(ts), leaves, cfg)
    mask = np.stack(masks)[..., None]
    # per-group weight 1 / (area * n_groups) turns the masked sum into the mean of per-group losses
    weight = mask / (np.maximum(mask.sum(axis=(1, 2, 3), keepdims=True), 1.0) * len(inputs))
    diff = ag.add(pred, -np.stack(noises))
    return ag.sum_all(ag.mul(ag.mul(diff, diff), weight))


def _finish(params, leaves, loss):
    params.zero_grad()
    if loss is None:
        return 0.0
    loss.backward()
    params.collect(leaves)
    return float(loss.data)


def osa_loss(masked, t, eps_per_group, sched, params, cfg):
    """Mask-area-normalized noise error averaged over non-empty category groups.

    Accepts one :class:`MaskedRangeTensor` or a list of them (with matching
    lists of ``t`` and noise arrays).  Returns 0 with zero gradients when
    every mask is empty.
    """
    if isinstance(masked, MaskedRangeTensor):
        masked, t, eps_per_group = [masked], [t], [eps_per_group]
    leaves = params.leaves()
    loss = osa_loss_graph(leaves, cfg, masked, t, eps_per_group, sched)
    if loss is None:
        log.warning("all OSA masks are empty; loss is zero")
    return _finish(params, leaves, loss)


def combined_scene_loss(img0, obj_img, masks, t, rng, sched, params, cfg, lambda_osa=1.0):
    """Scene loss plus ``lambda_osa`` times the OSA loss, noises drawn from ``rng``.

    ``img0``/``obj_img`` may be single images with one :class:`MaskStack`
    or batches with a list of them.  Scene noise is drawn first, then one
    group-noise array per image.
    """
    if lambda_osa < 0:
        raise ConfigError(f"lambda_osa must be non-negative, got {lambda_osa}")
    img0 = np.asarray(img0, dtype=np.float64)
    obj_img = np.asarray(obj_img, dtype=np.float64)
    if img0.ndim == 3:
        img0, obj_img, masks = img0[None], obj_img[None], [masks]
    t = np.broadcast_to(np.asarray(t), (img0.shape[0],))
    eps = rng.standard_normal(img0.shape)
    masked = [build_masked_channels(im, m) for im, m in zip(img0, masks)]
    eps_groups = [rng.standard_normal(mt.groups.shape) for mt in masked]

    leaves = params.leaves()
    total = scene_loss_graph(leaves, cfg, img0, obj_img, t, eps, sched)
    if lambda_osa > 0:
        osa = osa_loss_graph(leaves, cfg, masked, t, eps_groups, sched)
        if osa is not None:
            total = ag.add(total, ag.mul(osa, lambda_osa))
    return _finish(params, leaves, total)
