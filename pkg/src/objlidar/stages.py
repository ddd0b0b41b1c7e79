"""The two training stages as plain functions over in-memory samples."""
import numpy as np

from .nn.object_denoiser import init_object_params, object_loss
from .nn.params import ParamStore
from .nn.scene_unet import init_controller_params, init_scene_params
from .nn.train import train
from .osa import combined_scene_loss


def _pick(samples):
    def sample_batch(rng, batch_size):
        idx = rng.choice(len(samples), batch_size, replace=batch_size > len(samples))
        return [samples[i] for i in idx]

    return sample_batch


def train_object_stage(x0, cond_in, net_cfg, train_cfg, sched, checkpoint_path=None):
    """Fit the object denoiser on normalized ``(M, N, 4)`` points with ``(M, D)`` conditions.

    Weights are initialized from ``train_cfg.seed``; returns ``(params, losses)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    cond_in = np.asarray(cond_in, dtype=np.float64)
    params = init_object_params(net_cfg, np.random.default_rng([train_cfg.seed, 1]))
    samples = list(range(x0.shape[0]))

    def loss_fn(p, batch, rng):
        t = rng.integers(1, sched.steps + 1, size=len(batch))
        eps = rng.standard_normal((len(batch),) + x0.shape[1:])
        return object_loss(x0[batch], t, eps, cond_in[batch], sched, p, net_cfg)

    losses = train(params, loss_fn, _pick(samples), train_cfg, checkpoint_path)
    return params, losses


def train_scene_stage(images, object_images, masks, net_cfg, train_cfg, sched, lambda_osa=1.0, checkpoint_path=None):
    """Fit the scene denoiser and controller jointly with the OSA term.

    ``images`` and ``object_images`` are ``(M, H, W, 2)``; ``masks`` a list
    of :class:`MaskStack`.  Returns ``(params, losses)``.
    """
    images = np.asarray(images, dtype=np.float64)
    object_images = np.asarray(object_images, dtype=np.float64)
    net_cfg.check_shape(images.shape[1], images.shape[2])
    init_rng = np.random.default_rng([train_cfg.seed, 2])
    params = ParamStore()
    init_scene_params(net_cfg, init_rng, params)
    init_controller_params(net_cfg, init_rng, params)
    samples = list(range(images.shape[0]))

    def loss_fn(p, batch, rng):
        t = rng.integers(1, sched.steps + 1, size=len(batch))
        return combined_scene_loss(
            images[batch], object_images[batch], [masks[i] for i in batch], t, rng, sched, p, net_cfg, lambda_osa
        )

    losses = train(params, loss_fn, _pick(samples), train_cfg, checkpoint_path)
    return params, losses
