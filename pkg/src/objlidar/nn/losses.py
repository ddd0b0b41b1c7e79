"""Scene-stage noise-prediction loss with the controller in the graph."""
import numpy as np

from ..diffusion import forward_sample
from ..errors import ValidationError
from . import autograd as ag
from .scene_unet import controller_forward_graph, scene_forward


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def scene_loss_graph(leaves, cfg, img0, obj_img, t, eps, sched):
    img0, obj_img, eps = _batch(img0), _batch(obj_img), _batch(eps)
    if not (img0.shape == obj_img.shape == eps.shape):
        raise ValidationError("scene image, object image and noise must share one shape")
    t = np.broadcast_to(np.asarray(t), (img0.shape[0],))
    img_t = forward_sample(img0, t, eps, sched)
    control = controller_forward_graph(obj_img, img_t, t, leaves, cfg)
    pred = scene_forward(img_t, t, leaves, cfg, control)
    diff = ag.add(pred, -eps)
    return ag.mean_all(ag.mul(diff, diff))


def scene_loss(img0, obj_img, t, eps, sched, params, cfg):
    """MSE between injected and predicted scene noise; exact gradients land in ``params.grads``."""
    leaves = params.leaves()
    loss = scene_loss_graph(leaves, cfg, img0, obj_img, t, eps, sched)
    loss.backward()
    params.zero_grad()
    params.collect(leaves)
    return float(loss.data)
