"""Adam training loop shared by the object and scene stages."""
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import TrainingDivergence
from .params import save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    log_every: int = 50


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(v) for n, v in params.values.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.values.items()}
        self.t = 0

    def step(self, params):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, value in params.values.items():
            g = params.grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _first_nonfinite(params):
    for n, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            return n
    return None


def train(params, loss_fn, sample_batch, cfg, checkpoint_path=None):
    """Run ``cfg.steps`` Adam updates in place and return the per-step loss log.

    ``sample_batch(rng, batch_size)`` draws a batch; ``loss_fn(params, batch,
    rng)`` returns the loss and fills ``params.grads``.  A single generator
    seeded with ``cfg.seed`` drives both, so runs are reproducible.
    Checkpoints go to ``checkpoint_path`` every ``checkpoint_every`` steps
    and at the end.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    losses = []
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(rng, cfg.batch_size)
        loss = loss_fn(params, batch, rng)
        bad = _first_nonfinite(params)
        if bad is not None or not np.isfinite(loss):
            raise TrainingDivergence(step, bad, loss)
        opt.step(params)
        losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, float(np.mean(losses[-cfg.log_every:])))
        if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params)
    return np.array(losses)
