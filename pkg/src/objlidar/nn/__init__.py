"""Denoisers, controller, losses and training."""
from .autograd import Tensor
from .losses import scene_loss
from .object_denoiser import (
    ObjectNetConfig,
    cross_attention,
    init_object_params,
    object_denoiser_forward,
    object_loss,
)
from .params import ParamStore, load_checkpoint, save_checkpoint
from .scene_unet import (
    SceneNetConfig,
    controller_forward,
    init_controller_params,
    init_scene_params,
    scene_denoiser_forward,
)
from .train import Adam, TrainConfig, train
