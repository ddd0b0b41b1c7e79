"""Sectioned ``key = value`` run configuration with typed defaults."""
import configparser
import hashlib
import math

from .errors import ConfigError

DEFAULTS = {
    "sensor": {"height": 64, "width": 1024, "fov_up_deg": 3.0, "fov_down_deg": -25.0, "r_max": 80.0},
    # steps < 1000 rescale the linear betas so the chain still ends near pure noise
    "diffusion": {"steps": 50, "beta_start": 1e-4, "beta_end": 0.02},
    "object": {
        "voxel": 16,
        "patch": 4,
        "d_model": 32,
        "blocks": 2,
        "ff_hidden": 64,
        "cond_dim": 128,
        "text_dim": 64,
        "fourier_freqs": 8,
        "n_points": 1024,
        "scaled_attention": True,
    },
    "scene": {"width": 16, "depth": 3, "time_dim": 32},
    "train_object": {"steps": 500, "batch_size": 8, "lr": 1e-3},
    "train_scene": {"steps": 500, "batch_size": 8, "lr": 1e-3, "osa_lambda": 1.0},
    "data": {"n_objects": 64, "n_scenes": 32, "ground_z": -1.73, "min_objects": 2, "max_objects": 6},
    "eval": {"grid": 100, "extent": 50.0},
}


def _parse(section, key, raw, default):
    try:
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {type(default).__name__}") from None


def load_config(path=None, text=None):
    """Defaults overlaid with a config file (or string); unknown keys are errors."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser()
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            cfg[section][key] = _parse(section, key, raw, DEFAULTS[section][key])
    return cfg


def dump_config(cfg):
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        lines += [f"{k} = {cfg[section][k]!r}" for k in sorted(cfg[section])]
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg):
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def sensor_config(cfg):
    from .geometry import SensorConfig

    s = cfg["sensor"]
    return SensorConfig(
        s["height"], s["width"], math.radians(s["fov_up_deg"]), math.radians(s["fov_down_deg"]), s["r_max"]
    )


def schedule(cfg):
    from .diffusion import make_schedule, scaled_schedule

    d = cfg["diffusion"]
    if d["steps"] < 1000 and (d["beta_start"], d["beta_end"]) == (1e-4, 0.02):
        return scaled_schedule(d["steps"])
    return make_schedule(d["steps"], d["beta_start"], d["beta_end"])


def object_net_config(cfg):
    from .nn.object_denoiser import ObjectNetConfig

    return ObjectNetConfig(**cfg["object"])


def scene_net_config(cfg):
    from .nn.scene_unet import SceneNetConfig

    return SceneNetConfig(**cfg["scene"])
