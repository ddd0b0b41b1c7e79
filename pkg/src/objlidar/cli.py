"""Command-line entry point: ``objlidar <subcommand> ...``.

Exit codes: 0 success, 1 usage or validation error, 2 I/O or checkpoint error.
"""
import argparse
import contextlib
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from .conditioning import FileTextEncoder, HashTextEncoder, condition_input
from .datagen import CATEGORIES, build_object_dataset, build_scene_dataset, category_scale, resample_points
from .errors import CheckpointError, ObjLidarError, ValidationError
from .geometry import MaskStack, normalize_object, unproject_range
from .io import read_cloud, read_range_image, write_cloud, write_range_image
from .metrics import evaluate_sets, format_report
from .nn.params import load_checkpoint
from .nn.train import TrainConfig
from .pipeline import (
    augment_scene,
    compose_object_image,
    generate_objects,
    generate_scene,
    partial_completion,
    read_scenario,
    sparse_to_dense,
    write_scenario,
)
from .stages import train_object_stage, train_scene_stage

log = logging.getLogger("objlidar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Per-invocation context: config, seed, output directory and manifest."""

    def __init__(self, args):
        self.args = args
        self.cfg = config_mod.load_config(args.config)
        self.seed = args.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = []
        self.outputs = []

    def rng(self, stream=0):
        return np.random.default_rng([self.seed, stream])

    def checkpoint(self, path):
        params = load_checkpoint(path)
        self.inputs.append(Path(path))
        return params

    def output(self, rel):
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    def encoder(self):
        if getattr(self.args, "embeddings", None):
            return FileTextEncoder.load(self.args.embeddings)
        return HashTextEncoder(self.cfg["object"]["text_dim"])

    def write_manifest(self):
        lines = [
            f"command={self.args.command}",
            f"seed={self.seed}",
            f"config_sha256={config_mod.config_hash(self.cfg)}",
        ]
        lines += [f"checkpoint:{p.name}={_sha256(p)}" for p in self.inputs]
        lines += [f"output:{p.relative_to(self.out)}={_sha256(p)}" for p in sorted(set(self.outputs))]
        (self.out / "manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- data layout

def _scene_files(directory):
    d = Path(directory)
    stems = sorted(p.stem for p in d.glob("*.olri") if "_" not in p.stem)
    if not stems:
        raise ValidationError(f"{d}: no scene range images found")
    return d, stems


def _clouds_in(directory):
    paths = sorted(Path(directory).glob("*.bin"))
    if not paths:
        raise ValidationError(f"{directory}: no .bin clouds found")
    return [read_cloud(p) for p in paths]


def _train_config(section, seed):
    return TrainConfig(steps=section["steps"], batch_size=section["batch_size"], lr=section["lr"], seed=seed)


def _loss_summary(losses):
    k = max(1, min(32, len(losses) // 2))
    return f"{losses[:k].mean():.5f} -> {losses[-k:].mean():.5f} (first/last {k} steps)"


def _losses_text(losses):
    return "".join(f"{x!r}\n" for x in losses.tolist())


# ---------------------------------------------------------------- subcommands

def cmd_synth(run):
    cfg, a = run.cfg, run.args
    sensor = config_mod.sensor_config(cfg)
    n_obj = cfg["data"]["n_objects"] if a.n_objects is None else a.n_objects
    n_scn = cfg["data"]["n_scenes"] if a.n_scenes is None else a.n_scenes
    objects = build_object_dataset(n_obj, run.rng(1), sensor, n_points=cfg["object"]["n_points"])
    for i, s in enumerate(objects):
        write_cloud(run.output(f"objects/{i:05d}.bin"), s.cloud)
    write_scenario(run.output("objects/scenario.txt"), [(s.prompt, s.box) for s in objects])
    scenes = build_scene_dataset(
        n_scn,
        run.rng(2),
        sensor,
        (cfg["data"]["min_objects"], cfg["data"]["max_objects"]),
        cfg["data"]["ground_z"],
    )
    for i, s in enumerate(scenes):
        write_cloud(run.output(f"scenes/{i:05d}.bin"), s.cloud)
        write_range_image(run.output(f"scenes/{i:05d}.olri"), s.image)
        write_range_image(run.output(f"scenes/{i:05d}_obj.olri"), s.object_image)
        write_range_image(run.output(f"scenes/{i:05d}_mask.olri"), s.masks.masks)
    run.output("scenes/categories.txt").write_text("".join(c + "\n" for c in CATEGORIES))
    print(f"wrote {len(objects)} objects and {len(scenes)} scenes to {run.out}")


def cmd_train_object(run):
    cfg = run.cfg
    net = config_mod.object_net_config(cfg)
    data = Path(run.args.data) / "objects"
    items = read_scenario(data / "scenario.txt")
    clouds = _clouds_in(data)
    if len(clouds) != len(items):
        raise ValidationError(f"{data}: {len(clouds)} clouds but {len(items)} scenario lines")
    rng, enc = run.rng(1), run.encoder()
    x0, cond = [], []
    for (prompt, box), cloud in zip(items, clouds):
        if cloud.shape[0] == 0:
            raise ValidationError(f"{data}: empty object cloud for {prompt.rendered!r}")
        normed = normalize_object(cloud, box, category_scale(prompt.category))
        x0.append(resample_points(normed, net.n_points, rng))
        cond.append(condition_input(prompt, box, enc, net.fourier_freqs))
    ckpt = run.output("object.ckpt")
    _, losses = train_object_stage(
        np.stack(x0), np.stack(cond), net, _train_config(cfg["train_object"], run.seed), config_mod.schedule(cfg), ckpt
    )
    run.output("object_losses.txt").write_text(_losses_text(losses))
    print(f"object stage: loss {_loss_summary(losses)}")


def cmd_train_scene(run):
    cfg = run.cfg
    net = config_mod.scene_net_config(cfg)
    d, stems = _scene_files(Path(run.args.data) / "scenes")
    cats = tuple((d / "categories.txt").read_text().split())
    imgs = [read_range_image(d / f"{s}.olri") for s in stems]
    objs = [read_range_image(d / f"{s}_obj.olri") for s in stems]
    masks = [MaskStack(read_range_image(d / f"{s}_mask.olri").astype(np.uint8), cats) for s in stems]
    lam = cfg["train_scene"]["osa_lambda"] if run.args.osa_lambda is None else run.args.osa_lambda
    ckpt = run.output("scene.ckpt")
    _, losses = train_scene_stage(
        np.stack(imgs), np.stack(objs), masks, net, _train_config(cfg["train_scene"], run.seed),
        config_mod.schedule(cfg), lam, ckpt,
    )
    run.output("scene_losses.txt").write_text(_losses_text(losses))
    print(f"scene stage: loss {_loss_summary(losses)}")


def _generate_objects(run, scenario, ckpt_path):
    items = read_scenario(scenario)
    params = run.checkpoint(ckpt_path)
    net = config_mod.object_net_config(run.cfg)
    clouds = generate_objects(items, params, config_mod.schedule(run.cfg), run.rng(3), net, run.encoder())
    return items, clouds


def cmd_gen_objects(run):
    items, clouds = _generate_objects(run, run.args.scenario, run.args.ckpt)
    for i, c in enumerate(clouds):
        write_cloud(run.output(f"objects/{i:05d}.bin"), c)
    write_scenario(run.output("objects/scenario.txt"), items)
    print(f"generated {len(clouds)} objects")


def _load_objects(run, source, object_ckpt):
    """World-frame objects from a gen-objects directory or a scenario plus checkpoint."""
    src = Path(source)
    if src.is_dir():
        items = read_scenario(src / "scenario.txt")
        clouds = [read_cloud(src / f"{i:05d}.bin") for i in range(len(items))]
        return items, clouds
    if not object_ckpt:
        raise ValidationError("a scenario file needs --object-ckpt to generate its objects")
    return _generate_objects(run, src, object_ckpt)


def cmd_gen_scene(run):
    a, cfg = run.args, run.cfg
    sensor = config_mod.sensor_config(cfg)
    items, clouds = _load_objects(run, a.objects, a.object_ckpt)
    obj_img, masks = compose_object_image(
        [(c, box, p.category) for (p, box), c in zip(items, clouds)], sensor, CATEGORIES
    )
    write_range_image(run.output("object_image.olri"), obj_img)
    write_range_image(run.output("object_masks.olri"), masks.masks)
    params = run.checkpoint(a.ckpt)
    net = config_mod.scene_net_config(cfg)
    sched = config_mod.schedule(cfg)
    for i, child in enumerate(run.rng(4).spawn(a.count)):
        img, cloud = generate_scene(obj_img, params, sched, child, net, sensor)
        write_range_image(run.output(f"scenes/{i:05d}.olri"), img)
        write_cloud(run.output(f"scenes/{i:05d}.bin"), cloud)
    print(f"generated {a.count} scene(s) from {len(items)} objects")


def cmd_complete(run):
    a, cfg = run.args, run.cfg
    img = read_range_image(a.input)
    params = run.checkpoint(a.ckpt)
    net = config_mod.scene_net_config(cfg)
    sched = config_mod.schedule(cfg)
    if a.mode == "sparse2dense":
        out, n_rows = sparse_to_dense(img, params, sched, run.rng(5), net)
        report = f"mode=sparse2dense\nconditioning_rows={n_rows}\n"
    else:
        if not a.mask:
            raise ValidationError("--mode partial needs --mask")
        mask = read_range_image(a.mask)
        mask = mask[..., 0] if mask.ndim == 3 else mask
        out = partial_completion(img, (mask > 0.5).astype(np.uint8), params, sched, run.rng(5), net)
        report = f"mode=partial\nknown_pixels={int((mask > 0.5).sum())}\n"
    write_range_image(run.output("completed.olri"), out)
    write_cloud(run.output("completed.bin"), unproject_range(out, config_mod.sensor_config(cfg)))
    run.output("report.txt").write_text(report)
    print(report, end="")


def cmd_augment(run):
    a = run.args
    scene = read_cloud(a.scene)
    items, clouds = _load_objects(run, a.objects or a.scenario, a.object_ckpt)
    out = augment_scene(scene, [(c, box) for c, (_, box) in zip(clouds, items)])
    write_cloud(run.output("augmented.bin"), out)
    print(f"augmented scene: {scene.shape[0]} -> {out.shape[0]} points")


def cmd_eval(run):
    a, cfg = run.args, run.cfg
    metrics = [m.strip() for m in a.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"cd", "jsd", "mmd", "fpd", "ss"}
    if unknown:
        raise ValidationError(f"unknown metrics: {sorted(unknown)}")
    values = evaluate_sets(
        _clouds_in(a.real), _clouds_in(a.gen), metrics, cfg["eval"]["grid"], cfg["eval"]["extent"]
    )
    table, kv = format_report(values, a.paper_scale)
    run.output("report.txt").write_text(table)
    run.output("metrics.txt").write_text(kv)
    print(table, end="")


# ---------------------------------------------------------------- parser

def _global_flags(parser, suppress):
    # subcommands repeat the global flags with suppressed defaults so a flag
    # given before the subcommand is not overwritten by the subparser default
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="sectioned key = value config file")
    parser.add_argument("--seed", type=int, default=d(0))
    parser.add_argument("--out", default=d("out"), help="output directory")
    parser.add_argument("--threads", type=int, default=d(None), help="cap on numeric library threads")
    parser.add_argument("--embeddings", default=d(None), help="precomputed text embeddings (prompt<TAB>floats)")
    return parser


def build_parser():
    common = _global_flags(_Parser(add_help=False), suppress=True)
    p = _global_flags(_Parser(prog="objlidar", description=__doc__.splitlines()[0]), suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="ray-cast a synthetic dataset")
    s.add_argument("--n-objects", type=int)
    s.add_argument("--n-scenes", type=int)

    s = sub.add_parser("train-object", parents=[common], help="train the object denoiser")
    s.add_argument("--data", required=True)

    s = sub.add_parser("train-scene", parents=[common], help="train scene denoiser and controller")
    s.add_argument("--data", required=True)
    s.add_argument("--osa-lambda", type=float)

    s = sub.add_parser("gen-objects", parents=[common], help="sample objects for a scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--ckpt", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="sample scenes around given objects")
    s.add_argument("--objects", required=True, help="scenario file or gen-objects directory")
    s.add_argument("--object-ckpt")
    s.add_argument("--ckpt", required=True, help="scene checkpoint")
    s.add_argument("--count", type=int, default=1)

    s = sub.add_parser("complete", parents=[common], help="sparse-to-dense or partial completion")
    s.add_argument("--mode", choices=("sparse2dense", "partial"), required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mask")
    s.add_argument("--ckpt", required=True)

    s = sub.add_parser("augment", parents=[common], help="insert objects into a scene cloud")
    s.add_argument("--scene", required=True)
    s.add_argument("--scenario", required=True)
    s.add_argument("--objects", help="gen-objects directory with clouds for the scenario")
    s.add_argument("--object-ckpt")

    s = sub.add_parser("eval", parents=[common], help="compare two directories of clouds")
    s.add_argument("--real", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--metrics", default="cd,jsd,mmd,fpd,ss")
    s.add_argument("--paper-scale", action="store_true", help="report JSD x10 and MMD x1e4")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train-object": cmd_train_object,
    "train-scene": cmd_train_scene,
    "gen-objects": cmd_gen_objects,
    "gen-scene": cmd_gen_scene,
    "complete": cmd_complete,
    "augment": cmd_augment,
    "eval": cmd_eval,
}


def _limit_threads(n):
    if not n:
        return contextlib.nullcontext()
    from . import _kernels

    if _kernels.HAVE_NUMBA:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    return threadpool_limits(limits=n)


def dispatch(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=os.environ.get("OBJLIDAR_LOG", "WARNING"), format="%(name)s: %(message)s")
    try:
        with _limit_threads(args.threads):
            run = Run(args)
            COMMANDS[args.command](run)
            run.write_manifest()
    except (CheckpointError, OSError) as exc:
        print(f"objlidar: I/O error: {exc}", file=sys.stderr)
        return 2
    except (ObjLidarError, ValueError, KeyError) as exc:
        print(f"objlidar: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
