"""Command-line front end: ``featvol {train,optimize,render,edit,fuse,eval,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input, 3 incompatible
renderer hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from featvol import edit_engine as ee
from featvol import feature_volume as fv
from featvol import render_net as rn
from featvol import report, scene_io
from featvol import trainer as tr
from featvol.errors import (
    DatasetError,
    EditScriptError,
    FormatError,
    IncompatibleScenesError,
    InvalidArgumentError,
)
from featvol.ray_engine import render_image
from featvol.scene_io import RigSpec, orbit_cameras

log = logging.getLogger("featvol")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_COMPAT = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _coerce(name, raw, default):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, int))
    else:
        ok = isinstance(value, str)
    if not ok:
        raise UsageError(f"override {name}={raw!r} does not match type {type(default).__name__}")
    return value


def build_config(args) -> tuple[tr.TrainConfig, dict]:
    """Merge config file, ``--set`` overrides and ``--seed``; returns the config and the user-set keys."""
    user = _read_config_file(args.config) if args.config else {}
    defaults = tr.TrainConfig()
    known = {f.name for f in fields(tr.TrainConfig)}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        user[key] = _coerce(key, raw, getattr(defaults, key))
    if args.seed is not None:
        user["seed"] = args.seed
    try:
        return tr.TrainConfig.from_dict(user), user
    except (InvalidArgumentError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _load_scene(path, llff=False, seed=0):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"scene directory not found: {p}")
    return scene_io.load_llff(p, seed=seed) if llff else scene_io.load_dataset(p, seed=seed)


def _out_dir(args, default="out") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit_json(obj, args, name):
    text = json.dumps(obj, indent=1)
    if args.out:
        path = _out_dir(args) / name
        path.write_text(text + "\n")
        log.info("wrote %s", path)
    else:
        print(text)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    cfg, _ = build_config(args)
    datasets = [_load_scene(d, args.llff, cfg.seed) for d in args.scenes]
    out = _out_dir(args, "run")
    slots = [tr.SceneSlot.create(ds, cfg, seed=cfg.seed + i) for i, ds in enumerate(datasets)]
    params = rn.init_params(cfg.descriptor(), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    result = tr.train_multi_scene(slots, params, cfg, checkpoint_dir=out, log_path=out / "train_log.csv")
    report.plot_training_curve(out / "train_log.csv", out / "loss_curve.png")
    metrics = {"scenes": {}}
    for slot in result.slots:
        ev, imgs = tr.evaluate(slot.volume, params, slot.dataset, cfg, return_images=True)
        metrics["scenes"][slot.scene_id] = ev
        report.plot_volume_norms(slot.volume, out / f"volume_norms_{slot.scene_id}.png")
        if imgs:
            gts = [slot.dataset.images[i] for i in slot.dataset.heldout_idx]
            report.plot_view_grid(gts, imgs, ev["views"], out / f"views_{slot.scene_id}.png")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    print(json.dumps({k: {"mean_psnr": v["mean_psnr"], "mean_ssim": v["mean_ssim"]}
                      for k, v in metrics["scenes"].items()}))
    return EXIT_OK


def _load_net(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"network file not found: {p}")
    return rn.load_params(p)


def _load_vol(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"volume file not found: {p}")
    return fv.load_volume(p)


def cmd_optimize(args):
    cfg, user = build_config(args)
    params = _load_net(args.net)
    if "feat_len" in user and user["feat_len"] != params.descriptor.feat_len:
        raise UsageError(f"config feat_len={user['feat_len']} disagrees with network feat_len="
                         f"{params.descriptor.feat_len}")
    cfg.feat_len = params.descriptor.feat_len
    net_hash = _file_hash(args.net)
    ds = _load_scene(args.scene, args.llff, cfg.seed)
    out = _out_dir(args, "optimized")
    result = tr.optimize_novel_scene(ds, params, cfg, log_path=out / "train_log.csv")
    vol = result.slots[0].volume
    vol.renderer_hash = net_hash
    vol_path = out / f"scene_{ds.scene_id}.cnrfvol"
    fv.save_volume(vol, vol_path)
    report.plot_training_curve(out / "train_log.csv", out / "loss_curve.png")
    ev = tr.evaluate(vol, params, ds, cfg)
    (out / "metrics.json").write_text(json.dumps(ev, indent=1) + "\n")
    print(json.dumps({"volume": str(vol_path), "renderer_hash": net_hash, "mean_psnr": ev["mean_psnr"],
                      "mean_ssim": ev["mean_ssim"]}))
    return EXIT_OK


def _check_pair(params, vol, net_path):
    if vol.feat_len != params.descriptor.feat_len:
        raise UsageError("volume and network feature lengths differ")
    if vol.renderer_hash is not None and vol.renderer_hash != _file_hash(net_path):
        raise IncompatibleScenesError("volume was optimized against a different network")


def cmd_render(args):
    cfg, _ = build_config(args)
    params = _load_net(args.net)
    vol = _load_vol(args.volume)
    _check_pair(params, vol, args.net)
    rcfg = cfg.render
    out = _out_dir(args, "renders")
    if args.orbit:
        rig = RigSpec(count=args.orbit, radius=args.radius, look_at=tuple(args.look_at), width=args.size,
                      height=args.size, focal=args.focal, near=args.near, far=args.far)
        cams = orbit_cameras(rig, elevations=np.full(args.orbit, args.elevation))
        names = [f"orbit_{i:03d}.png" for i in range(len(cams))]
    elif args.dataset:
        ds = _load_scene(args.dataset, args.llff, cfg.seed)
        ids = {"heldout": ds.heldout_idx, "train": ds.train_idx, "all": list(range(ds.n_images))}[args.split]
        cams = [ds.cameras[i] for i in ids]
        names = [f"view_{i:03d}.png" for i in ids]
    else:
        raise UsageError("render needs --dataset or --orbit")
    for cam, name in zip(cams, names):
        scene_io.write_image(out / name, render_image(vol, params, cam, rcfg))
    print(json.dumps({"images": [str(out / n) for n in names]}))
    return EXIT_OK


def cmd_edit(args):
    written = ee.run_edit_script_file(args.script, args.out)
    print(json.dumps(written))
    return EXIT_OK


def cmd_fuse(args):
    a = _load_vol(args.a)
    b = _load_vol(args.b)
    fused = ee.fuse_max_norm(a, b)
    dest = Path(args.output) if args.output else _out_dir(args, "fused") / "fused.cnrfvol"
    dest.parent.mkdir(parents=True, exist_ok=True)
    fv.save_volume(fused, dest)
    print(json.dumps({"volume": str(dest)}))
    return EXIT_OK


def cmd_eval(args):
    cfg, _ = build_config(args)
    params = _load_net(args.net)
    vol = _load_vol(args.volume)
    _check_pair(params, vol, args.net)
    ds = _load_scene(args.dataset, args.llff, cfg.seed)
    ev, imgs = tr.evaluate(vol, params, ds, cfg, split=args.split, return_images=True)
    if args.out and imgs:
        ids = ds.heldout_idx if args.split == "heldout" else ds.train_idx
        report.plot_view_grid([ds.images[i] for i in ids], imgs, ev["views"], _out_dir(args) / "eval_views.png")
    _emit_json(ev, args, "metrics.json")
    return EXIT_OK


def cmd_synth(args):
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise UsageError(f"scene spec not found: {spec_path}")
    try:
        spec = scene_io.SyntheticSceneSpec.from_dict(json.loads(spec_path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid scene spec {spec_path}: {exc}") from exc
    seed = args.seed if args.seed is not None else 0
    ds, _ = scene_io.synthesize_scene(spec, seed=seed)
    out = Path(args.out_dir)
    scene_io.write_dataset(ds, out)
    print(json.dumps({"dataset": str(out), "images": ds.n_images, "heldout": ds.heldout_idx}))
    return EXIT_OK


# ---------------------------------------------------------------------------


_GLOBAL_DEFAULTS = {"config": None, "seed": None, "threads": None, "out": None, "set": None, "verbose": 0}


def build_parser() -> argparse.ArgumentParser:
    # defaults are suppressed so flags work both before and after the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON or TOML file with training/render settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    common.add_argument("-v", "--verbose", action="count")

    p = argparse.ArgumentParser(prog="featvol", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="jointly train the network and scene volumes")
    s.add_argument("scenes", nargs="+", help="dataset directories")
    s.add_argument("--llff", action="store_true", help="scenes are LLFF captures")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("optimize", parents=[common], help="fit a new scene against a frozen network")
    s.add_argument("--net", required=True)
    s.add_argument("scene")
    s.add_argument("--llff", action="store_true")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("render", parents=[common], help="render images from a network and volume")
    s.add_argument("--net", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--dataset")
    s.add_argument("--llff", action="store_true")
    s.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    s.add_argument("--orbit", type=int, default=0, help="render N turntable views instead of a dataset")
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--elevation", type=float, default=30.0)
    s.add_argument("--look-at", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--focal", type=float, default=None)
    s.add_argument("--near", type=float, default=2.0)
    s.add_argument("--far", type=float, default=6.0)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("edit", parents=[common], help="run a JSON edit script")
    s.add_argument("script")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("fuse", parents=[common], help="max-norm fuse two volumes")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a volume on a dataset split")
    s.add_argument("--net", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--llff", action="store_true")
    s.add_argument("--split", choices=("heldout", "train"), default="heldout")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset from a scene spec")
    s.add_argument("spec")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in _GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.threads:
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except IncompatibleScenesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (UsageError, DatasetError, FormatError, InvalidArgumentError, EditScriptError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
