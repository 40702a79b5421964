"""Command-line entry point: ``quantarecon <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure. Diagnostics go to stderr, machine-readable results to stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import io as qio
from .checkpoint import load_checkpoint, save_checkpoint
from .core import BitVolume, DenseVolume, RandomSource, Shape3, VolumeError
from .infer import InferConfig, multi_shot
from .metrics import evaluate, hot_pixel_correct
from .model import ModelConfig
from .sampler import SamplerConfig, sample_triple
from .simulate import SimConfig, rate_scale, simulate_quanta, toy_scene
from .stats import bin_temporal, run_battery
from .train import NonFiniteLossError, TrainConfig, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("quantarecon")


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --- JSON configs -------------------------------------------------------------


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if tp is Shape3:
        if not (isinstance(value, list) and len(value) == 3 and all(isinstance(v, int) for v in value)):
            raise ConfigError(f"{where}: expected [t, h, w] integers")
        return Shape3(*value)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return build_config(tp, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(_coerce(v, a, where) for v, a in zip(value, typing.get_args(tp)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def build_config(cls, data: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from JSON data, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}".lstrip(".")) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or cls.__name__}: {e}") from None


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


# --- subcommands -------------------------------------------------------------


def cmd_toy(a):
    v = toy_scene(a.frames, a.height, a.width, tuple(a.velocity), seed=a.seed)
    qio.write_qds(v, a.out)
    _emit({"out": str(a.out), "shape": list(v.shape), "mean": float(v.values.mean())})


def _load_reference(a) -> DenseVolume:
    if a.ref_pgm:
        return qio.import_pgm_sequence(a.ref_pgm)
    if a.ref is None:
        raise UsageError("simulate: one of --ref or --ref-pgm is required")
    return qio.read_qds(a.ref)


def cmd_simulate(a):
    ref = _load_reference(a)
    cfg = SimConfig(a.rate, a.seed)
    v = simulate_quanta(ref, cfg, RandomSource(a.seed), workers=a.threads)
    qio.write_qbs(v, a.out)
    _emit({"out": str(a.out), "shape": list(v.shape), "q": rate_scale(ref, a.rate),
           "activation_rate": v.popcount() / v.shape.size})


def cmd_split(a):
    data = qio.read_qbs(a.inp)
    crop = Shape3(*a.crop) if a.crop else data.shape
    cfg = SamplerConfig(crop=crop, p_min=a.p, p_max=a.p, p_mode="fixed")
    triple, p, c = sample_triple(data, cfg, RandomSource(a.seed))
    prefix = a.out_prefix or str(Path(a.inp).with_suffix(""))
    paths = {}
    for name in ("input", "target", "mask"):
        path = f"{prefix}_{name}.qbs"
        qio.write_qbs(getattr(triple, name), path)
        paths[name] = path
    _emit({"files": paths, "p": p, "origin": list(c.origin), "size": list(c.size),
           "popcount": {k: getattr(triple, k).popcount() for k in paths}})


def cmd_bin(a):
    out = bin_temporal(qio.read_qbs(a.inp), a.window)
    qio.write_qds(out, a.out)
    _emit({"out": str(a.out), "shape": list(out.shape)})


def _train_config(a) -> TrainConfig:
    data = _load_json(a.config)
    overrides = {"epochs": a.epochs, "steps_per_epoch": a.steps, "batch": a.batch,
                 "lr": a.lr, "seed": a.seed, "patience": a.patience}
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    if a.threads is not None:
        data["workers"] = a.threads
    if a.unmasked:
        data["masked"] = False
    if a.fixed_pairs:
        data["fresh_splits"] = False
    return build_config(TrainConfig, data)


def cmd_train(a):
    cfg = _train_config(a)
    data = qio.read_qbs(a.data)
    out = Path(a.out)
    try:
        res = train_loop(data, cfg, RandomSource(cfg.seed),
                         checkpoint_dir=a.checkpoint_dir)
    except NonFiniteLossError as e:
        log.error("%s; diagnostic checkpoint: %s", e, e.checkpoint)
        return EXIT_NUMERIC
    step = res.history[-1].step if res.history else 0
    # worker count is a runtime choice that does not change results; keep it
    # out of the file so checkpoints are identical for any --threads
    stored = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "workers"}
    save_checkpoint(res.model, out, step=step,
                    extra={"train_config": stored, "best_epoch": res.best_epoch})
    if a.history:
        res.write_history_csv(a.history)
    _emit({"out": str(out), "epochs_run": len(res.history), "best_epoch": res.best_epoch,
           "final_val_loss": res.history[-1].val_loss if res.history else None})
    return EXIT_OK


def cmd_infer(a):
    m, header = load_checkpoint(a.model)
    data = qio.read_qbs(a.data)
    tile = Shape3(*a.tile) if a.tile else Shape3(
        min(16, data.shape.t), min(64, data.shape.h), min(64, data.shape.w))
    cfg = InferConfig(tile=tile, overlap=a.overlap, shots=a.shots, shot_p=a.shot_p,
                      combine=a.combine, blend=a.blend, workers=a.threads or 1)
    out = multi_shot(m, data, cfg, RandomSource(a.seed))
    qio.write_qds(out, a.out)
    previews = []
    if a.preview_dir:
        d = Path(a.preview_dir)
        d.mkdir(parents=True, exist_ok=True)
        for t in range(out.shape.t):
            p = d / f"frame_{t:05d}.pgm"
            qio.export_pgm_frame(out, t, p, normalize=True)
            previews.append(str(p))
    _emit({"out": str(a.out), "shape": list(out.shape), "total_intensity": float(out.values.sum()),
           "previews": len(previews)})


def cmd_metrics(a):
    pred, gt = qio.read_qds(a.pred), qio.read_qds(a.gt)
    rep = evaluate(pred, gt)
    if a.csv:
        with open(a.csv, "w") as f:
            f.write("frame,psnr,ssim\n")
            for i, (p, s) in enumerate(zip(rep.psnr, rep.ssim)):
                f.write(f"{i},{p!r},{s!r}\n")
    _emit(rep.summary())


def cmd_hotfix(a):
    v = qio.read_qds(a.inp)
    out, coords = hot_pixel_correct(v, a.z)
    qio.write_qds(out, a.out)
    _emit({"out": str(a.out), "hot_pixels": [list(c) for c in coords]})


def cmd_stats_check(a):
    results = run_battery(a.seed, a.draws)
    for r in results:
        sys.stdout.write(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quantarecon", description="Self-supervised reconstruction of 1-bit quanta video.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("toy", help="write the built-in moving-blob reference scene")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=128)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--velocity", type=float, nargs=2, default=(0.35, 0.6))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_toy)

    s = sub.add_parser("simulate", help="sample a binary stack from a reference video")
    s.add_argument("--ref", help="reference QDS volume")
    s.add_argument("--ref-pgm", nargs="+", help="reference PGM frames, in order")
    s.add_argument("--rate", type=float, required=True, help="target mean photons/pixel/frame")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("split", help="write one (input, target, mask) triple")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--p", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--crop", type=int, nargs=3, metavar=("T", "H", "W"))
    s.add_argument("--out-prefix")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("bin", help="temporal binning of a binary stack")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--window", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bin)

    s = sub.add_parser("train", help="train the denoiser on a binary stack")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON file mirroring TrainConfig")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history", help="CSV of per-epoch losses")
    s.add_argument("--checkpoint-dir")
    s.add_argument("--epochs", type=int)
    s.add_argument("--steps", type=int, help="steps per epoch")
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--unmasked", action="store_true", help="diagnostic: disable the mask")
    s.add_argument("--fixed-pairs", action="store_true", help="diagnostic: split once, reuse")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="tiled reconstruction")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tile", type=int, nargs=3, metavar=("T", "H", "W"))
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--shots", type=int, default=1)
    s.add_argument("--shot-p", type=float, default=1.0)
    s.add_argument("--combine", choices=("mean", "median"), default="mean")
    s.add_argument("--blend", choices=("uniform", "cosine"), default="uniform")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--preview-dir")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("metrics", help="frame-wise PSNR/SSIM")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("hotfix", help="detect and median-replace hot pixels")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--z", type=float, default=8.0)
    s.set_defaults(func=cmd_hotfix)

    s = sub.add_parser("stats-check", help="run the photon-statistics test battery")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--draws", type=int, default=1_000_000)
    s.set_defaults(func=cmd_stats_check)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        code = a.func(a)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_USAGE
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return EXIT_USAGE
    except (qio.FormatError, VolumeError, FileNotFoundError, IsADirectoryError) as e:
        sys.stderr.write(f"data error: {e}\n")
        return EXIT_DATA
    except FloatingPointError as e:
        sys.stderr.write(f"numerical error: {e}\n")
        return EXIT_NUMERIC
    except ValueError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_DATA
    return EXIT_OK if code is None else code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
