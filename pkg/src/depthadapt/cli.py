"""Command-line entry point: data generation, training, evaluation,
inference, and gradient checking.

Exit codes: 0 success, 1 gradient-check failure, 2 configuration error,
3 I/O error, 4 missing data, 5 non-finite training loss.  Errors print one
"error: <category>: <message>" line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import evaluation, gradcheck
from .losses import LossWeights
from .networks import NetConfig, load_checkpoint
from .synthworld import (FileFormatError, WorldConfig, load_corpus, load_depth,
                         load_image, save_corpus, save_depth, save_image)
from .tensor import Tensor
from .trainer import (TrainingDiverged, TrainMode, TrainSchedule, parse_mode,
                      train_run)

EXIT_OK = 0
EXIT_GRADFAIL = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5


class ConfigError(ValueError):
    pass


def _err(category: str, message: str):
    print(f"error: {category}: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# run configuration


_SECTIONS = {
    "world": WorldConfig,
    "schedule": TrainSchedule,
    "weights": LossWeights,
    "net": NetConfig,
}
_TOP_KEYS = set(_SECTIONS) | {"mode", "count", "seed"}

_TUPLE_FIELDS = {"shift_cast", "aug_brightness"}


class RunConfig:
    """Resolved configuration: world/schedule/weights/net sections plus
    mode, per-domain sample count, and the master seed."""

    def __init__(self, world, schedule, weights, net, mode, count, seed):
        self.world = world
        self.schedule = schedule
        self.weights = weights
        self.net = net
        self.mode = mode
        self.count = count
        self.seed = seed

    def as_dict(self):
        return {"world": asdict(self.world), "schedule": asdict(self.schedule),
                "weights": asdict(self.weights), "net": asdict(self.net),
                "mode": None if self.mode is None else self.mode.value,
                "count": self.count, "seed": self.seed}


def _build_section(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} for {cls.__name__}; "
                          f"valid keys: {sorted(known)}")
    clean = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
             for k, v in data.items()}
    try:
        return cls(**clean)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from None


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}; "
                          f"valid keys: {sorted(_TOP_KEYS)}")
    overrides = overrides or {}
    seed = overrides.get("seed", data.get("seed"))
    sections = {}
    for name, cls in _SECTIONS.items():
        body = dict(data.get(name, {}))
        if seed is not None and name in ("world", "schedule"):
            body["seed"] = int(seed)
        sections[name] = _build_section(cls, body)
    mode_text = overrides.get("mode", data.get("mode"))
    mode = None
    if mode_text is not None:
        try:
            mode = parse_mode(str(mode_text))
        except ValueError as e:
            raise ConfigError(str(e)) from None
    count = int(overrides.get("count", data.get("count", 100)))
    if count <= 0:
        raise ConfigError("count must be positive")
    return RunConfig(sections["world"], sections["schedule"], sections["weights"],
                     sections["net"], mode, count,
                     seed if seed is None else int(seed))


# ---------------------------------------------------------------------------
# commands


def _overrides(**kw):
    return {k: v for k, v in kw.items() if v is not None}


def cmd_gen_data(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(count=args.count, seed=args.seed))
    except ConfigError as e:
        _err("config", str(e))
        return EXIT_CONFIG
    count = args.count or cfg.count
    try:
        os.makedirs(args.out, exist_ok=True)
        probe = os.path.join(args.out, ".write_probe")
        with open(probe, "w") as f:
            f.write("ok")
        os.remove(probe)
    except OSError as e:
        _err("io", f"output directory '{args.out}' not writable: {e}")
        return EXIT_IO
    try:
        manifest = save_corpus(args.out, cfg.world, count)
    except OSError as e:
        _err("io", f"writing corpus under '{args.out}': {e}")
        return EXIT_IO
    print(f"wrote {len(manifest['samples'])} samples ({count} per domain) "
          f"to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(mode=args.mode, seed=args.seed))
        if cfg.mode is None:
            raise ConfigError("no training mode given (config 'mode' or --mode)")
    except ConfigError as e:
        _err("config", str(e))
        return EXIT_CONFIG
    try:
        world_cfg, samples = load_corpus(args.data)
    except (FileNotFoundError, FileFormatError) as e:
        _err("data", str(e))
        return EXIT_DATA
    try:
        train_run(samples, world_cfg, cfg.schedule, cfg.mode, args.out,
                  weights=cfg.weights, net_cfg=cfg.net)
    except TrainingDiverged as e:
        _err("loss", str(e))
        return EXIT_DIVERGED
    except ValueError as e:
        _err("data", str(e))
        return EXIT_DATA
    print(f"run complete: {args.out} (mode {cfg.mode.value})")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        caps = [float(c) for c in args.caps.split(",") if c]
        if not caps:
            raise ValueError("empty cap list")
    except ValueError as e:
        _err("config", f"bad --caps '{args.caps}': {e}")
        return EXIT_CONFIG
    try:
        rows = evaluation.ablation_report(args.runs, args.data, caps)
    except (FileNotFoundError, FileFormatError, evaluation.MetricError) as e:
        _err("data", str(e))
        return EXIT_DATA
    evaluation.write_report_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _false_color(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Near = warm, far = cool, linear in inverse depth. Returns (1,3,H,W)."""
    inv = 1.0 / np.clip(depth, d_min, d_max)
    t = (inv - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max)
    stops = np.array([
        [0.05, 0.05, 0.55],   # far: deep blue
        [0.05, 0.75, 0.85],
        [0.95, 0.90, 0.10],
        [0.90, 0.10, 0.05],   # near: red
    ])
    pos = np.linspace(0.0, 1.0, len(stops))
    chans = [np.interp(t, pos, stops[:, c]) for c in range(3)]
    return np.stack(chans, axis=1)


def cmd_infer(args) -> int:
    ckpt = os.path.join(args.run, "ckpt_final.bin")
    if not os.path.exists(ckpt):
        _err("data", f"missing checkpoint {ckpt}")
        return EXIT_DATA
    try:
        nets = load_checkpoint(ckpt)
        image = load_image(args.image)
    except (FileNotFoundError, FileFormatError) as e:
        _err("data", str(e))
        return EXIT_DATA
    try:
        depth = evaluation.infer(image, nets, args.path)
    except KeyError as e:
        _err("config", str(e.args[0]))
        return EXIT_CONFIG
    save_depth(depth, args.out)
    if args.viz:
        net_cfg = next(iter(nets.values())).cfg
        rgb = _false_color(depth.data[:, 0], net_cfg.d_min, net_cfg.d_max)
        save_image(Tensor(rgb.astype(np.float32)), args.viz)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    op = None if args.all or args.op is None else args.op
    try:
        reports = gradcheck.run_suite(op=op, tolerance=args.tolerance,
                                      step=args.step, seed=args.seed)
    except KeyError as e:
        _err("config", str(e.args[0]))
        return EXIT_CONFIG
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r.line())
    if failed:
        _err("gradcheck", f"{len(failed)} op(s) failed: "
             + ", ".join(r.name for r in failed))
        return EXIT_GRADFAIL
    print(f"all {len(reports)} checks passed (tolerance {args.tolerance:g})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="depthadapt",
        description="Symmetric domain-adaptive stereo-supervised depth "
                    "estimation at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a two-domain corpus")
    g.add_argument("--config", help="run config JSON (defaults used if omitted)")
    g.add_argument("--out", required=True, help="output corpus directory")
    g.add_argument("--count", type=int, help="samples per domain (default 100)")
    g.add_argument("--seed", type=int, help="override the world seed")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one mode on a corpus")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", required=True, help="corpus directory")
    t.add_argument("--mode", help="training mode (e.g. SYN, GASDA)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, help="override the schedule seed")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="ablation metric report over run dirs")
    e.add_argument("--runs", nargs="+", required=True, help="run directories")
    e.add_argument("--data", required=True, help="test corpus directory")
    e.add_argument("--caps", default="80,50", help="depth caps in meters")
    e.add_argument("--out", required=True, help="report CSV path")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict depth for one image")
    i.add_argument("--run", required=True, help="run directory with ckpt_final.bin")
    i.add_argument("--image", required=True, help="input PPM")
    i.add_argument("--out", required=True, help="output depth PFM")
    i.add_argument("--viz", help="optional false-color PPM")
    i.add_argument("--path", default="avg", choices=["avg", "ft", "fs"],
                   help="prediction path (default avg)")
    i.set_defaults(fn=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--op", help="check only this op/loss")
    c.add_argument("--all", action="store_true", help="check everything (default)")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
