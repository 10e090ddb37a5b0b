"""Averaging inference over the two prediction paths, the seven-metric depth
evaluation with caps, and ablation comparison reports."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import networks
from .geometry import D_MIN
from .synthworld import load_manifest, load_corpus, shift_domain
from .tensor import Tensor, no_grad
from .trainer import MODE_SPECS, TrainMode, parse_mode

CSV_HEADER = "mode,cap,abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3,pixels"

# Table row order: domain adaptation, geometry consistency, symmetric groups
REPORT_ORDER = [
    "SYN", "SYN2REAL", "SYN2REAL_E2E",
    "REAL", "SYN_GC", "SYN2REAL_GC", "SYN2REAL_GC_E2E",
    "REAL2SYN_SYN_GC_E2E", "GASDA_WO_DC", "GASDA_FT", "GASDA_FS", "GASDA",
]


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    cap: float
    pixels: int

    def __post_init__(self):
        if not (self.a1 <= self.a2 + 1e-12 and self.a2 <= self.a3 + 1e-12):
            raise MetricError(f"accuracies not monotone: {self.a1}, {self.a2}, {self.a3}")


def compute_metrics(pred, gt, cap_m: float, d_min: float = D_MIN) -> MetricReport:
    """Standard error/accuracy metrics over pixels with 0 < gt < cap;
    predictions are clipped to [d_min, cap]."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    p = p.astype(np.float64).reshape(-1)
    g = g.astype(np.float64).reshape(-1)
    valid = (g > 0) & (g < cap_m)
    if not valid.any():
        raise MetricError(f"no valid pixels under cap {cap_m}")
    g = g[valid]
    p = np.clip(p[valid], d_min, cap_m)
    diff = g - p
    thresh = np.maximum(g / p, p / g)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        a1=float(np.mean(thresh < 1.25)),
        a2=float(np.mean(thresh < 1.25 ** 2)),
        a3=float(np.mean(thresh < 1.25 ** 3)),
        cap=cap_m,
        pixels=int(valid.sum()),
    )


def infer(x_t: Tensor, nets: dict[str, networks.ParamSet], path: str = "avg") -> Tensor:
    """Depth for a target-domain image.

    avg: mean of the direct estimate and the translate-then-estimate path;
    ft / fs: a single path.  The fs path translates first when a target-to-
    source translator is in the bundle, else consumes the image directly.
    """
    def path_ft():
        if "f_t" not in nets:
            raise KeyError("path 'ft' needs parameter set f_t")
        return networks.run_depth_net(nets["f_t"], x_t)[0]

    def path_fs():
        if "f_s" not in nets:
            raise KeyError("path 'fs' needs parameter set f_s")
        img = x_t
        if "g_t2s" in nets:
            img = networks.to_unit(networks.run_generator(nets["g_t2s"], x_t))
        return networks.run_depth_net(nets["f_s"], img)[0]

    with no_grad():
        if path in ("ft",):
            return path_ft()
        if path in ("fs", "fs_raw"):
            return path_fs()
        if path == "avg":
            a, b = path_ft(), path_fs()
            return Tensor(0.5 * (a.data + b.data))
    raise KeyError(f"unknown inference path '{path}'")


# ---------------------------------------------------------------------------
# ablation report


def _eval_pairs(data_dir):
    """Target-appearance evaluation set with exact ground truth: the corpus
    source scenes pushed through the configured domain shift."""
    manifest = load_manifest(data_dir)
    cfg = manifest["config"]
    _, samples = load_corpus(data_dir)
    pairs = []
    for s in samples:
        if s.domain != "source":
            continue
        shifted = shift_domain(s, cfg)
        pairs.append((shifted.left, s.gt_depth))
    if not pairs:
        raise MetricError(f"no source samples with ground truth in {data_dir}")
    return pairs


def _mean_report(reports: list[MetricReport], cap: float) -> MetricReport:
    return MetricReport(
        abs_rel=float(np.mean([r.abs_rel for r in reports])),
        sq_rel=float(np.mean([r.sq_rel for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        rmse_log=float(np.mean([r.rmse_log for r in reports])),
        a1=float(np.mean([r.a1 for r in reports])),
        a2=float(np.mean([r.a2 for r in reports])),
        a3=float(np.mean([r.a3 for r in reports])),
        cap=cap,
        pixels=int(sum(r.pixels for r in reports)),
    )


def evaluate_run(run_dir, pairs, caps) -> dict[str, MetricReport]:
    """Metric reports for one run directory, keyed by row label (averaging
    runs also yield single-path rows)."""
    with open(os.path.join(run_dir, "config.json")) as f:
        cfg = json.load(f)
    mode = parse_mode(cfg["mode"])
    ckpt = os.path.join(run_dir, "ckpt_final.bin")
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    nets = networks.load_checkpoint(ckpt)
    spec = MODE_SPECS[mode]
    paths = {mode.value: spec.eval_path}
    if spec.eval_path == "avg":
        paths[f"{mode.value}_FT"] = "ft"
        paths[f"{mode.value}_FS"] = "fs"
    out = {}
    for label, path in paths.items():
        preds = [(infer(x, nets, path), gt) for x, gt in pairs]
        for cap in caps:
            reports = [compute_metrics(p, gt, cap) for p, gt in preds]
            out[(label, cap)] = _mean_report(reports, cap)
    return out


def ablation_report(run_dirs, data_dir, caps) -> list[dict]:
    """One row per (mode row label, cap), ordered by the ablation grouping;
    failed runs produce nan rows with the error noted on stderr."""
    pairs = _eval_pairs(data_dir)
    collected = {}
    for run_dir in run_dirs:
        try:
            collected.update(evaluate_run(run_dir, pairs, caps))
        except Exception as e:  # noqa: BLE001 - report and keep the row slot
            try:
                with open(os.path.join(run_dir, "config.json")) as f:
                    label = parse_mode(json.load(f)["mode"]).value
            except Exception:
                label = os.path.basename(os.path.normpath(run_dir))
            print(f"error: eval: run '{run_dir}': {e}", file=sys.stderr)
            for cap in caps:
                collected[(label, cap)] = None
    rows = []
    order = {label: i for i, label in enumerate(REPORT_ORDER)}
    for (label, cap) in sorted(collected, key=lambda k: (order.get(k[0], 99), -k[1])):
        rep = collected[(label, cap)]
        if rep is None:
            rows.append({"mode": label, "cap": cap, "abs_rel": float("nan"),
                         "sq_rel": float("nan"), "rmse": float("nan"),
                         "rmse_log": float("nan"), "a1": float("nan"),
                         "a2": float("nan"), "a3": float("nan"), "pixels": 0})
        else:
            rows.append({"mode": label, "cap": cap, "abs_rel": rep.abs_rel,
                         "sq_rel": rep.sq_rel, "rmse": rep.rmse,
                         "rmse_log": rep.rmse_log, "a1": rep.a1, "a2": rep.a2,
                         "a3": rep.a3, "pixels": rep.pixels})
    return rows


def write_report_csv(rows, path):
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in rows:
            vals = [r["mode"], f"{r['cap']:g}"]
            for k in ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3"):
                vals.append(f"{r[k]:.6g}")
            vals.append(str(r["pixels"]))
            f.write(",".join(vals) + "\n")
