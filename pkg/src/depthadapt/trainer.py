"""Two-stage training protocol: warm-up (translators, then depth nets) and
end-to-end alternation between translator updates (m epochs) and depth
updates (n epochs), with mode flags selecting the ablation variants.

Freezing works through requires_grad: a phase marks exactly its trainable
parameter sets, so forwards through frozen networks either skip the tape
entirely (no trainable ancestor) or pass gradients through without touching
the frozen leaves (translator phase supervised by frozen depth nets).
"""

from __future__ import annotations

import csv
import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import losses, networks
from . import tensor as T
from .geometry import CameraRig
from .losses import LossReport, LossWeights
from .networks import ParamSet, build_all, load_checkpoint, save_checkpoint
from .synthworld import StereoSample, WorldConfig, augment
from .tensor import NonFiniteError, Tensor

TRANS_TERMS = ("gan_t", "gan_s", "cyc", "idt")
DEPTH_TERM_NAMES = ("sde", "tde", "tgc", "sgc", "dc", "ds")


class TrainingDiverged(RuntimeError):
    def __init__(self, phase, epoch, cause):
        super().__init__(f"non-finite loss in phase '{phase}' epoch {epoch}: {cause}")
        self.phase = phase
        self.epoch = epoch


class TrainMode(str, Enum):
    SYN = "SYN"
    SYN2REAL = "SYN2REAL"
    SYN2REAL_E2E = "SYN2REAL_E2E"
    SYN_GC = "SYN_GC"
    SYN2REAL_GC = "SYN2REAL_GC"
    SYN2REAL_GC_E2E = "SYN2REAL_GC_E2E"
    REAL = "REAL"
    REAL2SYN_SYN_GC_E2E = "REAL2SYN_SYN_GC_E2E"
    GASDA_WO_DC = "GASDA_WO_DC"
    GASDA = "GASDA"


_MODE_ALIASES = {"GASDA_WODC": "GASDA_WO_DC"}


def parse_mode(text: str) -> TrainMode:
    canon = text.strip().upper().replace("/", "").replace("-", "_")
    canon = _MODE_ALIASES.get(canon, canon)
    try:
        return TrainMode(canon)
    except ValueError:
        valid = ", ".join(m.value for m in TrainMode)
        raise ValueError(f"unknown mode '{text}'; valid modes: {valid}") from None


TRANSLATOR_NETS = ("g_s2t", "g_t2s", "d_t", "d_s")


@dataclass(frozen=True)
class ModeSpec:
    nets: tuple
    depth_terms: tuple          # active in depth warm-up and the n-phase
    m_terms: tuple              # active in the alternation translator phase
    e2e: bool
    eval_path: str              # ft | fs | fs_raw | avg
    translate_source: bool      # depth supervision consumes translated source

    @property
    def translator_warmup(self) -> bool:
        return "g_s2t" in self.nets

    @property
    def needs_source(self) -> bool:
        return any(t in ("sde", "tde") for t in self.depth_terms) or self.translator_warmup

    @property
    def needs_target(self) -> bool:
        return any(t in ("tgc", "sgc", "dc", "ds") for t in self.depth_terms) \
            or self.translator_warmup


MODE_SPECS = {
    TrainMode.SYN: ModeSpec(("f_s",), ("sde",), (), False, "fs_raw", False),
    TrainMode.SYN2REAL: ModeSpec(TRANSLATOR_NETS + ("f_t",), ("tde",),
                                 TRANS_TERMS + ("tde",), False, "ft", True),
    TrainMode.SYN2REAL_E2E: ModeSpec(TRANSLATOR_NETS + ("f_t",), ("tde",),
                                     TRANS_TERMS + ("tde",), True, "ft", True),
    TrainMode.SYN_GC: ModeSpec(("f_t",), ("tde", "tgc", "ds"), (), False, "ft", False),
    TrainMode.SYN2REAL_GC: ModeSpec(TRANSLATOR_NETS + ("f_t",), ("tde", "tgc", "ds"),
                                    TRANS_TERMS + ("tde",), False, "ft", True),
    TrainMode.SYN2REAL_GC_E2E: ModeSpec(TRANSLATOR_NETS + ("f_t",),
                                        ("tde", "tgc", "ds"),
                                        TRANS_TERMS + ("tde",), True, "ft", True),
    TrainMode.REAL: ModeSpec(("f_t",), ("tgc", "ds"), (), False, "ft", False),
    TrainMode.REAL2SYN_SYN_GC_E2E: ModeSpec(TRANSLATOR_NETS + ("f_s",),
                                            ("sde", "sgc", "ds"),
                                            TRANS_TERMS + ("sgc", "ds"), True, "fs",
                                            False),
    TrainMode.GASDA_WO_DC: ModeSpec(TRANSLATOR_NETS + ("f_t", "f_s"),
                                    ("sde", "tde", "tgc", "sgc", "ds"),
                                    TRANS_TERMS + ("tde", "sgc", "ds"), True, "avg",
                                    True),
    TrainMode.GASDA: ModeSpec(TRANSLATOR_NETS + ("f_t", "f_s"),
                              ("sde", "tde", "tgc", "sgc", "dc", "ds"),
                              TRANS_TERMS + ("tde", "sgc", "dc", "ds"), True, "avg",
                              True),
}


@dataclass(frozen=True)
class TrainSchedule:
    warmup_trans_epochs: int = 10
    warmup_depth_epochs: int = 20
    alt_total_epochs: int = 40
    m: int = 3
    n: int = 7
    lr_warm_trans: float = 2e-4
    lr_warm_depth: float = 1e-4
    lr_alt_trans: float = 2e-6
    lr_alt_depth: float = 1e-5
    beta1_trans: float = 0.5
    beta1_depth: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1
    seed: int = 0
    aug_flip: bool = True
    aug_rot_deg: float = 0.0
    aug_brightness: tuple = (0.9, 1.1)

    def __post_init__(self):
        if self.m <= 0 or self.n <= 0:
            raise ValueError("alternation counts m and n must be positive")
        for f in ("lr_warm_trans", "lr_warm_depth", "lr_alt_trans", "lr_alt_depth"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float, beta2: float, eps: float = 1e-8) -> AdamState:
    """One bias-corrected first/second moment update over named parameters,
    reading each tensor's grad (missing grads count as zero)."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.TensorError(f"adam: grad shape {g.shape} != param {p.data.shape}"
                                f" for '{name}'")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam: non-finite gradient for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return state


class Adam:
    def __init__(self, params: dict[str, Tensor], lr, beta1, beta2, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


def collect_params(nets: dict[str, ParamSet], names) -> dict[str, Tensor]:
    out = {}
    for n in names:
        if n in nets:
            for pname, tensor in nets[n].params.items():
                out[f"{n}/{pname}"] = tensor
    return out


# ---------------------------------------------------------------------------
# loss term assembly


@dataclass
class Batch:
    x_s: Tensor | None = None
    gt_s: Tensor | None = None
    x_t: Tensor | None = None
    right_t: Tensor | None = None


def compute_terms(nets: dict[str, ParamSet], batch: Batch, rig: CameraRig,
                  weights: LossWeights, wanted, translate_source: bool):
    """Compute the requested loss terms, sharing network forwards.

    Returns (terms dict, cache dict); the cache exposes the translated fake
    images for the discriminator step.
    """
    cache: dict[str, object] = {}

    def fake_t():
        if "fake_t" not in cache:
            cache["fake_t"] = networks.to_unit(
                networks.run_generator(nets["g_s2t"], batch.x_s))
        return cache["fake_t"]

    def fake_s():
        if "fake_s" not in cache:
            cache["fake_s"] = networks.to_unit(
                networks.run_generator(nets["g_t2s"], batch.x_t))
        return cache["fake_s"]

    def preds(key, net, img_fn):
        if key not in cache:
            cache[key] = networks.run_depth_net(nets[net], img_fn())
        return cache[key]

    preds_tt = lambda: preds("preds_tt", "f_t", lambda: batch.x_t)
    preds_st = lambda: preds("preds_st", "f_s", fake_s)
    preds_ss = lambda: preds("preds_ss", "f_s", lambda: batch.x_s)
    preds_ts = lambda: preds(
        "preds_ts", "f_t", (fake_t if translate_source else (lambda: batch.x_s)))

    terms: dict[str, Tensor] = {}
    for name in wanted:
        if name == "gan_t":
            terms[name] = losses.gen_adversarial_loss(
                networks.run_discriminator(nets["d_t"], fake_t()))
        elif name == "gan_s":
            terms[name] = losses.gen_adversarial_loss(
                networks.run_discriminator(nets["d_s"], fake_s()))
        elif name == "cyc":
            rec_s = networks.to_unit(networks.run_generator(nets["g_t2s"], fake_t()))
            rec_t = networks.to_unit(networks.run_generator(nets["g_s2t"], fake_s()))
            terms[name] = T.add(losses.cycle_loss(batch.x_s, rec_s),
                                losses.cycle_loss(batch.x_t, rec_t))
        elif name == "idt":
            idt_s = networks.to_unit(networks.run_generator(nets["g_t2s"], batch.x_s))
            idt_t = networks.to_unit(networks.run_generator(nets["g_s2t"], batch.x_t))
            terms[name] = T.add(losses.identity_loss(batch.x_s, idt_s),
                                losses.identity_loss(batch.x_t, idt_t))
        elif name == "sde":
            terms[name] = losses.multi_scale_supervised(preds_ss(), batch.gt_s)
        elif name == "tde":
            terms[name] = losses.multi_scale_supervised(preds_ts(), batch.gt_s)
        elif name == "tgc":
            terms[name] = losses.multi_scale_geometry_consistency(
                preds_tt(), batch.x_t, batch.right_t, rig, weights)
        elif name == "sgc":
            terms[name] = losses.multi_scale_geometry_consistency(
                preds_st(), batch.x_t, batch.right_t, rig, weights)
        elif name == "dc":
            terms[name] = losses.multi_scale_consistency(preds_tt(), preds_st())
        elif name == "ds":
            parts = []
            if "f_t" in nets:
                parts.append(losses.multi_scale_smoothness(preds_tt(), batch.x_t))
            if "f_s" in nets and "g_t2s" in nets:
                parts.append(losses.multi_scale_smoothness(preds_st(), batch.x_t))
            if not parts:
                raise ValueError("ds term requested but no target-path depth net")
            total = parts[0]
            for p in parts[1:]:
                total = T.add(total, p)
            terms[name] = total
        else:
            raise KeyError(f"unknown loss term '{name}'")
    return terms, cache


def objective_on_micro_batch(nets, x_s: Tensor, x_t: Tensor, right_t: Tensor,
                             gt_s: Tensor, rig: CameraRig,
                             weights: LossWeights) -> Tensor:
    """All ten terms of the composite objective on one source/target pair
    (used by the end-to-end gradient check)."""
    batch = Batch(x_s=x_s, gt_s=gt_s, x_t=x_t, right_t=right_t)
    terms, _ = compute_terms(nets, batch, rig, weights,
                             wanted=losses.TERM_NAMES, translate_source=True)
    return losses.full_objective(terms, weights)


# ---------------------------------------------------------------------------
# trainer


def _aug_seed(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def _stack(tensors) -> Tensor:
    return Tensor(np.concatenate([t.data for t in tensors], axis=0))


class Trainer:
    def __init__(self, samples: list[StereoSample], world_cfg: WorldConfig,
                 schedule: TrainSchedule, mode: TrainMode,
                 weights: LossWeights | None = None,
                 net_cfg: networks.NetConfig | None = None,
                 out_dir: str | None = None):
        self.schedule = schedule
        self.mode = mode
        self.spec = MODE_SPECS[mode]
        self.weights = weights or LossWeights()
        self.net_cfg = net_cfg or networks.NetConfig()
        self.world_cfg = world_cfg
        self.rig = world_cfg.rig()
        self.out_dir = out_dir
        self.sources = [s for s in samples if s.domain == "source"]
        self.targets = [s for s in samples if s.domain == "target"]
        if self.spec.needs_source and not self.sources:
            raise ValueError(f"mode {mode.value} requires source-domain samples")
        if self.spec.needs_target and not self.targets:
            raise ValueError(f"mode {mode.value} requires target-domain samples")
        self.nets = build_all(self.net_cfg, seed=schedule.seed, names=self.spec.nets)
        self.log_rows: list[dict] = []
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # -- phase plumbing ------------------------------------------------

    def _set_trainable(self, trainable_nets):
        for name, ps in self.nets.items():
            ps.set_requires_grad(name in trainable_nets)

    def _epoch_batches(self, phase: str, epoch: int, need_source: bool,
                       need_target: bool):
        rng = T.make_rng(self.schedule.seed, "order", phase, epoch)
        bs = self.schedule.batch_size
        src = list(rng.permutation(len(self.sources))) if need_source else []
        tgt = list(rng.permutation(len(self.targets))) if need_target else []
        if need_source and need_target:
            steps = min(len(src), len(tgt)) // bs
        elif need_source:
            steps = len(src) // bs
        else:
            steps = len(tgt) // bs
        if steps == 0:
            raise ValueError(f"not enough samples for one batch of {bs}")
        sched = self.schedule
        for step in range(steps):
            batch = Batch()
            if need_source:
                picks = [self.sources[src[step * bs + i]] for i in range(bs)]
                picks = [augment(s, _aug_seed(sched.seed, phase, epoch, step, i, s.id),
                                 flip=sched.aug_flip, rot_deg=sched.aug_rot_deg,
                                 brightness=sched.aug_brightness)
                         for i, s in enumerate(picks)]
                batch.x_s = _stack([s.left for s in picks])
                batch.gt_s = _stack([s.gt_depth for s in picks])
            if need_target:
                picks = [self.targets[tgt[step * bs + i]] for i in range(bs)]
                picks = [augment(s, _aug_seed(sched.seed, phase, epoch, step, i, s.id),
                                 flip=sched.aug_flip, rot_deg=sched.aug_rot_deg,
                                 brightness=sched.aug_brightness)
                         for i, s in enumerate(picks)]
                batch.x_t = _stack([s.left for s in picks])
                batch.right_t = _stack([s.right for s in picks])
            yield batch

    def _log_epoch(self, phase: str, epoch: int, term_sums: dict, steps: int):
        means = {k: v / steps for k, v in term_sums.items()}
        report = LossReport.from_terms(means, self.weights)
        row = {"epoch": epoch, "phase": phase, **report.as_dict()}
        self.log_rows.append(row)
        return report

    def _translator_epoch(self, phase: str, epoch: int, wanted):
        """One epoch updating translators + discriminators."""
        sums = {k: 0.0 for k in wanted}
        steps = 0
        opt_g, opt_d = self._opt_g, self._opt_d
        for batch in self._epoch_batches(phase, epoch, True, True):
            try:
                terms, cache = compute_terms(self.nets, batch, self.rig, self.weights,
                                             wanted, self.spec.translate_source)
                obj = losses.full_objective(
                    {k: terms.get(k, 0.0) for k in losses.TERM_NAMES}, self.weights)
                T.backward(obj)
                opt_g.step()
                opt_g.zero_grads()
                opt_d.zero_grads()
                T.clear_graph()

                fake_t = Tensor(cache["fake_t"].data)
                fake_s = Tensor(cache["fake_s"].data)
                d_loss = T.add(
                    losses.adversarial_losses(
                        networks.run_discriminator(self.nets["d_t"], batch.x_t),
                        networks.run_discriminator(self.nets["d_t"], fake_t))[1],
                    losses.adversarial_losses(
                        networks.run_discriminator(self.nets["d_s"], batch.x_s),
                        networks.run_discriminator(self.nets["d_s"], fake_s))[1])
                T.backward(d_loss)
                opt_d.step()
                opt_d.zero_grads()
                T.clear_graph()
            except NonFiniteError as e:
                T.clear_graph()
                raise TrainingDiverged(phase, epoch, e) from e
            for k in wanted:
                sums[k] += terms[k].item()
            steps += 1
        return self._log_epoch(phase, epoch, sums, steps)

    def _depth_epoch(self, phase: str, epoch: int, wanted):
        """One epoch updating the depth estimators only."""
        sums = {k: 0.0 for k in wanted}
        steps = 0
        need_s = any(t in ("sde", "tde") for t in wanted)
        need_t = any(t in ("tgc", "sgc", "dc", "ds") for t in wanted)
        for batch in self._epoch_batches(phase, epoch, need_s, need_t):
            try:
                terms, _ = compute_terms(self.nets, batch, self.rig, self.weights,
                                         wanted, self.spec.translate_source)
                obj = losses.full_objective(
                    {k: terms.get(k, 0.0) for k in losses.TERM_NAMES}, self.weights)
                T.backward(obj)
                self._opt_f.step()
                self._opt_f.zero_grads()
                T.clear_graph()
            except NonFiniteError as e:
                T.clear_graph()
                raise TrainingDiverged(phase, epoch, e) from e
            for k in wanted:
                sums[k] += terms[k].item()
            steps += 1
        return self._log_epoch(phase, epoch, sums, steps)

    def _save(self, tag: str):
        if self.out_dir:
            save_checkpoint(os.path.join(self.out_dir, f"{tag}.bin"), self.nets)

    # -- the two stages -------------------------------------------------

    def warmup(self):
        """Stage 1: translation objective over translators/discriminators,
        then the mode's depth terms over frozen translators."""
        sched = self.schedule
        if self.spec.translator_warmup and sched.warmup_trans_epochs > 0:
            self._set_trainable(set(TRANSLATOR_NETS))
            self._opt_g = Adam(collect_params(self.nets, ("g_s2t", "g_t2s")),
                               sched.lr_warm_trans, sched.beta1_trans, sched.beta2)
            self._opt_d = Adam(collect_params(self.nets, ("d_t", "d_s")),
                               sched.lr_warm_trans, sched.beta1_trans, sched.beta2)
            for epoch in range(1, sched.warmup_trans_epochs + 1):
                self._translator_epoch("warm_trans", epoch, TRANS_TERMS)
            self._save(f"ckpt_warm_trans_{sched.warmup_trans_epochs}")
        depth_nets = tuple(n for n in ("f_t", "f_s") if n in self.nets)
        if depth_nets and sched.warmup_depth_epochs > 0:
            self._set_trainable(set(depth_nets))
            self._opt_f = Adam(collect_params(self.nets, depth_nets),
                               sched.lr_warm_depth, sched.beta1_depth, sched.beta2)
            for epoch in range(1, sched.warmup_depth_epochs + 1):
                self._depth_epoch("warm_depth", epoch, self.spec.depth_terms)
            self._save(f"ckpt_warm_depth_{sched.warmup_depth_epochs}")
        return self.nets

    def alternate(self):
        """Stage 2 (end-to-end modes): m translator epochs with frozen depth
        nets supervising the translators, then n depth epochs with frozen
        translators, repeated for alt_total_epochs."""
        if not self.spec.e2e:
            return self.nets
        sched = self.schedule
        self._opt_g = Adam(collect_params(self.nets, ("g_s2t", "g_t2s")),
                           sched.lr_alt_trans, sched.beta1_trans, sched.beta2)
        self._opt_d = Adam(collect_params(self.nets, ("d_t", "d_s")),
                           sched.lr_alt_trans, sched.beta1_trans, sched.beta2)
        depth_nets = tuple(n for n in ("f_t", "f_s") if n in self.nets)
        self._opt_f = Adam(collect_params(self.nets, depth_nets),
                           sched.lr_alt_depth, sched.beta1_depth, sched.beta2)
        cycle = sched.m + sched.n
        for epoch in range(1, sched.alt_total_epochs + 1):
            in_m = (epoch - 1) % cycle < sched.m
            if in_m:
                self._set_trainable(set(TRANSLATOR_NETS))
                self._translator_epoch("alt_m", epoch, self.spec.m_terms)
            else:
                self._set_trainable(set(depth_nets))
                self._depth_epoch("alt_n", epoch, self.spec.depth_terms)
        self._save(f"ckpt_alt_{sched.alt_total_epochs}")
        return self.nets

    # -- orchestration ---------------------------------------------------

    def _warmup_ckpt_path(self):
        return os.path.join(self.out_dir or "",
                            f"ckpt_warm_depth_{self.schedule.warmup_depth_epochs}.bin")

    def run(self, resume: bool = True):
        if self.out_dir:
            with open(os.path.join(self.out_dir, "config.json"), "w") as f:
                json.dump({
                    "mode": self.mode.value,
                    "world": asdict(self.world_cfg),
                    "schedule": asdict(self.schedule),
                    "weights": asdict(self.weights),
                    "net": asdict(self.net_cfg),
                }, f, indent=1)
        ck = self._warmup_ckpt_path()
        if resume and self.out_dir and os.path.exists(ck):
            self.nets = load_checkpoint(ck)
        else:
            self.warmup()
        self.alternate()
        self._save("ckpt_final")
        if self.out_dir:
            self.write_log(os.path.join(self.out_dir, "log.csv"))
        return self.nets

    def write_log(self, path):
        cols = ["epoch", "phase"] + list(losses.TERM_NAMES) + ["total"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(cols)
            for row in self.log_rows:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                 for c in cols])


def warmup(samples, world_cfg, schedule, mode, out_dir=None, **kw):
    """Stage-1 convenience wrapper returning (trainer, nets)."""
    tr = Trainer(samples, world_cfg, schedule, mode, out_dir=out_dir, **kw)
    tr.warmup()
    return tr


def train_run(samples, world_cfg, schedule, mode, out_dir, weights=None,
              net_cfg=None, resume=True) -> Trainer:
    tr = Trainer(samples, world_cfg, schedule, mode, weights=weights,
                 net_cfg=net_cfg, out_dir=out_dir)
    tr.run(resume=resume)
    return tr
