"""Training loss terms and their weighted composition.

All losses are pure differentiable functions of tensors and return scalar
tensors.  L1-style terms are means over elements so the trade-off weights
are resolution independent.  The adversarial criterion is least-squares
(real target 1, fake target 0).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from . import geometry
from . import tensor as T
from .tensor import Tensor, TensorError

TERM_NAMES = ("gan_t", "gan_s", "cyc", "idt", "sde", "tde", "tgc", "sgc", "dc", "ds")


@dataclass(frozen=True)
class LossWeights:
    """Trade-off factors of the composite objective."""

    lambda1: float = 10.0   # cycle consistency
    lambda2: float = 30.0   # identity mapping
    eta: float = 0.85       # SSIM share of geometry consistency
    mu: float = 0.15        # L1 share of geometry consistency
    gamma1: float = 50.0    # supervised depth
    gamma2: float = 50.0    # geometry consistency
    gamma3: float = 50.0    # depth consistency
    gamma4: float = 0.5     # depth smoothness

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass
class LossReport:
    """Per-term scalar values plus the weighted total for one step/epoch."""

    gan_t: float = 0.0
    gan_s: float = 0.0
    cyc: float = 0.0
    idt: float = 0.0
    sde: float = 0.0
    tde: float = 0.0
    tgc: float = 0.0
    sgc: float = 0.0
    dc: float = 0.0
    ds: float = 0.0
    total: float = 0.0

    @classmethod
    def from_terms(cls, terms, weights: LossWeights) -> "LossReport":
        vals = {k: float(terms.get(k, 0.0)) for k in TERM_NAMES}
        return cls(**vals, total=float(full_objective(vals, weights)))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in TERM_NAMES + ("total",)}


def _l1_mean(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch {a.shape} vs {b.shape}")
    return T.mean(T.abs_(T.sub(a, b)))


def adversarial_losses(disc_real: Tensor, disc_fake: Tensor):
    """Least-squares adversarial pair: (generator loss, discriminator loss).

    Real and fake patch maps may differ in shape (independent means) but
    must both be nonempty.
    """
    if disc_real.data.size == 0 or disc_fake.data.size == 0:
        raise TensorError("adversarial_losses: empty patch map")
    gen = T.mean(T.square(T.shift(disc_fake, -1.0)))
    disc = T.add(T.mean(T.square(T.shift(disc_real, -1.0))),
                 T.mean(T.square(disc_fake)))
    return gen, disc


def gen_adversarial_loss(disc_fake: Tensor) -> Tensor:
    """Generator side alone: mean((D(fake) - 1)^2)."""
    return T.mean(T.square(T.shift(disc_fake, -1.0)))


def cycle_loss(x: Tensor, reconstructed: Tensor) -> Tensor:
    """Mean L1 between an image and its round-trip translation (one
    direction; the caller sums both)."""
    return _l1_mean(x, reconstructed)


def identity_loss(x: Tensor, mapped: Tensor) -> Tensor:
    """Mean L1 between an image and its same-domain mapping (one direction)."""
    return _l1_mean(x, mapped)


def translation_objective(parts, weights: LossWeights):
    """gan_t + gan_s + lambda1*cyc + lambda2*idt over tensors or floats."""
    missing = [k for k in ("gan_t", "gan_s", "cyc", "idt") if k not in parts]
    if missing:
        raise KeyError(f"translation_objective: missing part(s) {missing}")
    return (parts["gan_t"] + parts["gan_s"]
            + parts["cyc"] * weights.lambda1
            + parts["idt"] * weights.lambda2)


def depth_supervised_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute depth error in meters."""
    return _l1_mean(pred, gt)


def geometry_consistency_from_maps(ssim_map: Tensor, abs_diff: Tensor,
                                   weights: LossWeights) -> Tensor:
    """eta * mean((1 - ssim)/2) + mu * mean(|difference|)."""
    dssim = T.scale(T.shift(T.neg(ssim_map), 1.0), 0.5)
    return T.add(T.scale(T.mean(dssim), weights.eta),
                 T.scale(T.mean(abs_diff), weights.mu))


def geometry_consistency_loss(left: Tensor, reconstruction: Tensor,
                              weights: LossWeights) -> Tensor:
    """Photometric stereo-alignment loss between the left view and its
    reconstruction from the right view (inputs in [0, 1])."""
    ssim_map = geometry.ssim(left, reconstruction)
    return geometry_consistency_from_maps(ssim_map,
                                          T.abs_(T.sub(left, reconstruction)),
                                          weights)


def smoothness_loss(depth: Tensor, image: Tensor) -> Tensor:
    """Edge-aware smoothness: exp(-|grad image|) * |grad depth|, averaged
    over pixels and the two spatial directions; image gradients are averaged
    over channels."""
    gx_d, gy_d = geometry.spatial_gradients(depth)
    gx_i, gy_i = geometry.spatial_gradients(image)
    ex = T.exp_(T.neg(T.mean(T.abs_(gx_i), axis=1)))
    ey = T.exp_(T.neg(T.mean(T.abs_(gy_i), axis=1)))
    tx = T.mean(T.mul(ex, T.abs_(gx_d)))
    ty = T.mean(T.mul(ey, T.abs_(gy_d)))
    return T.scale(T.add(tx, ty), 0.5)


def depth_consistency_loss(pred_t: Tensor, pred_s: Tensor) -> Tensor:
    """Mean L1 between the two target-image depth predictions."""
    return _l1_mean(pred_t, pred_s)


def full_objective(terms, weights: LossWeights):
    """Weighted sum of all ten terms (tensors or floats):

    trans + g1*(sde+tde) + g2*(tgc+sgc) + g3*dc + g4*ds
    """
    missing = [k for k in TERM_NAMES if k not in terms]
    if missing:
        raise KeyError(f"full_objective: missing term(s) {missing}")
    trans = translation_objective(terms, weights)
    return (trans
            + (terms["sde"] + terms["tde"]) * weights.gamma1
            + (terms["tgc"] + terms["sgc"]) * weights.gamma2
            + terms["dc"] * weights.gamma3
            + terms["ds"] * weights.gamma4)


# ---------------------------------------------------------------------------
# multi-scale wrappers for side outputs (full resolution first; lower scales
# are compared against average-pooled targets, each scale weighted equally)


def _pool_pyramid(t: Tensor, levels: int) -> list[Tensor]:
    out = [t]
    for _ in range(levels - 1):
        out.append(T.avg_pool2d(out[-1], 2))
    return out


def multi_scale_supervised(preds: list[Tensor], gt: Tensor) -> Tensor:
    targets = _pool_pyramid(gt, len(preds))
    total = depth_supervised_loss(preds[0], targets[0])
    for p, g in zip(preds[1:], targets[1:]):
        total = T.add(total, depth_supervised_loss(p, g))
    return T.scale(total, 1.0 / len(preds))


def multi_scale_consistency(preds_a: list[Tensor], preds_b: list[Tensor]) -> Tensor:
    total = depth_consistency_loss(preds_a[0], preds_b[0])
    for a, b in zip(preds_a[1:], preds_b[1:]):
        total = T.add(total, depth_consistency_loss(a, b))
    return T.scale(total, 1.0 / len(preds_a))


def multi_scale_smoothness(preds: list[Tensor], image: Tensor) -> Tensor:
    images = _pool_pyramid(image, len(preds))
    total = smoothness_loss(preds[0], images[0])
    for p, i in zip(preds[1:], images[1:]):
        total = T.add(total, smoothness_loss(p, i))
    return T.scale(total, 1.0 / len(preds))


def multi_scale_geometry_consistency(preds: list[Tensor], left: Tensor,
                                     right: Tensor, rig: geometry.CameraRig,
                                     weights: LossWeights) -> Tensor:
    lefts = _pool_pyramid(left, len(preds))
    rights = _pool_pyramid(right, len(preds))
    total = None
    for i, pred in enumerate(preds):
        srig = rig.scaled(2 ** i)
        disp = geometry.depth_to_disparity(pred, srig)
        recon = geometry.inverse_warp(rights[i], disp)
        # warp output of [0,1] inputs stays in [0,1] (convex weights)
        term = geometry_consistency_loss(lefts[i], recon, weights)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(preds))
