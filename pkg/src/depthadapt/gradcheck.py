"""Finite-difference verification of analytic gradients.

grad_check compares the tape gradient of a scalar-valued function against
central finite differences, element by element, in wide (64-bit) precision.
The module also carries the named check suite over every primitive and
every loss term that backs the `gradcheck` CLI command.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, WIDE


class NondeterministicFunctionError(T.TensorError):
    """Two forward passes of the checked function disagreed."""


# both-tiny gradients compare as equal; guards FD roundoff on flat directions
REL_ERR_FLOOR = 1e-6

# central differences carry roundoff of order eps*|f|/(2*step); differences
# inside this budget (with headroom for accumulation across a deep graph)
# are indistinguishable from an exact match
NOISE_HEADROOM = 64.0


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    n_excluded: int
    tolerance: float
    worst_index: tuple = ()
    n_kink_retries: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max_rel_err={self.max_rel_error:.3e}  "
                f"checked={self.n_checked} excluded={self.n_excluded}")


def grad_check(fn, point: Tensor, step: float = 1e-5, tolerance: float = 1e-4,
               exclude=None, name: str = "fn",
               max_checks: int | None = None, seed: int = 0) -> GradCheckReport:
    """Check d(fn)/d(point) against central differences at one point.

    fn maps a Tensor to a scalar Tensor and must be deterministic; elements
    where `exclude` (same-shape boolean mask) is True are reported as
    excluded loci instead of being differenced.  max_checks caps the number
    of differenced elements (a seeded random subset) for expensive
    composites; by default every element is checked.

    When a central interval happens to straddle one of the function's
    non-differentiable loci (an L1 or rectifier kink downstream), the first
    difference reports a one-sided mismatch; failing elements are therefore
    re-differenced once with the interval shrunk eightfold, which removes a
    straddle but leaves a genuine gradient defect visible.
    """
    p = Tensor(point.data.astype(WIDE), requires_grad=True)

    with T.fresh_graph(), T.no_grad():
        y1 = fn(p)
        y2 = fn(p)
    if not np.array_equal(y1.data, y2.data):
        raise NondeterministicFunctionError(f"{name}: forward passes disagree")

    with T.fresh_graph() as tape:
        out = fn(p)
        tape.backward(out)
    analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    flat = p.data.reshape(-1)
    a_flat = analytic.reshape(-1)
    mask = None if exclude is None else np.asarray(exclude).reshape(-1)
    indices = np.arange(flat.size)
    if max_checks is not None and flat.size > max_checks:
        rng = T.make_rng(seed, "gradcheck-subset", name)
        indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))

    f_scale = abs(y1.item())

    def _fd_error(i, h):
        old = flat[i]
        flat[i] = old + h
        f_plus = fn(p).item()
        flat[i] = old - h
        f_minus = fn(p).item()
        flat[i] = old
        numeric = (f_plus - f_minus) / (2.0 * h)
        noise = NOISE_HEADROOM * np.finfo(WIDE).eps * f_scale / (2.0 * h)
        denom = max(REL_ERR_FLOOR, abs(a_flat[i]), abs(numeric))
        return max(abs(a_flat[i] - numeric) - noise, 0.0) / denom

    max_err, worst, checked, excluded, retried = 0.0, (), 0, 0, 0
    with T.no_grad():
        for i in indices:
            if mask is not None and mask[i]:
                excluded += 1
                continue
            err = _fd_error(i, step)
            if err > tolerance:
                retried += 1
                err = min(err, _fd_error(i, step / 8.0))
            checked += 1
            if err > max_err:
                max_err = err
                worst = np.unravel_index(i, p.shape)
    return GradCheckReport(name=name, max_rel_error=max_err, n_checked=checked,
                           n_excluded=excluded, tolerance=tolerance,
                           worst_index=worst, n_kink_retries=retried)


# ---------------------------------------------------------------------------
# the named check suite


@dataclass
class _Check:
    name: str
    build: object  # rng -> (fn, point, exclude)
    group: str = ""
    max_checks: int | None = None


def _uniform(rng, shape, lo, hi):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(WIDE))


def _away_from_kinks(arr, margin=1e-3):
    """Nudge elements out of the |x| < margin band around the origin."""
    out = arr.copy()
    small = np.abs(out) < margin
    out[small] = np.where(out[small] >= 0, margin, -margin) * 1.5
    return out


def _halves(p):
    """Split a packed point into top/bottom spatial halves."""
    h = p.shape[2] // 2
    return T.slice2d(p, 0, h, 0, p.shape[3]), T.slice2d(p, h, 2 * h, 0, p.shape[3])


def _suite_primitives():
    checks = []
    sh = (1, 1, 4, 6)

    def binop(op):
        def build(rng):
            pt = _uniform(rng, (1, 1, 8, 6), -2.0, 2.0)
            return (lambda p: T.mean(T.square(op(*_halves(p)))), pt, None)
        return build

    checks.append(_Check("add", binop(T.add)))
    checks.append(_Check("subtract", binop(T.sub)))
    checks.append(_Check("multiply", binop(T.mul)))

    def simple(opname, op, lo, hi, kink_margin=None):
        def build(rng):
            raw = rng.uniform(lo, hi, size=sh)
            if kink_margin is not None:
                raw = _away_from_kinks(raw, kink_margin)
            pt = Tensor(raw.astype(WIDE))
            exclude = np.abs(pt.data) < 1e-3 if kink_margin is not None else None
            return (lambda p: T.mean(op(p)), pt, exclude)
        checks.append(_Check(opname, build))

    simple("scalar_multiply", lambda p: T.scale(p, 1.7), -2, 2)
    simple("mean", lambda p: T.square(T.mean(p)), -2, 2)
    simple("abs", T.abs_, -2, 2, kink_margin=1e-3)
    simple("square", T.square, -2, 2)
    simple("sqrt", T.sqrt_, 0.5, 3.0)
    simple("log", T.log_, 0.5, 3.0)
    simple("exp", T.exp_, -1.5, 1.5)
    simple("sigmoid", T.sigmoid, -3, 3)
    simple("tanh", T.tanh_, -2, 2)
    simple("leaky_relu", T.leaky_relu, -2, 2, kink_margin=1e-3)
    simple("reciprocal", T.reciprocal, 0.5, 3.0)
    simple("pad/zero", lambda p: T.pad2d(p, (1, 1, 2, 1), "zero"), -2, 2)
    simple("pad/edge", lambda p: T.pad2d(p, (1, 2, 1, 1), "edge"), -2, 2)
    simple("slice", lambda p: T.slice2d(p, 1, 3, 1, 5), -2, 2)
    simple("upsample_nearest", lambda p: T.upsample_nearest(p, 2), -2, 2)
    simple("avg_pool/down", lambda p: T.avg_pool2d(p, 2), -2, 2)
    simple("avg_pool/window", lambda p: T.avg_pool2d(p, 3, stride=1), -2, 2)

    def build_concat(rng):
        pt = _uniform(rng, (1, 1, 8, 6), -2, 2)
        def fn(p):
            a, b = _halves(p)
            return T.mean(T.square(T.concat_channels([a, b, a])))
        return (fn, pt, None)
    checks.append(_Check("concat", build_concat))

    def build_gather(rng):
        pt = _uniform(rng, sh, -2, 2)
        idx = rng.integers(0, sh[3], size=(sh[0], 1, sh[2], sh[3]))
        return (lambda p: T.mean(T.square(T.gather_x(p, idx))), pt, None)
    checks.append(_Check("gather_x", build_gather))

    def build_conv(wrt):
        def build(rng):
            x = _uniform(rng, (1, 2, 5, 6), -1, 1)
            w = _uniform(rng, (3, 2, 3, 3), -0.5, 0.5)
            b = _uniform(rng, (1, 3, 1, 1), -0.5, 0.5)
            parts = {"x": x, "w": w, "b": b}
            def fn(p):
                args = dict(parts)
                args[wrt] = p
                return T.mean(T.square(T.conv2d(args["x"], args["w"], args["b"],
                                                stride=2, pad=1)))
            return (fn, parts[wrt], None)
        return build

    for arg in ("x", "w", "b"):
        checks.append(_Check(f"conv2d/{arg}", build_conv(arg)))

    def build_convt(wrt):
        def build(rng):
            x = _uniform(rng, (1, 3, 4, 5), -1, 1)
            w = _uniform(rng, (3, 2, 4, 4), -0.5, 0.5)
            b = _uniform(rng, (1, 2, 1, 1), -0.5, 0.5)
            parts = {"x": x, "w": w, "b": b}
            def fn(p):
                args = dict(parts)
                args[wrt] = p
                return T.mean(T.square(T.conv2d_transpose(args["x"], args["w"], args["b"],
                                                          stride=2, pad=1)))
            return (fn, parts[wrt], None)
        return build

    for arg in ("x", "w", "b"):
        checks.append(_Check(f"conv2d_transpose/{arg}", build_convt(arg)))

    for c in checks:
        c.group = "primitive"
    return checks


def _suite_losses():
    from . import geometry, losses

    checks = []
    weights = losses.LossWeights()

    def pair(name, fn, lo=0.1, hi=0.9, h=6, w=8, ch=1):
        def build(rng):
            pt = _uniform(rng, (1, ch, 2 * h, w), lo, hi)
            return (lambda p: fn(*_halves(p)), pt, None)
        checks.append(_Check(name, build))

    pair("loss/cycle", losses.cycle_loss, -1, 1)
    pair("loss/identity", losses.identity_loss, -1, 1)
    pair("loss/depth_supervised", losses.depth_supervised_loss, 2.0, 60.0)
    pair("loss/depth_consistency", losses.depth_consistency_loss, 2.0, 60.0)
    pair("loss/adversarial_gen",
         lambda r, f: losses.adversarial_losses(r, f)[0], -0.5, 1.5)
    pair("loss/adversarial_disc",
         lambda r, f: losses.adversarial_losses(r, f)[1], -0.5, 1.5)
    pair("loss/geometry_consistency",
         lambda a, b: losses.geometry_consistency_loss(a, b, weights), 0.05, 0.95)
    pair("geometry/ssim", lambda a, b: T.mean(geometry.ssim(a, b)), 0.05, 0.95)

    def build_smooth_depth(rng):
        img = _uniform(rng, (1, 3, 6, 8), 0.1, 0.9)
        pt = _uniform(rng, (1, 1, 6, 8), 2.0, 60.0)
        return (lambda p: losses.smoothness_loss(p, img), pt, None)
    checks.append(_Check("loss/smoothness_depth", build_smooth_depth))

    def build_smooth_img(rng):
        depth = _uniform(rng, (1, 1, 6, 8), 2.0, 60.0)
        pt = _uniform(rng, (1, 3, 6, 8), 0.1, 0.9)
        return (lambda p: losses.smoothness_loss(depth, p), pt, None)
    checks.append(_Check("loss/smoothness_image", build_smooth_img))

    def build_grads(rng):
        pt = _uniform(rng, (1, 1, 5, 7), -2, 2)
        def fn(p):
            gx, gy = geometry.spatial_gradients(p)
            return T.mean(T.add(T.square(gx), T.square(gy)))
        return (fn, pt, None)
    checks.append(_Check("geometry/spatial_gradients", build_grads))

    rig = geometry.CameraRig(focal_px=24.0, baseline_m=0.5, width=8)

    def build_d2d(rng):
        pt = _uniform(rng, (1, 1, 4, 8), 2.0, 60.0)
        return (lambda p: T.mean(T.square(geometry.depth_to_disparity(p, rig))), pt, None)
    checks.append(_Check("geometry/depth_to_disparity", build_d2d))

    def build_warp_img(rng):
        disp = Tensor((rng.uniform(0.3, 2.7, size=(1, 1, 4, 8)) // 0.1 * 0.1
                       + 0.45).astype(WIDE))
        pt = _uniform(rng, (1, 2, 4, 8), 0.0, 1.0)
        return (lambda p: T.mean(T.square(geometry.inverse_warp(p, disp))), pt, None)
    checks.append(_Check("geometry/inverse_warp_image", build_warp_img))

    def build_warp_disp(rng):
        img = _uniform(rng, (1, 2, 4, 8), 0.0, 1.0)
        # keep sample coordinates at least 0.2 px away from integers
        disp = rng.integers(0, 3, size=(1, 1, 4, 8)) + rng.uniform(0.25, 0.75,
                                                                   size=(1, 1, 4, 8))
        pt = Tensor(disp.astype(WIDE))
        return (lambda p: T.mean(T.square(geometry.inverse_warp(img, p))), pt, None)
    checks.append(_Check("geometry/inverse_warp_disparity", build_warp_disp))

    for c in checks:
        c.group = "loss"
    return checks


def _suite_objective():
    from . import losses, networks, trainer
    from .geometry import CameraRig

    def build(rng):
        nets = networks.build_all(networks.NetConfig(), seed=7, dtype=WIDE)
        rig = CameraRig(focal_px=12.0, baseline_m=1.0, width=24)
        weights = losses.LossWeights()
        right = Tensor(rng.uniform(0.15, 0.85, size=(1, 3, 16, 24)).astype(WIDE))
        gt = Tensor(rng.uniform(2.0, 60.0, size=(1, 1, 16, 24)).astype(WIDE))
        # the point packs x_s and x_t side by side so one spatial slice
        # recovers each image differentiably
        raw = np.concatenate([
            rng.uniform(0.15, 0.85, size=(1, 3, 16, 24)),
            rng.uniform(0.15, 0.85, size=(1, 3, 16, 24)),
        ], axis=3)
        pt = Tensor(raw.astype(WIDE))

        def fn(p):
            x_s = T.slice2d(p, 0, 16, 0, 24)
            x_t = T.slice2d(p, 0, 16, 24, 48)
            return trainer.objective_on_micro_batch(nets, x_s, x_t, right, gt,
                                                    rig, weights)

        return (fn, pt, None)

    # the composite runs every network, so difference a seeded subset of
    # the 2304 input pixels to stay inside the runtime budget
    return [_Check("objective/full", build, group="objective", max_checks=192)]


def build_suite():
    return _suite_primitives() + _suite_losses() + _suite_objective()


def run_suite(op: str | None = None, tolerance: float = 1e-4, step: float = 1e-5,
              seed: int = 0):
    """Run the named checks (all, or those matching `op`) and return reports."""
    reports = []
    for check in build_suite():
        parts = check.name.split("/")
        if op is not None and op != check.name and op not in parts:
            continue
        rng = T.make_rng(seed, check.name)
        fn, point, exclude = check.build(rng)
        reports.append(grad_check(fn, point, step=step, tolerance=tolerance,
                                  exclude=exclude, name=check.name,
                                  max_checks=check.max_checks, seed=seed))
    if op is not None and not reports:
        raise KeyError(f"no gradient check named '{op}'")
    return reports
