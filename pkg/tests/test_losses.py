"""Loss terms: frozen oracle values, fixed points, weighted composition."""

import numpy as np
import pytest

import depthadapt.tensor as T
from depthadapt import losses
from depthadapt.losses import (LossReport, LossWeights, adversarial_losses,
                               cycle_loss, depth_consistency_loss,
                               depth_supervised_loss, full_objective,
                               geometry_consistency_from_maps,
                               geometry_consistency_loss, identity_loss,
                               smoothness_loss, translation_objective)
from depthadapt.tensor import Tensor, WIDE, make_rng

W = LossWeights()


def const(val, shape=(1, 1, 4, 4), dtype=WIDE):
    return Tensor(np.full(shape, val, dtype=dtype))


def rand(shape, lo=0.0, hi=1.0, key="r"):
    return Tensor(make_rng(11, key).uniform(lo, hi, shape).astype(WIDE))


class TestAdversarial:
    def test_perfect_discriminator(self):
        gen, disc = adversarial_losses(const(1.0), const(0.0))
        assert disc.item() == 0.0
        assert gen.item() == 1.0

    def test_half_half(self):
        gen, disc = adversarial_losses(const(0.5), const(0.5))
        assert disc.item() == pytest.approx(0.5, abs=1e-12)
        assert gen.item() == pytest.approx(0.25, abs=1e-12)

    def test_fooled(self):
        gen, _ = adversarial_losses(const(0.3), const(1.0))
        assert gen.item() == 0.0

    def test_independent_shapes_allowed(self):
        gen, disc = adversarial_losses(const(1.0, (1, 1, 2, 3)), const(0.0, (1, 1, 4, 5)))
        assert disc.item() == 0.0 and gen.item() == 1.0


class TestL1Losses:
    def test_cycle_fixed_point(self):
        x = rand((1, 3, 4, 4))
        assert cycle_loss(x, x).item() == 0.0

    def test_cycle_constant_offset(self):
        assert cycle_loss(const(0.0), const(0.5)).item() == pytest.approx(0.5)

    def test_cycle_scalar_oracle(self):
        a, b = rand((1, 2, 3, 4), key="a"), rand((1, 2, 3, 4), key="b")
        want = float(np.mean(np.abs(a.data - b.data)))
        assert cycle_loss(a, b).item() == pytest.approx(want, rel=1e-12)

    def test_identity_shift(self):
        x = rand((1, 3, 4, 4))
        mapped = Tensor(x.data + 0.1)
        assert identity_loss(x, mapped).item() == pytest.approx(0.1, rel=1e-9)

    def test_depth_supervised(self):
        gt = rand((1, 1, 4, 4), 2, 60, key="gt")
        assert depth_supervised_loss(gt, gt).item() == 0.0
        assert depth_supervised_loss(Tensor(gt.data + 1.0), gt).item() == \
            pytest.approx(1.0, rel=1e-9)

    def test_depth_consistency(self):
        a = rand((1, 1, 4, 4), 2, 60, key="dc")
        assert depth_consistency_loss(a, a).item() == 0.0
        assert depth_consistency_loss(Tensor(a.data + 2.0), a).item() == \
            pytest.approx(2.0, rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(T.TensorError):
            cycle_loss(const(0, (1, 1, 2, 2)), const(0, (1, 1, 2, 3)))


class TestTranslationObjective:
    def test_zero(self):
        assert translation_objective(
            {"gan_t": 0.0, "gan_s": 0.0, "cyc": 0.0, "idt": 0.0}, W) == 0.0

    def test_weighted_sum(self):
        total = translation_objective(
            {"gan_t": 1.0, "gan_s": 1.0, "cyc": 0.2, "idt": 0.1}, W)
        assert total == pytest.approx(7.0, rel=1e-12)

    def test_weight_ablation(self):
        w0 = LossWeights(lambda1=0.0, lambda2=0.0)
        total = translation_objective(
            {"gan_t": 0.7, "gan_s": 0.5, "cyc": 9.0, "idt": 9.0}, w0)
        assert total == pytest.approx(1.2, rel=1e-12)

    def test_missing_part(self):
        with pytest.raises(KeyError, match="cyc"):
            translation_objective({"gan_t": 0.0, "gan_s": 0.0, "idt": 0.0}, W)


class TestGeometryConsistency:
    def test_perfect_reconstruction(self):
        # SSIM(x,x) is 1 to within one quotient rounding, so the loss sits
        # at the fixed point up to ~1e-16
        x = rand((1, 3, 6, 8))
        assert abs(geometry_consistency_loss(x, x, W).item()) <= 1e-12

    def test_fabricated_maps_eq8_constants(self):
        # ssim map == 0 with mean L1 == 1 isolates eta and mu
        loss = geometry_consistency_from_maps(const(0.0, (1, 1, 4, 4)),
                                              const(1.0, (1, 3, 4, 4)), W)
        assert loss.item() == pytest.approx(0.575, abs=1e-9)

    def test_eta_zero_reduces_to_l1(self):
        w0 = LossWeights(eta=0.0, mu=0.15)
        a, b = rand((1, 3, 5, 6), key="g1"), rand((1, 3, 5, 6), key="g2")
        want = 0.15 * float(np.mean(np.abs(a.data - b.data)))
        assert geometry_consistency_loss(a, b, w0).item() == pytest.approx(want, rel=1e-9)

    def test_true_image_is_better(self):
        left = rand((1, 3, 6, 8), key="l")
        recon = rand((1, 3, 6, 8), key="r")
        assert geometry_consistency_loss(left, left, W).item() < \
            geometry_consistency_loss(left, recon, W).item()


def smoothness_oracle(depth, image):
    def fwd_diff(a, axis):
        g = np.zeros_like(a)
        if axis == 3:
            g[..., :-1] = a[..., 1:] - a[..., :-1]
        else:
            g[..., :-1, :] = a[..., 1:, :] - a[..., :-1, :]
        return g

    gx_d, gy_d = fwd_diff(depth, 3), fwd_diff(depth, 2)
    gx_i = np.abs(fwd_diff(image, 3)).mean(axis=1, keepdims=True)
    gy_i = np.abs(fwd_diff(image, 2)).mean(axis=1, keepdims=True)
    tx = np.mean(np.exp(-gx_i) * np.abs(gx_d))
    ty = np.mean(np.exp(-gy_i) * np.abs(gy_d))
    return 0.5 * (tx + ty)


class TestSmoothness:
    def test_constant_depth_zero(self):
        image = rand((1, 3, 4, 6), key="s")
        assert smoothness_loss(const(7.0, (1, 1, 4, 6)), image).item() == 0.0

    def test_ramp_on_constant_image(self):
        h, w = 4, 8
        depth = Tensor(np.broadcast_to(np.arange(w, dtype=WIDE), (1, 1, h, w)).copy())
        image = const(0.5, (1, 3, h, w))
        got = smoothness_loss(depth, image).item()
        want = smoothness_oracle(depth.data, image.data)
        assert got == pytest.approx(want, rel=1e-12)
        # interior per-pixel term is exp(0) * 1 = 1
        assert want == pytest.approx(0.5 * (w - 1) / w, rel=1e-12)

    def test_edges_reduce_penalty(self):
        h, w = 4, 8
        depth = Tensor(np.broadcast_to(np.arange(w, dtype=WIDE), (1, 1, h, w)).copy())
        flat = const(0.5, (1, 3, h, w))
        edged = Tensor(np.broadcast_to(
            np.arange(w, dtype=WIDE) * 0.1, (1, 3, h, w)).copy())
        assert smoothness_loss(depth, edged).item() < smoothness_loss(depth, flat).item()

    def test_random_oracle(self):
        depth = rand((1, 1, 5, 7), 2, 60, key="sd")
        image = rand((1, 3, 5, 7), key="si")
        got = smoothness_loss(depth, image).item()
        assert got == pytest.approx(smoothness_oracle(depth.data, image.data), rel=1e-10)


class TestFullObjective:
    def full_terms(self, **over):
        terms = {k: 0.0 for k in losses.TERM_NAMES}
        terms.update(over)
        return terms

    def test_all_zero(self):
        assert full_objective(self.full_terms(), W) == 0.0

    def test_weighted_sum_value(self):
        terms = self.full_terms(gan_t=0.5, gan_s=0.5, sde=0.05, tde=0.05,
                                tgc=0.01, sgc=0.01, dc=0.01, ds=0.2)
        # trans=1, de=0.1, gc=0.02, dc=0.01, ds=0.2
        assert full_objective(terms, W) == pytest.approx(7.6, rel=1e-12)

    def test_gamma_zero_is_translation_only(self):
        w0 = LossWeights(gamma1=0, gamma2=0, gamma3=0, gamma4=0)
        terms = self.full_terms(gan_t=1.0, gan_s=0.5, cyc=0.1, idt=0.2,
                                sde=9, tde=9, tgc=9, sgc=9, dc=9, ds=9)
        assert full_objective(terms, w0) == pytest.approx(1.5 + 1.0 + 6.0, rel=1e-12)

    def test_missing_term(self):
        terms = self.full_terms()
        del terms["dc"]
        with pytest.raises(KeyError, match="dc"):
            full_objective(terms, W)

    @pytest.mark.parametrize("term,coeff", [
        ("gan_t", 1.0), ("gan_s", 1.0), ("cyc", 10.0), ("idt", 30.0),
        ("sde", 50.0), ("tde", 50.0), ("tgc", 50.0), ("sgc", 50.0),
        ("dc", 50.0), ("ds", 0.5),
    ])
    def test_linearity_per_term(self, term, coeff):
        rng = make_rng(13, term)
        base = {k: float(rng.uniform(0, 2)) for k in losses.TERM_NAMES}
        delta = 0.37
        bumped = dict(base)
        bumped[term] = base[term] + delta
        change = full_objective(bumped, W) - full_objective(base, W)
        assert change == pytest.approx(coeff * delta, rel=1e-9)

    def test_report_total_consistent(self):
        rng = make_rng(14, "report")
        terms = {k: float(rng.uniform(0, 1)) for k in losses.TERM_NAMES}
        rep = LossReport.from_terms(terms, W)
        want = full_objective(terms, W)
        assert abs(rep.total - want) <= 1e-6 * max(1.0, abs(want))


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(gamma2=-0.1)


def test_all_losses_nonnegative_on_random_inputs():
    rng = make_rng(15, "nonneg")
    for _ in range(10):
        a = Tensor(rng.uniform(0, 1, (1, 3, 6, 8)))
        b = Tensor(rng.uniform(0, 1, (1, 3, 6, 8)))
        d1 = Tensor(rng.uniform(2, 60, (1, 1, 6, 8)))
        d2 = Tensor(rng.uniform(2, 60, (1, 1, 6, 8)))
        gen, disc = adversarial_losses(a, b)
        for val in (gen.item(), disc.item(), cycle_loss(a, b).item(),
                    identity_loss(a, b).item(),
                    depth_supervised_loss(d1, d2).item(),
                    geometry_consistency_loss(a, b, W).item(),
                    smoothness_loss(d1, a).item(),
                    depth_consistency_loss(d1, d2).item()):
            assert val >= 0.0


def test_losses_pass_gradcheck_on_8x8():
    """All loss terms match finite differences on random 1x1x8x8 inputs."""
    from depthadapt.gradcheck import grad_check
    rng = make_rng(16, "loss-fd")
    a = Tensor(rng.uniform(0.05, 0.95, (1, 1, 16, 8)).astype(WIDE))

    def halves(p):
        return T.slice2d(p, 0, 8, 0, 8), T.slice2d(p, 8, 16, 0, 8)

    cases = {
        "cycle": lambda p: cycle_loss(*halves(p)),
        "gc": lambda p: geometry_consistency_loss(*halves(p), W),
        "adv": lambda p: T.add(*adversarial_losses(*halves(p))),
    }
    for name, fn in cases.items():
        rep = grad_check(fn, a, tolerance=1e-4, name=name)
        assert rep.passed, rep.line()
