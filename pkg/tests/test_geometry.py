"""Geometric kernels: conversions, warping, SSIM, spatial gradients."""

import numpy as np
import pytest

import depthadapt.tensor as T
from depthadapt import geometry
from depthadapt.geometry import (CameraRig, SSIM_C1, depth_to_disparity,
                                 disparity_to_depth, inverse_warp, spatial_gradients,
                                 ssim)
from depthadapt.tensor import Tensor, TensorError, WIDE, make_rng


def img(arr, dtype=np.float64):
    a = np.asarray(arr, dtype=dtype)
    while a.ndim < 4:
        a = a[None]
    return Tensor(a)


def ramp(h, w, dtype=np.float64):
    return Tensor(np.broadcast_to(np.arange(w, dtype=dtype), (1, 1, h, w)).copy())


class TestDepthDisparity:
    def test_closed_form(self):
        rig = CameraRig(focal_px=100.0, baseline_m=0.54, width=8)
        depth = Tensor(np.full((1, 1, 2, 4), 54.0))
        assert np.allclose(depth_to_disparity(depth, rig).data, 1.0)

    def test_unit_product(self):
        rig = CameraRig(focal_px=10.0, baseline_m=0.5, width=8)
        depth = Tensor(np.full((1, 1, 1, 1), 5.0))
        assert np.allclose(depth_to_disparity(depth, rig).data, 1.0)

    def test_matches_scalar_oracle(self):
        rig = CameraRig(focal_px=48.0, baseline_m=0.25, width=8)
        rng = make_rng(0, "d2d")
        z = rng.uniform(2.0, 60.0, size=(1, 1, 3, 8))
        disp = depth_to_disparity(Tensor(z.astype(WIDE)), rig).data
        for idx in np.ndindex(*z.shape):
            assert disp[idx] == pytest.approx(48.0 * 0.25 / z[idx], rel=1e-12)

    def test_involution(self):
        rig = CameraRig(focal_px=48.0, baseline_m=0.25, width=8)
        z = Tensor(make_rng(1, "inv").uniform(2.0, 60.0, (1, 1, 4, 8)).astype(WIDE))
        back = disparity_to_depth(depth_to_disparity(z, rig), rig)
        assert np.allclose(back.data, z.data, rtol=1e-10, atol=0)

    def test_nonpositive_depth_rejected(self):
        rig = CameraRig(focal_px=10.0, baseline_m=0.5, width=4)
        with pytest.raises(TensorError):
            depth_to_disparity(img([[[0.0, 1.0]]]), rig)

    def test_rig_validation(self):
        with pytest.raises(ValueError):
            CameraRig(focal_px=-1.0, baseline_m=0.5, width=4)


class TestInverseWarp:
    def test_zero_disparity_is_identity(self):
        rng = make_rng(2, "warp")
        right = Tensor(rng.uniform(0, 1, (2, 3, 4, 7)).astype(WIDE))
        disp = Tensor(np.zeros((2, 1, 4, 7), dtype=WIDE))
        out = inverse_warp(right, disp)
        assert np.array_equal(out.data, right.data)

    def test_integer_disparity_on_ramp(self):
        r = ramp(3, 8)
        disp = Tensor(np.ones((1, 1, 3, 8)))
        out = inverse_warp(r, disp)
        # interior: out(y,x) = x - 1 by direct bilinear evaluation
        assert np.allclose(out.data[0, 0, :, 1:], r.data[0, 0, :, 1:] - 1.0)

    def test_fractional_disparity_on_ramp(self):
        r = ramp(2, 8)
        disp = Tensor(np.full((1, 1, 2, 8), 0.5))
        out = inverse_warp(r, disp)
        assert np.allclose(out.data[0, 0, :, 1:], r.data[0, 0, :, 1:] - 0.5)

    def test_matches_direct_bilinear_oracle(self):
        rng = make_rng(3, "warp-oracle")
        right = rng.uniform(0, 1, (1, 2, 3, 9))
        disp = rng.uniform(0.2, 2.7, (1, 1, 3, 9))
        out = inverse_warp(Tensor(right.astype(WIDE)), Tensor(disp.astype(WIDE))).data
        for n, ch, y, x in np.ndindex(out.shape):
            cx = x - disp[n, 0, y, x]
            x0 = int(np.ceil(cx)) - 1
            frac = cx - x0
            x0c = min(max(x0, 0), 8)
            x1c = min(max(x0 + 1, 0), 8)
            want = (1 - frac) * right[n, ch, y, x0c] + frac * right[n, ch, y, x1c]
            assert out[n, ch, y, x] == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(TensorError):
            inverse_warp(Tensor(np.zeros((1, 3, 4, 5))), Tensor(np.zeros((1, 1, 4, 4))))


class TestSSIM:
    def test_self_similarity_is_one(self):
        x = Tensor(make_rng(4, "ssim").uniform(0, 1, (1, 3, 6, 8)).astype(WIDE))
        m = ssim(x, x)
        assert np.allclose(m.data, 1.0, atol=1e-12)

    def test_constant_patches_closed_form(self):
        p, q = 0.3, 0.8
        a = Tensor(np.full((1, 1, 5, 6), p, dtype=WIDE))
        b = Tensor(np.full((1, 1, 5, 6), q, dtype=WIDE))
        want = (2 * p * q + SSIM_C1) / (p * p + q * q + SSIM_C1)
        assert np.allclose(ssim(a, b).data, want, rtol=1e-10)

    def test_symmetry(self):
        rng = make_rng(5, "ssim-sym")
        a = Tensor(rng.uniform(0, 1, (1, 1, 6, 6)).astype(WIDE))
        b = Tensor(rng.uniform(0, 1, (1, 1, 6, 6)).astype(WIDE))
        assert np.allclose(ssim(a, b).data, ssim(b, a).data, atol=1e-14)

    def test_range(self):
        rng = make_rng(6, "ssim-range")
        for k in range(5):
            a = Tensor(rng.uniform(0, 1, (1, 1, 5, 7)))
            b = Tensor(rng.uniform(0, 1, (1, 1, 5, 7)))
            m = ssim(a, b).data
            assert m.min() >= -1.0 - 1e-6 and m.max() <= 1.0 + 1e-6

    def test_out_of_range_rejected_not_clamped(self):
        a = Tensor(np.full((1, 1, 4, 4), 1.2))
        b = Tensor(np.full((1, 1, 4, 4), 0.5))
        with pytest.raises(TensorError, match="outside"):
            ssim(a, b)


class TestSpatialGradients:
    def test_constant_zero(self):
        gx, gy = spatial_gradients(Tensor(np.full((1, 1, 4, 5), 3.3)))
        assert not gx.data.any() and not gy.data.any()

    def test_ramp(self):
        gx, gy = spatial_gradients(ramp(4, 6))
        assert np.allclose(gx.data[0, 0, :, :-1], 1.0)
        assert not gx.data[0, 0, :, -1].any()  # zero-padded last column
        assert not gy.data.any()

    def test_hand_computed_3x3(self):
        m = [[1.0, 5.0, 2.0], [0.0, 3.0, 3.0], [4.0, 4.0, 9.0]]
        gx, gy = spatial_gradients(img(m))
        assert np.array_equal(gx.data[0, 0], [[4, -3, 0], [3, 0, 0], [0, 5, 0]])
        assert np.array_equal(gy.data[0, 0], [[-1, -2, 1], [4, 1, 6], [0, 0, 0]])

    def test_degenerate_dims(self):
        with pytest.raises(TensorError):
            spatial_gradients(Tensor(np.zeros((1, 1, 1, 5))))


def test_warp_disparity_gradient_matches_fd():
    from depthadapt.gradcheck import grad_check
    rng = make_rng(7, "warp-grad")
    right = Tensor(rng.uniform(0, 1, (1, 2, 4, 8)).astype(WIDE))
    disp = rng.integers(0, 3, (1, 1, 4, 8)) + rng.uniform(0.25, 0.75, (1, 1, 4, 8))
    rep = grad_check(lambda d: T.mean(T.square(inverse_warp(right, d))),
                     Tensor(disp.astype(WIDE)), name="warp-disp")
    assert rep.passed, rep.line()
