"""Differentiable geometric kernels: depth/disparity conversion, bilinear
inverse warping of the right stereo view, single-scale SSIM, and spatial
image gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError

D_MIN = 1.0
D_MAX = 80.0

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class CameraRig:
    """Stereo rig intrinsics: focal length in pixels, baseline in meters."""

    focal_px: float
    baseline_m: float
    width: int

    def __post_init__(self):
        if self.focal_px <= 0 or self.baseline_m <= 0:
            raise ValueError("focal_px and baseline_m must be positive")

    def scaled(self, factor: int) -> "CameraRig":
        """Rig for an image downscaled by an integer factor."""
        return CameraRig(self.focal_px / factor, self.baseline_m, self.width // factor)


def validate_depth(depth: Tensor, lo: float = D_MIN, hi: float = D_MAX):
    if depth.shape[1] != 1:
        raise TensorError(f"depth map must have 1 channel, got {depth.shape}")
    dmin, dmax = float(depth.data.min()), float(depth.data.max())
    if dmin < lo or dmax > hi:
        raise TensorError(f"depth range [{dmin:.3g}, {dmax:.3g}] outside [{lo}, {hi}]")


def depth_to_disparity(depth: Tensor, rig: CameraRig) -> Tensor:
    """disparity = focal_px * baseline_m / depth, in pixels."""
    if (depth.data <= 0).any():
        raise TensorError("depth_to_disparity: nonpositive depth element")
    return T.scale(T.reciprocal(depth), rig.focal_px * rig.baseline_m)


def disparity_to_depth(disparity: Tensor, rig: CameraRig) -> Tensor:
    """Inverse of depth_to_disparity (the conversion is an involution)."""
    if (disparity.data <= 0).any():
        raise TensorError("disparity_to_depth: nonpositive disparity element")
    return T.scale(T.reciprocal(disparity), rig.focal_px * rig.baseline_m)


def inverse_warp(right: Tensor, disparity: Tensor) -> Tensor:
    """Reconstruct the left view by sampling the right image at x - disparity.

    Bilinear sampling along rows; out-of-range coordinates are clamped to the
    border.  At exactly-integer coordinates the interpolation cell is chosen
    to the left, so zero disparity reproduces the input bit-exactly and the
    disparity gradient is the left-interval subgradient.
    """
    n, c, h, w = right.shape
    if disparity.shape != (n, 1, h, w):
        raise TensorError(f"inverse_warp: disparity shape {disparity.shape} "
                          f"!= {(n, 1, h, w)}")
    xs = np.broadcast_to(np.arange(w, dtype=right.dtype).reshape(1, 1, 1, w),
                         (n, 1, h, w))
    coords = T.sub(Tensor(xs.copy()), disparity)
    base = np.ceil(coords.data) - 1.0
    x0 = np.clip(base, 0, w - 1).astype(np.int64)
    x1 = np.clip(base + 1.0, 0, w - 1).astype(np.int64)
    frac = T.sub(coords, Tensor(base.astype(right.dtype)))
    lo = T.gather_x(right, x0)
    hi = T.gather_x(right, x1)
    one_minus = T.shift(T.neg(frac), 1.0)
    return T.add(T.mul(lo, one_minus), T.mul(hi, frac))


def _window_mean(t: Tensor) -> Tensor:
    return T.avg_pool2d(T.pad2d(t, (1, 1, 1, 1), "edge"), 3, stride=1)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel structural similarity map over 3x3 local statistics.

    Inputs must share shape and lie in [0, 1]; output values lie in [-1, 1].
    """
    if a.shape != b.shape:
        raise TensorError(f"ssim: shapes {a.shape} != {b.shape}")
    for name, t in (("a", a), ("b", b)):
        if t.data.min() < 0.0 or t.data.max() > 1.0:
            raise TensorError(f"ssim: input '{name}' has elements outside [0, 1]")
    mu_a = _window_mean(a)
    mu_b = _window_mean(b)
    var_a = T.sub(_window_mean(T.mul(a, a)), T.mul(mu_a, mu_a))
    var_b = T.sub(_window_mean(T.mul(b, b)), T.mul(mu_b, mu_b))
    cov = T.sub(_window_mean(T.mul(a, b)), T.mul(mu_a, mu_b))
    lum_n = T.shift(T.scale(T.mul(mu_a, mu_b), 2.0), SSIM_C1)
    lum_d = T.shift(T.add(T.mul(mu_a, mu_a), T.mul(mu_b, mu_b)), SSIM_C1)
    con_n = T.shift(T.scale(cov, 2.0), SSIM_C2)
    con_d = T.shift(T.add(var_a, var_b), SSIM_C2)
    return T.mul(T.mul(lum_n, con_n), T.reciprocal(T.mul(lum_d, con_d)))


def spatial_gradients(img: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along x and y, zero-padded to preserve shape."""
    n, c, h, w = img.shape
    if h < 2 or w < 2:
        raise TensorError(f"spatial_gradients: degenerate spatial dims {img.shape}")
    gx = T.sub(T.slice2d(img, 0, h, 1, w), T.slice2d(img, 0, h, 0, w - 1))
    gy = T.sub(T.slice2d(img, 1, h, 0, w), T.slice2d(img, 0, h - 1, 0, w))
    return T.pad2d(gx, (0, 0, 0, 1), "zero"), T.pad2d(gy, (0, 1, 0, 0), "zero")
