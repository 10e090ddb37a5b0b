"""Toy-scale networks: residual style generators, patch discriminators, and
encoder-decoder depth estimators with skip connections and side outputs.

Parameters live in ParamSet objects (named tensor map plus an architecture
descriptor) and serialize to a little-endian binary checkpoint:

    magic "DADEPTH1" | u32 version | u32 len + descriptor JSON (utf-8) |
    per tensor: u32 name len, name, 4 x u32 dims, raw float32 data

A checkpoint file holds one bundle of named ParamSets; tensor names are
prefixed "<net>/<param>".
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .geometry import D_MAX, D_MIN
from .tensor import STANDARD, Tensor, TensorError, make_rng

MAGIC = b"DADEPTH1"
VERSION = 1

INIT_STD = 0.02
NORM_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    gen_base: int = 16
    gen_res_blocks: int = 2
    disc_base: int = 16
    depth_base: int = 16
    num_scales: int = 4
    d_min: float = D_MIN
    d_max: float = D_MAX


class ParamSet:
    """Named parameter tensors plus the descriptor they must match."""

    def __init__(self, kind: str, cfg: NetConfig, params: dict[str, Tensor]):
        self.kind = kind
        self.cfg = cfg
        self.params = params

    def descriptor(self) -> dict:
        return {"kind": self.kind, "cfg": asdict(self.cfg),
                "params": {k: list(v.shape) for k, v in self.params.items()}}

    def set_requires_grad(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def copy_data(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def _init(rng, shape, dtype, std=INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype),
                  requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _conv_params(rng, params, name, cin, cout, k, dtype, std=INIT_STD):
    params[f"{name}.w"] = _init(rng, (cout, cin, k, k), dtype, std)
    params[f"{name}.b"] = _zeros((1, cout, 1, 1), dtype)


def _he_conv_params(rng, params, name, cin, cout, k, dtype):
    # norm-free subnets need fan-in scaling or activations collapse
    std = math.sqrt(2.0 / (cin * k * k))
    _conv_params(rng, params, name, cin, cout, k, dtype, std)


def _convt_params(rng, params, name, cin, cout, k, dtype):
    params[f"{name}.w"] = _init(rng, (cin, cout, k, k), dtype)
    params[f"{name}.b"] = _zeros((1, cout, 1, 1), dtype)


def _instance_norm(x: Tensor) -> Tensor:
    mu = T.mean(x, axis=(2, 3))
    centered = T.sub(x, mu)
    var = T.mean(T.square(centered), axis=(2, 3))
    return T.mul(centered, T.reciprocal(T.sqrt_(T.shift(var, NORM_EPS))))


def _conv(ps, name, x, stride=1, pad=1):
    return T.conv2d(x, ps.params[f"{name}.w"], ps.params[f"{name}.b"],
                    stride=stride, pad=pad)


def _convt(ps, name, x, stride=2, pad=1):
    return T.conv2d_transpose(x, ps.params[f"{name}.w"], ps.params[f"{name}.b"],
                              stride=stride, pad=pad)


# ---------------------------------------------------------------------------
# style generator: conv stem, two strided downs, residual blocks, two
# transposed-conv ups, tanh head; channels base/2*base/4*base


def build_generator(cfg: NetConfig, seed=0, name="gen", dtype=STANDARD) -> ParamSet:
    rng = make_rng(seed, name)
    b = cfg.gen_base
    params: dict[str, Tensor] = {}
    _conv_params(rng, params, "stem", 3, b, 3, dtype)
    _conv_params(rng, params, "down1", b, 2 * b, 3, dtype)
    _conv_params(rng, params, "down2", 2 * b, 4 * b, 3, dtype)
    for i in range(cfg.gen_res_blocks):
        _conv_params(rng, params, f"res{i}a", 4 * b, 4 * b, 3, dtype)
        _conv_params(rng, params, f"res{i}b", 4 * b, 4 * b, 3, dtype)
    _convt_params(rng, params, "up1", 4 * b, 2 * b, 4, dtype)
    _convt_params(rng, params, "up2", 2 * b, b, 4, dtype)
    _conv_params(rng, params, "head", b, 3, 3, dtype)
    return ParamSet("generator", cfg, params)


def run_generator(ps: ParamSet, img: Tensor) -> Tensor:
    """Translate a [0,1] image; output is the tanh head in [-1,1] and is
    rescaled to [0,1] by callers (to_unit)."""
    _, _, h, w = img.shape
    if h % 4 or w % 4:
        raise TensorError(f"generator needs spatial dims divisible by 4, got {h}x{w}")
    x = T.shift(T.scale(img, 2.0), -1.0)
    x = T.leaky_relu(_instance_norm(_conv(ps, "stem", x, 1, 1)))
    x = T.leaky_relu(_instance_norm(_conv(ps, "down1", x, 2, 1)))
    x = T.leaky_relu(_instance_norm(_conv(ps, "down2", x, 2, 1)))
    for i in range(ps.cfg.gen_res_blocks):
        r = T.leaky_relu(_instance_norm(_conv(ps, f"res{i}a", x, 1, 1)))
        r = _instance_norm(_conv(ps, f"res{i}b", r, 1, 1))
        x = T.add(x, r)
    x = T.leaky_relu(_instance_norm(_convt(ps, "up1", x)))
    x = T.leaky_relu(_instance_norm(_convt(ps, "up2", x)))
    return T.tanh_(_conv(ps, "head", x, 1, 1))


def to_unit(img_pm1: Tensor) -> Tensor:
    """Map a [-1,1] generator output to [0,1]."""
    return T.shift(T.scale(img_pm1, 0.5), 0.5)


# ---------------------------------------------------------------------------
# patch discriminator: three strided conv layers then a 1-channel score map


def build_discriminator(cfg: NetConfig, seed=0, name="disc", dtype=STANDARD) -> ParamSet:
    rng = make_rng(seed, name)
    b = cfg.disc_base
    params: dict[str, Tensor] = {}
    _conv_params(rng, params, "c0", 3, b, 4, dtype)
    _conv_params(rng, params, "c1", b, 2 * b, 4, dtype)
    _conv_params(rng, params, "c2", 2 * b, 4 * b, 4, dtype)
    _conv_params(rng, params, "head", 4 * b, 1, 4, dtype)
    return ParamSet("discriminator", cfg, params)


def run_discriminator(ps: ParamSet, img: Tensor) -> Tensor:
    x = T.shift(T.scale(img, 2.0), -1.0)
    x = T.leaky_relu(_conv(ps, "c0", x, 2, 1))
    x = T.leaky_relu(_instance_norm(_conv(ps, "c1", x, 2, 1)))
    x = T.leaky_relu(_instance_norm(_conv(ps, "c2", x, 2, 1)))
    return _conv(ps, "head", x, 1, 1)


# ---------------------------------------------------------------------------
# depth estimator: 4-level encoder, decoder with skip concats, one bounded
# side output per decoder scale (full resolution first)


def build_depth_net(cfg: NetConfig, seed=0, name="depth", dtype=STANDARD) -> ParamSet:
    rng = make_rng(seed, name)
    b = cfg.depth_base
    ch = (b, 2 * b, 4 * b, 4 * b)
    params: dict[str, Tensor] = {}
    _he_conv_params(rng, params, "e0", 3, ch[0], 3, dtype)
    _he_conv_params(rng, params, "e1", ch[0], ch[1], 3, dtype)
    _he_conv_params(rng, params, "e2", ch[1], ch[2], 3, dtype)
    _he_conv_params(rng, params, "e3", ch[2], ch[3], 3, dtype)
    _he_conv_params(rng, params, "d3", ch[3], ch[3], 3, dtype)
    _he_conv_params(rng, params, "d2", ch[3] + ch[2], ch[2], 3, dtype)
    _he_conv_params(rng, params, "d1", ch[2] + ch[1], ch[1], 3, dtype)
    _he_conv_params(rng, params, "d0", ch[1] + ch[0], ch[0], 3, dtype)
    for i, c in enumerate((ch[0], ch[1], ch[2], ch[3])):
        _conv_params(rng, params, f"side{i}", c, 1, 3, dtype)
    return ParamSet("depth", cfg, params)


def run_depth_net(ps: ParamSet, img: Tensor) -> list[Tensor]:
    """Predict depth maps at scales 1, 1/2, 1/4, 1/8 (full resolution first),
    each bounded to [d_min, d_max] by a scaled sigmoid head."""
    _, _, h, w = img.shape
    if h % 8 or w % 8:
        raise TensorError(f"depth net needs spatial dims divisible by 8, got {h}x{w}")
    cfg = ps.cfg
    e0 = T.leaky_relu(_conv(ps, "e0", img, 1, 1))
    e1 = T.leaky_relu(_conv(ps, "e1", e0, 2, 1))
    e2 = T.leaky_relu(_conv(ps, "e2", e1, 2, 1))
    e3 = T.leaky_relu(_conv(ps, "e3", e2, 2, 1))
    d3 = T.leaky_relu(_conv(ps, "d3", e3, 1, 1))
    d2 = T.leaky_relu(_conv(ps, "d2", T.concat_channels(
        [T.upsample_nearest(d3, 2), e2]), 1, 1))
    d1 = T.leaky_relu(_conv(ps, "d1", T.concat_channels(
        [T.upsample_nearest(d2, 2), e1]), 1, 1))
    d0 = T.leaky_relu(_conv(ps, "d0", T.concat_channels(
        [T.upsample_nearest(d1, 2), e0]), 1, 1))
    span = cfg.d_max - cfg.d_min
    outs = []
    for i, feat in enumerate((d0, d1, d2, d3)):
        raw = _conv(ps, f"side{i}", feat, 1, 1)
        outs.append(T.shift(T.scale(T.sigmoid(raw), span), cfg.d_min))
    return outs[:cfg.num_scales]


# ---------------------------------------------------------------------------
# bundles

NET_BUILDERS = {
    "g_s2t": build_generator,
    "g_t2s": build_generator,
    "d_t": build_discriminator,
    "d_s": build_discriminator,
    "f_t": build_depth_net,
    "f_s": build_depth_net,
}


def build_all(cfg: NetConfig, seed=0, names=None, dtype=STANDARD) -> dict[str, ParamSet]:
    names = tuple(NET_BUILDERS) if names is None else names
    return {n: NET_BUILDERS[n](cfg, seed=seed, name=n, dtype=dtype) for n in names}


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(path, nets: dict[str, ParamSet]):
    # insertion order everywhere so save -> load -> save is byte-identical
    desc = {name: ps.descriptor() for name, ps in nets.items()}
    blob = json.dumps(desc).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, ps in nets.items():
            for pname, tensor in ps.params.items():
                full = f"{name}/{pname}".encode()
                f.write(struct.pack("<I", len(full)))
                f.write(full)
                f.write(struct.pack("<4I", *tensor.shape))
                f.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


class CheckpointError(Exception):
    pass


def load_checkpoint(path, dtype=STANDARD) -> dict[str, ParamSet]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (dlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    desc = json.loads(raw[off:off + dlen].decode())
    off += dlen
    tensors: dict[str, np.ndarray] = {}
    while off < len(raw):
        try:
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            dims = struct.unpack_from("<4I", raw, off)
            off += 16
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: truncated header at byte {off}: {e}") from None
        count = int(np.prod(dims))
        end = off + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor '{name}' at byte {off}")
        tensors[name] = np.frombuffer(raw[off:end], dtype="<f4").reshape(dims)
        off = end
    nets: dict[str, ParamSet] = {}
    for net_name, d in desc.items():
        cfg = NetConfig(**d["cfg"])
        params: dict[str, Tensor] = {}
        for pname, shape in d["params"].items():
            key = f"{net_name}/{pname}"
            if key not in tensors:
                raise CheckpointError(f"{path}: descriptor names missing tensor '{key}'")
            arr = tensors[key]
            if list(arr.shape) != list(shape):
                raise CheckpointError(f"{path}: tensor '{key}' shape {arr.shape} "
                                      f"!= descriptor {shape}")
            params[pname] = Tensor(arr.astype(dtype), requires_grad=True)
        nets[net_name] = ParamSet(d["kind"], cfg, params)
    return nets


RUNNERS = {
    "generator": run_generator,
    "discriminator": run_discriminator,
    "depth": run_depth_net,
}
