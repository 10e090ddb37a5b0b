"""Procedural two-domain stereo data source plus PPM/PFM file ingestion.

Scenes are layered fronto-parallel textured rectangles over a ground plane
and a far wall.  Layer textures are piecewise-linear between integer columns
of the right view, and the left image is the analytic resampling of those
textures at x - disparity, so bilinear inverse warping with the true depth
reproduces the left image exactly outside occluded/border pixels.  The
target domain applies a fixed photometric shift (gain, bias, color cast,
vignette, optional noise) identically to both stereo views.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .geometry import D_MAX, D_MIN, CameraRig
from .tensor import STANDARD, WIDE, Tensor, make_rng

TEXTURE_STEP = 4  # coarse texture knot spacing, a divisor of any integer grid


class WorldError(ValueError):
    pass


class FileFormatError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    width: int = 96
    height: int = 32
    n_rects: int = 4
    depth_min: float = 4.0
    depth_max: float = 60.0
    focal_px: float = 48.0
    baseline_m: float = 0.25
    shift_gain: float = 0.72
    shift_bias: float = 0.10
    shift_cast: tuple = (0.06, 0.0, -0.06)
    shift_vignette: float = 0.12
    shift_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.width % 8 or self.height % 8:
            raise WorldError(f"dims {self.width}x{self.height} must be divisible by 8")
        if not (D_MIN <= self.depth_min < self.depth_max <= D_MAX):
            raise WorldError(f"depth range [{self.depth_min}, {self.depth_max}] "
                             f"outside [{D_MIN}, {D_MAX}]")
        if self.n_rects < 1:
            raise WorldError("n_rects must be >= 1")
        if self.focal_px <= 0 or self.baseline_m <= 0:
            raise WorldError("rig parameters must be positive")

    def rig(self) -> CameraRig:
        return CameraRig(self.focal_px, self.baseline_m, self.width)


@dataclass
class StereoSample:
    """One scene: left image, optional right image and ground truth, domain
    tag, rig, and (for generated scenes) the occlusion/border mask."""

    left: Tensor
    right: Tensor | None
    gt_depth: Tensor | None
    domain: str  # "source" | "target"
    rig: CameraRig
    id: str
    occlusion: np.ndarray | None = None


# ---------------------------------------------------------------------------
# scene rendering


def _coarse_texture(rng, n_rows, n_cols, base, amp):
    vals = base.reshape(3, 1, 1) + amp * rng.uniform(-1.0, 1.0, size=(3, n_rows, n_cols))
    return np.clip(vals, 0.03, 0.97)


def _bilerp_raster(coarse, out_h, out_w):
    """Expand a coarse (3, ny, nx) grid to (3, out_h, out_w) with linear
    interpolation; knots sit every TEXTURE_STEP pixels."""
    _, ny, nx = coarse.shape
    ys = np.arange(out_h) / TEXTURE_STEP
    xs = np.arange(out_w) / TEXTURE_STEP
    y0 = np.minimum(ys.astype(int), ny - 2)
    x0 = np.minimum(xs.astype(int), nx - 2)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def generate_scene(cfg: WorldConfig, index: int, dtype=STANDARD) -> StereoSample:
    """Deterministic source-domain sample for (cfg.seed, index)."""
    rng = make_rng(cfg.seed, "scene", index)
    h, w = cfg.height, cfg.width
    fb = cfg.focal_px * cfg.baseline_m
    pad = int(math.ceil(fb / cfg.depth_min)) + 2  # texture margin left of column 0
    ext_w = w + pad + 2

    # layer stack: 0 wall, 1 ground, then rectangles; per layer we keep a
    # per-row disparity, a left-view support, and a texture raster in
    # right-view integer coordinates
    disps = []   # (H,) per-row disparity
    spans = []   # (x0, x1, y0, y1) in left view; full-frame layers use None
    rasters = []

    n_ty = h // TEXTURE_STEP + 2
    n_tx = ext_w // TEXTURE_STEP + 2

    def add_raster(base_color, amp):
        coarse = _coarse_texture(rng, n_ty, n_tx, base_color, amp)
        rasters.append(_bilerp_raster(coarse, h, ext_w))

    z_wall = rng.uniform(0.8, 1.0) * cfg.depth_max
    disps.append(np.full(h, fb / z_wall))
    spans.append(None)
    add_raster(rng.uniform(0.35, 0.75, size=3), 0.18)

    y_h = int(rng.uniform(0.30, 0.45) * h)
    z_near = rng.uniform(cfg.depth_min, cfg.depth_min + 3.0)
    d_ground = np.full(h, -1.0)
    rows = np.arange(y_h, h)
    t = (rows - y_h) / max(1, h - 1 - y_h)
    d_ground[rows] = fb / z_wall + t * (fb / z_near - fb / z_wall)
    disps.append(d_ground)
    spans.append((0, w, y_h, h))
    add_raster(rng.uniform(0.25, 0.65, size=3), 0.22)

    # rectangles stand on the ground plane: depth comes from the ground at
    # the base row and apparent size shrinks with depth, so depth is
    # monocularly inferable from layout (as in a driving scene)
    for _ in range(cfg.n_rects):
        y1 = int(rng.integers(y_h + 3, h + 1))
        z = fb / d_ground[min(y1, h - 1)]
        phys_w = rng.uniform(1.0, 4.0)
        phys_h = rng.uniform(0.8, 3.0)
        rw = int(np.clip(round(cfg.focal_px * phys_w / z), 4, w // 3))
        rh = int(np.clip(round(cfg.focal_px * phys_h / z), 3, (2 * h) // 3))
        x0 = int(rng.integers(1, w - rw))
        y0 = max(1, y1 - rh)
        disps.append(np.full(h, fb / z))
        spans.append((x0, x0 + rw, y0, y1))
        add_raster(rng.uniform(0.15, 0.85, size=3), 0.25)

    n_layers = len(disps)
    disp_rows = np.stack(disps)                      # (L, H)
    raster = np.stack(rasters)                       # (L, 3, H, ext_w)

    # left-view visibility: nearest covering layer per pixel
    xs = np.arange(w)[None, :]
    depth_stack = np.full((n_layers, h, w), np.inf)
    for k, span in enumerate(spans):
        cover = np.ones((h, w), dtype=bool)
        if span is not None:
            x0, x1, y0, y1 = span
            cover &= (xs >= x0) & (xs < x1)
            cover[:y0, :] = False
            cover[y1:, :] = False
        if k == 1:  # ground exists below the horizon only
            cover[disp_rows[k] < 0, :] = False
        per_row_depth = np.where(disp_rows[k] > 0, fb / np.maximum(disp_rows[k], 1e-9),
                                 np.inf)
        depth_stack[k] = np.where(cover, per_row_depth[:, None], np.inf)
    lvl = np.argmin(depth_stack, axis=0)             # (H, W)
    gt = np.take_along_axis(depth_stack, lvl[None], axis=0)[0]

    # right-view visibility at integer columns
    depth_stack_r = np.full((n_layers, h, w), np.inf)
    for k, span in enumerate(spans):
        d = disp_rows[k][:, None]
        if span is None:
            cover = np.ones((h, w), dtype=bool)
        else:
            x0, x1, y0, y1 = span
            cover = (xs >= x0 - d) & (xs < x1 - d)
            cover[:y0, :] = False
            cover[y1:, :] = False
        if k == 1:
            cover[disp_rows[k] < 0, :] = False
        per_row_depth = np.where(disp_rows[k] > 0, fb / np.maximum(disp_rows[k], 1e-9),
                                 np.inf)
        depth_stack_r[k] = np.where(cover, per_row_depth[:, None], np.inf)
    lvl_r = np.argmin(depth_stack_r, axis=0)

    yy = np.arange(h)[:, None]
    right = raster[lvl_r, :, yy, xs + pad]           # (H, W, 3)
    right = np.moveaxis(right, -1, 0)

    # left image: analytic resample of the visible layer's texture
    d_px = np.take_along_axis(disp_rows[:, :, None].repeat(w, 2), lvl[None], 0)[0]
    cx = xs.astype(float) - d_px                     # (H, W) right-view coords
    u0 = np.floor(cx).astype(int)
    frac = cx - u0
    t00 = raster[lvl, :, yy, u0 + pad]
    t01 = raster[lvl, :, yy, u0 + 1 + pad]
    left = np.moveaxis(t00 * (1 - frac[..., None]) + t01 * frac[..., None], -1, 0)

    # occlusion / border mask: the warp samples ceil(cx)-1 and ceil(cx)
    base = np.ceil(cx).astype(int) - 1
    b0 = np.clip(base, 0, w - 1)
    b1 = np.clip(base + 1, 0, w - 1)
    same0 = lvl_r[yy, b0] == lvl
    same1 = lvl_r[yy, b1] == lvl
    occluded = ~(same0 & same1 & (base >= 0))

    return StereoSample(
        left=Tensor(left[None].astype(dtype)),
        right=Tensor(right[None].astype(dtype)),
        gt_depth=Tensor(gt[None, None].astype(dtype)),
        domain="source",
        rig=cfg.rig(),
        id=f"s{index:05d}",
        occlusion=occluded,
    )


# ---------------------------------------------------------------------------
# domain shift


def _vignette_field(cfg: WorldConfig, h, w):
    ys = (np.arange(h) - (h - 1) / 2) / ((h - 1) / 2)
    xs = (np.arange(w) - (w - 1) / 2) / ((w - 1) / 2)
    r2 = ys[:, None] ** 2 + xs[None, :] ** 2
    return 1.0 - cfg.shift_vignette * r2 / 2.0


def _shift_image(img: np.ndarray, cfg: WorldConfig, noise_rng) -> np.ndarray:
    _, c, h, w = img.shape
    cast = np.asarray(cfg.shift_cast, dtype=img.dtype).reshape(1, c, 1, 1)
    out = img * cfg.shift_gain + cfg.shift_bias + cast
    out = out * _vignette_field(cfg, h, w)[None, None]
    if cfg.shift_noise_std > 0:
        out = out + noise_rng.normal(0.0, cfg.shift_noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def shift_domain(sample: StereoSample, cfg: WorldConfig) -> StereoSample:
    """Apply the configured photometric transform identically to both views,
    strip the ground truth, and retag as target domain."""
    if sample.domain != "source":
        raise WorldError("shift_domain expects a source sample")
    new_id = "t" + sample.id[1:] if sample.id.startswith("s") else sample.id + "_t"
    rng_l = make_rng(cfg.seed, "noise", sample.id, 0)
    rng_r = make_rng(cfg.seed, "noise", sample.id, 1)
    left = _shift_image(sample.left.data, cfg, rng_l)
    right = None
    if sample.right is not None:
        right = Tensor(_shift_image(sample.right.data, cfg, rng_r))
    return replace(sample, left=Tensor(left), right=right, gt_depth=None,
                   domain="target", id=new_id)


# ---------------------------------------------------------------------------
# augmentation


def _mirror(t: Tensor | None) -> Tensor | None:
    return None if t is None else Tensor(t.data[:, :, :, ::-1].copy())


def flip_sample(sample: StereoSample) -> StereoSample:
    """Horizontal flip.  Target pairs swap left/right roles and mirror both,
    which keeps the pair epipolar-valid; source samples mirror image and
    ground truth in place (their losses are supervised, not stereo)."""
    occ = None if sample.occlusion is None else sample.occlusion[:, ::-1].copy()
    if sample.domain == "target" and sample.right is not None:
        return replace(sample, left=_mirror(sample.right), right=_mirror(sample.left),
                       occlusion=None)
    return replace(sample, left=_mirror(sample.left), right=_mirror(sample.right),
                   gt_depth=_mirror(sample.gt_depth), occlusion=occ)


def _rotate_array(arr: np.ndarray, deg: float) -> np.ndarray:
    """Bilinear rotation about the image center with edge clamping."""
    if deg == 0.0:
        return arr.copy()
    n, c, h, w = arr.shape
    th = math.radians(deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy = cy + (yy - cy) * math.cos(th) - (xx - cx) * math.sin(th)
    sx = cx + (yy - cy) * math.sin(th) + (xx - cx) * math.cos(th)
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[None, None]
    fx = np.clip(sx - x0, 0.0, 1.0)[None, None]
    v00 = arr[:, :, y0, x0]
    v01 = arr[:, :, y0, x1]
    v10 = arr[:, :, y1, x0]
    v11 = arr[:, :, y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return (top * (1 - fy) + bot * fy).astype(arr.dtype)


def rotate_sample(sample: StereoSample, deg: float) -> StereoSample:
    rot = lambda t: None if t is None else Tensor(_rotate_array(t.data, deg))
    return replace(sample, left=rot(sample.left), right=rot(sample.right),
                   gt_depth=rot(sample.gt_depth),
                   occlusion=None if deg else sample.occlusion)


def scale_brightness(sample: StereoSample, gain: float) -> StereoSample:
    adj = lambda t: None if t is None else Tensor(
        np.clip(t.data * gain, 0.0, 1.0).astype(t.data.dtype))
    return replace(sample, left=adj(sample.left), right=adj(sample.right))


def augment(sample: StereoSample, seed: int, *, flip: bool = True,
            rot_deg: float = 5.0, brightness=(0.9, 1.1)) -> StereoSample:
    """Training-time augmentation, deterministic per seed: horizontal flip
    with probability 1/2, rotation in [-rot_deg, rot_deg], brightness gain."""
    rng = make_rng(seed, "augment")
    out = sample
    if flip and rng.random() < 0.5:
        out = flip_sample(out)
    if rot_deg > 0:
        out = rotate_sample(out, float(rng.uniform(-rot_deg, rot_deg)))
    lo, hi = brightness
    if (lo, hi) != (1.0, 1.0):
        out = scale_brightness(out, float(rng.uniform(lo, hi)))
    return out


# ---------------------------------------------------------------------------
# PPM (P6) and PFM (grayscale, little-endian) file formats


def save_image(t: Tensor, path):
    """Write a (1,3,H,W) [0,1] tensor as binary PPM with maxval 255."""
    n, c, h, w = t.shape
    if n != 1 or c != 3:
        raise FileFormatError(f"save_image expects (1,3,H,W), got {t.shape}")
    arr = np.clip(np.rint(t.data[0] * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.moveaxis(arr, 0, -1).tobytes())


def _read_token(buf: bytes, off: int):
    while off < len(buf):
        ch = buf[off:off + 1]
        if ch == b"#":
            while off < len(buf) and buf[off:off + 1] != b"\n":
                off += 1
        elif ch.isspace():
            off += 1
        else:
            break
    start = off
    while off < len(buf) and not buf[off:off + 1].isspace():
        off += 1
    if start == off:
        raise FileFormatError(f"malformed header: expected token at byte {start}")
    return buf[start:off], off


def load_image(path) -> Tensor:
    with open(path, "rb") as f:
        buf = f.read()
    magic, off = _read_token(buf, 0)
    if magic != b"P6":
        raise FileFormatError(f"{path}: not a binary PPM (magic {magic!r})")
    wtok, off = _read_token(buf, off)
    htok, off = _read_token(buf, off)
    mtok, off = _read_token(buf, off)
    try:
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError:
        raise FileFormatError(f"{path}: non-numeric header field") from None
    if maxval != 255:
        raise FileFormatError(f"{path}: unsupported maxval {maxval}")
    off += 1  # single whitespace after maxval
    need = w * h * 3
    payload = buf[off:off + need]
    if len(payload) < need:
        raise FileFormatError(f"{path}: truncated payload at byte {off + len(payload)}"
                              f" (need {need} bytes from byte {off})")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return Tensor((np.moveaxis(arr, -1, 0)[None] / 255.0).astype(STANDARD))


def save_depth(d: Tensor, path):
    """Write a (1,1,H,W) depth map as grayscale PFM, scale -1 (little endian),
    rows bottom to top."""
    n, c, h, w = d.shape
    if n != 1 or c != 1:
        raise FileFormatError(f"save_depth expects (1,1,H,W), got {d.shape}")
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        f.write(np.ascontiguousarray(d.data[0, 0][::-1], dtype="<f4").tobytes())


def load_depth(path) -> Tensor:
    with open(path, "rb") as f:
        buf = f.read()
    magic, off = _read_token(buf, 0)
    if magic != b"Pf":
        raise FileFormatError(f"{path}: not a grayscale PFM (magic {magic!r})")
    wtok, off = _read_token(buf, off)
    htok, off = _read_token(buf, off)
    stok, off = _read_token(buf, off)
    try:
        w, h, scale_val = int(wtok), int(htok), float(stok)
    except ValueError:
        raise FileFormatError(f"{path}: non-numeric header field") from None
    if scale_val >= 0:
        raise FileFormatError(f"{path}: big-endian PFM (scale {scale_val}) unsupported")
    off += 1
    need = w * h * 4
    payload = buf[off:off + need]
    if len(payload) < need:
        raise FileFormatError(f"{path}: truncated payload at byte {off + len(payload)}"
                              f" (need {need} bytes from byte {off})")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w)[::-1]
    return Tensor(arr[None, None].astype(STANDARD))


# ---------------------------------------------------------------------------
# corpus directories


def build_corpus(cfg: WorldConfig, count: int, dtype=STANDARD) -> list[StereoSample]:
    """count source samples (scene indices 0..count-1) plus count target
    samples drawn from disjoint scenes (indices count..2*count-1)."""
    samples = [generate_scene(cfg, i, dtype=dtype) for i in range(count)]
    for i in range(count):
        src = generate_scene(cfg, count + i, dtype=dtype)
        tgt = shift_domain(src, cfg)
        samples.append(replace(tgt, id=f"t{i:05d}"))
    return samples


def save_corpus(root, cfg: WorldConfig, count: int) -> dict:
    os.makedirs(os.path.join(root, "source"), exist_ok=True)
    os.makedirs(os.path.join(root, "target"), exist_ok=True)
    entries = []
    for s in build_corpus(cfg, count):
        sub = s.domain
        save_image(s.left, os.path.join(root, sub, f"{s.id}_left.ppm"))
        save_image(s.right, os.path.join(root, sub, f"{s.id}_right.ppm"))
        if s.domain == "source":
            save_depth(s.gt_depth, os.path.join(root, "source", f"{s.id}_depth.pfm"))
        entries.append({"id": s.id, "domain": s.domain})
    manifest = {
        "format": 1,
        "count": count,
        "config": asdict(cfg),
        "rig": {"focal_px": cfg.focal_px, "baseline_m": cfg.baseline_m,
                "width": cfg.width},
        "samples": entries,
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(path) as f:
        manifest = json.load(f)
    cfg_d = dict(manifest["config"])
    cfg_d["shift_cast"] = tuple(cfg_d["shift_cast"])
    manifest["config"] = WorldConfig(**cfg_d)
    return manifest


def load_corpus(root) -> tuple[WorldConfig, list[StereoSample]]:
    manifest = load_manifest(root)
    cfg: WorldConfig = manifest["config"]
    rig = cfg.rig()
    samples = []
    for entry in manifest["samples"]:
        sid, domain = entry["id"], entry["domain"]
        base = os.path.join(root, domain, sid)
        left = load_image(base + "_left.ppm")
        right = load_image(base + "_right.ppm")
        gt = None
        if domain == "source":
            gt = load_depth(base + "_depth.pfm")
        samples.append(StereoSample(left=left, right=right, gt_depth=gt,
                                    domain=domain, rig=rig, id=sid))
    return cfg, samples
