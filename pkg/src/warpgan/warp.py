"""Image rasters, differentiable warping and compositing.

Two layers of API live here.  Data-side code (dataset generation,
evaluation, the service) works with :class:`Raster` and
:class:`ForegroundLayer`: float32 HWC arrays in [0, 1], warped through
the exact float64 homography from :mod:`warpgan.lie`.  Training works
with batched float32 NCHW :class:`~warpgan.autodiff.Tensor` values and
a warp head that is differentiable end to end: parameter vector ->
matrix exponential by power series -> inverse pixel-frame homography ->
sampling grid -> bilinear gather.  Both sides share the same bilinear
kernel and the same compositing arithmetic.

Sampling is zero-padded: a source location outside the raster
contributes nothing, which for a foreground layer means transparent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import lie
from .errors import ShapeMismatch

_F32 = np.float32


@dataclass
class Raster:
    """A float32 image, shape (H, W, C) with C in {1, 3, 4}, values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise ShapeMismatch("raster values must be an (H, W, C) array")
        if v.shape[2] not in (1, 3, 4):
            raise ShapeMismatch(f"unsupported channel count {v.shape[2]}")
        if v.dtype != np.float32:
            self.values = v.astype(np.float32)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def frame(self) -> lie.FrameMap:
        return lie.FrameMap(width=self.width, height=self.height)


@dataclass
class ForegroundLayer:
    """An RGB color raster plus a single-channel alpha mask of equal extent."""

    color: Raster
    mask: Raster

    def __post_init__(self):
        if self.color.channels != 3 or self.mask.channels != 1:
            raise ShapeMismatch("foreground needs 3-channel color, 1-channel mask")
        if self.color.values.shape[:2] != self.mask.values.shape[:2]:
            raise ShapeMismatch("color and mask extents differ")

    @property
    def height(self) -> int:
        return self.color.height

    @property
    def width(self) -> int:
        return self.color.width

    def rgba(self) -> np.ndarray:
        return np.concatenate([self.color.values, self.mask.values], axis=2)

    @staticmethod
    def from_rgba(arr: np.ndarray) -> "ForegroundLayer":
        return ForegroundLayer(
            color=Raster(np.ascontiguousarray(arr[:, :, :3])),
            mask=Raster(np.ascontiguousarray(arr[:, :, 3:4])),
        )


# -- PNG I/O ------------------------------------------------------------


def read_png(path) -> Raster:
    """Load a PNG as a Raster; RGBA files keep their alpha channel."""
    with Image.open(path) as img:
        if img.mode == "RGBA":
            arr = np.asarray(img)
        elif img.mode == "L":
            arr = np.asarray(img)[:, :, None]
        else:
            arr = np.asarray(img.convert("RGB"))
    return Raster(arr.astype(np.float32) / 255.0)


def write_png(raster: Raster, path):
    arr = np.clip(np.rint(raster.values * 255.0), 0, 255).astype(np.uint8)
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[raster.channels]
    if mode == "L":
        arr = arr[:, :, 0]
    tmp = f"{path}.tmp-{os.getpid()}"
    Image.fromarray(arr, mode=mode).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_foreground(path) -> ForegroundLayer:
    r = read_png(path)
    if r.channels != 4:
        raise ShapeMismatch(f"foreground PNG must be RGBA, got {r.channels} channels")
    return ForegroundLayer.from_rgba(r.values)


def save_foreground(layer: ForegroundLayer, path):
    write_png(Raster(layer.rgba()), path)


# -- NCHW conversion ----------------------------------------------------


def to_nchw(obj) -> np.ndarray:
    """Raster or ForegroundLayer -> (1, C, H, W) float32 array."""
    if isinstance(obj, ForegroundLayer):
        arr = obj.rgba()
    else:
        arr = obj.values
    return np.ascontiguousarray(arr.transpose(2, 0, 1)[None])


def raster_from_nchw(arr: np.ndarray) -> Raster:
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeMismatch(f"expected (1, C, H, W), got {arr.shape}")
    return Raster(np.ascontiguousarray(arr[0].transpose(1, 2, 0)))


# -- bilinear sampling kernel -------------------------------------------

_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


def _gather_corners(flat, idx):
    # flat: (B, C, H*W), idx: (B, K) -> (B, C, K)
    return np.take_along_axis(flat, idx[:, None, :], axis=2)


def _bilinear_forward(img: np.ndarray, grid: np.ndarray):
    b, c, h, w = img.shape
    k = grid.shape[1] * grid.shape[2]
    x = grid[..., 0].reshape(b, k).astype(np.float32)
    y = grid[..., 1].reshape(b, k).astype(np.float32)
    # non-finite coordinates (horizon crossings) become far-outside points
    x = np.where(np.isfinite(x), x, np.float32(1e9))
    y = np.where(np.isfinite(y), y, np.float32(1e9))
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    flat = img.reshape(b, c, h * w)
    out = np.zeros((b, c, k), dtype=np.float32)
    cache = []
    for dx, dy in _CORNERS:
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        wx = fx if dx else (1.0 - fx)
        wy = fy if dy else (1.0 - fy)
        weight = (wx * wy * valid).astype(np.float32)
        idx = (
            np.clip(yi, 0, h - 1).astype(np.int64) * w
            + np.clip(xi, 0, w - 1).astype(np.int64)
        )
        vals = _gather_corners(flat, idx)
        out += vals * weight[:, None, :]
        cache.append((idx, valid, vals))
    oh, ow = grid.shape[1], grid.shape[2]
    return out.reshape(b, c, oh, ow), (x0, y0, fx, fy, cache)


def bilinear_sample(img, grid):
    """Sample an image at fractional pixel coordinates, zero outside.

    Tensor form: ``img`` (B, C, H, W), ``grid`` (B, Ho, Wo, 2) holding
    (x, y) source pixel coordinates for every output pixel; returns a
    (B, C, Ho, Wo) Tensor.  Differentiable in both arguments (first
    order only).  Raster form: ``img`` a Raster and ``grid`` an
    (Ho, Wo, 2) ndarray; returns a Raster.
    """
    if isinstance(img, Raster):
        grid = np.asarray(grid, dtype=np.float32)
        if grid.ndim != 3 or grid.shape[2] != 2:
            raise ShapeMismatch(f"expected (Ho, Wo, 2) grid, got {grid.shape}")
        with ad.no_grad():
            out = bilinear_sample(
                ad.Tensor(to_nchw(img)), ad.Tensor(grid[None])
            )
        return raster_from_nchw(out.data)

    if img.data.ndim != 4 or grid.data.ndim != 4 or grid.data.shape[3] != 2:
        raise ShapeMismatch(
            f"bilinear_sample: img {img.data.shape}, grid {grid.data.shape}"
        )
    if img.data.shape[0] != grid.data.shape[0]:
        raise ShapeMismatch("bilinear_sample: batch sizes differ")
    out_data, (x0, y0, fx, fy, cache) = _bilinear_forward(img.data, grid.data)
    b, c, h, w = img.data.shape
    k = fx.shape[1]
    oh, ow = grid.data.shape[1], grid.data.shape[2]

    def rule(g):
        if ad.is_grad_enabled():
            raise RuntimeError(
                "bilinear_sample supports first-order gradients only"
            )
        gd = g.data.reshape(b, c, k)
        gimg = np.zeros((b, c, h * w), dtype=np.float32)
        gx = np.zeros((b, k), dtype=np.float32)
        gy = np.zeros((b, k), dtype=np.float32)
        nb = np.arange(b)[:, None, None]
        cb = np.arange(c)[None, :, None]
        for (dx, dy), (idx, valid, vals) in zip(_CORNERS, cache):
            wx = fx if dx else (1.0 - fx)
            wy = fy if dy else (1.0 - fy)
            weight = (wx * wy * valid).astype(np.float32)
            np.add.at(gimg, (nb, cb, idx[:, None, :]), gd * weight[:, None, :])
            s = (gd * vals).sum(axis=1) * valid  # (B, K)
            dwx = (1.0 if dx else -1.0) * wy
            dwy = (1.0 if dy else -1.0) * wx
            gx += s * dwx
            gy += s * dwy
        ggrid = np.stack([gx, gy], axis=2).reshape(b, oh, ow, 2)
        return ad.Tensor(gimg.reshape(b, c, h, w)), ad.Tensor(ggrid)

    return ad.primitive(out_data, (img, grid), rule)


# -- differentiable warp head -------------------------------------------

_EMBED = None
_COORD_CACHE: dict = {}


def _embedding() -> ad.Tensor:
    global _EMBED
    if _EMBED is None:
        rows = []
        for i in range(8):
            p = np.zeros(8)
            p[i] = 1.0
            rows.append(lie.generator_matrix(p).ravel())
        _EMBED = ad.Tensor(np.stack(rows).astype(np.float32))
    return _EMBED


def _pixel_coords(h: int, w: int) -> ad.Tensor:
    key = (h, w)
    if key not in _COORD_CACHE:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
        ones = np.ones_like(xs)
        coords = np.stack([xs, ys, ones], axis=-1).reshape(1, h * w, 3)
        _COORD_CACHE[key] = ad.Tensor(coords)
    return _COORD_CACHE[key]


def exp_sl3_batch(p: ad.Tensor, order: int = lie.EXP_ORDER) -> ad.Tensor:
    """Differentiable float32 power-series exponential, (B, 8) -> (B, 3, 3)."""
    if p.data.ndim != 2 or p.data.shape[1] != 8:
        raise ShapeMismatch(f"expected (B, 8) parameters, got {p.data.shape}")
    bsz = p.data.shape[0]
    X = ad.reshape(p @ _embedding(), (bsz, 3, 3))
    eye = ad.Tensor(np.eye(3, dtype=np.float32)[None])
    acc = eye + X
    term = X
    for k in range(2, order + 1):
        term = (term @ X) * float(1.0 / k)
        acc = acc + term
    return acc


def warp_grid(
    p: ad.Tensor, frame: lie.FrameMap, order: int = lie.EXP_ORDER
) -> ad.Tensor:
    """Sampling grid of the warp ``p`` over the frame's pixel lattice.

    For every output pixel the grid holds the source location that maps
    onto it, i.e. the *inverse* warp exp(-p) conjugated into pixel
    coordinates.  Returns (B, H, W, 2).
    """
    h, w = frame.height, frame.width
    hinv = exp_sl3_batch(ad.neg(p), order)
    t_mat = ad.Tensor(frame.canonical_to_pixel.astype(np.float32)[None])
    t_inv = ad.Tensor(frame.pixel_to_canonical.astype(np.float32)[None])
    hpix = t_mat @ hinv @ t_inv
    src = _pixel_coords(h, w) @ ad.transpose(hpix, (0, 2, 1))
    xw = ad.narrow(src, 2, 0, 1)
    yw = ad.narrow(src, 2, 1, 1)
    den = ad.safe_reciprocal(ad.narrow(src, 2, 2, 1))
    grid = ad.concat([xw * den, yw * den], 2)
    return ad.reshape(grid, (p.data.shape[0], h, w, 2))


def composite_nchw(color: ad.Tensor, mask: ad.Tensor, bg: ad.Tensor) -> ad.Tensor:
    """fg color over bg through a soft mask: color*m + bg*(1-m).  NCHW."""
    one = ad.Tensor(np.float32(1.0))
    return color * mask + bg * (one - mask)


def warp_foreground_nchw(
    fg4: ad.Tensor, p: ad.Tensor, frame: lie.FrameMap, order: int = lie.EXP_ORDER
) -> ad.Tensor:
    """Warp a batch of RGBA foregrounds by per-sample parameters (B, 8)."""
    return bilinear_sample(fg4, warp_grid(p, frame, order))


# -- data-side (exact float64 geometry) ----------------------------------


def _grid_from_params(p: np.ndarray, frame: lie.FrameMap) -> np.ndarray:
    """(H, W, 2) source coordinates of the inverse warp, float64 homography."""
    h_inv = lie.to_image_frame(lie.exp_sl3(lie.invert(p)), frame)
    h, w = frame.height, frame.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    den = h_inv[2, 0] * xs + h_inv[2, 1] * ys + h_inv[2, 2]
    bad = np.abs(den) < 1e-12
    den = np.where(bad, 1.0, den)
    gx = (h_inv[0, 0] * xs + h_inv[0, 1] * ys + h_inv[0, 2]) / den
    gy = (h_inv[1, 0] * xs + h_inv[1, 1] * ys + h_inv[1, 2]) / den
    gx = np.where(bad, 1e9, gx)
    gy = np.where(bad, 1e9, gy)
    return np.stack([gx, gy], axis=-1).astype(np.float32)


def warp_foreground(
    fg: ForegroundLayer, p: np.ndarray, frame: Optional[lie.FrameMap] = None
) -> ForegroundLayer:
    """Warp a foreground layer by parameter vector ``p`` (data side).

    Color and mask are resampled with one shared grid, so they stay
    aligned by construction.  Pixels whose preimage leaves the raster
    (or crosses the horizon) come back fully transparent.
    """
    frame = frame or fg.color.frame()
    if (frame.height, frame.width) != (fg.height, fg.width):
        raise ShapeMismatch("frame extent does not match foreground extent")
    grid = _grid_from_params(np.asarray(p, dtype=np.float64), frame)
    with ad.no_grad():
        out = bilinear_sample(
            ad.Tensor(to_nchw(fg)), ad.Tensor(grid[None])
        )
    arr = out.data[0].transpose(1, 2, 0)
    return ForegroundLayer.from_rgba(np.ascontiguousarray(arr))


def composite(fg: ForegroundLayer, bg: Raster) -> Raster:
    """Alpha-composite a foreground layer over a background raster."""
    if (fg.height, fg.width) != (bg.height, bg.width):
        raise ShapeMismatch("foreground and background extents differ")
    if bg.channels != 3:
        raise ShapeMismatch("background must be RGB")
    m = fg.mask.values
    out = fg.color.values * m + bg.values * (np.float32(1.0) - m)
    return Raster(out)


@dataclass
class WarpChainResult:
    """States and composites of an iterative correction chain.

    states[0] is the initial placement; states[i] adds the first i
    corrections.  Every composite re-warps the *original* foreground at
    the accumulated parameters, so composites[-1] is bit-identical to
    compositing once at the summed vector.
    """

    states: list
    layers: list
    composites: list


def apply_warp_chain(
    fg: ForegroundLayer,
    bg: Raster,
    p0: np.ndarray,
    deltas: Sequence[np.ndarray],
    frame: Optional[lie.FrameMap] = None,
) -> WarpChainResult:
    frame = frame or bg.frame()
    p = np.asarray(p0, dtype=np.float64).copy()
    states = [p.copy()]
    for d in deltas:
        p = lie.compose(p, np.asarray(d, dtype=np.float64))
        states.append(p.copy())
    layers = [warp_foreground(fg, s, frame) for s in states]
    composites = [composite(layer, bg) for layer in layers]
    return WarpChainResult(states=states, layers=layers, composites=composites)


def bilinear_resize(raster: Raster, out_hw) -> Raster:
    """Resample a raster to a new extent (replicate-edge semantics).

    Output pixel centers are placed by the shared edge-pinned frame
    convention, so resizing by an integer factor lines up exactly with
    the FrameMap scaling of warp coordinates.
    """
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"bad target extent {out_hw}")
    sy = raster.height / oh
    sx = raster.width / ow
    ys = (np.arange(oh, dtype=np.float32) + 0.5) * sy - 0.5
    xs = (np.arange(ow, dtype=np.float32) + 0.5) * sx - 0.5
    ys = np.clip(ys, 0.0, raster.height - 1.0)
    xs = np.clip(xs, 0.0, raster.width - 1.0)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    grid = np.stack([gx, gy], axis=-1)
    return bilinear_sample(raster, grid)
