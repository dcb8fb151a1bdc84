"""Warp-predictor (generator) and critic (discriminator) networks.

Both are plain stride-2 conv stacks with 4x4 kernels and no
normalization layers.  The generator sees 7 channels (warped foreground
RGBA plus background RGB) and emits an 8-vector warp correction; at
every interior conv layer the original 7-channel input is re-injected,
average-pooled to that layer's input resolution.  The critic is a
PatchGAN: a 1-channel score map, reduced to a per-sample scalar by
mean, with LeakyReLU(0.2) between layers.

A width multiplier scales every channel count so the same topology runs
at desk scale; paper scale is multiplier 1.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from . import lie
from . import warp as wp
from .errors import BadResolution, ShapeMismatch, StageOrderViolation

GEN_BASE_WIDTHS = (32, 64, 128, 256, 512)
FC_BASE_WIDTH = 256
KERNEL = 4
STRIDE = 2
WEIGHT_STD = 0.01
LEAKY_SLOPE = 0.2


def _ceil_half(n: int) -> int:
    return -(-n // STRIDE)


def layer_resolutions(resolution, depth: int):
    """Input resolution of every conv layer, starting from the raster size."""
    h, w = resolution
    out = [(h, w)]
    for _ in range(depth - 1):
        h, w = _ceil_half(h), _ceil_half(w)
        out.append((h, w))
    return out


def check_resolution(resolution, depth: int):
    """A build-time gate: every layer's input extent must divide the base.

    The pooled-input concatenation is an exact block mean, so each
    interior layer's resolution has to tile the input raster exactly.
    This admits the paper's 120x160 at depth 5 (block factors up to
    15x16) and rejects extents whose ceil-halving sequence drifts off
    the divisor lattice.
    """
    h, w = resolution
    if h < 2**depth or w < 2**depth:
        raise BadResolution(f"{h}x{w} too small for {depth} stride-2 layers")
    for hi, wi in layer_resolutions(resolution, depth):
        if h % hi or w % wi:
            raise BadResolution(
                f"{h}x{w}: layer input {hi}x{wi} does not tile the raster; "
                f"pooled concatenation undefined"
            )


def _scaled(base: float, mult: float) -> int:
    return max(1, int(round(base * mult)))


class GeneratorNet:
    """Conv stack -> two fully connected layers -> 8 warp parameters."""

    def __init__(self, name: str, resolution, width_mult: float, depth: int, rng):
        check_resolution(resolution, depth)
        if depth > len(GEN_BASE_WIDTHS):
            raise BadResolution(f"depth {depth} exceeds supported {len(GEN_BASE_WIDTHS)}")
        self.name = name
        self.resolution = tuple(int(x) for x in resolution)
        self.depth = depth
        self.width_mult = float(width_mult)
        self.widths = [_scaled(GEN_BASE_WIDTHS[i], width_mult) for i in range(depth)]
        self.fc_width = _scaled(FC_BASE_WIDTH, width_mult)
        self._res_seq = layer_resolutions(resolution, depth)

        self.conv_w = []
        self.conv_b = []
        in_ch = 7
        for i, f in enumerate(self.widths):
            w = rng.normal(0.0, WEIGHT_STD, (f, in_ch, KERNEL, KERNEL))
            self.conv_w.append(ad.Parameter(w.astype(np.float32), f"{name}.conv{i}.w"))
            self.conv_b.append(
                ad.Parameter(np.zeros(f, dtype=np.float32), f"{name}.conv{i}.b")
            )
            in_ch = f + 7  # next layer sees features plus the pooled input

        hf, wf = _ceil_half(self._res_seq[-1][0]), _ceil_half(self._res_seq[-1][1])
        flat = self.widths[-1] * hf * wf
        self.fc1_w = ad.Parameter(
            rng.normal(0.0, WEIGHT_STD, (flat, self.fc_width)).astype(np.float32),
            f"{name}.fc1.w",
        )
        self.fc1_b = ad.Parameter(
            np.zeros(self.fc_width, dtype=np.float32), f"{name}.fc1.b"
        )
        self.fc2_w = ad.Parameter(
            rng.normal(0.0, WEIGHT_STD, (self.fc_width, 8)).astype(np.float32),
            f"{name}.fc2.w",
        )
        self.fc2_b = ad.Parameter(np.zeros(8, dtype=np.float32), f"{name}.fc2.b")

    def zero_head(self):
        """Zero the final linear layer so the net predicts exactly 0 updates."""
        self.fc2_w.data[:] = 0.0
        self.fc2_b.data[:] = 0.0

    def params(self):
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend([w, b])
        out.extend([self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b])
        return out

    def forward(self, fg4: ad.Tensor, bg3: ad.Tensor) -> ad.Tensor:
        if fg4.data.shape[1] != 4 or bg3.data.shape[1] != 3:
            raise ShapeMismatch(
                f"expected 4+3 channels, got {fg4.data.shape[1]}+{bg3.data.shape[1]}"
            )
        if fg4.data.shape[2:] != self.resolution or bg3.data.shape[2:] != self.resolution:
            raise ShapeMismatch(
                f"expected {self.resolution} rasters, got {fg4.data.shape[2:]}"
            )
        inp = ad.concat([fg4, bg3], 1)
        h = inp
        base_h, base_w = self.resolution
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            if i > 0:
                hi, wi = self._res_seq[i]
                pooled = ad.block_mean(inp, base_h // hi, base_w // wi)
                h = ad.concat([h, pooled], 1)
            h = ad.conv2d(h, w, STRIDE) + b.reshape((1, b.size, 1, 1))
            h = ad.relu(h)
        bsz = h.data.shape[0]
        h = h.reshape((bsz, int(np.prod(h.data.shape[1:]))))
        h = ad.relu(h @ self.fc1_w + self.fc1_b)
        return h @ self.fc2_w + self.fc2_b

    def load_from(self, other: "GeneratorNet"):
        """Copy parameter values from an architecturally identical net."""
        mine, theirs = self.params(), other.params()
        for a, b in zip(mine, theirs):
            if a.data.shape != b.data.shape:
                raise ShapeMismatch(
                    f"warm start shape clash at {a.name}: {a.data.shape} vs {b.data.shape}"
                )
            a.data[:] = b.data


class DiscriminatorNet:
    """PatchGAN critic: conv stack to a 1-channel map, mean-reduced per sample."""

    def __init__(self, name: str, resolution, width_mult: float, depth: int, rng):
        check_resolution(resolution, depth)
        self.name = name
        self.resolution = tuple(int(x) for x in resolution)
        self.depth = depth
        self.width_mult = float(width_mult)
        self.widths = [_scaled(GEN_BASE_WIDTHS[i], width_mult) for i in range(depth)]

        self.conv_w = []
        self.conv_b = []
        in_ch = 3
        for i, f in enumerate(self.widths + [1]):
            w = rng.normal(0.0, WEIGHT_STD, (f, in_ch, KERNEL, KERNEL))
            self.conv_w.append(ad.Parameter(w.astype(np.float32), f"{name}.conv{i}.w"))
            self.conv_b.append(
                ad.Parameter(np.zeros(f, dtype=np.float32), f"{name}.conv{i}.b")
            )
            in_ch = f

    def params(self):
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend([w, b])
        return out

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ShapeMismatch(f"critic expects (B, 3, H, W), got {x.data.shape}")
        if x.data.shape[2:] != self.resolution:
            raise ShapeMismatch(
                f"critic built for {self.resolution}, got {x.data.shape[2:]}"
            )
        h = x
        last = len(self.conv_w) - 1
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            h = ad.conv2d(h, w, STRIDE) + b.reshape((1, b.size, 1, 1))
            if i < last:
                h = ad.leaky_relu(h, LEAKY_SLOPE)
        return h.mean(axes=(1, 2, 3))


class GeneratorStack:
    """Ordered warp-correction generators sharing one critic.

    ``stages_trained`` gates the sequential schedule; inference may run
    any prefix of the trained stages.
    """

    def __init__(self, generators, disc, frame: lie.FrameMap, taylor_order: int):
        self.generators = list(generators)
        self.disc = disc
        self.frame = frame
        self.taylor_order = int(taylor_order)
        self.stages_trained = 0

    @property
    def n_stages(self) -> int:
        return len(self.generators)

    def chain(self, fg4: ad.Tensor, bg3: ad.Tensor, p0: ad.Tensor, n_stages: int,
              active_stage: Optional[int] = None, train_all: bool = False):
        """Run the correction chain for ``n_stages`` stages.

        Returns (states, deltas): states[i] is the tensor warp state
        after i corrections (states[0] = p0).  With ``active_stage=i``
        only stage i builds a graph (earlier stages run detached); with
        ``train_all`` every stage is differentiable.
        """
        states = [p0]
        deltas = []
        p = p0
        for i in range(1, n_stages + 1):
            gen = self.generators[i - 1]
            track = train_all or (active_stage == i)
            ctx = ad.enable_grad() if track else ad.no_grad()
            with ctx:
                warped = wp.warp_foreground_nchw(fg4, p, self.frame, self.taylor_order)
                delta = gen.forward(warped, bg3)
                p = p + delta
            states.append(p)
            deltas.append(delta)
        return states, deltas

    def composite_at(self, fg4: ad.Tensor, bg3: ad.Tensor, p: ad.Tensor) -> ad.Tensor:
        warped = wp.warp_foreground_nchw(fg4, p, self.frame, self.taylor_order)
        color = ad.narrow(warped, 1, 0, 3)
        mask = ad.narrow(warped, 1, 3, 1)
        return wp.composite_nchw(color, mask, bg3)

    def predict_deltas(self, fg4: np.ndarray, bg3: np.ndarray, p0: np.ndarray,
                       n_stages: Optional[int] = None) -> np.ndarray:
        """Data-side inference: (B, 4, H, W), (B, 3, H, W), (B, 8) -> (B, n, 8)."""
        n = self.n_stages if n_stages is None else int(n_stages)
        if not 0 <= n <= self.n_stages:
            raise StageOrderViolation(
                f"requested {n} stages; stack has {self.n_stages}"
            )
        with ad.no_grad():
            _, deltas = self.chain(
                ad.Tensor(fg4), ad.Tensor(bg3), ad.Tensor(p0), n
            )
        if not deltas:
            return np.zeros((p0.shape[0], 0, 8), dtype=np.float64)
        return np.stack([d.data.astype(np.float64) for d in deltas], axis=1)

    def all_params(self):
        out = []
        for g in self.generators:
            out.extend(g.params())
        out.extend(self.disc.params())
        return out

    def named_arrays(self) -> dict:
        return {p.name: p.data for p in self.all_params()}

    def load_arrays(self, arrays: dict):
        for p in self.all_params():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing array {p.name}")
            src = arrays[p.name]
            if src.shape != p.data.shape:
                raise ShapeMismatch(
                    f"{p.name}: checkpoint shape {src.shape} vs model {p.data.shape}"
                )
            p.data[:] = src


def build_stack(resolution, width_mult: float, depth: int, n_stages: int,
                rng=None, taylor_order: int = lie.EXP_ORDER) -> GeneratorStack:
    """Deterministically build N generators plus the shared critic."""
    gens = [
        GeneratorNet(f"g{i + 1}", resolution, width_mult, depth, rng)
        for i in range(n_stages)
    ]
    disc = DiscriminatorNet("d", resolution, width_mult, depth, rng)
    frame = lie.FrameMap(width=int(resolution[1]), height=int(resolution[0]))
    return GeneratorStack(gens, disc, frame, taylor_order)
