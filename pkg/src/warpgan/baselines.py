"""Supervised baselines: a cascaded ridge regressor on raw grayscale
features and a direct warp regressor trained with known perturbations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import lie, networks, training
from . import warp as wp
from .config import TrainConfig
from .errors import ConfigError, ShapeMismatch, SingularSystem, StageOrderViolation

LAMBDA_GRID = (1e-2, 1e-1, 1.0, 10.0, 100.0)
_CHUNK = 1024  # normal-equation accumulation block


def sdm_features(fg_warped: wp.ForegroundLayer, bg: wp.Raster) -> np.ndarray:
    """[vec(gray(fg color) * mask) ; vec(gray(bg))], length 2*H*W."""
    if (fg_warped.height, fg_warped.width) != (bg.height, bg.width):
        raise ShapeMismatch("foreground and background extents differ")
    if bg.channels != 3:
        raise ShapeMismatch("background must be RGB")
    gray_fg = fg_warped.color.values.mean(axis=2) * fg_warped.mask.values[..., 0]
    gray_bg = bg.values.mean(axis=2)
    return np.concatenate(
        [gray_fg.ravel(), gray_bg.ravel()]
    ).astype(np.float64)


def sdm_train_stage(features, targets, lambda_ridge: float):
    """Ridge regression in closed form; the bias is unregularized.

    Centering folds the bias out exactly: W solves the regularized
    normal equations on centered data and b absorbs the means.
    """
    F = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if F.ndim != 2 or Y.ndim != 2 or F.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"features {F.shape} vs targets {Y.shape}")
    m, nf = F.shape
    fbar = F.mean(axis=0)
    ybar = Y.mean(axis=0)
    A = np.zeros((nf, nf))
    B = np.zeros((nf, Y.shape[1]))
    for lo in range(0, m, _CHUNK):
        Fc = F[lo : lo + _CHUNK] - fbar
        Yc = Y[lo : lo + _CHUNK] - ybar
        A += Fc.T @ Fc
        B += Fc.T @ Yc
    A[np.diag_indices(nf)] += lambda_ridge
    try:
        Wt = np.linalg.solve(A, B)
    except np.linalg.LinAlgError as e:
        raise SingularSystem(
            f"unregularized features are rank-deficient: {e}"
        ) from e
    W = Wt.T
    b = ybar - W @ fbar
    return W, b


@dataclass
class SdmCascade:
    """Per-stage affine predictors over grayscale features."""

    stages: list  # [(W (8, 2HW), b (8,)), ...]
    lambdas: list
    resolution: tuple
    val_errors: list = field(default_factory=list)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def predict_deltas(self, fg, bg, p0, n_stages: Optional[int] = None):
        n = self.n_stages if n_stages is None else int(n_stages)
        if not 0 <= n <= self.n_stages:
            raise StageOrderViolation(f"requested {n} stages; have {self.n_stages}")
        fg = np.asarray(fg, dtype=np.float32)
        bg = np.asarray(bg, dtype=np.float32)
        if fg.shape[2:] != tuple(self.resolution):
            raise ShapeMismatch(
                f"cascade expects {self.resolution}, got {fg.shape[2:]}"
            )
        h, w = self.resolution
        frame = lie.FrameMap(width=w, height=h)
        m = fg.shape[0]
        layers = [
            wp.ForegroundLayer.from_rgba(
                np.ascontiguousarray(fg[i].transpose(1, 2, 0))
            )
            for i in range(m)
        ]
        gray_bg = bg.mean(axis=1).reshape(m, -1).astype(np.float64)
        states = np.asarray(p0, dtype=np.float64).copy()
        out = np.zeros((m, n, 8))
        for k in range(n):
            W, b = self.stages[k]
            feats = np.empty((m, 2 * h * w))
            for i in range(m):
                warped = wp.warp_foreground(layers[i], states[i], frame)
                gf = warped.color.values.mean(axis=2) * warped.mask.values[..., 0]
                feats[i, : h * w] = gf.ravel()
                feats[i, h * w :] = gray_bg[i]
            delta = feats @ W.T + b
            out[:, k] = delta
            states += delta
        return out

    def save(self, path):
        arrays = {}
        for k, (W, b) in enumerate(self.stages):
            arrays[f"sdm.stage{k}.W"] = W
            arrays[f"sdm.stage{k}.b"] = b
        fields = {
            "kind": "sdm",
            "resolution": list(self.resolution),
            "lambdas": list(self.lambdas),
            "val_errors": list(self.val_errors),
        }
        ckpt.save_checkpoint(path, fields, arrays)

    @classmethod
    def load(cls, path) -> "SdmCascade":
        fields, arrays = ckpt.load_checkpoint(path)
        if fields.get("kind") != "sdm":
            raise ConfigError(f"{path}: not a cascade checkpoint")
        stages = []
        for k in range(len(fields["lambdas"])):
            stages.append(
                (
                    arrays[f"sdm.stage{k}.W"].astype(np.float64),
                    arrays[f"sdm.stage{k}.b"].astype(np.float64),
                )
            )
        return cls(
            stages=stages,
            lambdas=fields["lambdas"],
            resolution=tuple(fields["resolution"]),
            val_errors=fields.get("val_errors", []),
        )


def sdm_train(ds, n_stages: int = 4, per_sample: int = 10, sigma: float = 0.1,
              lambda_grid=LAMBDA_GRID, seed: int = 0, val_fraction: float = 0.1,
              progress=None) -> SdmCascade:
    """Greedy stagewise cascade training.

    Each stage regresses the remaining correction (toward the known
    ground truth) from grayscale features at the current warp state;
    the ridge weight is picked per stage on a held-out split, then the
    stage is refit on everything.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    h, w = ds.resolution
    frame = lie.FrameMap(width=w, height=h)
    n = len(ds)
    m = n * per_sample
    rng = np.random.default_rng(seed)
    sample_idx = np.repeat(np.arange(n), per_sample)
    p0 = rng.normal(0.0, sigma, (m, 8))
    perm = rng.permutation(m)
    n_val = min(max(1, int(round(val_fraction * m))), m - 1) if m > 1 else 0
    val_idx, fit_idx = perm[:n_val], perm[n_val:]

    layers = [
        wp.ForegroundLayer.from_rgba(
            np.ascontiguousarray(ds.fg[i].transpose(1, 2, 0))
        )
        for i in range(n)
    ]
    gray_bg = ds.bg.mean(axis=1).reshape(n, -1).astype(np.float64)

    states = p0.copy()
    cascade = SdmCascade(stages=[], lambdas=[], resolution=(h, w))
    for k in range(n_stages):
        feats = np.empty((m, 2 * h * w))
        for j in range(m):
            warped = wp.warp_foreground(layers[sample_idx[j]], states[j], frame)
            gf = warped.color.values.mean(axis=2) * warped.mask.values[..., 0]
            feats[j, : h * w] = gf.ravel()
            feats[j, h * w :] = gray_bg[sample_idx[j]]
        targets = -states
        best = None
        for lam in lambda_grid:
            W, b = sdm_train_stage(feats[fit_idx], targets[fit_idx], lam)
            probe = val_idx if n_val else fit_idx
            pred = feats[probe] @ W.T + b
            err = float(np.mean(np.sum((targets[probe] - pred) ** 2, axis=1)))
            if best is None or err < best[0]:
                best = (err, lam)
        err, lam = best
        W, b = sdm_train_stage(feats, targets, lam)
        cascade.stages.append((W, b))
        cascade.lambdas.append(lam)
        cascade.val_errors.append(err)
        states = states + (feats @ W.T + b)
        if progress is not None:
            progress({"stage": k + 1, "lambda": lam, "val_error": err})
    return cascade


class DirectRegressor:
    """Single-shot warp regressor with the generator architecture."""

    n_stages = 1

    def __init__(self, net: networks.GeneratorNet, frame: lie.FrameMap,
                 taylor_order: int = lie.EXP_ORDER):
        self.net = net
        self.frame = frame
        self.taylor_order = taylor_order

    def predict_deltas(self, fg, bg, p0, n_stages: Optional[int] = None):
        n = 1 if n_stages is None else int(n_stages)
        if n not in (0, 1):
            raise StageOrderViolation(f"direct regressor predicts 1 stage, not {n}")
        p0 = np.asarray(p0, dtype=np.float64)
        if n == 0:
            return np.zeros((p0.shape[0], 0, 8))
        with ad.no_grad():
            warped = wp.warp_foreground_nchw(
                ad.Tensor(np.asarray(fg, dtype=np.float32)),
                ad.Tensor(p0.astype(np.float32)),
                self.frame,
                self.taylor_order,
            )
            delta = self.net.forward(
                warped, ad.Tensor(np.asarray(bg, dtype=np.float32))
            )
        return delta.data.astype(np.float64)[:, None, :]

    def save(self, path):
        fields = {
            "kind": "homnet",
            "resolution": list(self.net.resolution),
            "width_mult": self.net.width_mult,
            "depth": self.net.depth,
            "taylor_order": self.taylor_order,
        }
        ckpt.save_checkpoint(path, fields, {p.name: p.data for p in self.net.params()})

    @classmethod
    def load(cls, path) -> "DirectRegressor":
        fields, arrays = ckpt.load_checkpoint(path)
        if fields.get("kind") != "homnet":
            raise ConfigError(f"{path}: not a regressor checkpoint")
        h, w = fields["resolution"]
        net = networks.GeneratorNet(
            "hn", (h, w), fields["width_mult"], fields["depth"],
            np.random.default_rng(0),
        )
        for p in net.params():
            src = arrays[p.name]
            if src.shape != p.data.shape:
                raise ShapeMismatch(f"{p.name}: {src.shape} vs {p.data.shape}")
            p.data[...] = src
        return cls(net, lie.FrameMap(width=w, height=h), fields["taylor_order"])


# weight of the unaligned (translation-including) term in the align
# target's corner loss: enough to keep predictions anchored without
# diverting much capacity from the alignment objective
_ALIGN_ABS_WEIGHT = 0.1


def _corner_loss(states, src_h, gt, frame: lie.FrameMap, order: int):
    """Squared corner distance to annotations after centroid alignment,
    plus a small absolute anchor.  states (B, 8) ad.Tensor; src_h
    (B, K, 3) homogeneous pixel corners; gt (B, K, 2)."""
    T = ad.Tensor(frame.canonical_to_pixel.astype(np.float32)[None])
    Tinv = ad.Tensor(frame.pixel_to_canonical.astype(np.float32)[None])
    Hpix = T @ wp.exp_sl3_batch(states, order) @ Tinv
    warped = ad.Tensor(src_h) @ ad.transpose(Hpix, (0, 2, 1))
    den = ad.safe_reciprocal(ad.narrow(warped, 2, 2, 1))
    xy = ad.narrow(warped, 2, 0, 2) * den
    d = xy - ad.Tensor(gt)
    aligned = d - ad.reduce_mean(d, axes=(1,), keepdims=True)
    per = ad.reduce_mean(ad.reduce_sum(ad.square(aligned), axes=(2,)), axes=(1,))
    per_abs = ad.reduce_mean(ad.reduce_sum(ad.square(d), axes=(2,)), axes=(1,))
    return (per + per_abs * _ALIGN_ABS_WEIGHT).mean()


def photometric_jitter(fg, bg, rng):
    """Per-sample gain/bias plus pixel noise on both layers.

    Geometric labels survive this untouched, so it is a free
    regularizer for warp supervision.  The alpha channel is left alone.
    """
    n = fg.shape[0]
    a_f = rng.uniform(0.85, 1.15, (n, 1, 1, 1)).astype(np.float32)
    a_b = rng.uniform(0.85, 1.15, (n, 1, 1, 1)).astype(np.float32)
    b_f = rng.uniform(-0.03, 0.03, (n, 1, 1, 1)).astype(np.float32)
    b_b = rng.uniform(-0.03, 0.03, (n, 1, 1, 1)).astype(np.float32)
    fg = fg.copy()
    fg[:, :3] = fg[:, :3] * a_f + b_f
    fg[:, :3] += rng.normal(0, 0.01, fg[:, :3].shape).astype(np.float32)
    bg = bg * a_b + b_b
    bg += rng.normal(0, 0.01, bg.shape).astype(np.float32)
    return np.clip(fg, 0, 1), np.clip(bg, 0, 1)


def homnet_train(ds, cfg: TrainConfig, iters: Optional[int] = None,
                 progress=None, target: str = "undo",
                 lr_drop: Optional[tuple] = None, photometric: bool = False):
    """Train the direct regressor on perturbed composites generated on
    the fly.

    With target "undo" the supervision is parameter MSE against the
    exact inverse of the applied warp.  With "align" it is geometric:
    squared distance of the warped outline corners to the sample's
    annotated corners after centroid alignment (plus a small absolute
    anchor), which also cancels whatever offset the sample carries
    before any synthetic perturbation.  In that mode half the
    perturbations are drawn around the corner-fitted pose so
    predictions stay sharp when the regressor is iterated near
    convergence.

    ``lr_drop=(iteration, lr)`` switches the Adam step size from that
    iteration on; ``photometric=True`` jitters gain, bias, and pixel
    noise each batch.  Defaults leave the classic recipe untouched.

    Returns (regressor, per-iteration losses)."""
    cfg.validate()
    if target not in ("undo", "align"):
        raise ConfigError(f"target: expected 'undo' or 'align', got {target!r}")
    if lr_drop is not None and (len(lr_drop) != 2 or lr_drop[1] <= 0):
        raise ConfigError(f"lr_drop: expected (iteration, lr), got {lr_drop!r}")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    net = networks.GeneratorNet(
        "hn", cfg.resolution, cfg.width_mult, cfg.depth, rng
    )
    h, w = cfg.resolution
    frame = lie.FrameMap(width=w, height=h)
    fitted = src_h = gt_c = None
    if target == "align":
        fitted = np.stack([
            lie.fit_params(ds.fg_corners[i], ds.gt_corners[i], frame)
            for i in range(len(ds))
        ])
        ones = np.ones(ds.fg_corners.shape[:2] + (1,), dtype=np.float32)
        src_h = np.concatenate(
            [ds.fg_corners.astype(np.float32), ones], axis=2
        )
        gt_c = ds.gt_corners.astype(np.float32)
    opt = ad.AdamState()
    total = cfg.iters_per_stage if iters is None else iters
    losses = []
    for it in range(total):
        idx = rng.integers(0, len(ds), cfg.batch_size)
        p0 = training.sample_initial_warp(cfg.perturbation, rng, cfg.batch_size)
        if fitted is not None:
            centered = rng.random(cfg.batch_size) < 0.5
            p0 = p0 + np.where(centered[:, None], fitted[idx], 0.0)
        warped = wp.warp_foreground_nchw(
            ad.Tensor(ds.fg[idx]),
            ad.Tensor(p0.astype(np.float32)),
            frame,
            cfg.taylor_order,
        )
        delta = net.forward(warped, ad.Tensor(ds.bg[idx]))
        if fitted is None:
            loss = ad.reduce_sum(
                ad.square(delta - ad.Tensor((-p0).astype(np.float32))), axes=(1,)
            ).mean()
        else:
            states = delta + ad.Tensor(p0.astype(np.float32))
            loss = _corner_loss(
                states, src_h[idx], gt_c[idx], frame, cfg.taylor_order
            )
        ad.zero_grads(net.params())
        ad.backward(loss)
        ad.adam_step(net.params(), opt, cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2)
        losses.append(float(loss.item()))
        if progress is not None:
            progress({"iter": it + 1, "loss": losses[-1]})
    return DirectRegressor(net, frame, cfg.taylor_order), losses


def load_model(path):
    """Open any model checkpoint: adversarial stack, regressor, or cascade."""
    fields, _ = ckpt.load_checkpoint(path)
    if "config" in fields:
        return training.Trainer.load(path).stack
    kind = fields.get("kind")
    if kind == "homnet":
        return DirectRegressor.load(path)
    if kind == "sdm":
        return SdmCascade.load(path)
    raise ConfigError(f"{path}: unrecognized model checkpoint")
