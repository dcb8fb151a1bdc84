"""Adversarial training of the correction stack.

The critic is trained with the gradient-penalty Wasserstein objective;
each generator stage is then trained against it while earlier stages
stay frozen, and an optional joint pass finetunes all stages together.
Every random draw comes from one generator consumed in a fixed order,
so a fixed seed reproduces the loss curves bit-exactly and a checkpoint
taken mid-stage resumes onto the same trajectory.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import lie, metrics, networks
from .config import PerturbationModel, TrainConfig
from .errors import ConfigError, ShapeMismatch, StageOrderViolation

PROBE_STREAM = 424242  # sub-seed for the fixed evaluation probe batch


def sample_initial_warp(pm: PerturbationModel, rng, n: int = 1) -> np.ndarray:
    """Draw (n, 8) initial placements: elementwise Gaussian, optionally
    composed with a random rescale and a translation jitter."""
    p = rng.normal(0.0, pm.sigma, (n, 8))
    if pm.sigma_scale_range is not None:
        lo, hi = pm.sigma_scale_range
        p *= rng.uniform(lo, hi, (n, 1))
    if pm.rescale_range is not None:
        lo, hi = pm.rescale_range
        scales = rng.uniform(lo, hi, n)
        for i in range(n):
            p[i] = lie.compose(p[i], lie.similarity_params(scales[i]))
    if pm.translation_sigma > 0:
        # sigma is a fraction of the image dimensions; the canonical
        # frame spans 2 units across the full raster
        t = rng.normal(0.0, 2.0 * pm.translation_sigma, (n, 2))
        for i in range(n):
            p[i] = lie.compose(p[i], lie.similarity_params(1.0, t[i, 0], t[i, 1]))
    return p


def d_loss(disc, real: ad.Tensor, fake: ad.Tensor, rng, lambda_grad: float):
    """Critic loss: mean fake score - mean real score + gradient penalty.

    The penalty is evaluated at per-sample random interpolates between
    real and fake, differentiating through the critic's input gradient
    (the conv adjoints are themselves primitives, so this is exact).
    Returns (loss, penalty) as scalar tensors.
    """
    if real.data.shape != fake.data.shape:
        raise ShapeMismatch(
            f"real {real.data.shape} vs fake {fake.data.shape}"
        )
    loss = disc.forward(fake).mean() - disc.forward(real).mean()
    if lambda_grad == 0.0:
        return loss, ad.Tensor(np.float32(0.0))
    b = real.data.shape[0]
    eps = rng.uniform(0.0, 1.0, (b, 1, 1, 1)).astype(np.float32)
    x_hat = ad.Tensor(eps * real.data + (1.0 - eps) * fake.data, requires_grad=True)
    norms = ad.input_gradient_norm(disc.forward, x_hat)
    penalty = ad.square(norms - 1.0).mean()
    return loss + float(lambda_grad) * penalty, penalty


def g_loss(disc, composite: ad.Tensor, delta: ad.Tensor, lambda_update: float):
    """Generator loss: -mean critic score + trust-region penalty on the
    predicted update (mean squared L2 norm)."""
    penalty = ad.reduce_sum(ad.square(delta), axes=(1,)).mean()
    return ad.neg(disc.forward(composite).mean()) + float(lambda_update) * penalty


def warm_start_from_regressor(stack: networks.GeneratorStack, path):
    """Copy a pretrained direct regressor's weights into every stage."""
    _, arrays = ckpt.load_checkpoint(path)
    by_suffix = {}
    for name, arr in arrays.items():
        if name.startswith("opt."):
            continue
        by_suffix[name.split(".", 1)[1]] = arr
    for gen in stack.generators:
        for p in gen.params():
            suffix = p.name.split(".", 1)[1]
            if suffix not in by_suffix:
                raise KeyError(f"regressor checkpoint lacks {suffix!r}")
            src = by_suffix[suffix]
            if src.shape != p.data.shape:
                raise ShapeMismatch(
                    f"{p.name}: checkpoint {src.shape} vs model {p.data.shape}"
                )
            p.data[...] = src


class Trainer:
    """Owns the stack, optimizer states, rng, and phase bookkeeping.

    Phases run in order: critic pretraining (optional), stages 1..N,
    joint finetune (optional).  ``run`` drives all of them and handles
    logging and checkpoints; the per-phase methods are also callable
    directly.  Log rows use stage 0 for pretraining and N+1 for the
    finetune phase.
    """

    def __init__(self, cfg: TrainConfig, apply_warm_start: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.stack = networks.build_stack(
            cfg.resolution, cfg.width_mult, cfg.depth, cfg.n_stages,
            rng=self.rng, taylor_order=cfg.taylor_order,
        )
        if apply_warm_start and cfg.warm_start.startswith("regressor:"):
            warm_start_from_regressor(self.stack, cfg.warm_start.split(":", 1)[1])
        self.opt = {"d": ad.AdamState()}
        self.phase = "pretrain" if cfg.d_pretrain_iters > 0 else "stage"
        self.stage = 0 if self.phase == "pretrain" else 1
        self.iter_in_phase = 0
        self.global_iter = 0
        self.history: list = []
        self._probe = None
        self._log_file = None

    # -- phase driver -----------------------------------------------

    def run(self, ds, out_dir=None, eval_ds=None, max_iters: Optional[int] = None,
            progress=None):
        """Advance training until done (or until ``max_iters`` global
        iterations), checkpointing and logging under ``out_dir``."""
        self._eval_ds = ds if eval_ds is None else eval_ds
        cfg = self.cfg
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self._log_file = open(os.path.join(out_dir, "metrics.jsonl"), "a")
        try:
            while self.phase != "done":
                if max_iters is not None and self.global_iter >= max_iters:
                    break
                if self.phase == "pretrain":
                    finished = self._run_phase(
                        ds, cfg.d_pretrain_iters, self._pretrain_iter,
                        out_dir, max_iters, progress,
                    )
                    if finished:
                        self._enter_stage(1)
                elif self.phase == "stage":
                    finished = self._run_phase(
                        ds, cfg.iters_per_stage, self._stage_iter,
                        out_dir, max_iters, progress,
                    )
                    if finished:
                        self.stack.stages_trained = self.stage
                        if out_dir is not None:
                            self.save(os.path.join(out_dir, f"stage{self.stage}.ckpt"))
                        if self.stage < cfg.n_stages:
                            self._enter_stage(self.stage + 1)
                        elif cfg.finetune_iters > 0:
                            self.phase = "finetune"
                            self.stage = cfg.n_stages + 1
                            self.iter_in_phase = 0
                        else:
                            self.phase = "done"
                elif self.phase == "finetune":
                    finished = self._run_phase(
                        ds, cfg.finetune_iters, self._finetune_iter,
                        out_dir, max_iters, progress,
                    )
                    if finished:
                        self.phase = "done"
            if out_dir is not None:
                name = "final.ckpt" if self.phase == "done" else "latest.ckpt"
                self.save(os.path.join(out_dir, name))
        finally:
            if self._log_file is not None:
                self._log_file.close()
                self._log_file = None
        return self

    def _enter_stage(self, stage: int):
        self.phase = "stage"
        self.stage = stage
        self.iter_in_phase = 0

    def _run_phase(self, ds, total, step_fn, out_dir, max_iters, progress) -> bool:
        cfg = self.cfg
        while self.iter_in_phase < total:
            if max_iters is not None and self.global_iter >= max_iters:
                if out_dir is not None:
                    self.save(os.path.join(out_dir, "latest.ckpt"))
                return False
            rec = step_fn(ds)
            self.iter_in_phase += 1
            self.global_iter += 1
            row = {
                "iter": self.global_iter,
                "stage": self.stage,
                "d_loss": rec.get("d_loss"),
                "g_loss": rec.get("g_loss"),
                "gp": rec.get("gp"),
                "mean_update_norm": rec.get("mean_update_norm"),
                "corner_error_eval": None,
            }
            if cfg.eval_interval > 0 and self.iter_in_phase % cfg.eval_interval == 0:
                row["corner_error_eval"] = self._probe_eval()
            self._emit(row)
            if progress is not None:
                progress(row)
            if (
                out_dir is not None
                and cfg.checkpoint_interval > 0
                and self.iter_in_phase % cfg.checkpoint_interval == 0
            ):
                self.save(os.path.join(out_dir, "latest.ckpt"))
        return True

    def _emit(self, row: dict):
        self.history.append(row)
        if self._log_file is not None:
            self._log_file.write(json.dumps(row) + "\n")
            self._log_file.flush()

    # -- direct phase entry points -----------------------------------

    def pretrain_discriminator(self, ds, iters: Optional[int] = None):
        """Critic-only updates against initial-placement composites."""
        self._eval_ds = ds
        self.phase = "pretrain"
        self.stage = 0
        self.iter_in_phase = 0
        total = self.cfg.d_pretrain_iters if iters is None else iters
        self._run_phase(ds, total, self._pretrain_iter, None, None, None)
        self._enter_stage(self.stack.stages_trained + 1)
        return self

    def train_stage(self, ds, stage: int, iters: Optional[int] = None):
        if stage != self.stack.stages_trained + 1:
            raise StageOrderViolation(
                f"stage {stage} requested with {self.stack.stages_trained} trained"
            )
        self._eval_ds = ds
        self._enter_stage(stage)
        total = self.cfg.iters_per_stage if iters is None else iters
        self._run_phase(ds, total, self._stage_iter, None, None, None)
        self.stack.stages_trained = stage
        return self

    def finetune_end_to_end(self, ds, iters: Optional[int] = None):
        if self.stack.stages_trained != self.cfg.n_stages:
            raise StageOrderViolation(
                f"finetune needs all {self.cfg.n_stages} stages trained, "
                f"have {self.stack.stages_trained}"
            )
        self._eval_ds = ds
        self.phase = "finetune"
        self.stage = self.cfg.n_stages + 1
        self.iter_in_phase = 0
        total = self.cfg.finetune_iters if iters is None else iters
        self._run_phase(ds, total, self._finetune_iter, None, None, None)
        self.phase = "done"
        return self

    # -- single-iteration bodies --------------------------------------

    def _batch(self, ds):
        cfg = self.cfg
        idx = self.rng.integers(0, len(ds), cfg.batch_size)
        p0 = sample_initial_warp(cfg.perturbation, self.rng, cfg.batch_size)
        return (
            ad.Tensor(ds.fg[idx]),
            ad.Tensor(ds.bg[idx]),
            ad.Tensor(ds.real[idx]),
            ad.Tensor(p0.astype(np.float32)),
        )

    def _d_step(self, ds, fake_stages: int):
        cfg = self.cfg
        fg, bg, real, p0 = self._batch(ds)
        with ad.no_grad():
            if fake_stages == 0:
                state = p0
            else:
                states, _ = self.stack.chain(fg, bg, p0, fake_stages)
                state = states[-1]
            fake = self.stack.composite_at(fg, bg, state)
        loss, gp = d_loss(self.stack.disc, real, fake, self.rng, cfg.lambda_grad)
        ad.zero_grads(self.stack.all_params())
        ad.backward(loss)
        ad.adam_step(
            self.stack.disc.params(), self.opt["d"], cfg.lr_d,
            cfg.adam_beta1, cfg.adam_beta2,
        )
        return float(loss.item()), float(gp.item())

    def _pretrain_iter(self, ds) -> dict:
        dl, gp = self._d_step(ds, 0)
        return {"d_loss": dl, "gp": gp}

    def _stage_iter(self, ds) -> dict:
        cfg = self.cfg
        stage = self.stage
        for _ in range(cfg.n_critic):
            dl, gp = self._d_step(ds, stage)
        fg, bg, real, p0 = self._batch(ds)
        states, deltas = self.stack.chain(fg, bg, p0, stage, active_stage=stage)
        comp = self.stack.composite_at(fg, bg, states[stage])
        loss = g_loss(self.stack.disc, comp, deltas[stage - 1], cfg.lambda_update)
        ad.zero_grads(self.stack.all_params())
        ad.backward(loss)
        key = f"g{stage}"
        if key not in self.opt:
            self.opt[key] = ad.AdamState()
        ad.adam_step(
            self.stack.generators[stage - 1].params(), self.opt[key],
            cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2,
        )
        upd = float(
            np.mean(np.linalg.norm(deltas[stage - 1].data.astype(np.float64), axis=1))
        )
        return {
            "d_loss": dl, "gp": gp, "g_loss": float(loss.item()),
            "mean_update_norm": upd,
        }

    def _finetune_iter(self, ds) -> dict:
        cfg = self.cfg
        n = cfg.n_stages
        for _ in range(cfg.n_critic):
            dl, gp = self._d_step(ds, n)
        fg, bg, real, p0 = self._batch(ds)
        states, deltas = self.stack.chain(fg, bg, p0, n, train_all=True)
        loss = None
        for i in range(1, n + 1):
            comp = self.stack.composite_at(fg, bg, states[i])
            term = g_loss(self.stack.disc, comp, deltas[i - 1], cfg.lambda_update)
            loss = term if loss is None else loss + term
        ad.zero_grads(self.stack.all_params())
        ad.backward(loss)
        if "finetune" not in self.opt:
            self.opt["finetune"] = ad.AdamState()
        gen_params = [p for g in self.stack.generators for p in g.params()]
        ad.adam_step(
            gen_params, self.opt["finetune"], cfg.lr_g,
            cfg.adam_beta1, cfg.adam_beta2,
        )
        upd = float(
            np.mean(
                [
                    np.mean(np.linalg.norm(d.data.astype(np.float64), axis=1))
                    for d in deltas
                ]
            )
        )
        return {
            "d_loss": dl, "gp": gp, "g_loss": float(loss.item()),
            "mean_update_norm": upd,
        }

    # -- probe evaluation ---------------------------------------------

    def _probe_eval(self) -> float:
        """Median translation-aligned corner error on a fixed probe batch,
        run through the stages trained or in training so far."""
        cfg = self.cfg
        ds = self._eval_ds
        if self._probe is None:
            prng = np.random.default_rng([cfg.seed, PROBE_STREAM])
            idx = prng.integers(0, len(ds), min(cfg.eval_samples, len(ds)))
            p0 = sample_initial_warp(cfg.perturbation, prng, len(idx))
            self._probe = (idx, p0)
        idx, p0 = self._probe
        avail = min(self.stage, cfg.n_stages) if self.phase != "pretrain" else 0
        deltas = self.stack.predict_deltas(ds.fg[idx], ds.bg[idx], p0, avail)
        state = p0 + deltas.sum(axis=1)
        errs = [
            metrics.corner_error(
                state[j], ds.fg_corners[i], ds.gt_corners[i], self.stack.frame
            )[1]
            for j, i in enumerate(idx)
        ]
        return float(np.median(errs))

    # -- persistence ---------------------------------------------------

    def save(self, path):
        arrays = dict(self.stack.named_arrays())
        steps = {}
        for key, st in self.opt.items():
            steps[key] = st.step
            for pname, m in st.m.items():
                arrays[f"opt.{key}.m.{pname}"] = m
                arrays[f"opt.{key}.v.{pname}"] = st.v[pname]
        fields = {
            "config": self.cfg.to_json(),
            "config_hash": self.cfg.config_hash(),
            "phase": self.phase,
            "stage": self.stage,
            "iter_in_phase": self.iter_in_phase,
            "global_iter": self.global_iter,
            "stages_trained": self.stack.stages_trained,
            "adam_steps": steps,
            "rng": ckpt.rng_state_to_json(self.rng),
        }
        ckpt.save_checkpoint(path, fields, arrays)

    @classmethod
    def load(cls, path, expect_config: Optional[TrainConfig] = None) -> "Trainer":
        fields, arrays = ckpt.load_checkpoint(path)
        cfg = TrainConfig.from_dict(fields["config"])
        if (
            expect_config is not None
            and expect_config.config_hash() != fields["config_hash"]
        ):
            raise ConfigError(
                "checkpoint was produced under a different configuration"
            )
        tr = cls(cfg, apply_warm_start=False)
        tr.stack.load_arrays(
            {k: v for k, v in arrays.items() if not k.startswith("opt.")}
        )
        tr.stack.stages_trained = int(fields["stages_trained"])
        tr.opt = {}
        for key, step in fields["adam_steps"].items():
            st = ad.AdamState()
            st.step = int(step)
            pm = f"opt.{key}.m."
            for name, arr in arrays.items():
                if name.startswith(pm):
                    pname = name[len(pm):]
                    st.m[pname] = arr
                    st.v[pname] = arrays[f"opt.{key}.v.{pname}"]
            tr.opt[key] = st
        tr.rng = ckpt.rng_state_from_json(fields["rng"])
        tr.phase = fields["phase"]
        tr.stage = int(fields["stage"])
        tr.iter_in_phase = int(fields["iter_in_phase"])
        tr.global_iter = int(fields["global_iter"])
        return tr
