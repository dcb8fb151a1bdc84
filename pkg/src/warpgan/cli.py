"""Command-line workflow: dataset generation, training, evaluation,
single-pair inference, and the HTTP service.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import csv
import dataclasses
import json
import os
from pathlib import Path

import click
import numpy as np

from . import baselines, cubes, lie, metrics, service, training
from . import warp as wp
from .config import PRESETS, TrainConfig, load_config, preset
from .errors import ConfigError


def _parse_resolution(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise click.UsageError(f"resolution must look like 120x160, got {text!r}")


def _parse_p0(text: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise click.UsageError(f"p0 must be comma-separated numbers, got {text!r}")
    if len(vals) != 8:
        raise click.UsageError(f"p0 needs 8 entries, got {len(vals)}")
    return np.asarray(vals, dtype=np.float64)


@click.group()
def main():
    """Image compositing by iterative geometric correction."""


@main.command("gen-cubes")
@click.option("--n", type=click.IntRange(min=0), required=True,
              help="number of samples to render")
@click.option("--resolution", default="120x160", show_default=True,
              help="raster extent as HxW")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="output dataset directory")
def gen_cubes(n, resolution, seed, out):
    """Render a synthetic dataset of perturbed cube composites."""
    h, w = _parse_resolution(resolution)
    cfg = cubes.CubesConfig(resolution=(h, w))
    try:
        cubes.make_dataset(n, cfg, out, seed=seed)
    except (OSError, ValueError, RuntimeError) as e:
        raise click.ClickException(str(e))
    click.echo(f"wrote {n} samples to {out}")


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True, help="dataset directory")
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="output directory for checkpoints and the metrics log")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="TOML or JSON training configuration")
@click.option("--preset", "preset_name", type=click.Choice(sorted(PRESETS)),
              help="named configuration preset")
@click.option("--mode", type=click.Choice(["stgan", "homnet", "sdm"]),
              default="stgan", show_default=True)
@click.option("--target", type=click.Choice(["undo", "align"]), default="undo",
              show_default=True,
              help="homnet supervision: undo the synthetic perturbation, or "
                   "align rendered corners with their annotations")
@click.option("--iters", type=click.IntRange(min=0), default=None,
              help="override iterations per stage")
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--resume", is_flag=True,
              help="continue from <out>/latest.ckpt if present")
@click.option("--log-every", type=int, default=100, show_default=True)
def train(data, out, config_path, preset_name, mode, target, iters, seed,
          resume, log_every):
    """Train a correction model on a rendered dataset."""
    if config_path and preset_name:
        raise click.UsageError("pass --config or --preset, not both")
    try:
        if config_path:
            cfg = load_config(config_path)
        elif preset_name:
            cfg = preset(preset_name)
        else:
            cfg = TrainConfig()
        if iters is not None:
            cfg = dataclasses.replace(cfg, iters_per_stage=iters)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        cfg.validate()
    except ConfigError as e:
        raise click.UsageError(str(e))

    try:
        ds = cubes.load_dataset(data)
    except (OSError, ValueError, RuntimeError) as e:
        raise click.ClickException(f"failed to load {data}: {e}")
    out.mkdir(parents=True, exist_ok=True)

    def echo_row(row):
        if row["iter"] % log_every == 0:
            click.echo(json.dumps(row))

    try:
        if mode == "stgan":
            latest = out / "latest.ckpt"
            if resume and latest.exists():
                trainer = training.Trainer.load(latest, expect_config=cfg)
                click.echo(f"resuming from {latest} at iteration "
                           f"{trainer.global_iter}")
            else:
                trainer = training.Trainer(cfg)
            trainer.run(ds, out_dir=out, progress=echo_row)
            click.echo(f"done; final checkpoint in {out}")
        elif mode == "homnet":
            reg, losses = baselines.homnet_train(
                ds, cfg, target=target,
                progress=lambda r: (
                    click.echo(json.dumps(r)) if r["iter"] % log_every == 0
                    else None
                ),
            )
            reg.save(out / "homnet.ckpt")
            with open(out / "homnet_losses.json", "w") as f:
                json.dump(losses, f)
            click.echo(f"wrote {out / 'homnet.ckpt'}")
        else:
            cascade = baselines.sdm_train(
                ds, n_stages=cfg.n_stages, sigma=cfg.perturbation.sigma,
                seed=cfg.seed,
                progress=lambda r: click.echo(json.dumps(r)),
            )
            cascade.save(out / "sdm.ckpt")
            click.echo(f"wrote {out / 'sdm.ckpt'}")
    except (OSError, ValueError, RuntimeError) as e:
        raise click.ClickException(str(e))


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="report JSON path; per-sample CSV lands alongside")
@click.option("--stages", type=click.IntRange(min=0), default=None,
              help="stages to run (default: all the model has)")
@click.option("--sigma", type=float, default=0.1, show_default=True,
              help="initial-perturbation spread")
@click.option("--seed", type=int, default=0, show_default=True)
def eval_cmd(ckpt, data, out, stages, sigma, seed):
    """Evaluate a checkpoint over a dataset and write a report."""
    try:
        model = baselines.load_model(ckpt)
        info = service.describe_model(ckpt)
        ds = cubes.load_dataset(data)
        rows = []
        report = metrics.evaluate(
            model, ds, n_stages=stages, sigma=sigma, seed=seed,
            config_hash=info.get("config_hash", ""), rows_out=rows,
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        report.save(out)
        csv_path = out.with_suffix(".csv")
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    except (OSError, ValueError, RuntimeError) as e:
        raise click.ClickException(str(e))
    for s in report.stages:
        click.echo(
            f"stage {s.stage}: median corner error {s.median_corner_error:.3f} px"
            f" (aligned {s.median_aligned_error:.3f}), IoU {s.mean_iou:.3f}"
        )
    click.echo(f"wrote {out} and {csv_path}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--fg", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True, help="RGBA foreground PNG")
@click.option("--bg", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True, help="RGB background PNG")
@click.option("--p0", default="0,0,0,0,0,0,0,0", show_default=True,
              help="initial warp, 8 comma-separated values")
@click.option("--stages", type=click.IntRange(min=0), default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="output directory")
@click.option("--full-res", "full_res", nargs=2,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="FG BG pair at higher resolution; the final "
              "pixel-frame homography is applied there")
def infer(ckpt, fg, bg, p0, stages, out, full_res):
    """Correct one foreground/background pair and write per-stage output."""
    p0 = _parse_p0(p0)
    try:
        model = baselines.load_model(ckpt)
        info = service.describe_model(ckpt)
        h, w = service.model_resolution(model)
        fg_r = wp.read_png(fg)
        bg_r = wp.read_png(bg)
        if fg_r.channels != 4:
            raise click.ClickException(f"{fg}: foreground must be RGBA")
        if bg_r.channels != 3:
            raise click.ClickException(f"{bg}: background must be RGB")

        n_avail = getattr(model, "n_stages", 1)
        n = n_avail if stages is None else min(stages, n_avail)
        fg_small = wp.bilinear_resize(fg_r, (h, w))
        bg_small = wp.bilinear_resize(bg_r, (h, w))
        layer = wp.ForegroundLayer.from_rgba(fg_small.values)
        deltas = model.predict_deltas(
            wp.to_nchw(layer), wp.to_nchw(bg_small), p0[None], n
        )[0]
        states = np.concatenate([p0[None], p0[None] + np.cumsum(deltas, axis=0)])

        out.mkdir(parents=True, exist_ok=True)
        model_frame = lie.FrameMap(width=w, height=h)
        for k, state in enumerate(states):
            warped = wp.warp_foreground(layer, state, model_frame)
            wp.write_png(wp.composite(warped, bg_small), out / f"stage{k}.png")

        client_frame = bg_r.frame()
        doc = {
            "states": [s.tolist() for s in states],
            "homographies_bg_px": [
                lie.to_image_frame(lie.exp_sl3(s), client_frame).ravel().tolist()
                for s in states
            ],
            "model": info,
            "model_resolution": [h, w],
        }
        with open(out / "states.json", "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")

        if full_res:
            fg2 = wp.load_foreground(full_res[0])
            bg2 = wp.read_png(full_res[1])
            if (fg2.height, fg2.width) != (bg2.height, bg2.width):
                raise click.ClickException(
                    "full-res pair must share one extent"
                )
            warped2 = wp.warp_foreground(fg2, states[-1], bg2.frame())
            wp.write_png(wp.composite(warped2, bg2), out / "fullres.png")
    except (OSError, ValueError, RuntimeError) as e:
        raise click.ClickException(str(e))
    click.echo(f"wrote {len(states)} composites to {out}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--host", default=None,
              help="bind address [default: $WARPGAN_HOST or 127.0.0.1]")
@click.option("--port", type=int, default=None,
              help="port [default: $WARPGAN_PORT or 8000]")
@click.option("--max-image-mb", type=int, default=8, show_default=True)
@click.option("--ui-dir", type=click.Path(file_okay=False, path_type=Path),
              default=None, help="static UI bundle to serve at /ui")
def serve(ckpt, host, port, max_image_mb, ui_dir):
    """Serve the inference API (and the UI, when built) over HTTP."""
    import uvicorn

    host = host or os.environ.get("WARPGAN_HOST", "127.0.0.1")
    port = port if port is not None else int(os.environ.get("WARPGAN_PORT", "8000"))
    try:
        app = service.create_app(
            model_path=ckpt, max_image_bytes=max_image_mb * 1024 * 1024,
            ui_dir=ui_dir,
        )
    except (OSError, ValueError, RuntimeError) as e:
        raise click.ClickException(str(e))
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
