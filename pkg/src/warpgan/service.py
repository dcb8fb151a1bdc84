"""HTTP inference service around a trained correction model.

The service is stateless per request: the model snapshot is loaded
once at startup and never mutated.  Request images are resampled to
the model's training resolution internally; returned homographies are
expressed in the client's background pixel frame, so they apply
unchanged to the client's full-resolution assets.
"""

from __future__ import annotations

import base64
import binascii
import io
import logging
import os
import uuid
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from . import checkpoint as ckpt
from . import lie
from . import warp as wp

log = logging.getLogger("warpgan.service")

DEFAULT_IMAGE_LIMIT = 8 * 1024 * 1024  # decoded PNG bytes


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


class Placement(BaseModel):
    """Initial placement as a translation (background pixels) and a
    scale factor about the foreground extent's center."""

    tx: float
    ty: float
    scale: float = Field(gt=0)


class PredictRequest(BaseModel):
    fg_png: str
    bg_png: str
    p0: Optional[list[float]] = None
    placement: Optional[Placement] = None
    stages: Optional[int] = Field(default=None, ge=0)
    previews: bool = False
    # steps per stage transition for a finely interpolated homography
    # sequence (animation support); 0 disables
    interp: int = Field(default=0, ge=0, le=256)


class PredictResponse(BaseModel):
    states: list[list[float]]
    homographies: list[list[float]]
    interp_homographies: Optional[list[list[float]]] = None
    previews: Optional[list[str]] = None
    model: dict


def placement_to_p0(placement: Placement, bg_width: int, bg_height: int):
    """Lift a scale-about-center plus pixel translation into sl(3).

    The canonical square spans the full raster, so the extent center is
    the canonical origin and the similarity has the closed-form log
    used by similarity_params; a raster that is w pixels wide spans 2
    canonical units, hence the 2/w translation conversion.
    """
    return lie.similarity_params(
        placement.scale,
        2.0 * placement.tx / bg_width,
        2.0 * placement.ty / bg_height,
    )


def _decode_image(b64: str, limit: int, what: str) -> wp.Raster:
    approx = (len(b64) * 3) // 4
    if approx > limit:
        raise ApiError(413, f"{what} image exceeds {limit} bytes")
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as e:
        raise ApiError(422, f"{what} image is not valid base64: {e}") from e
    if len(raw) > limit:
        raise ApiError(413, f"{what} image exceeds {limit} bytes")
    try:
        return wp.read_png(io.BytesIO(raw))
    except Exception as e:
        raise ApiError(422, f"{what} image is not a decodable PNG: {e}") from e


def _encode_png(raster: wp.Raster) -> str:
    arr = np.clip(np.rint(raster.values * 255.0), 0, 255).astype(np.uint8)
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[raster.channels]
    if mode == "L":
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def model_resolution(model) -> tuple:
    if hasattr(model, "resolution"):
        return tuple(model.resolution)
    if hasattr(model, "net"):  # direct regressor
        return tuple(model.net.resolution)
    if hasattr(model, "generators"):  # adversarial stack
        return tuple(model.generators[0].resolution)
    raise ValueError("model does not expose a working resolution")


def describe_model(path) -> dict:
    fields, _ = ckpt.load_checkpoint(path)
    if "config" in fields:
        cfg = fields["config"]
        return {
            "kind": "stgan",
            "config_hash": fields.get("config_hash", ""),
            "n_stages": cfg["n_stages"],
            "resolution": list(cfg["resolution"]),
            "stages_trained": fields.get("stages_trained", 0),
        }
    kind = fields.get("kind", "unknown")
    info = {"kind": kind, "config_hash": ""}
    if "resolution" in fields:
        info["resolution"] = list(fields["resolution"])
    if kind == "sdm":
        info["n_stages"] = len(fields.get("lambdas", []))
    elif kind == "homnet":
        info["n_stages"] = 1
    return info


def _default_ui_dir() -> Optional[Path]:
    env = os.environ.get("WARPGAN_UI_DIR")
    if env:
        return Path(env)
    local = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return local if local.is_dir() else None


def create_app(model=None, model_path=None, info: Optional[dict] = None,
               max_image_bytes: int = DEFAULT_IMAGE_LIMIT,
               ui_dir=None) -> FastAPI:
    """Build the FastAPI app around a loaded model or a checkpoint path."""
    if model is None:
        if model_path is None:
            raise ValueError("need a model or a checkpoint path")
        from .baselines import load_model

        model = load_model(model_path)
        if info is None:
            info = describe_model(model_path)
    if info is None:
        info = {"kind": type(model).__name__, "config_hash": ""}
    info = dict(info)
    res = model_resolution(model)
    info.setdefault("resolution", list(res))
    info.setdefault("n_stages", getattr(model, "n_stages", 1))
    h, w = res
    model_frame = lie.FrameMap(width=w, height=h)

    app = FastAPI(title="warpgan inference service")

    @app.exception_handler(ApiError)
    def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"error": exc.message})

    @app.exception_handler(RequestValidationError)
    def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": "malformed request", "detail": exc.errors()},
        )

    @app.exception_handler(Exception)
    def _internal_error(request: Request, exc: Exception):
        err_id = uuid.uuid4().hex
        log.exception("internal error %s", err_id)
        return JSONResponse(
            status_code=500, content={"error": "internal error", "id": err_id}
        )

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/model-info")
    def model_info():
        return info

    @app.post("/predict", response_model=PredictResponse,
              response_model_exclude_none=True)
    def predict(req: PredictRequest):
        if (req.p0 is None) == (req.placement is None):
            raise ApiError(400, "provide exactly one of p0 / placement")
        fg = _decode_image(req.fg_png, max_image_bytes, "foreground")
        bg = _decode_image(req.bg_png, max_image_bytes, "background")
        if fg.channels != 4:
            raise ApiError(400, f"foreground must be RGBA, got {fg.channels} channels")
        if bg.channels != 3:
            raise ApiError(400, f"background must be RGB, got {bg.channels} channels")

        if req.p0 is not None:
            if len(req.p0) != 8:
                raise ApiError(400, f"p0 must have 8 entries, got {len(req.p0)}")
            p0 = np.asarray(req.p0, dtype=np.float64)
        else:
            p0 = placement_to_p0(req.placement, bg.width, bg.height)

        n_avail = getattr(model, "n_stages", 1)
        n = n_avail if req.stages is None else req.stages
        if n > n_avail:
            raise ApiError(400, f"model has {n_avail} stages, requested {n}")

        fg_small = wp.bilinear_resize(fg, (h, w))
        bg_small = wp.bilinear_resize(bg, (h, w))
        fg_nchw = wp.to_nchw(wp.ForegroundLayer.from_rgba(fg_small.values))
        bg_nchw = wp.to_nchw(bg_small)

        deltas = model.predict_deltas(fg_nchw, bg_nchw, p0[None], n)[0]
        states = np.concatenate([p0[None], p0[None] + np.cumsum(deltas, axis=0)])

        client_frame = lie.FrameMap(width=bg.width, height=bg.height)

        def pixel_h(s):
            return lie.to_image_frame(lie.exp_sl3(s), client_frame).ravel().tolist()

        homs = [pixel_h(s) for s in states]

        interp_homs = None
        if req.interp > 0:
            # dense path p_0 .. p_N, linear in parameter space, endpoints
            # included once each
            interp_homs = [homs[0]]
            for a, b in zip(states[:-1], states[1:]):
                for j in range(1, req.interp + 1):
                    t = j / req.interp
                    interp_homs.append(pixel_h((1.0 - t) * a + t * b))

        previews = None
        if req.previews:
            layer = wp.ForegroundLayer.from_rgba(fg_small.values)
            previews = []
            for s in states:
                warped = wp.warp_foreground(layer, s, model_frame)
                previews.append(_encode_png(wp.composite(warped, bg_small)))

        return PredictResponse(
            states=[s.tolist() for s in states],
            homographies=homs,
            interp_homographies=interp_homs,
            previews=previews,
            model=info,
        )

    ui = Path(ui_dir) if ui_dir is not None else _default_ui_dir()
    if ui is not None and ui.is_dir():
        app.mount("/ui", StaticFiles(directory=ui, html=True), name="ui")

    return app
