"""Synthetic cube-in-room benchmark data.

A scene is an axis-aligned room box with a smaller axis-aligned cube
strictly inside it, every face flat-colored at random.  One pinhole
camera near a wall looks at the cube; a second camera is a 6-DoF
perturbation of the first.  The foreground layer is the cube rendered
from the perturbed camera (color + antialiased mask), the background is
the room without the cube from the original camera, and the real image
is the cube composited over the background at the original camera.  A
generator that undoes the viewpoint mismatch makes the composite match
the real image up to the perspective residual a homography cannot
express.

Rendering is exact enough to carry ground truth: cube corners are
projected in float64 and stored alongside the rasters.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lie
from . import warp as wp
from .errors import (
    CubeNotVisible,
    InfeasiblePlacement,
    RetryExhausted,
    ShapeMismatch,
)

SUPERSAMPLE = 2

# corner index = 4*bx + 2*by + bz over unit offsets (bx, by, bz)
_CORNER_BITS = np.array(
    [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64
)

# quad faces as corner-index cycles plus outward normals
_FACES = (
    ((4, 6, 7, 5), (1.0, 0.0, 0.0)),
    ((0, 1, 3, 2), (-1.0, 0.0, 0.0)),
    ((2, 3, 7, 6), (0.0, 1.0, 0.0)),
    ((0, 4, 5, 1), (0.0, -1.0, 0.0)),
    ((1, 5, 7, 3), (0.0, 0.0, 1.0)),
    ((0, 2, 6, 4), (0.0, 0.0, -1.0)),
)


@dataclass
class SceneSpec:
    room_size: np.ndarray  # (3,) box extents in meters, origin corner at 0
    cube_side: float
    cube_center: np.ndarray  # (3,)
    cube_colors: np.ndarray  # (6, 3) in [0, 1]
    room_colors: np.ndarray  # (6, 3)

    def cube_corners(self) -> np.ndarray:
        return self.cube_center + (
            (_CORNER_BITS - 0.5) * self.cube_side
        )

    def room_corners(self) -> np.ndarray:
        return _CORNER_BITS * self.room_size

    def to_json(self) -> dict:
        return {
            "room_size": self.room_size.tolist(),
            "cube_side": self.cube_side,
            "cube_center": self.cube_center.tolist(),
            "cube_colors": self.cube_colors.tolist(),
            "room_colors": self.room_colors.tolist(),
        }

    @staticmethod
    def from_json(d: dict) -> "SceneSpec":
        return SceneSpec(
            room_size=np.asarray(d["room_size"], dtype=np.float64),
            cube_side=float(d["cube_side"]),
            cube_center=np.asarray(d["cube_center"], dtype=np.float64),
            cube_colors=np.asarray(d["cube_colors"], dtype=np.float64),
            room_colors=np.asarray(d["room_colors"], dtype=np.float64),
        )


@dataclass
class CameraSpec:
    position: np.ndarray  # (3,)
    yaw: float  # about world up (y), radians
    pitch: float  # positive looks up
    roll: float  # about the view axis
    vfov: float  # vertical field of view, radians
    resolution: tuple  # (H, W)

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; camera rows are (right, down, forward)."""
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        f = np.array([sy, 0.0, cy])
        r = np.array([cy, 0.0, -sy])
        u = np.array([0.0, 1.0, 0.0])
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        f, u = cp * f + sp * u, cp * u - sp * f
        cr, sr = np.cos(self.roll), np.sin(self.roll)
        r, u = cr * r + sr * u, cr * u - sr * r
        return np.stack([r, -u, f])

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.position) @ self.rotation().T

    def to_json(self) -> dict:
        return {
            "position": self.position.tolist(),
            "yaw": self.yaw,
            "pitch": self.pitch,
            "roll": self.roll,
            "vfov": self.vfov,
            "resolution": list(self.resolution),
        }

    @staticmethod
    def from_json(d: dict) -> "CameraSpec":
        return CameraSpec(
            position=np.asarray(d["position"], dtype=np.float64),
            yaw=float(d["yaw"]),
            pitch=float(d["pitch"]),
            roll=float(d["roll"]),
            vfov=float(d["vfov"]),
            resolution=(int(d["resolution"][0]), int(d["resolution"][1])),
        )


@dataclass
class RenderedPair:
    fg: wp.ForegroundLayer
    bg: wp.Raster
    real: wp.Raster
    gt_corners: np.ndarray  # (8, 2) cube corners, original camera, pixels
    fg_corners: np.ndarray  # (8, 2) cube corners, perturbed camera, pixels


@dataclass
class CubesConfig:
    resolution: tuple = (120, 160)
    room_size: tuple = (4.0, 3.0, 4.0)
    cube_side_range: tuple = (0.6, 1.0)
    cube_margin: float = 0.1
    vfov_deg: float = 60.0
    # original camera placement bands (fractions of room extents)
    cam_x_band: tuple = (0.3, 0.7)
    cam_y_band: tuple = (0.4, 0.6)
    cam_z_band: tuple = (0.06, 0.16)
    # perturbation ranges
    pos_range: float = 0.4  # meters, per axis
    yaw_pitch_range_deg: float = 10.0
    roll_range_deg: float = 5.0
    near: float = 0.05
    mask_occupancy: tuple = (0.02, 0.60)
    edge_margin_px: float = 1.0
    visibility_retries: int = 100
    scene_retries: int = 100

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def sample_scene(rng: np.random.Generator, cfg: CubesConfig) -> SceneSpec:
    """Room plus a cube placed uniformly in the shrunken interior."""
    room = np.asarray(cfg.room_size, dtype=np.float64)
    side = float(rng.uniform(*cfg.cube_side_range))
    half = side / 2.0 + cfg.cube_margin
    lo = np.full(3, half)
    hi = room - half
    if np.any(hi <= lo):
        raise InfeasiblePlacement(
            f"cube of half-extent {half:.3f} m cannot fit the {room} room"
        )
    center = rng.uniform(lo, hi)
    return SceneSpec(
        room_size=room,
        cube_side=side,
        cube_center=center,
        cube_colors=rng.uniform(0.0, 1.0, (6, 3)),
        room_colors=rng.uniform(0.0, 1.0, (6, 3)),
    )


def look_at_camera(position, target, vfov, resolution) -> CameraSpec:
    """Camera at ``position`` with zero roll, aimed at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    d = np.asarray(target, dtype=np.float64) - position
    yaw = float(np.arctan2(d[0], d[2]))
    pitch = float(np.arctan2(d[1], np.hypot(d[0], d[2])))
    return CameraSpec(
        position=position, yaw=yaw, pitch=pitch, roll=0.0,
        vfov=float(vfov), resolution=tuple(resolution),
    )


def sample_camera(scene: SceneSpec, rng: np.random.Generator,
                  cfg: CubesConfig) -> CameraSpec:
    room = scene.room_size
    pos = np.array([
        rng.uniform(*cfg.cam_x_band) * room[0],
        rng.uniform(*cfg.cam_y_band) * room[1],
        rng.uniform(*cfg.cam_z_band) * room[2],
    ])
    return look_at_camera(
        pos, scene.cube_center, np.deg2rad(cfg.vfov_deg), cfg.resolution
    )


def project_points(cam: CameraSpec, pts: np.ndarray,
                   resolution: Optional[tuple] = None,
                   near: float = 1e-6) -> np.ndarray:
    """Exact pinhole projection of world points to pixel coordinates.

    The canonical [-1, 1] frame spans the vertical field of view; the
    horizontal field follows from the aspect ratio, so the projection
    composes exactly with the package's pixel frame convention.
    """
    h, w = resolution or cam.resolution
    pc = cam.to_camera(np.asarray(pts, dtype=np.float64))
    z = pc[:, 2]
    if np.any(z < near):
        raise CubeNotVisible("point at or behind the near plane")
    tv = np.tan(cam.vfov / 2.0)
    th = tv * (w / h)
    can = np.stack([pc[:, 0] / (z * th), pc[:, 1] / (z * tv)], axis=1)
    fm = lie.FrameMap(width=int(w), height=int(h))
    return fm.to_pixel(can)


def project_cube_corners(scene: SceneSpec, cam: CameraSpec) -> np.ndarray:
    return project_points(cam, scene.cube_corners())


def cube_fully_visible(scene: SceneSpec, cam: CameraSpec,
                       cfg: CubesConfig) -> bool:
    try:
        px = project_cube_corners(scene, cam)
    except CubeNotVisible:
        return False
    h, w = cam.resolution
    m = cfg.edge_margin_px
    ok_x = np.all((px[:, 0] >= m) & (px[:, 0] <= w - 1 - m))
    ok_y = np.all((px[:, 1] >= m) & (px[:, 1] <= h - 1 - m))
    # the cube must also sit in front of the camera by a real margin
    z = cam.to_camera(scene.cube_corners())[:, 2]
    return bool(ok_x and ok_y and np.all(z > cfg.near))


def perturb_camera(scene: SceneSpec, cam: CameraSpec,
                   rng: np.random.Generator, cfg: CubesConfig) -> CameraSpec:
    """Uniform 6-DoF jitter, resampled until the cube stays in view."""
    ang = np.deg2rad(cfg.yaw_pitch_range_deg)
    rol = np.deg2rad(cfg.roll_range_deg)
    for _ in range(cfg.visibility_retries):
        cand = CameraSpec(
            position=cam.position + rng.uniform(-cfg.pos_range, cfg.pos_range, 3),
            yaw=cam.yaw + float(rng.uniform(-ang, ang)),
            pitch=cam.pitch + float(rng.uniform(-ang, ang)),
            roll=cam.roll + float(rng.uniform(-rol, rol)),
            vfov=cam.vfov,
            resolution=cam.resolution,
        )
        if cube_fully_visible(scene, cand, cfg):
            return cand
    raise RetryExhausted(
        f"no visible cube in {cfg.visibility_retries} camera perturbations"
    )


# -- rasterization --------------------------------------------------------


def _clip_near(poly_cam: np.ndarray, near: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-space polygon against z >= near."""
    out = []
    n = len(poly_cam)
    for i in range(n):
        a = poly_cam[i]
        b = poly_cam[(i + 1) % n]
        ain = a[2] >= near
        bin_ = b[2] >= near
        if ain:
            out.append(a)
        if ain != bin_:
            t = (near - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.asarray(out, dtype=np.float64).reshape(-1, 3)


def _fill_convex(img: np.ndarray, mask: Optional[np.ndarray],
                 poly_px: np.ndarray, color: np.ndarray):
    """Paint a convex polygon (pixel-center coverage) onto an HWC raster."""
    if len(poly_px) < 3:
        return
    # normalize winding so the inside test is sign-uniform
    area = 0.0
    n = len(poly_px)
    for i in range(n):
        ax, ay = poly_px[i]
        bx, by = poly_px[(i + 1) % n]
        area += ax * by - bx * ay
    if area < 0:
        poly_px = poly_px[::-1]
    h, w = img.shape[:2]
    x0 = max(0, int(np.floor(poly_px[:, 0].min())))
    x1 = min(w - 1, int(np.ceil(poly_px[:, 0].max())))
    y0 = max(0, int(np.floor(poly_px[:, 1].min())))
    y1 = min(h - 1, int(np.ceil(poly_px[:, 1].max())))
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64)
    inside = np.ones(xs.shape, dtype=bool)
    for i in range(len(poly_px)):
        ax, ay = poly_px[i]
        bx, by = poly_px[(i + 1) % len(poly_px)]
        inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= 0
    sub = img[y0 : y1 + 1, x0 : x1 + 1]
    sub[inside] = color
    if mask is not None:
        mask[y0 : y1 + 1, x0 : x1 + 1][inside] = 1.0


def _downsample(arr: np.ndarray, f: int) -> np.ndarray:
    h, w = arr.shape[:2]
    return arr.reshape(h // f, f, w // f, f, -1).mean(axis=(1, 3))


def _project_poly(cam: CameraSpec, poly_world: np.ndarray, near: float,
                  ss_resolution: tuple) -> np.ndarray:
    pc = (poly_world - cam.position) @ cam.rotation().T
    pc = _clip_near(pc, near)
    if len(pc) < 3:
        return np.zeros((0, 2))
    h, w = ss_resolution
    base_h = h // SUPERSAMPLE
    base_w = w // SUPERSAMPLE
    tv = np.tan(cam.vfov / 2.0)
    th = tv * (base_w / base_h)
    can = np.stack([pc[:, 0] / (pc[:, 2] * th), pc[:, 1] / (pc[:, 2] * tv)], axis=1)
    fm = lie.FrameMap(width=w, height=h)
    return fm.to_pixel(can)


def _paint_room(img, scene: SceneSpec, cam: CameraSpec, near: float, ss_res):
    corners = scene.room_corners()
    for fi, (cycle, _normal) in enumerate(_FACES):
        poly = _project_poly(cam, corners[list(cycle)], near, ss_res)
        _fill_convex(img, None, poly, scene.room_colors[fi])


def _paint_cube(img, mask, scene: SceneSpec, cam: CameraSpec, near: float, ss_res):
    corners = scene.cube_corners()
    for fi, (cycle, normal) in enumerate(_FACES):
        center = corners[list(cycle)].mean(axis=0)
        if np.dot(np.asarray(normal), center - cam.position) >= 0:
            continue  # back face
        poly = _project_poly(cam, corners[list(cycle)], near, ss_res)
        _fill_convex(img, mask, poly, scene.cube_colors[fi])


def render(scene: SceneSpec, cam: CameraSpec, mode: str,
           cfg: Optional[CubesConfig] = None):
    """Rasterize one view.  mode: foreground | background | real.

    Rendering happens at 2x resolution and is box-downsampled, which
    antialiases both colors and the foreground mask.  The painter order
    is rooms first, then front-facing cube faces: the cube is strictly
    inside the room, so it is nearer than any room surface along every
    ray that hits it, and front faces of a convex solid never overlap
    each other in projection.
    """
    cfg = cfg or CubesConfig(resolution=cam.resolution)
    h, w = cam.resolution
    ss = (h * SUPERSAMPLE, w * SUPERSAMPLE)
    if mode == "foreground":
        if not cube_fully_visible(scene, cam, cfg):
            raise CubeNotVisible("cube does not project fully inside the raster")
        img = np.zeros(ss + (3,), dtype=np.float64)
        mask = np.zeros(ss, dtype=np.float64)
        _paint_cube(img, mask, scene, cam, cfg.near, ss)
        color = _downsample(img, SUPERSAMPLE).astype(np.float32)
        m = _downsample(mask[..., None], SUPERSAMPLE).astype(np.float32)
        return wp.ForegroundLayer(color=wp.Raster(color), mask=wp.Raster(m))
    if mode == "background":
        img = np.zeros(ss + (3,), dtype=np.float64)
        _paint_room(img, scene, cam, cfg.near, ss)
        return wp.Raster(_downsample(img, SUPERSAMPLE).astype(np.float32))
    if mode == "real":
        fg = render(scene, cam, "foreground", cfg)
        bg = render(scene, cam, "background", cfg)
        return wp.composite(fg, bg)
    raise ValueError(f"unknown render mode {mode!r}")


def render_pair(scene: SceneSpec, cam: CameraSpec, cam_pert: CameraSpec,
                cfg: CubesConfig) -> RenderedPair:
    fg = render(scene, cam_pert, "foreground", cfg)
    bg = render(scene, cam, "background", cfg)
    layer0 = render(scene, cam, "foreground", cfg)
    real = wp.composite(layer0, bg)
    return RenderedPair(
        fg=fg, bg=bg, real=real,
        gt_corners=project_cube_corners(scene, cam),
        fg_corners=project_cube_corners(scene, cam_pert),
    )


def _occupancy(layer: wp.ForegroundLayer) -> float:
    return float(np.mean(layer.mask.values > 0.5))


def generate_sample(seed: int, index: int, cfg: CubesConfig):
    """One deterministic dataset sample; returns (pair, scene, cam, cam_pert)."""
    rng = np.random.default_rng([seed, index])
    lo, hi = cfg.mask_occupancy
    for _ in range(cfg.scene_retries):
        scene = sample_scene(rng, cfg)
        cam = sample_camera(scene, rng, cfg)
        if not cube_fully_visible(scene, cam, cfg):
            continue
        try:
            cam_pert = perturb_camera(scene, cam, rng, cfg)
        except RetryExhausted:
            continue
        pair = render_pair(scene, cam, cam_pert, cfg)
        occ_fg = _occupancy(pair.fg)
        # bound the original-camera silhouette too; its mask is what the
        # real image carries
        gt_mask = render(scene, cam, "foreground", cfg).mask
        occ0 = float(np.mean(gt_mask.values > 0.5))
        if lo <= occ_fg <= hi and lo <= occ0 <= hi:
            return pair, scene, cam, cam_pert
    raise RetryExhausted(
        f"sample {index}: no acceptable scene in {cfg.scene_retries} attempts"
    )


def make_dataset(n: int, cfg: CubesConfig, out_dir, seed: int = 0) -> list:
    """Write n rendered pairs and a JSON-lines manifest; returns the records."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    lines = []
    for i in range(n):
        pair, scene, cam, cam_pert = generate_sample(seed, i, cfg)
        stem = f"{i:06d}"
        wp.save_foreground(pair.fg, os.path.join(out_dir, f"{stem}_fg.png"))
        wp.write_png(pair.bg, os.path.join(out_dir, f"{stem}_bg.png"))
        wp.write_png(pair.real, os.path.join(out_dir, f"{stem}_real.png"))
        rec = {
            "index": i,
            "fg": f"{stem}_fg.png",
            "bg": f"{stem}_bg.png",
            "real": f"{stem}_real.png",
            "gt_corners": pair.gt_corners.tolist(),
            "fg_corners": pair.fg_corners.tolist(),
            "scene": scene.to_json(),
            "cam": cam.to_json(),
            "cam_perturbed": cam_pert.to_json(),
        }
        records.append(rec)
        lines.append(json.dumps(rec, sort_keys=True))
    tmp = os.path.join(out_dir, "manifest.jsonl.tmp")
    with open(tmp, "w") as f:
        for line in lines:
            f.write(line + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.jsonl"))
    return records


@dataclass
class CubesDataset:
    """In-memory dataset view: images as float32 NCHW batches."""

    directory: str
    records: list = field(default_factory=list)
    fg: Optional[np.ndarray] = None  # (N, 4, H, W)
    bg: Optional[np.ndarray] = None  # (N, 3, H, W)
    real: Optional[np.ndarray] = None  # (N, 3, H, W)
    gt_corners: Optional[np.ndarray] = None  # (N, 8, 2)
    fg_corners: Optional[np.ndarray] = None  # (N, 8, 2)

    def __len__(self):
        return len(self.records)

    @property
    def resolution(self) -> tuple:
        return self.fg.shape[2], self.fg.shape[3]


def load_dataset(directory) -> CubesDataset:
    path = os.path.join(directory, "manifest.jsonl")
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        return CubesDataset(directory=str(directory), records=[])
    fgs, bgs, reals = [], [], []
    for rec in records:
        layer = wp.load_foreground(os.path.join(directory, rec["fg"]))
        fgs.append(wp.to_nchw(layer)[0])
        bgs.append(wp.to_nchw(wp.read_png(os.path.join(directory, rec["bg"])))[0])
        reals.append(wp.to_nchw(wp.read_png(os.path.join(directory, rec["real"])))[0])
    return CubesDataset(
        directory=str(directory),
        records=records,
        fg=np.stack(fgs),
        bg=np.stack(bgs),
        real=np.stack(reals),
        gt_corners=np.asarray([r["gt_corners"] for r in records], dtype=np.float64),
        fg_corners=np.asarray([r["fg_corners"] for r in records], dtype=np.float64),
    )
