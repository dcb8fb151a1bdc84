"""Synthetic benchmark: geometry, rendering, dataset determinism."""

import os

import numpy as np
import pytest

import warpgan.cubes as cb
import warpgan.lie as lie
import warpgan.warp as wp
from warpgan.errors import CubeNotVisible, InfeasiblePlacement, RetryExhausted


def _cfg(res=(32, 32), **kw):
    return cb.CubesConfig(resolution=res, **kw)


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_sampled_cubes_stay_inside_room():
    cfg = _cfg()
    rng = _rng(1)
    for _ in range(10_000):
        s = cb.sample_scene(rng, cfg)
        lo = s.cube_corners().min(axis=0)
        hi = s.cube_corners().max(axis=0)
        assert np.all(lo > 0) and np.all(hi < s.room_size)


def test_sampled_colors_uniform():
    cfg = _cfg()
    rng = _rng(2)
    means = [cb.sample_scene(rng, cfg).cube_colors.mean() for _ in range(10_000)]
    assert abs(np.mean(means) - 0.5) < 0.02


def test_degenerate_margin_rejected():
    cfg = _cfg(room_size=(1.0, 1.0, 1.0), cube_side_range=(0.9, 0.95))
    with pytest.raises(InfeasiblePlacement):
        cb.sample_scene(_rng(3), cfg)


def _visible_setup(cfg, seed):
    rng = _rng(seed)
    while True:
        scene = cb.sample_scene(rng, cfg)
        cam = cb.sample_camera(scene, rng, cfg)
        if cb.cube_fully_visible(scene, cam, cfg):
            return scene, cam, rng


def test_zero_ranges_leave_camera_unchanged():
    cfg = _cfg(pos_range=0.0, yaw_pitch_range_deg=0.0, roll_range_deg=0.0)
    scene, cam, rng = _visible_setup(cfg, 4)
    out = cb.perturb_camera(scene, cam, rng, cfg)
    assert np.array_equal(out.position, cam.position)
    assert out.yaw == cam.yaw and out.pitch == cam.pitch and out.roll == cam.roll


def test_position_only_perturbation_keeps_orientation():
    cfg = _cfg(pos_range=0.2, yaw_pitch_range_deg=0.0, roll_range_deg=0.0)
    scene, cam, rng = _visible_setup(cfg, 5)
    out = cb.perturb_camera(scene, cam, rng, cfg)
    assert (out.yaw, out.pitch, out.roll) == (cam.yaw, cam.pitch, cam.roll)
    assert not np.array_equal(out.position, cam.position)


def test_projection_matches_hand_built_matrix():
    cfg = _cfg(res=(120, 160))
    rng = _rng(6)
    scene = cb.sample_scene(rng, cfg)
    cam = cb.sample_camera(scene, rng, cfg)
    got = cb.project_cube_corners(scene, cam)

    # independent composition: pixel-frame matrix * anisotropic focal
    # scaling * [R | -R c], then a homogeneous divide
    h, w = cam.resolution
    tv = np.tan(cam.vfov / 2.0)
    th = tv * (w / h)
    K = np.diag([1.0 / th, 1.0 / tv, 1.0])
    R = cam.rotation()
    ext = np.hstack([R, (-R @ cam.position)[:, None]])
    P = lie.FrameMap(width=w, height=h).canonical_to_pixel @ K @ ext
    pts = np.hstack([scene.cube_corners(), np.ones((8, 1))])
    proj = pts @ P.T
    expect = proj[:, :2] / proj[:, 2:3]
    assert np.max(np.abs(got - expect)) < 1e-9


def test_centered_cube_projects_symmetrically():
    cfg = _cfg(res=(120, 160))
    scene = cb.SceneSpec(
        room_size=np.array([4.0, 3.0, 4.0]),
        cube_side=0.8,
        cube_center=np.array([2.0, 1.5, 2.0]),
        cube_colors=np.full((6, 3), 0.8),
        room_colors=np.full((6, 3), 0.3),
    )
    cam = cb.look_at_camera(
        [2.0, 1.5, 0.3], scene.cube_center, np.deg2rad(60.0), (120, 160)
    )
    assert cam.yaw == 0.0 and cam.pitch == 0.0 and cam.roll == 0.0
    px = cb.project_cube_corners(scene, cam)
    center = np.array([159.0 / 2, 119.0 / 2])
    # corners pair up across the view axis: same depth bit, mirrored x/y
    for k in range(8):
        x, y, z = (k >> 2) & 1, (k >> 1) & 1, k & 1
        partner = 4 * (1 - x) + 2 * (1 - y) + z
        assert np.max(np.abs((px[k] + px[partner]) / 2 - center)) < 1e-6
    # silhouette is a centered square: front face is the convex hull
    fg = cb.render(scene, cam, "foreground", cfg)
    on = np.argwhere(fg.mask.values[..., 0] > 0.5)
    box = on.min(axis=0), on.max(axis=0)
    assert abs((box[1][0] - box[0][0]) - (box[1][1] - box[0][1])) <= 1


def test_real_is_bitwise_composite():
    cfg = _cfg()
    rng = _rng(7)
    scene = cb.sample_scene(rng, cfg)
    cam = cb.sample_camera(scene, rng, cfg)
    cam_p = cb.perturb_camera(scene, cam, rng, cfg)
    pair = cb.render_pair(scene, cam, cam_p, cfg)
    layer0 = cb.render(scene, cam, "foreground", cfg)
    again = wp.composite(layer0, pair.bg)
    assert np.array_equal(pair.real.values, again.values)


def test_background_ignores_cube():
    cfg = _cfg()
    rng = _rng(8)
    scene = cb.sample_scene(rng, cfg)
    cam = cb.sample_camera(scene, rng, cfg)
    bg1 = cb.render(scene, cam, "background", cfg)
    recolored = cb.SceneSpec(
        room_size=scene.room_size,
        cube_side=scene.cube_side,
        cube_center=scene.cube_center,
        cube_colors=1.0 - scene.cube_colors,
        room_colors=scene.room_colors,
    )
    bg2 = cb.render(recolored, cam, "background", cfg)
    assert np.array_equal(bg1.values, bg2.values)


def test_zero_perturbation_identity_warp_reproduces_real():
    cfg = _cfg(pos_range=0.0, yaw_pitch_range_deg=0.0, roll_range_deg=0.0)
    rng = _rng(9)
    scene = cb.sample_scene(rng, cfg)
    cam = cb.sample_camera(scene, rng, cfg)
    pair = cb.render_pair(scene, cam, cam, cfg)
    warped = wp.warp_foreground(pair.fg, lie.identity_params())
    out = wp.composite(warped, pair.bg)
    assert np.mean(np.abs(out.values - pair.real.values)) < 0.01


def test_perturbed_views_differ():
    cfg = _cfg()
    differing = 0
    for seed in range(20):
        rng = _rng(100 + seed)
        scene = cb.sample_scene(rng, cfg)
        cam = cb.sample_camera(scene, rng, cfg)
        if not cb.cube_fully_visible(scene, cam, cfg):
            continue
        try:
            cam_p = cb.perturb_camera(scene, cam, rng, cfg)
        except RetryExhausted:
            continue
        a = cb.render(scene, cam, "foreground", cfg).mask.values > 0.5
        b = cb.render(scene, cam_p, "foreground", cfg).mask.values > 0.5
        inter = np.sum(a & b)
        union = np.sum(a | b)
        if union and inter < union:
            differing += 1
    assert differing >= 10


def test_cube_behind_camera_not_visible():
    cfg = _cfg()
    rng = _rng(10)
    scene = cb.sample_scene(rng, cfg)
    cam = cb.sample_camera(scene, rng, cfg)
    away = cb.CameraSpec(
        position=cam.position, yaw=cam.yaw + np.pi, pitch=cam.pitch,
        roll=cam.roll, vfov=cam.vfov, resolution=cam.resolution,
    )
    assert not cb.cube_fully_visible(scene, away, cfg)
    with pytest.raises(CubeNotVisible):
        cb.render(scene, away, "foreground", cfg)


def test_dataset_determinism_and_layout(tmp_path):
    cfg = _cfg()
    a = tmp_path / "a"
    b = tmp_path / "b"
    recs_a = cb.make_dataset(3, cfg, a, seed=5)
    recs_b = cb.make_dataset(3, cfg, b, seed=5)
    assert [r["gt_corners"] for r in recs_a] == [r["gt_corners"] for r in recs_b]
    for name in sorted(os.listdir(a)):
        with open(a / name, "rb") as fa, open(b / name, "rb") as fb:
            assert fa.read() == fb.read(), name
    names = set(os.listdir(a))
    assert "manifest.jsonl" in names
    for i in range(3):
        for kind in ("fg", "bg", "real"):
            assert f"{i:06d}_{kind}.png" in names


def test_empty_dataset_manifest(tmp_path):
    recs = cb.make_dataset(0, _cfg(), tmp_path / "d", seed=0)
    assert recs == []
    ds = cb.load_dataset(tmp_path / "d")
    assert len(ds) == 0


def test_dataset_round_trip(tmp_path):
    cfg = _cfg()
    cb.make_dataset(2, cfg, tmp_path / "d", seed=6)
    ds = cb.load_dataset(tmp_path / "d")
    assert len(ds) == 2
    assert ds.fg.shape == (2, 4, 32, 32)
    assert ds.bg.shape == (2, 3, 32, 32)
    assert ds.real.shape == (2, 3, 32, 32)
    assert ds.gt_corners.shape == (2, 8, 2)
    assert ds.fg_corners.shape == (2, 8, 2)
    assert ds.resolution == (32, 32)
    lo, hi = cfg.mask_occupancy
    for i in range(2):
        occ = float(np.mean(ds.fg[i, 3] > 0.5))
        assert lo <= occ <= hi
