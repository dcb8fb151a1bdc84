import numpy as np
import pytest

from warpgan import cubes, lie, metrics, networks
from warpgan import warp as wp
from warpgan.errors import EmptyUnion, ShapeMismatch


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cubes") / "tiny"
    cfg = cubes.CubesConfig(resolution=(32, 32))
    cubes.make_dataset(6, cfg, out, seed=11)
    return cubes.load_dataset(out)


def _octagon(cx=60.0, cy=45.0, r=20.0):
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)


def test_corner_error_identity_zero():
    frame = lie.FrameMap(width=160, height=120)
    pts = _octagon()
    absolute, aligned = metrics.corner_error(np.zeros(8), pts, pts, frame)
    assert absolute < 1e-12
    assert aligned < 1e-12


def test_translation_is_fully_aligned_away():
    frame = lie.FrameMap(width=160, height=120)
    pts = _octagon()
    p = lie.similarity_params(1.0, 0.12, -0.07)
    absolute, aligned = metrics.corner_error(p, pts, pts, frame)
    assert absolute > 1.0  # canonical 0.12 is ~10px horizontally
    assert aligned < 1e-9


def test_aligned_error_ignores_constant_shifts():
    # shifting the target rigidly changes the absolute error but must
    # leave the translation-aligned error untouched
    frame = lie.FrameMap(width=160, height=120)
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.normal(0, 0.2, 8)
        src = _octagon() + rng.normal(0, 5, (8, 2))
        gt = _octagon() + rng.normal(0, 5, (8, 2))
        shift = rng.normal(0, 30, 2)
        a0, al0 = metrics.corner_error(p, src, gt, frame)
        a1, al1 = metrics.corner_error(p, src, gt + shift, frame)
        assert al1 == pytest.approx(al0, abs=1e-7)
    # matched corners: the absolute error is exactly the shift length
    pts = _octagon()
    a, al = metrics.corner_error(np.zeros(8), pts, pts + (3.0, 4.0), frame)
    assert a == pytest.approx(5.0)
    assert al < 1e-9


def test_aligned_never_exceeds_absolute():
    frame = lie.FrameMap(width=160, height=120)
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = rng.normal(0, 0.2, 8)
        src = _octagon() + rng.normal(0, 5, (8, 2))
        gt = _octagon() + rng.normal(0, 5, (8, 2))
        absolute, aligned = metrics.corner_error(p, src, gt, frame)
        assert aligned <= absolute


def test_corner_error_monotone_in_translation():
    frame = lie.FrameMap(width=160, height=120)
    pts = _octagon()
    errs = [
        metrics.corner_error(lie.similarity_params(1.0, t, 0.0), pts, pts, frame)[0]
        for t in (0.05, 0.1, 0.2, 0.4)
    ]
    assert all(a < b for a, b in zip(errs, errs[1:]))


def test_corner_error_shape_guard():
    frame = lie.FrameMap(width=160, height=120)
    with pytest.raises(ShapeMismatch):
        metrics.corner_error(np.zeros(8), np.zeros((8, 2)), np.zeros((4, 2)), frame)


def test_mask_iou_values():
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    a[0:4] = 1.0
    b[2:8] = 1.0
    assert metrics.mask_iou(a, b) == pytest.approx(2 / 8)
    assert metrics.mask_iou(b, a) == pytest.approx(2 / 8)
    assert metrics.mask_iou(a, a) == 1.0
    c = np.zeros((8, 8))
    c[6:8] = 1.0
    assert metrics.mask_iou(a, c) == 0.0


def test_mask_iou_threshold():
    a = np.full((4, 4), 0.4)
    b = np.full((4, 4), 0.6)
    with pytest.raises(EmptyUnion):
        metrics.mask_iou(a, a)
    assert metrics.mask_iou(b, b) == 1.0
    assert metrics.mask_iou(a, b) == 0.0


def test_mask_iou_shape_guard():
    with pytest.raises(ShapeMismatch):
        metrics.mask_iou(np.ones((4, 4)), np.ones((4, 5)))


def test_hull_mask_square():
    corners = np.array([[2.0, 3.0], [10.0, 3.0], [10.0, 8.0], [2.0, 8.0]])
    mask = metrics.convex_hull_mask(corners, (12, 14))
    expect = np.zeros((12, 14), dtype=np.float32)
    expect[3:9, 2:11] = 1.0
    assert np.array_equal(mask, expect)


def test_hull_mask_ignores_interior_points():
    outer = np.array([[2.0, 3.0], [10.0, 3.0], [10.0, 8.0], [2.0, 8.0]])
    inner = np.array([[5.0, 5.0], [6.0, 6.0], [4.0, 7.0], [9.0, 4.0]])
    a = metrics.convex_hull_mask(outer, (12, 14))
    b = metrics.convex_hull_mask(np.vstack([outer, inner]), (12, 14))
    assert np.array_equal(a, b)


def test_hull_mask_degenerate_points():
    line = np.array([[1.0, 1.0], [3.0, 3.0], [5.0, 5.0]])
    assert metrics.convex_hull_mask(line, (8, 8)).sum() == 0
    point = np.array([[2.0, 2.0]] * 8)
    assert metrics.convex_hull_mask(point, (8, 8)).sum() == 0


def test_identity_model_stages_flat(tiny_dataset):
    report = metrics.evaluate(metrics.IdentityModel(2), tiny_dataset, seed=5)
    assert len(report.stages) == 3
    s0 = report.stages[0]
    for s in report.stages[1:]:
        assert s.mean_corner_error == s0.mean_corner_error
        assert s.median_aligned_error == s0.median_aligned_error
        assert s.mean_iou == s0.mean_iou
        assert s.mean_update_norm == 0.0


def test_evaluate_with_stack(tiny_dataset):
    rng = np.random.default_rng(0)
    stack = networks.build_stack(
        resolution=(32, 32), width_mult=0.25, depth=4, n_stages=2, rng=rng
    )
    report = metrics.evaluate(stack, tiny_dataset, seed=5, config_hash="abc")
    assert report.sample_count == 6
    assert len(report.stages) == 3
    for s in report.stages:
        assert s.d_score_gap is not None
        assert np.isfinite(s.mean_corner_error)
        assert 0.0 <= s.mean_iou <= 1.0
    assert report.stages[1].mean_update_norm > 0.0
    back = metrics.EvalReport.from_json(report.to_json())
    assert back.to_json() == report.to_json()


def test_evaluate_deterministic(tiny_dataset):
    model = metrics.IdentityModel(1)
    a = metrics.evaluate(model, tiny_dataset, seed=9)
    b = metrics.evaluate(model, tiny_dataset, seed=9)
    assert a.to_json() == b.to_json()
    c = metrics.evaluate(model, tiny_dataset, seed=10)
    assert c.to_json() != a.to_json()


def test_eval_report_save_load(tmp_path, tiny_dataset):
    report = metrics.evaluate(metrics.IdentityModel(1), tiny_dataset, seed=1)
    path = tmp_path / "report.json"
    report.save(path)
    back = metrics.EvalReport.load(path)
    assert back.to_json() == report.to_json()


def _spearman(x, y):
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx**2).sum() * (ry**2).sum()))


def test_corner_error_tracks_mask_displacement():
    """The uncorrected misalignment measured two ways, corner distances
    and rendered-mask centroid displacement, must agree in ordering."""
    cfg = cubes.CubesConfig(resolution=(32, 32))
    frame = lie.FrameMap(width=32, height=32)
    errs, disps = [], []
    for i in range(40):
        pair, _, _, _ = cubes.generate_sample(77, i, cfg)
        err, _ = metrics.corner_error(
            np.zeros(8), pair.fg_corners, pair.gt_corners, frame
        )
        m = pair.fg.mask.values[..., 0] > 0.5
        hull = metrics.convex_hull_mask(pair.gt_corners, (32, 32)) > 0.5
        ys, xs = np.nonzero(m)
        hys, hxs = np.nonzero(hull)
        errs.append(err)
        disps.append(np.hypot(xs.mean() - hxs.mean(), ys.mean() - hys.mean()))
    assert _spearman(np.asarray(errs), np.asarray(disps)) > 0.9


def test_exact_inverse_zeroes_corner_error():
    # a sample rendered with no camera perturbation, corrected by the
    # exact inverse of its synthetic warp, lands back on the gt corners
    cfg = cubes.CubesConfig(
        resolution=(32, 32), pos_range=0.0, yaw_pitch_range_deg=0.0,
        roll_range_deg=0.0,
    )
    pair, _, _, _ = cubes.generate_sample(5, 0, cfg)
    frame = lie.FrameMap(width=32, height=32)
    rng = np.random.default_rng(8)
    p0 = rng.normal(0, 0.1, 8)
    state = lie.compose(p0, lie.invert(p0))
    err, _ = metrics.corner_error(state, pair.fg_corners, pair.gt_corners, frame)
    assert err < 0.5
    base, _ = metrics.corner_error(p0, pair.fg_corners, pair.gt_corners, frame)
    assert base > err
