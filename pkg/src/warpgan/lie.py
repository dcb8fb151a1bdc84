"""Homography parameterization in the sl(3) Lie algebra.

A warp parameter vector ``p`` is a numpy array of shape (8,).  Its
generator matrix is traceless, so the exponential map always lands on a
unit-determinant homography.  Warps compose by adding parameter vectors
and invert by negation; both operations stay in the algebra, which is
what makes iterative correction schemes well behaved (no drift of the
determinant, no renormalization step).

All functions here are float64 and operate on points in a canonical
frame where the image spans [-1, 1] on both axes.  :class:`FrameMap`
carries a homography into a concrete pixel grid and back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, PointAtInfinity, ShapeMismatch

__all__ = [
    "EXP_ORDER",
    "FrameMap",
    "PointAtInfinity",
    "compose",
    "exp_sl3",
    "fit_params",
    "generator_matrix",
    "identity_params",
    "invert",
    "similarity_params",
    "to_canonical_frame",
    "to_image_frame",
    "warp_points",
]

# Division threshold below which a projected point is treated as escaping
# to infinity.  Generous for float64 but far beyond anything a sane warp
# of the unit square produces.
_HORIZON_EPS = 1e-12

EXP_ORDER = 20


def identity_params() -> np.ndarray:
    """The parameter vector of the identity warp."""
    return np.zeros(8, dtype=np.float64)


def generator_matrix(p) -> np.ndarray:
    """Embed a parameter 8-vector into its traceless 3x3 generator.

    Layout: row one holds (p1, p2, p3), row two (p4, -p1-p8, p5), row
    three (p6, p7, p8).  The (1,1) entry is determined by the other two
    diagonal entries so the trace vanishes identically.

    Parameters
    ----------
    p : array_like, shape (8,)

    Returns
    -------
    np.ndarray, shape (3, 3), float64
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (8,):
        raise DimensionMismatch(f"expected parameter vector of shape (8,), got {p.shape}")
    return np.array(
        [
            [p[0], p[1], p[2]],
            [p[3], -p[0] - p[7], p[4]],
            [p[5], p[6], p[7]],
        ],
        dtype=np.float64,
    )


def exp_sl3(p, order: int = EXP_ORDER) -> np.ndarray:
    """Matrix exponential of the generator of ``p`` by truncated power series.

    A fixed-order Taylor sum (default order 20) evaluated in float64.
    For the parameter magnitudes this system works with (well inside the
    unit ball) the truncation error sits at the bottom of the float64
    mantissa; see the test suite for cross-validation against a
    scaling-and-squaring oracle.

    Parameters
    ----------
    p : array_like, shape (8,)
    order : int
        Highest power of the generator included in the sum.

    Returns
    -------
    np.ndarray, shape (3, 3)
        Homography with determinant 1 (up to roundoff).
    """
    X = generator_matrix(p)
    H = np.eye(3, dtype=np.float64)
    term = np.eye(3, dtype=np.float64)
    for k in range(1, order + 1):
        term = term @ X / k
        H = H + term
    return H


def compose(pa, pb) -> np.ndarray:
    """Composition of two warps, expressed in the algebra.

    By convention the composite parameter vector is the sum.  This is
    the group product along the one-parameter subgroup structure the
    update scheme relies on: corrections accumulate additively and the
    accumulated state never leaves sl(3).
    """
    pa = np.asarray(pa, dtype=np.float64)
    pb = np.asarray(pb, dtype=np.float64)
    if pa.shape != (8,) or pb.shape != (8,):
        raise DimensionMismatch(f"expected shapes (8,), got {pa.shape} and {pb.shape}")
    return pa + pb


def invert(p) -> np.ndarray:
    """Inverse warp: negate the parameter vector (exp(-X) = exp(X)^-1)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (8,):
        raise DimensionMismatch(f"expected parameter vector of shape (8,), got {p.shape}")
    return -p


def warp_points(H, pts) -> np.ndarray:
    """Apply a homography to 2-D points.

    Parameters
    ----------
    H : array_like, shape (3, 3)
    pts : array_like, shape (N, 2)

    Returns
    -------
    np.ndarray, shape (N, 2)

    Raises
    ------
    PointAtInfinity
        If any point's homogeneous divisor falls below 1e-12 in
        magnitude.
    """
    H = np.asarray(H, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    if H.shape != (3, 3):
        raise ShapeMismatch(f"expected homography of shape (3, 3), got {H.shape}")
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeMismatch(f"expected points of shape (N, 2), got {pts.shape}")
    ones = np.ones((pts.shape[0], 1), dtype=np.float64)
    xyw = np.concatenate([pts, ones], axis=1) @ H.T
    den = xyw[:, 2]
    if np.any(np.abs(den) < _HORIZON_EPS):
        bad = int(np.argmin(np.abs(den)))
        raise PointAtInfinity(
            f"point {pts[bad]} maps to homogeneous divisor {den[bad]:.3e}"
        )
    return xyw[:, :2] / den[:, None]


@dataclass(frozen=True)
class FrameMap:
    """Affine change of frame between canonical [-1, 1]^2 and a pixel grid.

    Pixel centers sit at integer coordinates; the canonical square is
    pinned to the outer pixel *edges*, so canonical x = -1 is pixel
    x = -0.5 and canonical x = +1 is pixel x = width - 0.5.  Non-square
    rasters map anisotropically (the canonical frame is always the full
    square).
    """

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"degenerate frame {self.width}x{self.height}")

    @property
    def canonical_to_pixel(self) -> np.ndarray:
        w, h = float(self.width), float(self.height)
        return np.array(
            [
                [w / 2.0, 0.0, w / 2.0 - 0.5],
                [0.0, h / 2.0, h / 2.0 - 0.5],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )

    @property
    def pixel_to_canonical(self) -> np.ndarray:
        w, h = float(self.width), float(self.height)
        return np.array(
            [
                [2.0 / w, 0.0, (1.0 - w) / w],
                [0.0, 2.0 / h, (1.0 - h) / h],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )

    def to_pixel(self, pts) -> np.ndarray:
        """Map canonical-frame points (N, 2) to pixel coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        half = np.array([self.width / 2.0, self.height / 2.0])
        off = np.array([self.width / 2.0 - 0.5, self.height / 2.0 - 0.5])
        return pts * half + off

    def to_canonical(self, pts) -> np.ndarray:
        """Map pixel-frame points (N, 2) to canonical coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        half = np.array([self.width / 2.0, self.height / 2.0])
        off = np.array([self.width / 2.0 - 0.5, self.height / 2.0 - 0.5])
        return (pts - off) / half


def to_image_frame(H, frame: FrameMap) -> np.ndarray:
    """Conjugate a canonical-frame homography into pixel coordinates."""
    T = frame.canonical_to_pixel
    return T @ np.asarray(H, dtype=np.float64) @ frame.pixel_to_canonical


def to_canonical_frame(H_pix, frame: FrameMap) -> np.ndarray:
    """Conjugate a pixel-frame homography back to the canonical frame."""
    T_inv = frame.pixel_to_canonical
    return T_inv @ np.asarray(H_pix, dtype=np.float64) @ frame.canonical_to_pixel


def fit_params(src, dst, frame: FrameMap = None, iters: int = 25) -> np.ndarray:
    """Parameter vector whose warp best maps ``src`` points onto ``dst``.

    Minimizes the summed squared point distances by damped Gauss-Newton
    with a central-difference Jacobian, starting from the identity.
    With a ``frame`` the points are pixel coordinates and the warp is
    conjugated through it (matching how warps act on rasters); without
    one everything is canonical.

    Parameters
    ----------
    src, dst : array_like, shape (N, 2)
        Matching point sets, N >= 4.
    frame : FrameMap, optional
    iters : int
        Gauss-Newton iteration budget.

    Returns
    -------
    np.ndarray, shape (8,)
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ShapeMismatch(
            f"expected matching (N, 2) point sets, got {src.shape} and {dst.shape}"
        )
    if src.shape[0] < 4:
        raise ShapeMismatch(f"need at least 4 point pairs, got {src.shape[0]}")

    def residual(p):
        H = exp_sl3(p)
        if frame is not None:
            H = to_image_frame(H, frame)
        return (warp_points(H, src) - dst).ravel()

    p = identity_params()
    eps = 1e-6
    lam = 1e-8  # Levenberg damping, backed off on accepted steps
    r = residual(p)
    for _ in range(iters):
        J = np.empty((r.size, 8))
        for j in range(8):
            d = np.zeros(8)
            d[j] = eps
            J[:, j] = (residual(p + d) - residual(p - d)) / (2.0 * eps)
        A = J.T @ J + lam * np.eye(8)
        step = np.linalg.solve(A, J.T @ r)
        p_new = p - step
        r_new = residual(p_new)
        if r_new @ r_new < r @ r:
            p, r = p_new, r_new
            lam = max(lam * 0.3, 1e-10)
        else:
            lam *= 10.0
        if np.linalg.norm(step) < 1e-12:
            break
    return p


def similarity_params(scale: float, tx: float = 0.0, ty: float = 0.0) -> np.ndarray:
    """Parameter vector whose warp is a canonical-frame scale-and-translate.

    Solves exp(X(p)) propto [[s, 0, tx], [0, s, ty], [0, 0, 1]] in closed
    form.  Unit-determinant representatives of similarities have diagonal
    (s^(1/3), s^(1/3), s^(-2/3)); with a = ln(s)/3 the off-diagonal
    translation block integrates to t * (e^a - e^(-2a)) / (3a), so the
    algebra-side translation is the target divided by that factor.

    Parameters
    ----------
    scale : float
        Isotropic scale, must be positive.
    tx, ty : float
        Canonical-frame translation of the image center.
    """
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    a = np.log(scale) / 3.0
    if abs(a) < 1e-9:
        phi = 1.0 - 0.5 * a  # leading Taylor terms of (e^a - e^(-2a)) / (3a)
    else:
        phi = (np.exp(a) - np.exp(-2.0 * a)) / (3.0 * a)
    s23 = scale ** (-2.0 / 3.0)  # normalizer taking the similarity to det 1
    p = identity_params()
    p[0] = a
    p[7] = -2.0 * a
    p[2] = tx * s23 / phi
    p[4] = ty * s23 / phi
    return p
