"""Thin-plate-spline warps and bilinear image resampling.

Coordinates are ``(x, y)`` in pixel units with pixel centers on the integer
grid, ``x`` along columns and ``y`` along rows.  A :class:`TpsWarp` maps a
point ``q`` to a displacement ``f(q)``.

Warping convention: :func:`backward_warp` fills output pixel ``q`` by sampling
the input at ``q + f(q)``, so it expects the *reverse* map (output to source).
:func:`reverse_warp_params` converts forward constraints ``(c_i, d_i)``, which
move content at ``c_i`` by ``d_i``, into reverse constraints
``(c_i + d_i, -d_i)``.  :func:`forward_splat` scatters source pixel ``q`` to
``q + f(q)`` and therefore expects the forward map; splatting with a reverse
map undoes a backward warp with the same map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import autodiff as ad

# Sample positions are rounded to this grid so integer and half-pixel shifts
# produce exact bilinear weights despite ~1e-16 noise in the fitted warp.
POSITION_QUANTUM = 2.0**-24
SPLAT_MIN_WEIGHT = 1e-6


class TpsError(ValueError):
    """Raised when the TPS interpolation system is singular."""


def tps_kernel(r: np.ndarray) -> np.ndarray:
    """phi(r) = r^2 ln r with phi(0) = 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


@dataclass(frozen=True)
class TpsWarp:
    control_points: np.ndarray  # (n, 2)
    affine: np.ndarray  # (2, 3), columns act on [1, x, y]
    coeffs: np.ndarray  # (2, n)

    def __call__(self, q) -> np.ndarray:
        return eval_tps(self, q)

    def field(self, height: int, width: int) -> "WarpField":
        ys, xs = np.mgrid[0:height, 0:width]
        q = np.stack([xs, ys], axis=-1).astype(np.float64)
        return WarpField(height, width, eval_tps(self, q))


@dataclass(frozen=True)
class WarpField:
    height: int
    width: int
    displacement: np.ndarray  # (H, W, 2) as (dx, dy)


@dataclass(frozen=True)
class GeometricParams:
    """Four control-point displacements for the quadrant-centre layout."""

    displacements: np.ndarray  # (4, 2)
    height: int
    width: int

    def __post_init__(self):
        d = np.asarray(self.displacements, dtype=np.float64)
        if d.shape != (4, 2):
            raise ValueError(f"expected 4 displacements of shape (4, 2), got {d.shape}")
        object.__setattr__(self, "displacements", d)

    @classmethod
    def identity(cls, height: int, width: int) -> "GeometricParams":
        return cls(np.zeros((4, 2)), height, width)

    @property
    def is_identity(self) -> bool:
        return not np.any(self.displacements)

    def warp(self) -> TpsWarp:
        """Reverse map for :func:`backward_warp`: content at ``c'_i - d_i`` lands on ``c'_i``."""
        return fit_tps(quadrant_centers(self.height, self.width), -self.displacements)

    def to_dict(self) -> dict:
        return {"displacements": self.displacements.tolist(), "height": self.height, "width": self.width}


def quadrant_centers(height: int, width: int) -> np.ndarray:
    """Centres of the four image quadrants as (x, y)."""
    xs = (width / 4, 3 * width / 4)
    ys = (height / 4, 3 * height / 4)
    return np.array([(x, y) for y in ys for x in xs], dtype=np.float64)


def fit_tps(control_points, displacements) -> TpsWarp:
    """Fit the minimum-bending-energy warp with ``f(c_i) = d_i``.

    Solves the standard (n+3)x(n+3) system ``[[K, P], [P^T, 0]]`` once per
    output coordinate with a partial-pivot LU factorization.
    """
    c = np.asarray(control_points, dtype=np.float64)
    d = np.asarray(displacements, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2 or d.shape != c.shape:
        raise ValueError(f"control points {c.shape} and displacements {d.shape} must both be (n, 2)")
    n = c.shape[0]
    if n < 3:
        raise TpsError(f"need at least 3 control points, got {n}")
    dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    scale = max(float(dist.max()), 1.0)
    if np.any(dist[np.triu_indices(n, 1)] <= 1e-12 * scale):
        raise TpsError("coincident control points")
    p = np.hstack([np.ones((n, 1)), c])
    if np.linalg.matrix_rank(p - p.mean(axis=0) * [0, 1, 1], tol=1e-9 * scale) < 3:
        raise TpsError("control points are collinear")
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = tps_kernel(dist)
    system[:n, n:] = p
    system[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = d
    lu, piv = scipy.linalg.lu_factor(system, check_finite=True)
    if np.min(np.abs(np.diag(lu))) <= 1e-14 * np.max(np.abs(np.diag(lu))):
        raise TpsError("singular TPS system")
    sol = scipy.linalg.lu_solve((lu, piv), rhs)
    return TpsWarp(control_points=c.copy(), affine=sol[n:].T.copy(), coeffs=sol[:n].T.copy())


def eval_tps(warp: TpsWarp, q) -> np.ndarray:
    """Displacement ``A [1; q] + W [phi(|q - c_i|)]`` at points ``q`` of shape (..., 2)."""
    q = np.asarray(q, dtype=np.float64)
    r = np.linalg.norm(q[..., None, :] - warp.control_points, axis=-1)
    a = warp.affine
    out = a[:, 0] + q[..., 0:1] * a[:, 1] + q[..., 1:2] * a[:, 2]
    return out + tps_kernel(r) @ warp.coeffs.T


def reverse_warp_params(control_points, displacements) -> tuple[np.ndarray, np.ndarray]:
    """Constraints of the reverse map: ``(c_i + d_i, -d_i)``."""
    c = np.asarray(control_points, dtype=np.float64)
    d = np.asarray(displacements, dtype=np.float64)
    return c + d, -d


# ---------------------------------------------------------------------------
# bilinear sampling


@dataclass(frozen=True)
class BilinearTaps:
    """Flat source indices and weights of the four bilinear neighbours per output pixel.

    Taps falling outside the image carry index 0 and weight 0.
    """

    index: np.ndarray  # (4, K) int
    weights: np.ndarray  # (4, K)
    valid: np.ndarray  # (K,) bool: every contributing tap is inside the image
    height: int
    width: int


def _quantize(p: np.ndarray) -> np.ndarray:
    return np.round(p / POSITION_QUANTUM) * POSITION_QUANTUM


def bilinear_taps(positions: np.ndarray, height: int, width: int) -> BilinearTaps:
    """Bilinear taps for sample ``positions`` (..., 2) in an image of the given size."""
    p = _quantize(np.asarray(positions, dtype=np.float64).reshape(-1, 2))
    x0 = np.floor(p[:, 0])
    y0 = np.floor(p[:, 1])
    fx = p[:, 0] - x0
    fy = p[:, 1] - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    index = np.zeros((4, p.shape[0]), dtype=np.int64)
    weights = np.zeros((4, p.shape[0]))
    valid = np.ones(p.shape[0], dtype=bool)
    for j, (ox, oy) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
        xi, yi = x0 + ox, y0 + oy
        w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy)
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        valid &= inside | (w == 0)
        index[j] = np.where(inside, yi * width + xi, 0)
        weights[j] = np.where(inside, w, 0.0)
    return BilinearTaps(index, weights, valid, height, width)


def backward_taps(warp: TpsWarp | WarpField, height: int, width: int) -> BilinearTaps:
    field = warp if isinstance(warp, WarpField) else warp.field(height, width)
    ys, xs = np.mgrid[0:height, 0:width]
    q = np.stack([xs, ys], axis=-1).astype(np.float64)
    return bilinear_taps(q + field.displacement, height, width)


def apply_taps(image: np.ndarray, taps: BilinearTaps) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    flat = img.reshape(taps.height * taps.width, -1)
    out = np.zeros((taps.index.shape[1], flat.shape[1]))
    for j in range(4):
        out += taps.weights[j][:, None] * flat[taps.index[j]]
    return out.reshape(img.shape)


def backward_warp(image, warp: TpsWarp | WarpField) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``image`` (H, W) or (H, W, C); return the warped image and its validity mask.

    Output pixel ``q`` is the bilinear sample of the input at ``q + f(q)``
    with zero padding outside the image.  The mask is 1 exactly where the
    warp of an all-ones image is 1, i.e. where no padding was blended in.
    """
    img = np.asarray(image, dtype=np.float64)
    taps = backward_taps(warp, img.shape[0], img.shape[1])
    mask = taps.valid.reshape(img.shape[0], img.shape[1]).astype(np.float64)
    return apply_taps(img, taps), mask


def backward_warp_tensor(batch: ad.Tensor, taps: list[BilinearTaps]) -> ad.Tensor:
    """Differentiable backward warp of an (N, H, W, C) tensor, one set of taps per image."""
    n, h, w, c = batch.shape
    if len(taps) != n:
        raise ValueError(f"got {len(taps)} tap sets for a batch of {n}")
    k = h * w
    index = np.concatenate([t.index + i * k for i, t in enumerate(taps)], axis=1)
    weights = np.concatenate([t.weights for t in taps], axis=1)
    flat = ad.reshape(batch, (n * k, c))
    return ad.reshape(ad.resample(flat, index, weights), (n, h, w, c))


def forward_splat(image, warp: TpsWarp | WarpField) -> tuple[np.ndarray, np.ndarray]:
    """Scatter each source pixel ``q`` bilinearly to ``q + f(q)``.

    Returns the weight-normalized image (zero where the accumulated weight is
    at most ``SPLAT_MIN_WEIGHT``) and the accumulated weight map.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    flat = img.reshape(h * w, -1)
    taps = backward_taps(warp, h, w)
    acc = np.zeros_like(flat)
    weight = np.zeros(h * w)
    for j in range(4):
        np.add.at(acc, taps.index[j], taps.weights[j][:, None] * flat)
        np.add.at(weight, taps.index[j], taps.weights[j])
    ok = weight > SPLAT_MIN_WEIGHT
    out = np.zeros_like(flat)
    out[ok] = acc[ok] / weight[ok, None]
    return out.reshape(img.shape), weight.reshape(h, w)


def sample_geometric(rng: np.random.Generator, height: int, width: int, r: float | None = None) -> GeometricParams:
    """Draw four displacements from N(0, r I) clipped coordinatewise to [-r, r].

    ``r`` defaults to 5% of the image height.
    """
    if r is None:
        r = 0.05 * height
    if r <= 0:
        raise ValueError(f"r must be positive, got {r}")
    d = rng.normal(0.0, np.sqrt(r), size=(4, 2))
    return GeometricParams(np.clip(d, -r, r), height, width)
