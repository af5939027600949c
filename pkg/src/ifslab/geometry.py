"""Point clouds, metric computations, and synthetic dataset generators.

A :class:`PointCloud` is a finite weighted point set in R^d.  It doubles as
an empirical probability measure (weights sum to one) and as a compact-set
approximation for Hausdorff-distance work, so the same container feeds both
the optimal-transport machinery and the set-valued fractal iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatchError

_WEIGHT_TOL = 1e-9

# target scratch size (floats) for chunked distance scans
_CHUNK_BUDGET = 4_000_000


@dataclass(frozen=True)
class PointCloud:
    """Weighted point set in R^d; weights are a probability vector."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        # defensive copies: the cloud freezes its arrays without touching inputs
        pts = np.array(self.points, dtype=np.float64, order="C", copy=True)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ConfigError("points must be an (n, d) array with n >= 1 and d >= 1")
        if not np.all(np.isfinite(pts)):
            raise ConfigError("points must be finite")
        w = np.array(self.weights, dtype=np.float64, order="C", copy=True)
        if w.shape != (pts.shape[0],):
            raise ConfigError("need exactly one weight per point")
        if np.any(w < 0.0):
            raise ConfigError("weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
            raise ConfigError(f"weights must sum to 1 within {_WEIGHT_TOL:g}, got {w.sum()!r}")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_points(cls, points) -> "PointCloud":
        """Uniform-weight cloud over the given points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = pts.shape[0]
        if n == 0:
            raise ConfigError("a point cloud needs at least one point")
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n, rtol=0.0, atol=1e-12))

    def subsample(self, k: int, rng: np.random.Generator) -> "PointCloud":
        """k-point empirical subsample (without replacement when uniform)."""
        if k < 1:
            raise ConfigError("subsample size must be >= 1")
        if self.is_uniform() and k <= self.n:
            idx = rng.choice(self.n, size=k, replace=False)
        else:
            idx = rng.choice(self.n, size=k, replace=True, p=self.weights)
        return PointCloud.from_points(self.points[idx])

    def to_csv(self, path) -> None:
        """CSV serialization: header ``x0,...,x{d-1},w``, one row per point."""
        cols = [f"x{i}" for i in range(self.dim)] + ["w"]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(cols) + "\n")
            for p, w in zip(self.points, self.weights):
                fh.write(",".join(f"{v:.17g}" for v in p) + f",{w:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "PointCloud":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if header[-1] != "w" or any(h != f"x{i}" for i, h in enumerate(header[:-1])):
                raise ConfigError(f"bad point-cloud CSV header: {header}")
            rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
        arr = np.asarray(rows, dtype=np.float64)
        return cls(arr[:, :-1], arr[:, -1])


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of a synthetic dataset draw."""

    kind: str
    n: int
    noise: float = 0.0
    radius: float = 1.0
    seed: int = 0

    KINDS = ("two_moons", "sierpinski_vertices", "gaussian_mixture", "cantor_endpoints")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unsupported dataset kind {self.kind!r}; choose from {self.KINDS}")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.radius <= 0:
            raise ConfigError("radius must be > 0")


def generate(spec: DatasetSpec) -> PointCloud:
    """Draw the dataset described by ``spec``; deterministic given the seed."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "two_moons":
        pts = _two_moons(spec.n, spec.radius)
    elif spec.kind == "sierpinski_vertices":
        pts = _sierpinski_vertices(spec.n, spec.radius)
    elif spec.kind == "gaussian_mixture":
        # two equal components at (+-radius, 0); per-component std == noise
        comp = rng.integers(0, 2, size=spec.n)
        pts = np.zeros((spec.n, 2))
        pts[:, 0] = np.where(comp == 0, -spec.radius, spec.radius)
        return PointCloud.from_points(pts + spec.noise * rng.standard_normal(pts.shape))
    elif spec.kind == "cantor_endpoints":
        pts = _cantor_endpoints(spec.n, spec.radius, rng)
    else:  # pragma: no cover - guarded by DatasetSpec
        raise ConfigError(spec.kind)
    if spec.noise > 0:
        pts = pts + spec.noise * rng.standard_normal(pts.shape)
    return PointCloud.from_points(pts)


def two_moons_centers(radius: float) -> np.ndarray:
    """Centers of the two half-circles of the moons layout."""
    return np.array([[0.0, 0.0], [radius, radius / 2.0]])


def _two_moons(n: int, radius: float) -> np.ndarray:
    # upper half-circle at the origin; lower half-circle flipped and offset by
    # (radius, radius/2), the usual interleaved layout
    n_up = n - n // 2
    n_lo = n // 2
    t_up = np.linspace(0.0, math.pi, n_up)
    upper = radius * np.stack([np.cos(t_up), np.sin(t_up)], axis=1)
    if n_lo == 0:
        return upper
    t_lo = np.linspace(0.0, math.pi, n_lo)
    lower = np.stack(
        [radius - radius * np.cos(t_lo), radius / 2.0 - radius * np.sin(t_lo)], axis=1
    )
    return np.concatenate([upper, lower], axis=0)


def _sierpinski_vertices(n: int, radius: float) -> np.ndarray:
    verts = radius * np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]])
    return verts[np.arange(n) % 3]


def _cantor_endpoints(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    # endpoints of the level-k middle-thirds construction, k minimal with
    # 2^(k+1) >= n; subsampled uniformly when there are more than n
    k = 1
    while 2 ** (k + 1) < n:
        k += 1
    lefts = np.zeros(1)
    for _ in range(k):
        lefts = np.concatenate([lefts / 3.0, lefts / 3.0 + 2.0 / 3.0])
    pts = np.sort(np.unique(np.concatenate([lefts, lefts + 3.0 ** (-k)])))
    if pts.size > n:
        idx = np.sort(rng.choice(pts.size, size=n, replace=False))
        pts = pts[idx]
    return (radius * pts)[:, None]


def _check_dims(a: PointCloud, b: PointCloud) -> None:
    if a.dim != b.dim:
        raise DimensionMismatchError(f"dimension mismatch: {a.dim} vs {b.dim}")


def pairwise_sq_dists(a: PointCloud, b: PointCloud) -> np.ndarray:
    """Full matrix C[i, j] = ||a_i - b_j||^2."""
    _check_dims(a, b)
    diff = a.points[:, None, :] - b.points[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _directed_sq_hausdorff(x: np.ndarray, y: np.ndarray) -> float:
    """max over x of min over y of squared distance, chunked over rows of x."""
    m, d = y.shape
    chunk = max(1, _CHUNK_BUDGET // (m * d))
    worst = 0.0
    for s in range(0, x.shape[0], chunk):
        diff = x[s : s + chunk, None, :] - y[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        worst = max(worst, float(sq.min(axis=1).max()))
    return worst


def hausdorff_distance(a: PointCloud, b: PointCloud) -> float:
    """Hausdorff distance between the realized point sets (weights ignored)."""
    _check_dims(a, b)
    fwd = _directed_sq_hausdorff(a.points, b.points)
    bwd = _directed_sq_hausdorff(b.points, a.points)
    return math.sqrt(max(fwd, bwd))
