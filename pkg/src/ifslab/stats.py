"""Cloud statistics used by reports and ablation checks."""
from __future__ import annotations

import numpy as np

from .geometry import PointCloud


def mean_pairwise_distance(points, cap: int = 2048, seed: int = 0) -> float:
    """Spread statistic: mean distance over all pairs (subsampled above cap)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] > cap:
        rng = np.random.default_rng(seed)
        pts = pts[rng.choice(pts.shape[0], size=cap, replace=False)]
    n = pts.shape[0]
    if n < 2:
        return 0.0
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return float(d[np.triu_indices(n, k=1)].mean())


def cloud_spread(cloud: PointCloud, cap: int = 2048, seed: int = 0) -> float:
    return mean_pairwise_distance(cloud.points, cap=cap, seed=seed)


def box_counting_dimension(points, levels=(3, 4, 5, 6, 7)) -> float:
    """Box-count slope over dyadic scales 2^-k of the bounding-box side."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo = pts.min(axis=0)
    side = float((pts.max(axis=0) - lo).max())
    if side == 0.0:
        return 0.0
    counts = []
    for k in levels:
        s = side / (2 ** k)
        cells = np.floor((pts - lo) / s).astype(np.int64)
        counts.append(len({tuple(c) for c in cells}))
    x = np.log([2.0 ** k for k in levels])
    y = np.log(counts)
    slope = np.polyfit(x, y, 1)[0]
    return float(slope)


def angular_occupancy(points, bins: int = 60, min_radius_frac: float = 0.05,
                      min_mass: float = 0.02) -> float:
    """Fraction of angular bins (around the origin) carrying real mass.

    Ray- or cone-shaped 2D sets occupy few bins; a collapsed set (all points
    near the origin) scores 0.  Spread-out data like the moons occupies most
    of the circle.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != 2:
        raise ValueError("angular occupancy is a 2-D statistic")
    r = np.linalg.norm(pts, axis=1)
    if r.max() == 0.0:
        return 0.0
    keep = r > min_radius_frac * r.max()
    if keep.sum() == 0:
        return 0.0
    ang = np.arctan2(pts[keep, 1], pts[keep, 0])
    hist, _ = np.histogram(ang, bins=bins, range=(-np.pi, np.pi))
    frac = hist / keep.sum()
    return float((frac >= min_mass).sum() / bins)


def radial_profile(points) -> dict:
    """Radial vs tangential second moments about the origin (2-D)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    r = np.linalg.norm(pts, axis=1)
    keep = r > 1e-12
    if keep.sum() == 0:
        return {"radial_var": 0.0, "tangential_var": 0.0}
    u = pts[keep] / r[keep, None]
    rad = r[keep]
    tang = pts[keep][:, 0] * (-u[:, 1]) + pts[keep][:, 1] * u[:, 0]
    return {"radial_var": float(rad.var()), "tangential_var": float(tang.var())}


def spearman_rank_correlation(x, y) -> float:
    """Spearman rho without ties handling beyond averaging (small samples)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rx = np.argsort(np.argsort(x)).astype(np.float64)
    ry = np.argsort(np.argsort(y)).astype(np.float64)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0
