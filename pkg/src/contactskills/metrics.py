"""Task success metrics.

Pure functions over final surfaces and executed tip paths; every method in
the comparison is graded by exactly these, nothing method-specific.
"""

from __future__ import annotations

import numpy as np

GRID_CELLS = 64 * 64
CLEANING_BOUND = 0.05  # strict upper bound on remaining particle fraction
PEELING_BAND = 0.10  # relative tolerance on the peel ratio
SD_FLOOR = 0.002  # m; keeps the 2-SD writing rule meaningful for tight demos


def resample_path(points, n=100):
    """Resample a polyline to n points uniformly spaced by arc length."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("path needs at least 2 points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0.0:
        return np.repeat(pts[:1], n, axis=0)
    t = np.linspace(0.0, s[-1], n)
    out = np.empty((n, pts.shape[1]))
    for k in range(pts.shape[1]):
        out[:, k] = np.interp(t, s, pts[:, k])
    return out


def mean_trajectory_stats(demo_paths, n=100):
    """Per-waypoint mean and SD across arc-length-resampled demo paths."""
    stacked = np.stack([resample_path(p, n) for p in demo_paths])
    mean = stacked.mean(axis=0)
    sd = np.linalg.norm(stacked - mean, axis=2).std(axis=0) if len(stacked) > 1 \
        else np.zeros(n)
    return mean, np.maximum(sd, SD_FLOOR)


def success_writing(executed_path, demo_paths, n=100):
    """True iff every resampled waypoint lies within 2 SD of the demo mean.

    The bound is closed (distance exactly 2 SD passes) and SD is floored at
    2 mm so near-identical demos do not make the rule vacuous.
    """
    executed_path = np.asarray(executed_path, dtype=float)
    if executed_path.ndim != 2 or len(executed_path) < 2:
        return False
    mean, sd = mean_trajectory_stats(demo_paths, n)
    exe = resample_path(executed_path[:, :2], n)
    dist = np.linalg.norm(exe - mean[:, :2], axis=1)
    return bool(np.all(dist <= 2.0 * sd))


def success_cleaning(surface):
    """True iff remaining particle fraction is strictly below 0.05."""
    return surface.count() / GRID_CELLS < CLEANING_BOUND


def peel_ratio(surface):
    """Peeled-to-unpeeled cell ratio; +inf when nothing remains unpeeled."""
    peeled = surface.peeled_count()
    unpeeled = surface.count()
    if unpeeled == 0:
        return np.inf
    return peeled / unpeeled


def success_peeling(surface, reference_ratio):
    """True iff the peel ratio is within 10% of the demo reference and the
    object is undamaged. Infinite ratios match only infinite references."""
    if surface.damaged:
        return False
    ratio = peel_ratio(surface)
    if np.isinf(reference_ratio) or np.isinf(ratio):
        return bool(np.isinf(reference_ratio) and np.isinf(ratio))
    return bool(abs(ratio - reference_ratio) <= PEELING_BAND * reference_ratio)
