"""Image and geometry accuracy metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _nearest(src, dst):
    dist, idx = cKDTree(dst).query(src)
    return dist, idx


def chamfer_distance(points_a, points_b) -> float:
    """Mean of the two directed mean nearest-neighbor distances."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        raise ValueError("chamfer distance needs non-empty point sets")
    return 0.5 * (_nearest(a, b)[0].mean() + _nearest(b, a)[0].mean())


def normal_angle(points_a, normals_a, points_b, normals_b) -> float:
    """Mean angle in degrees between normals of nearest-neighbor pairs, both directions."""
    pa = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    pb = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    na = np.asarray(normals_a, dtype=np.float64).reshape(-1, 3)
    nb = np.asarray(normals_b, dtype=np.float64).reshape(-1, 3)

    def directed(p, n, q, m):
        _, idx = _nearest(p, q)
        cos = np.clip((n * m[idx]).sum(-1), -1.0, 1.0)
        return np.degrees(np.arccos(cos)).mean()

    return 0.5 * (directed(pa, na, pb, nb) + directed(pb, nb, pa, na))


def sample_mesh(vertices, faces, count: int, seed: int = 0):
    """Area-uniform surface points and face normals of a triangle mesh."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if not len(f):
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cross = np.cross(b - a, c - a)
    area = 0.5 * np.linalg.norm(cross, axis=-1)
    tri = rng.choice(len(f), size=count, p=area / area.sum())
    u, w = rng.random(count), rng.random(count)
    flip = u + w > 1.0
    u[flip], w[flip] = 1.0 - u[flip], 1.0 - w[flip]
    pts = a[tri] + u[:, None] * (b[tri] - a[tri]) + w[:, None] * (c[tri] - a[tri])
    normals = cross[tri] / np.maximum(np.linalg.norm(cross[tri], axis=-1, keepdims=True), 1e-20)
    return pts, normals


def material_mae(predicted, target):
    """Mean absolute error over pixels where ``target`` is not the -1 background marker."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    mask = t[..., 0] >= 0.0
    if not mask.any():
        return math.nan
    return float(np.abs(p[mask] - t[mask]).mean())
