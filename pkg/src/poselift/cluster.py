"""Lloyd's k-means with k-means++ seeding."""

from __future__ import annotations

import numpy as np

from .errors import TooFewPoints
from .rng import make_rng

MAX_ITER = 300


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances."""
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # All remaining points coincide with a center; any choice works.
            centers[i] = points[rng.integers(n)]
            continue
        probs = closest / total
        centers[i] = points[rng.choice(n, p=probs)]
        closest = np.minimum(closest, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def kmeans(
    points,
    k: int,
    seed: int,
    max_iter: int = MAX_ITER,
    return_history: bool = False,
):
    """Cluster points (n, d) into k centers.

    Runs Lloyd iterations from a k-means++ seeding until the assignment
    reaches a fixpoint or ``max_iter`` passes. A cluster that loses all
    its points is re-seeded to the point farthest from its assigned
    center. Deterministic given ``seed``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2D array (n, d)")
    n = pts.shape[0]
    if n < k:
        raise TooFewPoints(f"need at least {k} points, got {n}")
    rng = make_rng(seed)
    centers = _plusplus_init(pts, k, rng)

    history: list[float] = []
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = _squared_distances(pts, centers)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for i in range(k):
            mask = labels == i
            if mask.any():
                centers[i] = pts[mask].mean(axis=0)
            else:
                worst = d2[np.arange(n), labels].argmax()
                centers[i] = pts[worst]
    if return_history:
        return centers, history
    return centers
