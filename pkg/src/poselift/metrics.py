"""Pose error metrics: Procrustes-aligned MPJPE and PCK curves.

Every frame is aligned to its reference with one similarity transform
over all 29 points; per-group errors are read from that single joint
alignment (reports flag this choice).
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyBatch, ShapeMismatch
from .geometry import NUM_HAND_JOINTS, procrustes_align

GROUPS = ("all", "hand", "object", "wrist")


def _group_indices(group: str, n_points: int, point_mask=None) -> np.ndarray:
    if point_mask is not None:
        idx = np.flatnonzero(np.asarray(point_mask, dtype=bool))
        if idx.size == 0:
            raise EmptyBatch("point mask selects no points")
        return idx
    if group == "all":
        return np.arange(n_points)
    if group == "hand":
        return np.arange(NUM_HAND_JOINTS)
    if group == "object":
        return np.arange(NUM_HAND_JOINTS, n_points)
    if group == "wrist":
        return np.array([0])
    raise ValueError(f"unknown group {group!r}; expected one of {GROUPS}")


def _as_batches(estimates, references) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(estimates, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    if est.ndim == 2:
        est, ref = est[None], ref[None]
    if est.shape != ref.shape or est.ndim != 3 or est.shape[-1] != 3:
        raise ShapeMismatch(
            f"estimates {est.shape} and references {ref.shape} must both be (n, p, 3)"
        )
    if est.shape[0] == 0:
        raise EmptyBatch("no frames to evaluate")
    return est, ref


def aligned_errors(estimates, references, group: str = "all",
                   point_mask=None) -> np.ndarray:
    """Per-keypoint Euclidean errors (frames, group size) after alignment."""
    est, ref = _as_batches(estimates, references)
    idx = _group_indices(group, est.shape[1], point_mask)
    out = np.empty((est.shape[0], idx.size))
    for i in range(est.shape[0]):
        aligned = procrustes_align(est[i], ref[i])
        out[i] = np.linalg.norm(aligned[idx] - ref[i][idx], axis=1)
    return out


def mpjpe(estimates, references, group: str = "all", point_mask=None) -> float:
    """Mean per-joint position error (mm) after joint Procrustes alignment."""
    return float(aligned_errors(estimates, references, group, point_mask).mean())


def pck_curve(estimates, references, thresholds, group: str = "all",
              point_mask=None) -> np.ndarray:
    """Fraction of aligned keypoint errors at or below each threshold."""
    errors = aligned_errors(estimates, references, group, point_mask).ravel()
    t = np.asarray(thresholds, dtype=np.float64)
    if t.size == 0:
        raise EmptyBatch("no thresholds given")
    return (errors[None, :] <= t[:, None]).mean(axis=1)


DEFAULT_PCK_THRESHOLDS = np.arange(0.0, 51.0, 1.0)
