"""Coordinate frames, cylindrical pose vectors, and Procrustes alignment.

Conventions
-----------
A 3D pose is a float64 array of shape (m+8, 3) in millimeters, camera
coordinates: m hand joints (wrist, then thumb through pinky with 4 joints
each, proximal to tip) followed by the 8 object bounding-box corners.
2D poses are (m+8, 2) in pixels. m is 21 for real data; the loss and
transform code accepts any m >= 1.

Box corners use a fixed binary order: corner j lies in the octant whose
sign along axis i is given by bit i of j. Corner 0 is the (-x,-y,-z)
vertex, corner 7 is (+x,+y,+z); the edges from corner 0 to corners 1, 2
and 4 define the x', y' and z' directions of the object frame.

The cylindrical vector of a pose keeps only the hand joints. Each joint
contributes (radius, cos(angle), sin(angle), height) measured in the
object frame: radius is the distance to the z' axis, the angle is taken
from the x' axis, and height is the z' coordinate. Joints are flattened
joint-major into a vector of length 4m.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, DegeneratePose, ShapeMismatch

NUM_HAND_JOINTS = 21
NUM_CORNERS = 8
NUM_POINTS = NUM_HAND_JOINTS + NUM_CORNERS

# Radius below which the polar angle is undefined; (cos, sin) is pinned
# to (1, 0) there so the transform stays total.
AXIS_RADIUS = 1e-9

# Minimum edge length (mm) for a usable box frame.
MIN_EDGE = 1e-6

# Unit cube corners in canonical binary order, centered at the origin.
CANONICAL_CUBE = np.array(
    [[(j >> i & 1) - 0.5 for i in range(3)] for j in range(8)], dtype=np.float64
)

# Corner index pairs forming the 12 box edges (indices differing in one bit).
BOX_EDGES = tuple(
    (a, a | (1 << i))
    for a in range(8)
    for i in range(3)
    if not a & (1 << i)
)


@dataclass(frozen=True)
class ObjectFrame:
    """Object-centered Cartesian frame.

    origin: box center, mm, camera coordinates.
    axes: 3x3 rotation whose columns are the x', y', z' directions.
    """

    origin: np.ndarray
    axes: np.ndarray


def _as_points(points, cols: int, name: str) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != cols:
        raise ShapeMismatch(f"{name} must have shape (n, {cols}), got {arr.shape}")
    return arr


def object_frame_from_corners(corners) -> ObjectFrame:
    """Build the object frame from 8 box corners in canonical order.

    The origin is the corner centroid. Axis directions come from the
    edges corner0->corner1, corner0->corner2 and corner0->corner4,
    orthonormalized in that order (for an exact box this reduces to
    normalizing the edges); z' is flipped if needed so the frame is
    right-handed.
    """
    c = _as_points(corners, 3, "corners")
    if c.shape[0] != NUM_CORNERS:
        raise ShapeMismatch(f"expected 8 corners, got {c.shape[0]}")
    edges = np.stack([c[1] - c[0], c[2] - c[0], c[4] - c[0]])
    norms = np.linalg.norm(edges, axis=1)
    if np.any(norms < MIN_EDGE):
        raise DegenerateBox(f"box edge shorter than {MIN_EDGE} mm")

    axes = np.empty((3, 3))
    x = edges[0] / norms[0]
    y = edges[1] - (edges[1] @ x) * x
    ny = np.linalg.norm(y)
    if ny < MIN_EDGE:
        raise DegenerateBox("box edges are not linearly independent")
    y = y / ny
    z = edges[2] - (edges[2] @ x) * x - (edges[2] @ y) * y
    nz = np.linalg.norm(z)
    if nz < MIN_EDGE:
        raise DegenerateBox("box edges are not linearly independent")
    z = z / nz
    axes[:, 0], axes[:, 1], axes[:, 2] = x, y, z
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return ObjectFrame(origin=c.mean(axis=0), axes=axes)


def to_object_frame(points, frame: ObjectFrame) -> np.ndarray:
    """Map camera-frame point(s) into the object frame."""
    p = np.asarray(points, dtype=np.float64)
    return (p - frame.origin) @ frame.axes


def from_object_frame(points, frame: ObjectFrame) -> np.ndarray:
    """Inverse of :func:`to_object_frame`."""
    q = np.asarray(points, dtype=np.float64)
    return q @ frame.axes.T + frame.origin


def cyl_encode(pose3d, frame: ObjectFrame | None = None) -> np.ndarray:
    """Flatten the hand joints of a pose into a cylindrical vector.

    pose3d is (m+8, 3); the last 8 rows are box corners. If frame is
    None it is derived from the pose's own corners. Returns shape (4m,).
    """
    pose = _as_points(pose3d, 3, "pose3d")
    if pose.shape[0] <= NUM_CORNERS:
        raise ShapeMismatch("pose must contain hand joints plus 8 corners")
    if frame is None:
        frame = object_frame_from_corners(pose[-NUM_CORNERS:])
    q = to_object_frame(pose[: -NUM_CORNERS], frame)
    radius = np.hypot(q[:, 0], q[:, 1])
    on_axis = radius < AXIS_RADIUS
    safe = np.where(on_axis, 1.0, radius)
    cos_a = np.where(on_axis, 1.0, q[:, 0] / safe)
    sin_a = np.where(on_axis, 0.0, q[:, 1] / safe)
    return np.stack([radius, cos_a, sin_a, q[:, 2]], axis=1).ravel()


def cyl_decode(vec, frame: ObjectFrame) -> np.ndarray:
    """Map a cylindrical vector back to camera-frame hand joints (m, 3).

    (cos, sin) pairs are renormalized to the unit circle first; pairs
    with near-zero norm fall back to (1, 0). Reconstructions produced by
    the dictionary are not exactly on the circle, so this projection is
    applied unconditionally.
    """
    h = np.asarray(vec, dtype=np.float64).ravel()
    if h.size % 4 != 0:
        raise ShapeMismatch(f"cylindrical vector length must be 4m, got {h.size}")
    joints = h.reshape(-1, 4)
    radius, cos_a, sin_a, height = joints.T
    norm = np.hypot(cos_a, sin_a)
    tiny = norm < AXIS_RADIUS
    safe = np.where(tiny, 1.0, norm)
    cos_a = np.where(tiny, 1.0, cos_a / safe)
    sin_a = np.where(tiny, 0.0, sin_a / safe)
    q = np.stack([radius * cos_a, radius * sin_a, height], axis=1)
    return from_object_frame(q, frame)


def procrustes_align(estimate, reference) -> np.ndarray:
    """Similarity-align a point set to a reference.

    Returns the rotation + translation + uniform scale of ``estimate``
    (n, 3) that minimizes the summed squared distance to ``reference``,
    computed jointly over all points via the orthogonal Procrustes
    solution on centered, norm-scaled sets.
    """
    est = _as_points(estimate, 3, "estimate")
    ref = _as_points(reference, 3, "reference")
    if est.shape != ref.shape:
        raise ShapeMismatch(f"shape mismatch: {est.shape} vs {ref.shape}")

    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    e0 = est - mu_e
    r0 = ref - mu_r
    norm_e = np.linalg.norm(e0)
    if norm_e < 1e-12:
        raise DegeneratePose("estimate points coincide; alignment undefined")
    norm_r = np.linalg.norm(r0)
    e0 = e0 / norm_e
    r0 = r0 / norm_r if norm_r > 0 else r0

    cov = e0.T @ r0
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.ones(3)
    flip[-1] = d
    rot = vt.T @ (flip[:, None] * u.T)
    trace = (s * flip).sum()
    scale = trace * norm_r / norm_e
    return scale * (est - mu_e) @ rot.T + mu_r
