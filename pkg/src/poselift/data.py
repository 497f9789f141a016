"""Dataset records, interchange IO, splitting, and synthetic grasps.

Interchange format (see docs/FORMATS.md): UTF-8 text, one JSON object
per line. An optional first line with a "schema" key declares the
format version and units; every other line is a record with keys
``sequence_id`` (string), ``frame_idx`` (int), ``points_2d`` (29x2,
pixels), optional ``points_3d`` (29x3, millimeters) and optional
``contact`` (bool). Point order is the 21 hand joints (wrist, thumb
through pinky, proximal to tip) followed by the 8 box corners in
canonical binary order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, MissingLabels, ParseError, ValidationError
from .geometry import CANONICAL_CUBE, NUM_POINTS
from .rng import STREAM_SPLIT, STREAM_SYNTH, make_rng

SCHEMA = "hand-object-pose/v1"
HEADER = {
    "schema": SCHEMA,
    "points": NUM_POINTS,
    "units_2d": "pixels",
    "units_3d": "millimeters",
}

# Fixed pinhole camera for synthetic data.
FOCAL_PX = 600.0
PRINCIPAL_POINT = (320.0, 240.0)


@dataclass
class DatasetRecord:
    sequence_id: str
    frame_idx: int
    points2d: np.ndarray               # (29, 2) pixels
    points3d: np.ndarray | None = None  # (29, 3) mm, camera frame
    contact: bool | None = None

    @property
    def labeled(self) -> bool:
        return self.points3d is not None


@dataclass
class DatasetSplit:
    """Labeled pairs plus unlabeled inputs, with split provenance."""

    labeled: list[DatasetRecord]
    unlabeled: list[DatasetRecord]
    ratio: float
    seed: int
    subseq_len: int

    def arrays(self):
        """(x_labeled, y_labeled, x_unlabeled) as stacked arrays."""
        xl = np.array([r.points2d for r in self.labeled])
        yl = np.array([r.points3d for r in self.labeled])
        xu = (
            np.array([r.points2d for r in self.unlabeled])
            if self.unlabeled
            else np.zeros((0, NUM_POINTS, 2))
        )
        return xl, yl, xu


def _check_points(obj, key: str, cols: int, line: int) -> np.ndarray:
    try:
        arr = np.asarray(obj[key], dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError("not a numeric array", key, line)
    if arr.shape != (NUM_POINTS, cols):
        raise ValidationError(
            f"expected shape ({NUM_POINTS}, {cols}), got {arr.shape}", key, line
        )
    if not np.isfinite(arr).all():
        raise ValidationError("contains non-finite values", key, line)
    return arr


def _record_from_json(obj: dict, line: int) -> DatasetRecord:
    for key in ("sequence_id", "frame_idx", "points_2d"):
        if key not in obj:
            raise ValidationError("missing", key, line)
    if not isinstance(obj["sequence_id"], str):
        raise ValidationError("must be a string", "sequence_id", line)
    if not isinstance(obj["frame_idx"], int) or isinstance(obj["frame_idx"], bool):
        raise ValidationError("must be an integer", "frame_idx", line)
    points2d = _check_points(obj, "points_2d", 2, line)
    points3d = None
    if obj.get("points_3d") is not None:
        points3d = _check_points(obj, "points_3d", 3, line)
    contact = obj.get("contact")
    if contact is not None and not isinstance(contact, bool):
        raise ValidationError("must be a boolean", "contact", line)
    return DatasetRecord(obj["sequence_id"], obj["frame_idx"], points2d,
                         points3d, contact)


def load_records(path) -> list[DatasetRecord]:
    """Parse an interchange file; empty file -> empty list.

    Raises ParseError with the line number on malformed JSON and
    ValidationError naming the offending field on schema violations.
    Duplicate (sequence_id, frame_idx) keys are rejected. No contact
    filtering is applied; the flag is only carried through.
    """
    records: list[DatasetRecord] = []
    seen: set[tuple[str, int]] = set()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", lineno)
        if "schema" in obj:
            if lineno != 1:
                raise ParseError("header line must come first", lineno)
            if obj["schema"] != SCHEMA:
                raise ValidationError(
                    f"unsupported schema {obj['schema']!r}", "schema", lineno
                )
            continue
        rec = _record_from_json(obj, lineno)
        key = (rec.sequence_id, rec.frame_idx)
        if key in seen:
            raise ValidationError(f"duplicate key {key}", "frame_idx", lineno)
        seen.add(key)
        records.append(rec)
    return records


def save_records(path, records: Iterable[DatasetRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(HEADER, sort_keys=True) + "\n")
        for r in records:
            obj = {
                "sequence_id": r.sequence_id,
                "frame_idx": r.frame_idx,
                "points_2d": r.points2d.tolist(),
            }
            if r.points3d is not None:
                obj["points_3d"] = r.points3d.tolist()
            if r.contact is not None:
                obj["contact"] = r.contact
            fh.write(json.dumps(obj) + "\n")


# -- semi-supervised splitting -------------------------------------------------


def _subsequences(records: Sequence[DatasetRecord], subseq_len: int):
    """Consecutive per-sequence chunks; the last may be shorter."""
    by_seq: dict[str, list[DatasetRecord]] = {}
    for r in records:
        by_seq.setdefault(r.sequence_id, []).append(r)
    chunks: list[list[DatasetRecord]] = []
    for seq_id in sorted(by_seq):
        frames = sorted(by_seq[seq_id], key=lambda r: r.frame_idx)
        for start in range(0, len(frames), subseq_len):
            chunks.append(frames[start : start + subseq_len])
    return chunks


def split_semi_supervised(
    records: Sequence[DatasetRecord],
    ratio: float,
    seed: int,
    subseq_len: int = 5,
) -> DatasetSplit:
    """Sample whole subsequences as the labeled set.

    Each sequence is cut into consecutive ``subseq_len``-frame chunks
    (sequence boundaries are never crossed); ceil(ratio * #chunks)
    chunks are drawn uniformly by seed. Their frames become the labeled
    pairs and must carry 3D annotations; everything else is unlabeled.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError("ratio must be in (0, 1]")
    chunks = _subsequences(records, subseq_len)
    n_chunks = len(chunks)
    n_labeled = math.ceil(ratio * n_chunks)
    rng = make_rng(seed, STREAM_SPLIT)
    chosen = set(rng.choice(n_chunks, size=n_labeled, replace=False).tolist())
    labeled: list[DatasetRecord] = []
    unlabeled: list[DatasetRecord] = []
    for i, chunk in enumerate(chunks):
        if i in chosen:
            for r in chunk:
                if r.points3d is None:
                    raise MissingLabels(
                        f"frame ({r.sequence_id}, {r.frame_idx}) sampled for the "
                        "labeled split has no 3D annotation"
                    )
            labeled.extend(chunk)
        else:
            unlabeled.extend(chunk)
    return DatasetSplit(labeled, unlabeled, ratio, seed, subseq_len)


# -- synthetic grasp generator --------------------------------------------------

# Bone lengths (mm): wrist->base, then three phalanges, per finger.
_BONES = np.array(
    [
        [48.0, 32.0, 25.0, 22.0],   # thumb
        [85.0, 40.0, 25.0, 20.0],   # index
        [82.0, 45.0, 28.0, 22.0],   # middle
        [78.0, 42.0, 26.0, 20.0],   # ring
        [72.0, 32.0, 20.0, 18.0],   # pinky
    ]
)
# Azimuth of each finger around the approach axis (thumb opposed).
_FINGER_AZIMUTH = np.array([2.4, -0.55, -0.2, 0.2, 0.55])
# How strongly each segment follows the common curl.
_CURL_WEIGHTS = np.array([0.0, 0.9, 1.1, 1.3])
_SPLAY = 0.55

# Grasp parameter vector: approach azimuth, approach elevation,
# wrist standoff (mm), common curl, and one curl offset per finger.
_PARAM_LOW = np.array([-np.pi, -0.25, 15.0, 0.35, *(-0.3,) * 5])
_PARAM_HIGH = np.array([np.pi, 1.1, 55.0, 1.15, *(0.3,) * 5])
_WALK_STEP = np.array([0.06, 0.03, 1.5, 0.03, *(0.02,) * 5])


def _grasp_hand(params: np.ndarray, half_extents: np.ndarray) -> np.ndarray:
    """21 hand joints in the object frame for one parameter vector."""
    azimuth, elevation, standoff, curl = params[:4]
    finger_curl = np.clip(curl + params[4:9], 0.15, 1.6)

    approach = np.array(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ]
    )
    # Orthonormal basis around the approach direction.
    helper = np.array([0.0, 0.0, 1.0])
    if abs(approach @ helper) > 0.95:
        helper = np.array([1.0, 0.0, 0.0])
    side = np.cross(approach, helper)
    side /= np.linalg.norm(side)
    up = np.cross(approach, side)

    support = float(np.abs(approach) @ half_extents)  # box extent along approach
    wrist = approach * (support + standoff + 60.0)

    joints = [wrist]
    for f in range(5):
        radial = np.cos(_FINGER_AZIMUTH[f]) * side + np.sin(_FINGER_AZIMUTH[f]) * up
        pos = wrist
        angle = _SPLAY
        for seg in range(4):
            angle = angle - finger_curl[f] * _CURL_WEIGHTS[seg]
            direction = -approach * np.cos(angle) + radial * np.sin(angle)
            pos = pos + _BONES[f, seg] * direction
            joints.append(pos)
    return np.array(joints)


def _rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array(
        [[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]], dtype=np.float64
    )
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(a, a)


def project_pinhole(points3d: np.ndarray) -> np.ndarray:
    """Fixed-camera pinhole projection, mm -> pixels."""
    z = points3d[..., 2]
    u = FOCAL_PX * points3d[..., 0] / z + PRINCIPAL_POINT[0]
    v = FOCAL_PX * points3d[..., 1] / z + PRINCIPAL_POINT[1]
    return np.stack([u, v], axis=-1)


def generate_synthetic(
    n_sequences: int, frames_per_seq: int, seed: int, sequence_prefix: str = "seq"
) -> list[DatasetRecord]:
    """Procedural hand-box grasp sequences with exact pinhole 2D.

    Each sequence fixes a random box (edges 40-120 mm, moderate random
    orientation, centered 450-750 mm in front of the camera) and walks a
    grasp parameter vector smoothly across frames. Every record carries
    3D annotations; splitting decides what counts as labeled.
    """
    if n_sequences < 1 or frames_per_seq < 1:
        raise ConfigError("sequence and frame counts must be >= 1")
    rng = make_rng(seed, STREAM_SYNTH)
    records: list[DatasetRecord] = []
    for s in range(n_sequences):
        half = rng.uniform(20.0, 60.0, size=3)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        rot = _rotation_about(axis, rng.uniform(0.0, np.pi / 3.0))
        center = np.array(
            [rng.uniform(-70, 70), rng.uniform(-50, 50), rng.uniform(450, 750)]
        )
        corners_obj = CANONICAL_CUBE * (2.0 * half)
        params = rng.uniform(_PARAM_LOW, _PARAM_HIGH)
        for t in range(frames_per_seq):
            hand_obj = _grasp_hand(params, half)
            pose_obj = np.concatenate([hand_obj, corners_obj])
            pose_cam = pose_obj @ rot.T + center
            records.append(
                DatasetRecord(
                    sequence_id=f"{sequence_prefix}{s:04d}",
                    frame_idx=t,
                    points2d=project_pinhole(pose_cam),
                    points3d=pose_cam,
                    contact=True,
                )
            )
            params = np.clip(
                params + rng.normal(0.0, _WALK_STEP), _PARAM_LOW, _PARAM_HIGH
            )
    return records


def scramble_hand_joints(pose3d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute the hand joints of one pose; box corners stay put.

    Produces kinematically impossible grasps with the same coordinate
    statistics, used to probe the dictionary's feasibility signal.
    """
    out = np.array(pose3d, dtype=np.float64)
    n_hand = out.shape[0] - 8
    perm = rng.permutation(n_hand)
    out[:n_hand] = out[perm]
    return out


# -- temporal pseudo-label baseline ---------------------------------------------


def interpolate_pseudo_labels(split: DatasetSplit) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pseudo 2D/3D pairs for unlabeled frames by temporal interpolation.

    Per sequence, each unlabeled frame takes the linear interpolation
    (by frame index) of the nearest labeled frames before and after it;
    one-sided neighbors are copied; frames in sequences without any
    labeled frame are skipped.
    """
    labeled_by_seq: dict[str, list[DatasetRecord]] = {}
    for r in split.labeled:
        labeled_by_seq.setdefault(r.sequence_id, []).append(r)
    for frames in labeled_by_seq.values():
        frames.sort(key=lambda r: r.frame_idx)

    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    for r in split.unlabeled:
        anchors = labeled_by_seq.get(r.sequence_id)
        if not anchors:
            continue
        indices = [a.frame_idx for a in anchors]
        after = np.searchsorted(indices, r.frame_idx)
        before = after - 1
        if before < 0:
            label = anchors[0].points3d
        elif after >= len(anchors):
            label = anchors[-1].points3d
        else:
            a, b = anchors[before], anchors[after]
            w = (r.frame_idx - a.frame_idx) / (b.frame_idx - a.frame_idx)
            label = (1.0 - w) * a.points3d + w * b.points3d
        pairs.append((r.points2d, np.asarray(label, dtype=np.float64)))
    return pairs
