"""Grasp-pose dictionary learning (training stage 1).

A dictionary module is a trainable atom matrix (4m x k, cylindrical
layout) plus a coefficient encoder. The encoder maps a cylindrical pose
vector to a softmax-normalized coefficient vector; multiplying the atoms
by the coefficients reconstructs the pose. Training minimizes the mean
squared reconstruction error plus a weighted validity penalty that keeps
every atom entry inside its physically meaningful interval (cos/sin in
[-1, 1], radii non-negative). Once trained, the reconstruction error of
a pose measures how far it sits from the space of feasible grasps, which
is what lets unlabeled data supervise the lifting network in stage 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import geometry
from .autodiff import Node, backward, constant
from .cluster import kmeans
from .config import TrainConfig
from .errors import DegenerateBox, EmptyBatch, ShapeMismatch, TooFewPoints
from .networks import ResidualMLP
from .params import ParamStore, adam_step
from .rng import STREAM_DICT_INIT, STREAM_DICT_TRAIN, make_rng

ENCODER_HIDDEN = (1024, 256, 256, 1024, 256, 256, 1024)
ENCODER_SHORTCUTS = frozenset({(1, 4), (4, 7)})

# Row layout of a cylindrical vector/atom: entry index mod 4.
ROW_RADIUS, ROW_COS, ROW_SIN, ROW_HEIGHT = 0, 1, 2, 3


def interval_loss(value, lower: float, upper: float):
    """max(lower - v, 0) + max(v - upper, 0); 0 inside [lower, upper].

    Accepts scalars or arrays; ``upper`` may be +inf.
    """
    v = np.asarray(value, dtype=np.float64)
    below = np.maximum(lower - v, 0.0)
    above = np.maximum(v - upper, 0.0) if np.isfinite(upper) else 0.0
    out = below + above
    return float(out) if np.isscalar(value) else out


def init_dictionary(h_labeled, k: int, seed: int) -> np.ndarray:
    """Atoms (4m, k) from k-means centers of labeled cylindrical vectors."""
    h = np.asarray(h_labeled, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeMismatch("h_labeled must be (n, 4m)")
    if h.shape[0] < k:
        raise TooFewPoints(f"need at least {k} pose vectors, got {h.shape[0]}")
    centers = kmeans(h, k, seed)
    return np.ascontiguousarray(centers.T)


class DictionaryModule:
    """Pose dictionary + coefficient encoder bound to one ParamStore."""

    def __init__(self, n_joints: int, n_atoms: int, seed: int = 0,
                 store: ParamStore | None = None):
        self.n_joints = n_joints
        self.n_atoms = n_atoms
        self.in_dim = 4 * n_joints
        self.store = store if store is not None else ParamStore()
        if "dict.atoms" not in self.store:
            self.store.add("dict.atoms", np.zeros((self.in_dim, n_atoms)))
        rng = make_rng(seed, STREAM_DICT_INIT)
        self.mlp = ResidualMLP(
            self.store, "enc", self.in_dim, ENCODER_HIDDEN + (n_atoms,),
            ENCODER_SHORTCUTS, simplex=True, rng=rng,
        )

    @classmethod
    def from_store(cls, store: ParamStore) -> "DictionaryModule":
        """Rebind to a checkpointed store (layers reuse stored tensors)."""
        in_dim, n_atoms = store["dict.atoms"].value.shape
        return cls(in_dim // 4, n_atoms, store=store)

    @property
    def atoms(self) -> np.ndarray:
        return self.store["dict.atoms"].value

    def _check_batch(self, h) -> np.ndarray:
        arr = np.asarray(h, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.in_dim:
            raise ShapeMismatch(
                f"expected cylindrical vectors of length {self.in_dim}, got {arr.shape}"
            )
        return arr

    def coefficients_node(self, h: Node, mode: str, frozen: bool = False) -> Node:
        return self.mlp.forward(h, mode, frozen)

    def encode(self, h, mode: str = "infer") -> np.ndarray:
        """Simplex coefficients for one vector (k,) or a batch (n, k)."""
        arr = np.asarray(h, dtype=np.float64)
        single = arr.ndim == 1
        batch = self._check_batch(arr)
        out = self.coefficients_node(constant(batch), mode, frozen=True).value
        return out[0] if single else out

    def reconstruct(self, coefficients) -> np.ndarray:
        """Linear combination of atoms: one pose vector per coefficient row."""
        c = np.asarray(coefficients, dtype=np.float64)
        if c.shape[-1] != self.n_atoms:
            raise ShapeMismatch(
                f"expected {self.n_atoms} coefficients, got {c.shape[-1]}"
            )
        return c @ self.atoms.T

    def reconstruction_node(self, h: Node, frozen: bool = False) -> Node:
        """Graph path h -> D @ Enc(h), always in inference mode."""
        coeffs = self.coefficients_node(h, "infer", frozen)
        atoms = self.store.node("dict.atoms", frozen)
        return coeffs @ atoms.T

    def reconstruction_loss_node(self, h_batch: np.ndarray, mode: str,
                                 frozen: bool = False) -> Node:
        """Mean squared reconstruction error, averaged over batch and entries."""
        if h_batch.shape[0] == 0:
            raise EmptyBatch("reconstruction loss needs a non-empty batch")
        h = constant(h_batch)
        coeffs = self.coefficients_node(h, mode, frozen)
        atoms = self.store.node("dict.atoms", frozen)
        recon = coeffs @ atoms.T
        diff = recon - h
        return (diff * diff).mean()

    def validity_loss_node(self, frozen: bool = False) -> Node:
        """Interval penalty on atom entries.

        cos/sin rows are pushed into [-1, 1] (weight 2/3 split over the
        2mk entries), radius rows into [0, inf) (weight 1/3 over mk).
        Height rows are unconstrained.
        """
        atoms = self.store.node("dict.atoms", frozen)
        rows = np.arange(self.in_dim)
        sc_rows = np.where(rows % 4 == ROW_COS)[0]
        sc_rows = np.sort(np.concatenate([sc_rows, np.where(rows % 4 == ROW_SIN)[0]]))
        rad_rows = np.where(rows % 4 == ROW_RADIUS)[0]
        sc = atoms[sc_rows]
        rad = atoms[rad_rows]
        n_sc = sc_rows.size * self.n_atoms
        n_rad = rad_rows.size * self.n_atoms
        sc_term = ((sc - 1.0).relu() + (-1.0 - sc).relu()).sum() * (2.0 / (3.0 * n_sc))
        rad_term = (-rad).relu().sum() * (1.0 / (3.0 * n_rad))
        return sc_term + rad_term

    def reconstruction_errors(self, h) -> np.ndarray:
        """Per-sample mean squared residual over the 4m entries (n,)."""
        batch = self._check_batch(h)
        recon = self.reconstruct(self.encode(batch))
        return np.mean((recon - batch) ** 2, axis=1)


@dataclass
class TrainingHistory:
    """Per-epoch scalars plus a config echo for output headers."""

    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, *values):
        self.rows.append(tuple(values))

    def last(self, column: str):
        return self.rows[-1][self.columns.index(column)]


def poses_to_cylindrical(poses3d, skip_degenerate: bool = True,
                         max_skip_fraction: float = 0.1):
    """Transform 3D poses to cylindrical vectors, skipping broken boxes.

    Returns (vectors (n_ok, 4m), n_skipped). Raises DegenerateBox if more
    than ``max_skip_fraction`` of the poses fail; mocap glitches happen,
    wholesale failure means the data is wrong.
    """
    vectors = []
    skipped = 0
    total = 0
    for pose in poses3d:
        total += 1
        try:
            vectors.append(geometry.cyl_encode(np.asarray(pose, dtype=np.float64)))
        except DegenerateBox:
            if not skip_degenerate:
                raise
            skipped += 1
    if total == 0:
        raise EmptyBatch("no poses given")
    if skipped > max_skip_fraction * total:
        raise DegenerateBox(
            f"{skipped}/{total} poses have degenerate boxes; data looks corrupt"
        )
    return np.array(vectors), skipped


def train_dictionary(
    poses3d: Sequence[np.ndarray],
    config: TrainConfig,
) -> tuple[DictionaryModule, TrainingHistory]:
    """Stage-1 training: fit atoms and encoder on labeled 3D poses.

    Builds cylindrical vectors from the poses, initializes the atoms
    with k-means centers, then jointly minimizes reconstruction plus
    weighted validity loss with Adam over mini-batches.
    """
    cfg = config
    h_all, skipped = poses_to_cylindrical(poses3d)
    module, history = fit_dictionary_vectors(h_all, cfg)
    history.metadata["skipped_poses"] = skipped
    return module, history


def fit_dictionary_vectors(
    h_all: np.ndarray, cfg: TrainConfig
) -> tuple[DictionaryModule, TrainingHistory]:
    n, dim = h_all.shape
    module = DictionaryModule(dim // 4, cfg.k, seed=cfg.seed)
    module.store["dict.atoms"].value[...] = init_dictionary(
        h_all, cfg.k, cfg.seed
    )

    history = TrainingHistory(
        columns=("epoch", "loss", "reconstruction", "validity"),
        metadata={
            "k": cfg.k, "lambda_dict": cfg.lambda_dict, "lr": cfg.lr,
            "batch_size": cfg.batch_size, "epochs": cfg.dict_epochs,
            "seed": cfg.seed, "samples": n,
        },
    )
    rng = make_rng(cfg.seed, STREAM_DICT_TRAIN)
    store = module.store
    step = 0
    for epoch in range(cfg.dict_epochs):
        order = rng.permutation(n)
        rec_sum = val_sum = loss_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            batch = h_all[order[start : start + cfg.batch_size]]
            rec = module.reconstruction_loss_node(batch, mode="train")
            validity = module.validity_loss_node()
            loss = rec + cfg.lambda_dict * validity
            store.zero_grad()
            backward(loss)
            step += 1
            adam_step(store, lr=cfg.lr, step=step)
            rec_sum += float(rec.value)
            val_sum += float(validity.value)
            loss_sum += float(loss.value)
            n_batches += 1
        history.add(
            epoch, loss_sum / n_batches, rec_sum / n_batches, val_sum / n_batches
        )
    return module, history


# ---------------------------------------------------------------------------
# Autoencoder baseline: same trunk, mirrored decoder, no atoms, no simplex.
# ---------------------------------------------------------------------------


class AutoencoderModule:
    """Reconstruction baseline without a dictionary.

    The encoder is the dictionary module's trunk with the softmax
    removed; the decoder mirrors the hidden widths back to 4m. Exposes
    the same reconstruction surface as DictionaryModule so stage 2 can
    use either interchangeably.
    """

    def __init__(self, n_joints: int, bottleneck: int, seed: int = 0):
        self.n_joints = n_joints
        self.n_atoms = bottleneck
        self.in_dim = 4 * n_joints
        self.store = ParamStore()
        rng = make_rng(seed, STREAM_DICT_INIT)
        self.encoder = ResidualMLP(
            self.store, "enc", self.in_dim, ENCODER_HIDDEN + (bottleneck,),
            ENCODER_SHORTCUTS, simplex=False, rng=rng,
        )
        self.decoder = ResidualMLP(
            self.store, "dec", bottleneck,
            tuple(reversed(ENCODER_HIDDEN)) + (self.in_dim,),
            ENCODER_SHORTCUTS, simplex=False, rng=rng,
        )

    def reconstruction_node(self, h: Node, frozen: bool = False) -> Node:
        code = self.encoder.forward(h, "infer", frozen)
        return self.decoder.forward(code, "infer", frozen)

    def _recon_train(self, h: Node) -> Node:
        return self.decoder.forward(self.encoder.forward(h, "train"), "train")

    def reconstruction_loss_node(self, h_batch: np.ndarray, mode: str) -> Node:
        if h_batch.shape[0] == 0:
            raise EmptyBatch("reconstruction loss needs a non-empty batch")
        h = constant(h_batch)
        recon = self._recon_train(h) if mode == "train" else self.reconstruction_node(h)
        diff = recon - h
        return (diff * diff).mean()

    def reconstruction_errors(self, h) -> np.ndarray:
        batch = np.asarray(h, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch[None, :]
        recon = self.reconstruction_node(constant(batch), frozen=True).value
        return np.mean((recon - batch) ** 2, axis=1)


def train_autoencoder(
    poses3d: Sequence[np.ndarray], config: TrainConfig
) -> tuple[AutoencoderModule, TrainingHistory]:
    """Stage-1 analogue for the autoencoder baseline (reconstruction only)."""
    cfg = config
    h_all, skipped = poses_to_cylindrical(poses3d)
    n = h_all.shape[0]
    module = AutoencoderModule(h_all.shape[1] // 4, cfg.k, seed=cfg.seed)
    history = TrainingHistory(
        columns=("epoch", "loss", "reconstruction", "validity"),
        metadata={
            "k": cfg.k, "lr": cfg.lr, "batch_size": cfg.batch_size,
            "epochs": cfg.dict_epochs, "seed": cfg.seed, "samples": n,
            "skipped_poses": skipped, "variant": "autoencoder",
        },
    )
    rng = make_rng(cfg.seed, STREAM_DICT_TRAIN)
    store = module.store
    step = 0
    for epoch in range(cfg.dict_epochs):
        order = rng.permutation(n)
        rec_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            batch = h_all[order[start : start + cfg.batch_size]]
            rec = module.reconstruction_loss_node(batch, mode="train")
            store.zero_grad()
            backward(rec)
            step += 1
            adam_step(store, lr=cfg.lr, step=step)
            rec_sum += float(rec.value)
            n_batches += 1
        mean_rec = rec_sum / n_batches
        history.add(epoch, mean_rec, mean_rec, 0.0)
    return module, history


class GraspDictionary(BaseEstimator, TransformerMixin):
    """Scikit-learn style wrapper around stage-1 dictionary training.

    fit() accepts either 3D poses shaped (n, m+8, 3) in camera
    coordinates (millimeters) or pre-transformed cylindrical vectors
    shaped (n, 4m). transform() returns the dictionary reconstruction of
    each sample's cylindrical vector; score() is the negative mean
    reconstruction error, so larger is better.
    """

    def __init__(self, n_atoms: int = 30, validity_weight: float = 100.0,
                 epochs: int = 200, batch_size: int = 64, lr: float = 1e-3,
                 seed: int = 0):
        self.n_atoms = n_atoms
        self.validity_weight = validity_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            k=self.n_atoms, lambda_dict=self.validity_weight,
            dict_epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, seed=self.seed,
        )

    def _vectors(self, X) -> np.ndarray:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 3:
            vectors, _ = poses_to_cylindrical(arr)
            return vectors
        if arr.ndim == 2:
            return arr
        raise ShapeMismatch("X must be (n, m+8, 3) poses or (n, 4m) vectors")

    def fit(self, X, y=None):
        vectors = self._vectors(X)
        self.module_, self.history_ = fit_dictionary_vectors(vectors, self._config())
        return self

    def transform(self, X) -> np.ndarray:
        vectors = self._vectors(X)
        return self.module_.reconstruct(self.module_.encode(vectors))

    def reconstruction_error(self, X) -> np.ndarray:
        return self.module_.reconstruction_errors(self._vectors(X))

    def score(self, X, y=None) -> float:
        return -float(np.mean(self.reconstruction_error(X)))
