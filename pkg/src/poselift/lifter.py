"""2D-to-3D lifting network and semi-supervised training (stage 2).

The lifter is a graph U-net over the 29-node hand-object skeleton:
adaptive graph convolutions (a fixed normalized adjacency plus a learned
per-layer offset) at node resolutions 29 -> 14 -> 7 -> 14 -> 29, with
cluster-average pooling, copy unpooling and additive skip connections.
Inputs are per-node 2D coordinates standardized with labeled training
statistics; the output head predicts standardized 3D coordinates that
are mapped back to millimeters.

Training combines the supervised coordinate error on labeled pairs with
a weighted reconstruction error: every estimate (labeled and unlabeled)
is re-expressed in object-oriented cylindrical coordinates and pushed
through the frozen stage-1 reconstruction module; poses the frozen
module cannot reconstruct are penalized. The cylindrical transform is
differentiated through, including (optionally) the object frame built
from the estimated box corners.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import geometry
from .autodiff import Node, _accumulate, backward, concat, constant
from .config import TrainConfig
from .dictionary import TrainingHistory, fit_dictionary_vectors, poses_to_cylindrical
from .errors import EmptyBatch, MissingDictionary, ShapeMismatch
from .geometry import AXIS_RADIUS, MIN_EDGE, NUM_CORNERS, NUM_HAND_JOINTS, NUM_POINTS
from .metrics import mpjpe
from .networks import BatchNorm, Linear, he_normal
from .params import ParamStore, adam_step
from .rng import (
    STREAM_EST_INIT,
    STREAM_EST_LABELED,
    STREAM_EST_UNLABELED,
    make_rng,
)

# -- skeleton ----------------------------------------------------------------

def _hand_edges() -> list[tuple[int, int]]:
    edges = []
    for finger in range(5):
        base = 1 + 4 * finger
        edges.append((0, base))
        for j in range(3):
            edges.append((base + j, base + j + 1))
    return edges


def _box_edges() -> list[tuple[int, int]]:
    return [(NUM_HAND_JOINTS + a, NUM_HAND_JOINTS + b) for a, b in geometry.BOX_EDGES]


def _bridge_edges() -> list[tuple[int, int]]:
    return [(0, NUM_HAND_JOINTS + c) for c in range(NUM_CORNERS)]


# Node clusters for pooling. Fine level: wrist, one cluster per finger,
# corners kept separate (29 -> 14). Coarse level: wrist, thumb+index,
# remaining fingers, corners merged pairwise along x-edges (14 -> 7).
LEVEL1_CLUSTERS: tuple[tuple[int, ...], ...] = (
    (0,),
    (1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12), (13, 14, 15, 16), (17, 18, 19, 20),
    (21,), (22,), (23,), (24,), (25,), (26,), (27,), (28,),
)
LEVEL2_CLUSTERS: tuple[tuple[int, ...], ...] = (
    (0,), (1, 2), (3, 4, 5), (6, 7), (8, 9), (10, 11), (12, 13),
)


def _normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Add self-loops and row-normalize (rows sum to one)."""
    a = adj + np.eye(adj.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def _pooling(clusters, n_fine: int) -> tuple[np.ndarray, np.ndarray]:
    """(pool, unpool): cluster-average matrix and copy-to-members matrix."""
    pool = np.zeros((len(clusters), n_fine))
    for c, members in enumerate(clusters):
        pool[c, list(members)] = 1.0 / len(members)
    unpool = (pool > 0).astype(np.float64).T
    return pool, unpool


def _coarsen(adj: np.ndarray, clusters) -> np.ndarray:
    coarse = np.zeros((len(clusters), len(clusters)))
    for i, mi in enumerate(clusters):
        for j, mj in enumerate(clusters):
            if i != j and adj[np.ix_(list(mi), list(mj))].any():
                coarse[i, j] = 1.0
    return coarse


class SkeletonGraph:
    """Hand-object connectivity at the three U-net resolutions.

    The 29-node base graph is the hand kinematic tree, the 12 box edges
    and a bridge from the wrist to every corner; it is connected and
    symmetric. Coarser graphs connect clusters whose members share an
    edge.
    """

    def __init__(self):
        edges = _hand_edges() + _box_edges() + _bridge_edges()
        adj = np.zeros((NUM_POINTS, NUM_POINTS))
        for a, b in edges:
            adj[a, b] = adj[b, a] = 1.0
        self.edges = tuple(edges)
        self.adjacency = adj
        self.pool1, self.unpool1 = _pooling(LEVEL1_CLUSTERS, NUM_POINTS)
        self.pool2, self.unpool2 = _pooling(LEVEL2_CLUSTERS, len(LEVEL1_CLUSTERS))
        adj1 = _coarsen(adj, LEVEL1_CLUSTERS)
        adj2 = _coarsen(adj1, LEVEL2_CLUSTERS)
        self.norm_adjacency = (
            _normalize_adjacency(adj),
            _normalize_adjacency(adj1),
            _normalize_adjacency(adj2),
        )
        self.node_counts = (NUM_POINTS, len(LEVEL1_CLUSTERS), len(LEVEL2_CLUSTERS))


class GraphConv:
    """Z' = ReLU(BN((A_norm + A_learned) @ Z @ W)), one learned offset per layer."""

    def __init__(self, store: ParamStore, name: str, base: np.ndarray,
                 fan_in: int, fan_out: int, rng: np.random.Generator):
        self.store = store
        self.base = base
        self.w_name = f"{name}.W"
        self.a_name = f"{name}.A"
        if self.w_name not in store:
            store.add(self.w_name, he_normal(rng, fan_in, fan_out))
            store.add(self.a_name, np.zeros_like(base))
        self.bn = BatchNorm(store, name, fan_out)

    def forward(self, z: Node, mode: str, frozen: bool = False) -> Node:
        w = self.store.node(self.w_name, frozen)
        a = constant(self.base) + self.store.node(self.a_name, frozen)
        mixed = a @ (z @ w)
        return self.bn.forward(mixed, mode, frozen).relu()


# Channel widths: 2 -> 64 -> 128 down, 128 -> 64 -> 3 up.
WIDTH_IN, WIDTH_MID, WIDTH_DEEP, WIDTH_OUT = 2, 64, 128, 3


class GraphUNet:
    """Encoder-decoder over the skeleton with additive skips."""

    def __init__(self, store: ParamStore, graph: SkeletonGraph,
                 rng: np.random.Generator):
        self.store = store
        self.graph = graph
        a0, a1, a2 = graph.norm_adjacency

        def conv(name, base, cin, cout):
            return GraphConv(store, f"est.{name}", base, cin, cout, rng)

        self.down1 = [conv("down1a", a0, WIDTH_IN, WIDTH_MID),
                      conv("down1b", a0, WIDTH_MID, WIDTH_MID)]
        self.down2 = [conv("down2a", a1, WIDTH_MID, WIDTH_DEEP),
                      conv("down2b", a1, WIDTH_DEEP, WIDTH_DEEP)]
        self.middle = [conv("mida", a2, WIDTH_DEEP, WIDTH_DEEP),
                       conv("midb", a2, WIDTH_DEEP, WIDTH_DEEP)]
        self.up2 = [conv("up2a", a1, WIDTH_DEEP, WIDTH_MID),
                    conv("up2b", a1, WIDTH_MID, WIDTH_MID)]
        self.up1 = [conv("up1a", a0, WIDTH_MID, WIDTH_MID),
                    conv("up1b", a0, WIDTH_MID, WIDTH_MID)]
        self.head = Linear(store, "est.head", WIDTH_MID, WIDTH_OUT, rng,
                           scale="glorot")

    def forward(self, x: Node, mode: str, frozen: bool = False) -> Node:
        g = self.graph
        z = x
        for c in self.down1:
            z = c.forward(z, mode, frozen)
        skip1 = z
        z = constant(g.pool1) @ z
        for c in self.down2:
            z = c.forward(z, mode, frozen)
        skip2 = z
        z = constant(g.pool2) @ z
        for c in self.middle:
            z = c.forward(z, mode, frozen)
        z = constant(g.unpool2) @ z + skip2
        for c in self.up2:
            z = c.forward(z, mode, frozen)
        z = constant(g.unpool1) @ z + skip1
        for c in self.up1:
            z = c.forward(z, mode, frozen)
        return self.head.forward(z, frozen)


class LifterModule:
    """Lifting network plus its input/output normalization buffers."""

    def __init__(self, store: ParamStore | None = None, seed: int = 0):
        self.store = store if store is not None else ParamStore()
        self.graph = SkeletonGraph()
        rng = make_rng(seed, STREAM_EST_INIT)
        self.unet = GraphUNet(self.store, self.graph, rng)
        for name, shape in (
            ("est.norm2d.mean", (NUM_POINTS, 2)), ("est.norm2d.std", (NUM_POINTS, 2)),
            ("est.norm3d.mean", (NUM_POINTS, 3)), ("est.norm3d.std", (NUM_POINTS, 3)),
        ):
            if name not in self.store:
                init = np.zeros(shape) if name.endswith("mean") else np.ones(shape)
                self.store.add(name, init, trainable=False)

    @classmethod
    def from_store(cls, store: ParamStore) -> "LifterModule":
        return cls(store=store)

    def set_normalization(self, x_labeled: np.ndarray, y_labeled: np.ndarray) -> None:
        """Per-node standardization statistics from labeled data only."""
        s = self.store
        s["est.norm2d.mean"].value[...] = x_labeled.mean(axis=0)
        s["est.norm2d.std"].value[...] = x_labeled.std(axis=0) + 1e-6
        s["est.norm3d.mean"].value[...] = y_labeled.mean(axis=0)
        s["est.norm3d.std"].value[...] = y_labeled.std(axis=0) + 1e-6

    def _check_2d(self, x) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1:] != (NUM_POINTS, 2):
            raise ShapeMismatch(f"expected (n, {NUM_POINTS}, 2) inputs, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeMismatch("2D inputs must be finite")
        return arr

    def forward_node(self, x2d: np.ndarray, mode: str) -> Node:
        """Graph forward pass: pixels in, millimeters out (n, 29, 3)."""
        s = self.store
        x = (x2d - s["est.norm2d.mean"].value) / s["est.norm2d.std"].value
        out = self.unet.forward(constant(x), mode)
        return out * constant(s["est.norm3d.std"].value) + constant(
            s["est.norm3d.mean"].value
        )

    def estimate(self, x2d, mode: str = "infer") -> np.ndarray:
        """Predict 3D poses; (29, 2) -> (29, 3) or batched with leading n."""
        arr = np.asarray(x2d, dtype=np.float64)
        single = arr.ndim == 2
        batch = self._check_2d(arr)
        out = self.forward_node(batch, mode).value
        return out[0] if single else out


# -- differentiable object-frame cylindrical transform -----------------------


def _cylindrical_parts(q: Node) -> Node:
    """(..., 3) object-frame coords -> (..., 4) cylinder tuples.

    Gradient is exact away from the z' axis and zero where the radius
    clamp pins (cos, sin) to (1, 0).
    """
    x, y, z = q.value[..., 0], q.value[..., 1], q.value[..., 2]
    radius = np.hypot(x, y)
    on_axis = radius < AXIS_RADIUS
    safe = np.where(on_axis, 1.0, radius)
    val = np.stack(
        [radius,
         np.where(on_axis, 1.0, x / safe),
         np.where(on_axis, 0.0, y / safe),
         z],
        axis=-1,
    )
    out = Node(val, (q,))

    def backprop(g):
        g_r, g_c, g_s, g_z = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
        inv = np.where(on_axis, 0.0, 1.0 / safe)
        inv3 = inv**3
        gx = g_r * x * inv + g_c * y * y * inv3 - g_s * x * y * inv3
        gy = g_r * y * inv - g_c * x * y * inv3 + g_s * x * x * inv3
        _accumulate(q, np.stack([gx, gy, g_z], axis=-1))

    out.backprop = backprop
    return out


def _safe_unit(v: Node) -> Node:
    """Normalize along the last axis, flooring the norm at MIN_EDGE."""
    norm = (v * v).sum(axis=-1, keepdims=True).sqrt().clamp_min(MIN_EDGE)
    return v / norm


def _frame_rows_node(corners: Node) -> tuple[Node, Node]:
    """Differentiable object frame from estimated corners.

    Returns (origin (n,1,3), axis_rows (n,3,3)) where the rows of
    axis_rows are the x', y', z' directions (Gram-Schmidt over the three
    canonical edges, z' sign-flipped to keep the frame right-handed; the
    flip is treated as a constant of the backward pass).
    """
    origin = corners.mean(axis=1, keepdims=True)
    c0 = corners[:, 0:1, :]
    e1 = corners[:, 1:2, :] - c0
    e2 = corners[:, 2:3, :] - c0
    e3 = corners[:, 4:5, :] - c0
    ax = _safe_unit(e1)
    ay = _safe_unit(e2 - (e2 * ax).sum(axis=-1, keepdims=True) * ax)
    az = _safe_unit(
        e3
        - (e3 * ax).sum(axis=-1, keepdims=True) * ax
        - (e3 * ay).sum(axis=-1, keepdims=True) * ay
    )
    det = np.linalg.det(
        np.concatenate([ax.value, ay.value, az.value], axis=1)
    )
    sign = np.where(det < 0, -1.0, 1.0)[:, None, None]
    az = az * constant(sign)
    return origin, concat([ax, ay, az], axis=1)


def cylindrical_node(pred: Node, frame_gradient: str = "full") -> Node:
    """Estimates (n, 29, 3) -> cylindrical vectors (n, 4*21).

    With frame_gradient="stop" the object frame is computed from the
    current values and enters the graph as a constant, so gradients only
    flow through the hand joints.
    """
    corners = pred[:, NUM_HAND_JOINTS:, :]
    if frame_gradient == "stop":
        origin_v, rows_v = _frame_rows_values(corners.value)
        origin, axis_rows = constant(origin_v), constant(rows_v)
    else:
        origin, axis_rows = _frame_rows_node(corners)
    hand = pred[:, :NUM_HAND_JOINTS, :]
    local = (hand - origin) @ axis_rows.T
    parts = _cylindrical_parts(local)
    return parts.reshape(parts.value.shape[0], 4 * NUM_HAND_JOINTS)


def _frame_rows_values(corners: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Numpy twin of _frame_rows_node for the stop-gradient path."""
    origin = corners.mean(axis=1, keepdims=True)
    c0 = corners[:, 0:1, :]
    e1, e2, e3 = corners[:, 1:2] - c0, corners[:, 2:3] - c0, corners[:, 4:5] - c0

    def unit(v):
        n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        return v / np.maximum(n, MIN_EDGE)

    ax = unit(e1)
    ay = unit(e2 - (e2 * ax).sum(axis=-1, keepdims=True) * ax)
    az = unit(e3 - (e3 * ax).sum(axis=-1, keepdims=True) * ax
              - (e3 * ay).sum(axis=-1, keepdims=True) * ay)
    rows = np.concatenate([ax, ay, az], axis=1)
    det = np.linalg.det(rows)
    rows[:, 2, :] *= np.where(det < 0, -1.0, 1.0)[:, None]
    return origin, rows


# -- losses -------------------------------------------------------------------


def supervised_loss_node(module: LifterModule, x2d: np.ndarray,
                         y3d: np.ndarray, mode: str) -> Node:
    """Mean squared coordinate error in camera space (per entry)."""
    if x2d.shape[0] == 0:
        raise EmptyBatch("supervised loss needs labeled samples")
    pred = module.forward_node(x2d, mode)
    diff = pred - constant(y3d)
    return (diff * diff).mean()


def combined_loss_node(
    module: LifterModule,
    recon_module,
    x_labeled: np.ndarray,
    y_labeled: np.ndarray,
    x_unlabeled: np.ndarray,
    lambda_r: float,
    mode: str,
    frame_gradient: str = "full",
) -> tuple[Node, float, float]:
    """Supervised term plus weighted reconstruction term over all inputs.

    Returns (loss node, supervised value, reconstruction value). The
    reconstruction branch is skipped entirely when lambda_r is zero, so
    a zero-weight run is bit-identical to supervised-only training.
    """
    supervised = supervised_loss_node(module, x_labeled, y_labeled, mode)
    if lambda_r == 0.0:
        return supervised, float(supervised.value), 0.0
    if recon_module is None:
        raise MissingDictionary("reconstruction weight > 0 needs a trained module")
    x_all = (
        np.concatenate([x_labeled, x_unlabeled])
        if x_unlabeled.shape[0]
        else x_labeled
    )
    pred_all = module.forward_node(x_all, mode)
    h_hat = cylindrical_node(pred_all, frame_gradient)
    recon = recon_module.reconstruction_node(h_hat, frozen=True)
    diff = recon - h_hat
    rec = (diff * diff).mean()
    loss = supervised + lambda_r * rec
    return loss, float(supervised.value), float(rec.value)


# -- training -----------------------------------------------------------------


def train_lifter(
    x_labeled: np.ndarray,
    y_labeled: np.ndarray,
    x_unlabeled: np.ndarray,
    recon_module,
    config: TrainConfig,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[LifterModule, TrainingHistory]:
    """Stage-2 training of the lifting network.

    The reconstruction module (dictionary or autoencoder baseline) is
    frozen: its parameters enter the loss graph as constants and are
    never updated. Separate Philox streams drive initialization and the
    labeled/unlabeled batch orders, so runs with lambda_r=0 consume the
    labeled stream identically to the supervised-only baseline.
    """
    cfg = config
    if x_labeled.shape[0] == 0:
        raise EmptyBatch("stage-2 training needs labeled samples")
    if cfg.lambda_r > 0 and recon_module is None:
        raise MissingDictionary("lambda_r > 0 requires a stage-1 module")

    module = LifterModule(seed=cfg.seed)
    module.set_normalization(x_labeled, y_labeled)

    history = TrainingHistory(
        columns=("epoch", "L_L", "L_rec", "val_mpjpe_hand", "val_mpjpe_obj"),
        metadata={
            "lambda_r": cfg.lambda_r, "lr": cfg.lr, "batch_size": cfg.batch_size,
            "epochs": cfg.est_epochs, "seed": cfg.seed,
            "labeled": int(x_labeled.shape[0]),
            "unlabeled": int(x_unlabeled.shape[0]),
            "frame_gradient": cfg.frame_gradient,
        },
    )
    labeled_rng = make_rng(cfg.seed, STREAM_EST_LABELED)
    unlabeled_rng = make_rng(cfg.seed, STREAM_EST_UNLABELED)
    n_l = x_labeled.shape[0]
    n_u = x_unlabeled.shape[0]
    u_batch = cfg.unlabeled_batch or cfg.batch_size
    store = module.store
    step = 0
    for epoch in range(cfg.est_epochs):
        order = labeled_rng.permutation(n_l)
        sup_sum = rec_sum = 0.0
        n_batches = 0
        for start in range(0, n_l, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if cfg.lambda_r > 0 and n_u > 0:
                u_idx = unlabeled_rng.choice(n_u, size=min(u_batch, n_u),
                                             replace=False)
                xu = x_unlabeled[u_idx]
            else:
                xu = x_unlabeled[:0]
            loss, sup_val, rec_val = combined_loss_node(
                module, recon_module, x_labeled[idx], y_labeled[idx], xu,
                cfg.lambda_r, "train", cfg.frame_gradient,
            )
            store.zero_grad()
            backward(loss)
            step += 1
            adam_step(store, lr=cfg.lr, step=step)
            sup_sum += sup_val
            rec_sum += rec_val
            n_batches += 1
        val_hand = val_obj = float("nan")
        if validation is not None:
            pred = module.estimate(validation[0])
            val_hand = mpjpe(pred, validation[1], group="hand")
            val_obj = mpjpe(pred, validation[1], group="object")
        history.add(epoch, sup_sum / n_batches, rec_sum / n_batches,
                    val_hand, val_obj)
    return module, history


class PoseLifter(BaseEstimator, RegressorMixin):
    """Scikit-learn style semi-supervised 2D-to-3D pose lifter.

    fit(X, y) takes X shaped (n, 29, 2) in pixels and y shaped
    (n, 29, 3) in millimeters where fully-NaN rows mark unlabeled
    samples. A reconstruction prior is trained on the labeled poses
    (unless a fitted GraspDictionary is supplied via ``dictionary``) and
    then frozen while the lifting network trains on everything.
    """

    def __init__(self, n_atoms: int = 30, lambda_r: float = 100.0,
                 validity_weight: float = 100.0, lr: float = 1e-3,
                 batch_size: int = 64, dict_epochs: int = 200,
                 est_epochs: int = 150, seed: int = 0,
                 frame_gradient: str = "full", dictionary=None):
        self.n_atoms = n_atoms
        self.lambda_r = lambda_r
        self.validity_weight = validity_weight
        self.lr = lr
        self.batch_size = batch_size
        self.dict_epochs = dict_epochs
        self.est_epochs = est_epochs
        self.seed = seed
        self.frame_gradient = frame_gradient
        self.dictionary = dictionary

    def _config(self) -> TrainConfig:
        return TrainConfig(
            k=self.n_atoms, lambda_dict=self.validity_weight,
            lambda_r=self.lambda_r, lr=self.lr, batch_size=self.batch_size,
            dict_epochs=self.dict_epochs, est_epochs=self.est_epochs,
            seed=self.seed, frame_gradient=self.frame_gradient,
        )

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 3 or X.shape[1:] != (NUM_POINTS, 2):
            raise ShapeMismatch(f"X must be (n, {NUM_POINTS}, 2), got {X.shape}")
        if y.shape != (X.shape[0], NUM_POINTS, 3):
            raise ShapeMismatch(f"y must be (n, {NUM_POINTS}, 3), got {y.shape}")
        labeled = np.isfinite(y).all(axis=(1, 2))
        cfg = self._config()
        if self.lambda_r > 0:
            if self.dictionary is not None:
                recon = self.dictionary.module_
            else:
                vectors, _ = poses_to_cylindrical(y[labeled])
                recon, _ = fit_dictionary_vectors(vectors, cfg)
        else:
            recon = None
        self.module_, self.history_ = train_lifter(
            X[labeled], y[labeled], X[~labeled], recon, cfg
        )
        return self

    def predict(self, X) -> np.ndarray:
        return self.module_.estimate(np.asarray(X, dtype=np.float64))

    def score(self, X, y) -> float:
        """Negative Procrustes-aligned mean joint error (higher is better)."""
        return -mpjpe(self.predict(X), np.asarray(y, dtype=np.float64))
