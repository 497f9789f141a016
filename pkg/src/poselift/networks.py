"""Network building blocks shared by the dictionary and lifting models.

Layers register their tensors in a :class:`~poselift.params.ParamStore`
under dotted names (e.g. ``enc.layer3.W``) so checkpoints are flat named
collections. ``forward`` methods take and return autodiff nodes; passing
``frozen=True`` builds the same computation from constant leaves so no
gradient reaches the layer's parameters.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Node, constant
from .params import ParamStore

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def glorot_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


class Linear:
    """y = x @ W + b over the last axis.

    Binds to existing store entries when present (checkpoint reload)
    instead of re-initializing them.
    """

    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, scale: str = "he"):
        init = he_normal if scale == "he" else glorot_normal
        self.store = store
        self.w_name = f"{name}.W"
        self.b_name = f"{name}.b"
        if self.w_name not in store:
            store.add(self.w_name, init(rng, fan_in, fan_out))
            store.add(self.b_name, np.zeros(fan_out))
        elif store[self.w_name].value.shape != (fan_in, fan_out):
            raise ValueError(f"{self.w_name}: stored shape "
                             f"{store[self.w_name].value.shape} != ({fan_in}, {fan_out})")

    def forward(self, x: Node, frozen: bool = False) -> Node:
        w = self.store.node(self.w_name, frozen)
        b = self.store.node(self.b_name, frozen)
        return x @ w + b


class BatchNorm:
    """Per-feature batch normalization over all leading axes.

    Training mode normalizes with mini-batch statistics and updates the
    running averages (momentum 0.9); inference mode applies the stored
    running statistics, which makes the layer a fixed affine map.
    """

    def __init__(self, store: ParamStore, name: str, width: int):
        self.store = store
        self.g_name = f"{name}.bn_gamma"
        self.b_name = f"{name}.bn_beta"
        self.m_name = f"{name}.bn_mean"
        self.v_name = f"{name}.bn_var"
        if self.g_name not in store:
            store.add(self.g_name, np.ones(width))
            store.add(self.b_name, np.zeros(width))
            store.add(self.m_name, np.zeros(width), trainable=False)
            store.add(self.v_name, np.ones(width), trainable=False)

    def forward(self, x: Node, mode: str, frozen: bool = False) -> Node:
        gamma = self.store.node(self.g_name, frozen)
        beta = self.store.node(self.b_name, frozen)
        axes = tuple(range(x.value.ndim - 1))
        if mode == "train":
            mu = x.mean(axis=axes, keepdims=True)
            var = ((x - mu) * (x - mu)).mean(axis=axes, keepdims=True)
            xhat = (x - mu) / (var + BN_EPS).sqrt()
            # Running statistics live outside the graph.
            rm = self.store[self.m_name].value
            rv = self.store[self.v_name].value
            rm *= BN_MOMENTUM
            rm += (1.0 - BN_MOMENTUM) * mu.value.reshape(rm.shape)
            rv *= BN_MOMENTUM
            rv += (1.0 - BN_MOMENTUM) * var.value.reshape(rv.shape)
        elif mode == "infer":
            mu = constant(self.store[self.m_name].value)
            var = constant(self.store[self.v_name].value)
            xhat = (x - mu) / (var + BN_EPS).sqrt()
        else:
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return xhat * gamma + beta


class ResidualMLP:
    """Fully connected stack with additive shortcuts.

    ``sizes`` lists every layer's output width; each hidden layer is
    followed by ReLU then batch normalization, the last layer is linear
    (plus softmax when ``simplex=True``). A shortcut pair (i, j) adds the
    post-activation output of layer i to layer j's pre-activation, so the
    two widths must match.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        in_dim: int,
        sizes: tuple[int, ...],
        shortcuts: frozenset[tuple[int, int]],
        simplex: bool,
        rng: np.random.Generator,
    ):
        self.prefix = prefix
        self.sizes = tuple(sizes)
        self.shortcuts = frozenset(shortcuts)
        self.simplex = simplex
        for i, j in self.shortcuts:
            if sizes[i - 1] != sizes[j - 1]:
                raise ValueError(f"shortcut {i}->{j} joins unequal widths")
        self.linears: list[Linear] = []
        self.norms: list[BatchNorm | None] = []
        fan_in = in_dim
        n = len(sizes)
        for idx, width in enumerate(sizes, start=1):
            layer_name = f"{prefix}.layer{idx}"
            last = idx == n
            self.linears.append(
                Linear(store, layer_name, fan_in, width, rng,
                       scale="glorot" if last else "he")
            )
            self.norms.append(None if last else BatchNorm(store, layer_name, width))
            fan_in = width

    def forward(self, x: Node, mode: str, frozen: bool = False) -> Node:
        outputs: dict[int, Node] = {}
        n = len(self.sizes)
        for idx in range(1, n + 1):
            z = self.linears[idx - 1].forward(x, frozen)
            for i, j in sorted(self.shortcuts):
                if j == idx:
                    z = z + outputs[i]
            if idx < n:
                x = self.norms[idx - 1].forward(z.relu(), mode, frozen)
                outputs[idx] = x
            else:
                x = z
        return x.softmax(axis=-1) if self.simplex else x
