"""Named trainable parameters with gradient and Adam-moment slots."""

from __future__ import annotations

import numpy as np

from .autodiff import Node
from .errors import ShapeMismatch


class Param:
    """One named tensor: value, gradient, and Adam moments."""

    __slots__ = ("value", "grad", "m", "v", "trainable")

    def __init__(self, value, trainable: bool = True):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.trainable = trainable


class ParamStore:
    """Ordered name -> Param mapping owned by one training loop.

    Non-trainable entries (batch-norm running statistics, normalization
    constants) ride along for checkpointing but are skipped by the
    optimizer and never linked into gradient graphs.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value, trainable: bool = True) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Param(value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def node(self, name: str, frozen: bool = False) -> Node:
        """Graph leaf for a parameter; frozen leaves get no gradient."""
        p = self._params[name]
        if frozen or not p.trainable:
            return Node(p.value)
        return Node(p.value, param=p)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter: {name}")
            p = self._params[name]
            if p.value.shape != arr.shape:
                raise ShapeMismatch(
                    f"{name}: expected {p.value.shape}, got {arr.shape}"
                )
            p.value[...] = arr


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step: int = 1,
) -> None:
    """In-place Adam update with bias correction; zeroes grads afterward.

    ``step`` is the 1-based update count used for bias correction.
    """
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name in store.trainable_names():
        p = store[name]
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
    store.zero_grad()
