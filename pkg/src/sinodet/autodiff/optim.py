"""Named parameter collections and the Adam optimizer."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Ordered map of named parameter tensors belonging to one partition
    (e.g. the reconstruction weights vs the detector weights)."""

    def __init__(self, partition: str):
        self._partition = str(partition)
        self._params: dict[str, Tensor] = {}

    @property
    def partition(self) -> str:
        return self._partition

    def add(self, name: str, value, requires_grad=True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=requires_grad)
        t.requires_grad = requires_grad
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict, strict=True):
        missing = set(self._params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            t = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()


class AdamState:
    """Per-ParamSet Adam moments with bias correction (standard update)."""

    def __init__(self, params: ParamSet, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1): got {beta1}, {beta2}")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: ParamSet, state: AdamState):
    """One Adam update over every parameter.  Gradients must be populated
    and are left untouched (the caller zeroes them)."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: missing gradients for {missing[:5]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
