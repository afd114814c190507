"""SGD and Adam over lists of leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Optimizer:
    """Applies one update per :meth:`step`; gradients are never cleared implicitly."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-3, **kw):
        if kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {kind!r}")
        self.params = list(params)
        self.state = OptimizerState(kind=kind, lr=lr, **kw)
        if kind == "adam":
            self.state.m = [np.zeros_like(p.data) for p in self.params]
            self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                name = p.name or f"#{i}"
                raise ContractError(f"parameter {name} has no gradient")
        st = self.state
        st.step_count += 1
        if st.kind == "sgd":
            for p in self.params:
                p.data -= (st.lr * p.grad).astype(p.dtype, copy=False)
            return
        t = st.step_count
        c1 = 1.0 - st.beta1**t
        c2 = 1.0 - st.beta2**t
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            update = st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data -= update.astype(p.dtype, copy=False)


def sgd(params, lr: float) -> Optimizer:
    return Optimizer(params, "sgd", lr)


def adam(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Optimizer:
    return Optimizer(params, "adam", lr, beta1=beta1, beta2=beta2, eps=eps)
