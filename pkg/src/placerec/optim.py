"""Optimisers over named parameter lists.

Both keep their state in named float arrays so a checkpoint can carry it and
a resumed run continues bit for bit where it left off.
"""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from .errors import InvalidParameter, ShapeError
from .kpconv import Param

NamedParams = Sequence[Tuple[str, Param]]


class SgdMomentum:
    """Heavy-ball SGD: v <- momentum * v - lr * g; p <- p + v.

    ``lr_scales`` maps parameter-name substrings to a learning-rate factor,
    which is how the deformable offset heads train ten times slower than the
    rest of the network. ``lr`` is mutable; the training loop sets the decayed
    value before each step.
    """

    def __init__(self, params: NamedParams, lr: float, momentum: float = 0.98,
                 lr_scales: Dict[str, float] | None = None):
        if lr <= 0 or not 0 <= momentum < 1:
            raise InvalidParameter(f"bad lr {lr} or momentum {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.lr_scales = dict(lr_scales or {})
        self.velocity = {name: np.zeros_like(p.value)
                         for name, p in self.params}

    def _scale(self, name: str) -> float:
        for key, s in self.lr_scales.items():
            if key in name:
                return s
        return 1.0

    def step(self) -> None:
        for name, p in self.params:
            v = self.velocity[name]
            v *= self.momentum
            v -= (self.lr * self._scale(name)) * p.grad
            p.value += v

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return {f"opt.v.{k}": v for k, v in self.velocity.items()}

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        for name, p in self.params:
            key = f"opt.v.{name}"
            if key not in tensors:
                raise ShapeError(f"optimizer state missing '{key}'")
            t = np.asarray(tensors[key], dtype=p.value.dtype)
            if t.shape != p.value.shape:
                raise ShapeError(f"optimizer tensor '{key}' shape mismatch")
            self.velocity[name] = t.copy()


class Adam:
    """Adam with decoupled weight decay (the decay steps the raw parameter,
    not the gradient)."""

    def __init__(self, params: NamedParams, lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0 or eps <= 0:
            raise InvalidParameter(f"bad lr {lr} or eps {eps}")
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise InvalidParameter(f"betas must lie in [0, 1): {betas}")
        self.params = list(params)
        self.lr = lr
        self.betas = (b1, b2)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in self.params}
        self.v = {name: np.zeros_like(p.value) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= self.lr * update

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {"opt.t": np.array([self.t], dtype=np.int64)}
        for k, m in self.m.items():
            out[f"opt.m.{k}"] = m
        for k, v in self.v.items():
            out[f"opt.v.{k}"] = v
        return out

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        if "opt.t" not in tensors:
            raise ShapeError("optimizer state missing 'opt.t'")
        self.t = int(np.asarray(tensors["opt.t"]).reshape(-1)[0])
        for name, p in self.params:
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"opt.{slot}.{name}"
                if key not in tensors:
                    raise ShapeError(f"optimizer state missing '{key}'")
                t = np.asarray(tensors[key], dtype=p.value.dtype)
                if t.shape != p.value.shape:
                    raise ShapeError(f"optimizer tensor '{key}' shape mismatch")
                store[name] = t.copy()
