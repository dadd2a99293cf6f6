"""Parameter management and optimization.

A :class:`ParamStore` owns named parameter tensors plus matching ADAM moment
slots and a shared step counter. Weight decay is decoupled: applied directly
to the parameter before the moment update, so decay never leaks into the
adaptive scaling.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import RngState

__all__ = ["glorot_uniform", "ParamStore"]


def glorot_uniform(fan_in: int, fan_out: int, rng: RngState) -> T.Tensor:
    """Uniform init on [-b, b], b = sqrt(6 / (fan_in + fan_out)), shape (fan_out, fan_in)."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan dimensions must be >= 1, got ({fan_in}, {fan_out})")
    b = math.sqrt(6.0 / (fan_in + fan_out))
    return T.tensor(rng.uniform((fan_out, fan_in), -b, b))


class ParamStore:
    """Named parameters with gradient and ADAM moment slots.

    Names are unique; moment arrays always mirror their parameter's shape.
    One store is owned by exactly one trainer at a time.
    """

    def __init__(self):
        self.params: dict[str, T.Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> T.Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def add(self, name: str, values) -> T.Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = T.tensor(np.asarray(values, dtype=T.get_dtype()), requires_grad=True, name=name)
        self.params[name] = p
        self._m[name] = np.zeros_like(p.data)
        self._v[name] = np.zeros_like(p.data)
        return p

    def weight(self, name: str, fan_in: int, fan_out: int, rng: RngState) -> T.Tensor:
        return self.add(name, glorot_uniform(fan_in, fan_out, rng).data)

    def zeros(self, name: str, shape) -> T.Tensor:
        return self.add(name, np.zeros(shape, dtype=T.get_dtype()))

    # ---- gradients ----

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def _require_grads(self, op: str) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"{op}: gradients not populated for {missing[:3]}"
                             f"{'...' if len(missing) > 3 else ''}; call zero_grads() "
                             "and backward() first")

    def global_grad_norm(self) -> float:
        self._require_grads("global_grad_norm")
        total = 0.0
        for p in self.params.values():
            g = p.grad
            total += float(np.dot(g.ravel(), g.ravel()))
        return math.sqrt(total)

    def clip_global_norm(self, max_norm: float) -> float:
        """Scale all gradients so their joint l2 norm is at most max_norm.

        Returns the applied scale (1.0 when already within bounds).
        """
        if max_norm <= 0:
            raise ValueError(f"max_norm must be positive, got {max_norm}")
        norm = self.global_grad_norm()
        if norm <= max_norm:
            return 1.0
        scale = max_norm / norm
        for p in self.params.values():
            p.grad *= scale
        return scale

    # ---- ADAM ----

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, weight_decay: float = 0.0) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self._require_grads("adam_step")
        t = self.step + 1
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for name, p in self.params.items():
            if name in self.frozen:
                continue
            if weight_decay:
                p.data -= lr * weight_decay * p.data
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - beta1) * (g - m)
            v += (1.0 - beta2) * (g * g - v)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        self.step = t

    def freeze(self, prefix: str) -> list[str]:
        """Exclude parameters under ``prefix`` from optimizer updates."""
        names = [n for n in self.params if n.startswith(prefix)]
        self.frozen.update(names)
        return names

    # ---- state transfer ----

    def values(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray], prefix: str = "") -> list[str]:
        """Overwrite matching parameters in place; returns the names loaded.

        Only names present in both the store and ``values`` (after an optional
        prefix filter) are touched, so an encoder checkpoint can seed a larger
        supervised model.
        """
        loaded = []
        for name, p in self.params.items():
            if prefix and not name.startswith(prefix):
                continue
            if name not in values:
                continue
            arr = np.asarray(values[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch loading {name!r}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data[...] = arr
            loaded.append(name)
        return loaded
