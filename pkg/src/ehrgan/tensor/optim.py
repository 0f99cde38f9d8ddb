"""Parameter containers, Adam, and global-norm gradient clipping."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import Tensor


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    l2: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.clip > 0:
            raise ValueError(f"clip threshold must be > 0, got {self.clip}")
        if self.l2 < 0:
            raise ValueError(f"l2 coefficient must be >= 0, got {self.l2}")


class NonFiniteGradientError(FloatingPointError):
    pass


class ParamSet:
    """Named trainable tensors plus their Adam moments."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, p in (params or {}).items():
            self.add(name, p)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; unreached parameters get zeros."""
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads().values())))

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {n!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype) -> None:
        for n, p in self.params.items():
            p.data = p.data.astype(dtype)
            self.m[n] = self.m[n].astype(dtype)
            self.v[n] = self.v[n].astype(dtype)

    @contextlib.contextmanager
    def frozen(self):
        """Stop recording gradients for these parameters inside the block."""
        flags = {n: p.requires_grad for n, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for n, p in self.params.items():
                p.requires_grad = flags[n]


def clip_gradients(grads: dict[str, np.ndarray], clip: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``clip / norm`` when the global norm exceeds ``clip``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > clip:
        scale = clip / norm
        grads = {n: g * scale for n, g in grads.items()}
    return grads, norm


def clip_and_step(params: ParamSet, cfg: OptimConfig) -> float:
    """One clipped Adam update. Returns the pre-clip global gradient norm."""
    grads = params.grads()
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {n!r}")
    grads, norm = clip_gradients(grads, cfg.clip)
    params.step += 1
    t = params.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for n, p in params.items():
        g = grads[n]
        m = params.m[n]
        v = params.v[n]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data = p.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return norm
