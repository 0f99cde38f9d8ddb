"""Building blocks shared by the predictor, discriminator, and generator."""

from __future__ import annotations

import numpy as np

from .tensor import ParamSet, Tensor, ops


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def glorot_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                dtype=np.float64) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class ConvTrunk:
    """Parallel conv banks over time, each ReLU + max-over-time, concatenated.

    Output width is ``len(widths) * maps``.
    """

    def __init__(self, params: ParamSet, prefix: str, in_dim: int, widths=(3, 4, 5), maps: int = 100,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        self.prefix = prefix
        self.widths = tuple(widths)
        self.maps = maps
        self.in_dim = in_dim
        self.params = params
        rng = rng or np.random.default_rng(0)
        for w in self.widths:
            params.add(f"{prefix}.conv{w}.w", he_init(rng, (w, in_dim, maps), w * in_dim, dtype))
            params.add(f"{prefix}.conv{w}.b", np.zeros(maps, dtype=dtype))

    @property
    def out_dim(self) -> int:
        return len(self.widths) * self.maps

    @property
    def min_length(self) -> int:
        return max(self.widths)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] < self.min_length:
            raise ops.ShapeError(f"sequence length {x.shape[1]} shorter than the widest filter ({self.min_length})")
        if x.shape[2] != self.in_dim:
            raise ops.ShapeError(f"embedding width {x.shape[2]} does not match model width {self.in_dim}")
        pooled = []
        p = self.params
        for w in self.widths:
            fmap = ops.relu(ops.conv1d(x, p[f"{self.prefix}.conv{w}.w"], p[f"{self.prefix}.conv{w}.b"]))
            h, _ = ops.max_over_time(fmap)
            pooled.append(h)
        return ops.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]


def weight_names(params: ParamSet) -> list[str]:
    """Names of weight (non-bias, non-normalisation) parameters."""
    return [n for n in params if n.endswith(".w")]
