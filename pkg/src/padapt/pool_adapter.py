"""Pooling visual adapter: window-average a feature grid to p x p, project
each pooled cell through a two-layer MLP into LM width, and concatenate
several pool sizes into one embedding sequence.

Row order is the positional carrier: within a scale, pooled cells appear
row-major, and scales appear in config order.  Any subset of the configured
scales can be selected at inference without touching the others' outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, SelectionError
from .nnblocks import glorot_uniform
from .rng import substream
from .vision import FeatureGrid


@dataclass(frozen=True)
class PoolConfig:
    scales: tuple[int, ...]
    llm_width: int
    mlp_hidden: int = 0  # 0 means same as llm_width
    shared_mlp: bool = False

    def __post_init__(self):
        if not self.scales:
            raise ConfigError("at least one pool scale is required")
        if any(p < 1 for p in self.scales):
            raise ConfigError(f"pool scales must be >= 1, got {self.scales}")
        if len(set(self.scales)) != len(self.scales):
            raise ConfigError(f"duplicate pool scales: {self.scales}")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.llm_width

    def mlp_prefix(self, p: int) -> str:
        return "adapter.shared" if self.shared_mlp else f"adapter.p{p}"

    def embed_count(self, selected: Sequence[int] | None = None) -> int:
        scales = self.scales if selected is None else selected
        return sum(p * p for p in scales)


@dataclass
class VisualEmbeddingSeq:
    """``[N x d]`` embeddings with per-row (scale, row, col) provenance."""

    embeddings: Tensor
    provenance: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def _window_bounds(extent: int, p: int) -> list[tuple[int, int]]:
    return [
        (math.floor(i * extent / p), math.ceil((i + 1) * extent / p)) for i in range(p)
    ]


def adaptive_pool(values: Tensor, p: int) -> Tensor:
    """Average ``[H x W x C]`` over floor/ceil windows down to ``[p x p x C]``.

    Windows for output cell (i, j) span rows [floor(iH/p), ceil((i+1)H/p))
    and the matching columns; p may exceed the grid, in which case windows
    repeat cells.  Window sums are exactly rounded (order-independent), so
    symmetries like a horizontal flip hold bitwise.  Fully differentiable.
    """
    if values.data.ndim != 3 or values.data.size == 0:
        raise ad.ShapeError(f"expected a non-empty HxWxC grid, got shape {values.shape}")
    if p < 1:
        raise ConfigError(f"pool size must be >= 1, got {p}")
    height, width, channels = values.shape
    row_b = _window_bounds(height, p)
    col_b = _window_bounds(width, p)
    out = np.empty((p, p, channels))
    for i, (r0, r1) in enumerate(row_b):
        for j, (c0, c1) in enumerate(col_b):
            window = values.data[r0:r1, c0:c1].reshape(-1, channels)
            n = window.shape[0]
            out[i, j] = [math.fsum(col) / n for col in window.T.tolist()]

    def backward(g: np.ndarray) -> None:
        if values.requires_grad:
            grad = np.zeros_like(values.data)
            for i, (r0, r1) in enumerate(row_b):
                for j, (c0, c1) in enumerate(col_b):
                    grad[r0:r1, c0:c1] += g[i, j] / ((r1 - r0) * (c1 - c0))
            values.accumulate_grad(grad)

    return ad.custom_op(out, (values,), backward, "adaptive_pool")


def pool_oracle(values: np.ndarray, p: int) -> np.ndarray:
    """Brute-force window average used to cross-check :func:`adaptive_pool`.

    Enumerates every cell of every window explicitly; sums are exactly
    rounded, so agreement with the implementation is bitwise, not
    implementation-shared.
    """
    height, width, channels = values.shape
    out = np.empty((p, p, channels))
    for i in range(p):
        r0, r1 = math.floor(i * height / p), math.ceil((i + 1) * height / p)
        for j in range(p):
            c0, c1 = math.floor(j * width / p), math.ceil((j + 1) * width / p)
            cells = [(r, c) for r in range(r0, r1) for c in range(c0, c1)]
            for ch in range(channels):
                total = math.fsum(float(values[r, c, ch]) for r, c in cells)
                out[i, j, ch] = total / len(cells)
    return out


def mlp_project(pooled: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Flatten ``[p x p x C]`` row-major and apply w2*gelu(w1*x + b1) + b2."""
    p1, p2, channels = pooled.shape
    w1 = params[f"{prefix}.w1"]
    if w1.shape[0] != channels:
        raise ad.ShapeError(
            f"adapter {prefix} expects {w1.shape[0]} channels, grid has {channels}"
        )
    x = ad.reshape(pooled, (p1 * p2, channels))
    h = ad.gelu(ad.bias_add(ad.matmul(x, w1), params[f"{prefix}.b1"]))
    return ad.bias_add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def init_pool_adapter(cfg: PoolConfig, in_channels: int, root_seed: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    prefixes = ["adapter.shared"] if cfg.shared_mlp else [f"adapter.p{p}" for p in cfg.scales]
    for prefix in prefixes:
        for name, shape in (
            (f"{prefix}.w1", (in_channels, cfg.hidden)),
            (f"{prefix}.w2", (cfg.hidden, cfg.llm_width)),
        ):
            params[name] = Tensor(
                glorot_uniform(substream(root_seed, "init", name), shape), requires_grad=True
            )
        params[f"{prefix}.b1"] = Tensor(np.zeros(cfg.hidden), requires_grad=True)
        params[f"{prefix}.b2"] = Tensor(np.zeros(cfg.llm_width), requires_grad=True)
    return params


def multi_scale_embed(
    grid: FeatureGrid,
    params: dict[str, Tensor],
    cfg: PoolConfig,
    selected: Sequence[int] | None = None,
) -> VisualEmbeddingSeq:
    """Pool + project per selected scale, concatenated in config order."""
    if selected is None:
        chosen = list(cfg.scales)
    else:
        chosen = list(selected)
        if not chosen:
            raise SelectionError("empty scale selection")
        unknown = set(chosen) - set(cfg.scales)
        if unknown:
            raise ConfigError(f"scales {sorted(unknown)} not in configured {cfg.scales}")
        chosen = [p for p in cfg.scales if p in set(chosen)]  # config order wins
    pieces = []
    provenance: list[tuple[int, int, int]] = []
    for p in chosen:
        pooled = adaptive_pool(grid.values, p)
        pieces.append(mlp_project(pooled, params, cfg.mlp_prefix(p)))
        provenance.extend((p, i, j) for i in range(p) for j in range(p))
    embeddings = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
    return VisualEmbeddingSeq(embeddings=embeddings, provenance=provenance)
