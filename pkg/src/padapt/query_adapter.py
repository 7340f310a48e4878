"""Learned-query cross-attention adapter, the condensing baseline.

K learned queries attend over the flattened feature grid and an output MLP
maps them to LM width.  Without positional key embeddings the output is, by
construction, invariant to any spatial permutation of the grid; reductions
over grid cells use exactly rounded summation so that invariance holds
bitwise, not just approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nnblocks import glorot_uniform
from .pool_adapter import VisualEmbeddingSeq
from .rng import substream
from .vision import FeatureGrid


@dataclass(frozen=True)
class QueryAdapterConfig:
    num_queries: int
    in_channels: int
    llm_width: int
    attn_dim: int = 0  # 0 means same as in_channels
    mlp_hidden: int = 0  # 0 means same as llm_width
    key_pos: bool = False
    grids: tuple[tuple[int, int], ...] = ()  # position tables when key_pos

    def __post_init__(self):
        if self.num_queries < 1:
            raise ConfigError("need at least one query")
        if self.key_pos and not self.grids:
            raise ConfigError("key_pos requires declared grid extents")

    @property
    def attn(self) -> int:
        return self.attn_dim or self.in_channels

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.llm_width


def init_query_adapter(cfg: QueryAdapterConfig, root_seed: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def weight(name, shape):
        params[name] = Tensor(
            glorot_uniform(substream(root_seed, "init", name), shape), requires_grad=True
        )

    params["qadapter.queries"] = Tensor(
        substream(root_seed, "init", "qadapter.queries").normal(
            scale=0.02, size=(cfg.num_queries, cfg.in_channels)
        ),
        requires_grad=True,
    )
    weight("qadapter.attn.q_proj", (cfg.in_channels, cfg.attn))
    weight("qadapter.attn.k_proj", (cfg.in_channels, cfg.attn))
    weight("qadapter.attn.v_proj", (cfg.in_channels, cfg.attn))
    weight("qadapter.attn.o_proj", (cfg.attn, cfg.in_channels))
    weight("qadapter.mlp.w1", (cfg.in_channels, cfg.hidden))
    params["qadapter.mlp.b1"] = Tensor(np.zeros(cfg.hidden), requires_grad=True)
    weight("qadapter.mlp.w2", (cfg.hidden, cfg.llm_width))
    params["qadapter.mlp.b2"] = Tensor(np.zeros(cfg.llm_width), requires_grad=True)
    if cfg.key_pos:
        for rows, cols in cfg.grids:
            name = f"qadapter.keypos_{rows}x{cols}"
            params[name] = Tensor(
                substream(root_seed, "init", name).normal(
                    scale=0.02, size=(rows * cols, cfg.in_channels)
                ),
                requires_grad=True,
            )
    return params


def _fsum_rows(mat: np.ndarray) -> np.ndarray:
    """Exactly rounded per-row sums: identical under any column permutation."""
    return np.array([math.fsum(row) for row in mat.tolist()])


def _attention_forward(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dim = q.shape[1]
    scores = (q @ k.T) / math.sqrt(dim)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    weights = e / _fsum_rows(e)[:, None]
    # out[i, c] = exact sum over cells j of weights[i, j] * v[j, c]
    prod = weights[:, :, None] * v[None, :, :]  # K x cells x dim
    flat = prod.transpose(0, 2, 1).reshape(-1, prod.shape[1])
    out = _fsum_rows(flat).reshape(q.shape[0], v.shape[1])
    return out, weights


def attention_weights(q: Tensor, k: Tensor) -> np.ndarray:
    """Diagnostic: the softmax weights the fused op would use (rows sum to 1)."""
    _, weights = _attention_forward(q.data, k.data, np.zeros_like(k.data))
    return weights


def scaled_cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dim)) v with order-independent reductions."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ad.ShapeError(
            f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}"
        )
    out, weights = _attention_forward(q.data, k.data, v.data)
    dim = q.shape[1]

    def backward(g: np.ndarray) -> None:
        d_weights = g @ v.data.T
        d_scores = weights * (d_weights - (d_weights * weights).sum(axis=1, keepdims=True))
        d_scores /= math.sqrt(dim)
        if q.requires_grad:
            q.accumulate_grad(d_scores @ k.data)
        if k.requires_grad:
            k.accumulate_grad(d_scores.T @ q.data)
        if v.requires_grad:
            v.accumulate_grad(weights.T @ g)

    return ad.custom_op(out, (q, k, v), backward, "scaled_cross_attention")


def query_embed(
    grid: FeatureGrid, params: dict[str, Tensor], cfg: QueryAdapterConfig
) -> VisualEmbeddingSeq:
    """Condense a feature grid into exactly K embeddings of LM width."""
    if grid.rows * grid.cols == 0:
        raise ad.ShapeError("empty feature grid")
    x = grid.flat()
    if cfg.key_pos:
        name = f"qadapter.keypos_{grid.rows}x{grid.cols}"
        if name not in params:
            raise ConfigError(f"no key position table for a {grid.rows}x{grid.cols} grid")
        x = ad.add(x, ad.embedding_lookup(params[name], np.arange(grid.rows * grid.cols)))
    queries = params["qadapter.queries"]
    q = ad.matmul(queries, params["qadapter.attn.q_proj"])
    k = ad.matmul(x, params["qadapter.attn.k_proj"])
    v = ad.matmul(x, params["qadapter.attn.v_proj"])
    attended = scaled_cross_attention(q, k, v)
    h = ad.add(queries, ad.matmul(attended, params["qadapter.attn.o_proj"]))
    h = ad.gelu(ad.bias_add(ad.matmul(h, params["qadapter.mlp.w1"]), params["qadapter.mlp.b1"]))
    out = ad.bias_add(ad.matmul(h, params["qadapter.mlp.w2"]), params["qadapter.mlp.b2"])
    provenance = [(0, i, 0) for i in range(cfg.num_queries)]
    return VisualEmbeddingSeq(embeddings=out, provenance=provenance)
