"""Pre-norm transformer block assembly shared by the encoder and the LM.

Parameters live in a flat ``{name: Tensor}`` store; blocks address theirs by
a dotted prefix, e.g. ``lm.block0`` owns ``lm.block0.attn.q_proj``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Additive attention mask value: exp(x - max) underflows to exactly 0.0,
# which keeps masked positions bitwise-invisible to the softmax.
MASK_VALUE = -1e9


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@lru_cache(maxsize=32)
def _causal_mask_array(t_len: int) -> np.ndarray:
    mask = np.zeros((t_len, t_len))
    mask[np.triu_indices(t_len, k=1)] = MASK_VALUE
    return mask


def causal_mask(t_len: int) -> Tensor:
    return Tensor(_causal_mask_array(t_len))


def init_block_params(
    rng_for, prefix: str, width: int, mlp_hidden: int
) -> dict[str, Tensor]:
    """One pre-norm block's parameters; ``rng_for(name)`` yields a per-tensor rng."""
    params: dict[str, Tensor] = {}

    def weight(name, shape):
        params[name] = Tensor(glorot_uniform(rng_for(name), shape), requires_grad=True)

    def const(name, value):
        params[name] = Tensor(value, requires_grad=True)

    const(f"{prefix}.ln1.gain", np.ones(width))
    const(f"{prefix}.ln1.bias", np.zeros(width))
    for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
        weight(f"{prefix}.attn.{proj}", (width, width))
    const(f"{prefix}.ln2.gain", np.ones(width))
    const(f"{prefix}.ln2.bias", np.zeros(width))
    weight(f"{prefix}.mlp.w1", (width, mlp_hidden))
    const(f"{prefix}.mlp.b1", np.zeros(mlp_hidden))
    weight(f"{prefix}.mlp.w2", (mlp_hidden, width))
    const(f"{prefix}.mlp.b2", np.zeros(width))
    return params


def multi_head_attention(
    x: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    t_len, width = x.shape
    if width % heads:
        raise ad.ShapeError(f"width {width} not divisible by {heads} heads")
    head_dim = width // heads
    q = ad.split(ad.matmul(x, w_q), heads, axis=1)
    k = ad.split(ad.matmul(x, w_k), heads, axis=1)
    v = ad.split(ad.matmul(x, w_v), heads, axis=1)
    ctx = []
    for h in range(heads):
        scores = ad.scale(ad.matmul(q[h], ad.transpose(k[h])), 1.0 / math.sqrt(head_dim))
        if mask is not None:
            scores = ad.add(scores, mask)
        ctx.append(ad.matmul(ad.softmax(scores, axis=1), v[h]))
    return ad.matmul(ad.concat(ctx, axis=1), w_o)


def transformer_block(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    h = ad.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    attn = multi_head_attention(
        h,
        params[f"{prefix}.attn.q_proj"],
        params[f"{prefix}.attn.k_proj"],
        params[f"{prefix}.attn.v_proj"],
        params[f"{prefix}.attn.o_proj"],
        heads,
        mask,
    )
    x = ad.add(x, attn)
    h = ad.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    h = ad.bias_add(ad.matmul(h, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"])
    h = ad.gelu(h)
    h = ad.bias_add(ad.matmul(h, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return ad.add(x, h)
