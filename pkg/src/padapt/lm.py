"""Tiny decoder-only transformer consuming text tokens and spliced visual rows.

The input sequence mixes token ids with references into a visual embedding
sequence; visual rows enter the block stack directly, bypassing the token
table but receiving positional embeddings like any other position.  Named
parameter groups expose the attention Q/V projections for stage-wise
freezing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nnblocks import causal_mask, glorot_uniform, init_block_params, transformer_block
from .pool_adapter import VisualEmbeddingSeq
from .rng import substream


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    width: int = 64
    blocks: int = 2
    heads: int = 4
    mlp_hidden: int = 256
    context: int = 512


@dataclass(frozen=True)
class SeqItem:
    kind: str  # "token" or "visual"
    index: int  # token id, or row index into the visual sequence

    @staticmethod
    def token(token_id: int) -> "SeqItem":
        return SeqItem("token", int(token_id))

    @staticmethod
    def visual(row: int) -> "SeqItem":
        return SeqItem("visual", int(row))


@dataclass
class MixedSequence:
    """Ordered token/visual items plus a per-position loss mask.

    The mask is 1.0 only on label positions (target text); prompt and visual
    positions carry 0.0.  Splicing guarantees at most one contiguous visual
    span.
    """

    items: list[SeqItem]
    loss_mask: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.loss_mask:
            self.loss_mask = [0.0] * len(self.items)
        if len(self.loss_mask) != len(self.items):
            raise ad.ShapeError("loss mask length must match the sequence length")

    def __len__(self) -> int:
        return len(self.items)

    def token_ids(self) -> list[int]:
        return [it.index for it in self.items if it.kind == "token"]

    def extended(self, token_id: int, mask: float = 0.0) -> "MixedSequence":
        return MixedSequence(
            items=self.items + [SeqItem.token(token_id)],
            loss_mask=self.loss_mask + [mask],
        )


def init_lm_params(cfg: LmConfig, root_seed: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def rng_for(name: str) -> np.random.Generator:
        return substream(root_seed, "init", name)

    params["lm.tok_emb"] = Tensor(
        rng_for("lm.tok_emb").normal(scale=0.02, size=(cfg.vocab_size, cfg.width)),
        requires_grad=True,
    )
    params["lm.pos_emb"] = Tensor(
        rng_for("lm.pos_emb").normal(scale=0.02, size=(cfg.context, cfg.width)),
        requires_grad=True,
    )
    for i in range(cfg.blocks):
        params.update(init_block_params(rng_for, f"lm.block{i}", cfg.width, cfg.mlp_hidden))
    params["lm.ln_f.gain"] = Tensor(np.ones(cfg.width), requires_grad=True)
    params["lm.ln_f.bias"] = Tensor(np.zeros(cfg.width), requires_grad=True)
    params["lm.head"] = Tensor(
        glorot_uniform(rng_for("lm.head"), (cfg.width, cfg.vocab_size)), requires_grad=True
    )
    return params


def _input_matrix(
    seq: MixedSequence, visual: VisualEmbeddingSeq | None, params: dict[str, Tensor]
) -> Tensor:
    """Assemble the [T x d] input: token rows from the table, visual rows direct."""
    runs: list[Tensor] = []
    i = 0
    items = seq.items
    while i < len(items):
        kind = items[i].kind
        j = i
        while j < len(items) and items[j].kind == kind:
            j += 1
        idx = [items[t].index for t in range(i, j)]
        if kind == "token":
            runs.append(ad.embedding_lookup(params["lm.tok_emb"], idx))
        else:
            if visual is None:
                raise ad.ShapeError("sequence has visual rows but no visual embeddings")
            if max(idx) >= len(visual) or min(idx) < 0:
                raise ad.ShapeError(
                    f"visual row index out of range (have {len(visual)} rows)"
                )
            runs.append(ad.embedding_lookup(visual.embeddings, idx))
        i = j
    return runs[0] if len(runs) == 1 else ad.concat(runs, axis=0)


def forward(
    seq: MixedSequence,
    visual: VisualEmbeddingSeq | None,
    params: dict[str, Tensor],
    cfg: LmConfig,
) -> Tensor:
    """Next-token logits ``[T x V]`` under a causal mask."""
    t_len = len(seq)
    if t_len == 0:
        raise ad.ShapeError("empty sequence")
    if t_len > cfg.context:
        raise ad.ShapeError(f"sequence length {t_len} exceeds context {cfg.context}")
    x = _input_matrix(seq, visual, params)
    x = ad.add(x, ad.embedding_lookup(params["lm.pos_emb"], np.arange(t_len)))
    mask = causal_mask(t_len)
    for i in range(cfg.blocks):
        x = transformer_block(x, params, f"lm.block{i}", cfg.heads, mask)
    x = ad.layer_norm(x, params["lm.ln_f.gain"], params["lm.ln_f.bias"])
    return ad.matmul(x, params["lm.head"])


def sequence_loss(
    seq: MixedSequence,
    visual: VisualEmbeddingSeq | None,
    params: dict[str, Tensor],
    cfg: LmConfig,
) -> Tensor:
    """Mean next-token cross entropy over label positions."""
    logits = forward(seq, visual, params, cfg)
    t_len = len(seq)
    # row t predicts item t+1; the final row and non-label positions are masked
    targets = np.zeros(t_len, dtype=np.int64)
    mask = np.zeros(t_len)
    for t in range(1, t_len):
        if seq.items[t].kind == "token" and seq.loss_mask[t] > 0:
            targets[t - 1] = seq.items[t].index
            mask[t - 1] = seq.loss_mask[t]
    return ad.cross_entropy(logits, targets, mask)


def greedy_decode(
    prompt: MixedSequence,
    visual: VisualEmbeddingSeq | None,
    params: dict[str, Tensor],
    cfg: LmConfig,
    max_new: int,
    stop_token: int,
) -> list[int]:
    """Argmax continuation; ties break to the lowest token id; stop token excluded."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    seq = prompt
    out: list[int] = []
    for _ in range(max_new):
        logits = forward(seq, visual, params, cfg)
        next_id = int(np.argmax(logits.data[-1]))  # argmax takes the lowest index on ties
        if next_id == stop_token:
            break
        out.append(next_id)
        seq = seq.extended(next_id)
    return out


def parameter_groups(params: dict[str, Tensor]) -> dict[str, list[str]]:
    """Partition names into {all, qv_only, non_qv} by the Q/V naming rule."""
    names = list(params)
    qv = [n for n in names if n.endswith("attn.q_proj") or n.endswith("attn.v_proj")]
    non_qv = [n for n in names if n not in set(qv)]
    return {"all": names, "qv_only": qv, "non_qv": non_qv}
