"""Composite model: patch encoder -> visual adapter -> decoder LM.

Parameters from every part live in one flat name->Tensor store, which is
what freeze masks, optimizers, and checkpoints operate on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .errors import ConfigError, SelectionError
from .lm import LmConfig, greedy_decode, init_lm_params, sequence_loss
from .pool_adapter import (
    PoolConfig,
    VisualEmbeddingSeq,
    init_pool_adapter,
    multi_scale_embed,
)
from .prompt_codec import PromptRecord, Vocabulary, render_prompt, splice_plan, training_sequence
from .query_adapter import QueryAdapterConfig, init_query_adapter, query_embed
from .vision import FeatureGrid, VisionConfig, encode, init_vision_params


@dataclass(frozen=True)
class ModelConfig:
    seed: int
    vision: VisionConfig
    lm: LmConfig
    adapter: str = "pool"  # "pool" | "query"
    pool: PoolConfig | None = None
    query: QueryAdapterConfig | None = None

    def __post_init__(self):
        if self.adapter == "pool":
            if self.pool is None:
                raise ConfigError("pool adapter selected but no PoolConfig given")
        elif self.adapter == "query":
            if self.query is None:
                raise ConfigError("query adapter selected but no QueryAdapterConfig given")
        else:
            raise ConfigError(f"unknown adapter kind {self.adapter!r}")


class MultimodalModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        if cfg.lm.vocab_size != len(vocab):
            raise ConfigError(
                f"lm vocab size {cfg.lm.vocab_size} != vocabulary size {len(vocab)}"
            )
        self.cfg = cfg
        self.vocab = vocab
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, vocab: Vocabulary) -> "MultimodalModel":
        params: dict[str, Tensor] = {}
        params.update(init_vision_params(cfg.vision, cfg.seed))
        if cfg.adapter == "pool":
            params.update(init_pool_adapter(cfg.pool, cfg.vision.channels, cfg.seed))
        else:
            params.update(init_query_adapter(cfg.query, cfg.seed))
        params.update(init_lm_params(cfg.lm, cfg.seed))
        return cls(cfg, vocab, params)

    # ----- forward pieces -------------------------------------------------

    def encode_grid(self, image: np.ndarray) -> FeatureGrid:
        return encode(image, self.params, self.cfg.vision)

    def adapt(self, grid: FeatureGrid, selected=None) -> VisualEmbeddingSeq:
        if self.cfg.adapter == "pool":
            return multi_scale_embed(grid, self.params, self.cfg.pool, selected)
        if selected is not None:
            raise SelectionError("scale selection applies to the pool adapter only")
        return query_embed(grid, self.params, self.cfg.query)

    def _grid(self, image: np.ndarray, grid_cache: dict | None, key: str) -> FeatureGrid:
        if grid_cache is None or not key:
            return self.encode_grid(image)
        hit = grid_cache.get(key)
        if hit is None:
            fresh = self.encode_grid(image)
            hit = (fresh.rows, fresh.cols, fresh.channels, fresh.values.data)
            grid_cache[key] = hit
        rows, cols, channels, values = hit
        return FeatureGrid(rows, cols, channels, Tensor(values))

    # ----- training / inference -------------------------------------------

    def sample_loss(
        self, rec: PromptRecord, image: np.ndarray, grid_cache: dict | None = None
    ) -> Tensor:
        grid = self._grid(image, grid_cache, rec.image)
        visual = self.adapt(grid)
        prompt_ids = self.vocab.tokenize(render_prompt(rec))
        target_ids = self.vocab.tokenize(rec.target)
        seq = training_sequence(prompt_ids, target_ids, len(visual), self.vocab)
        return sequence_loss(seq, visual, self.params, self.cfg.lm)

    def generate(
        self,
        rec: PromptRecord,
        image: np.ndarray,
        max_new: int = 40,
        selected=None,
    ) -> str:
        visual = self.adapt(self.encode_grid(image), selected)
        prompt_ids = self.vocab.tokenize(render_prompt(rec))
        seq = splice_plan(prompt_ids, len(visual), self.vocab)
        ids = greedy_decode(
            seq, visual, self.params, self.cfg.lm, max_new, self.vocab.eos_id
        )
        return self.vocab.detokenize(ids)

    # ----- persistence ------------------------------------------------------

    def parameter_count(self, prefix: str = "") -> int:
        return sum(t.size for name, t in self.params.items() if name.startswith(prefix))

    def save(self, path) -> None:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["meta.seed"] = np.array(float(self.cfg.seed))
        save_tensors(path, arrays)

    @classmethod
    def load(cls, path, cfg: ModelConfig, vocab: Vocabulary) -> "MultimodalModel":
        arrays = load_tensors(path)
        arrays.pop("meta.seed", None)
        model = cls.create(cfg, vocab)
        expected = set(model.params)
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)[:4]
            extra = sorted(got - expected)[:4]
            raise CheckpointError(
                f"checkpoint incompatible with config (missing={missing}, extra={extra})"
            )
        for name, arr in arrays.items():
            if model.params[name].shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: config {model.params[name].shape}, "
                    f"checkpoint {arr.shape}"
                )
            model.params[name] = Tensor(arr, requires_grad=True)
        return model
