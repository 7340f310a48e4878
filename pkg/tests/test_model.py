"""Composite model: persistence, generation, cache equivalence."""

import numpy as np
import pytest

from padapt.autodiff import Tape
from padapt.checkpoint import CheckpointError
from padapt.errors import SelectionError
from padapt.lm import LmConfig
from padapt.model import ModelConfig, MultimodalModel
from padapt.pool_adapter import PoolConfig
from padapt.prompt_codec import PromptRecord
from padapt.query_adapter import QueryAdapterConfig
from padapt.vision import VisionConfig
from padapt.synth import build_vocabulary


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary()


def pool_cfg(seed=0, scales=(2,)):
    return ModelConfig(
        seed=seed,
        vision=VisionConfig(patch_size=8, channels=8, blocks=2, heads=2, mlp_hidden=16,
                            grids=((4, 4),)),
        lm=LmConfig(vocab_size=len(build_vocabulary()), width=16, blocks=1, heads=2,
                    mlp_hidden=32, context=128),
        adapter="pool",
        pool=PoolConfig(scales=scales, llm_width=16, mlp_hidden=8),
    )


def query_cfg(seed=0):
    base = pool_cfg(seed)
    return ModelConfig(
        seed=seed,
        vision=base.vision,
        lm=base.lm,
        adapter="query",
        pool=base.pool,
        query=QueryAdapterConfig(num_queries=4, in_channels=8, llm_width=16,
                                 attn_dim=4, mlp_hidden=8),
    )


def rand_image(seed=0, size=32):
    return np.random.default_rng(seed).uniform(size=(size, size, 3))


REC = PromptRecord(task="caption", image="mem", target="a red square on a white background")


class TestLifecycle:
    def test_create_param_families(self, vocab):
        model = MultimodalModel.create(pool_cfg(), vocab)
        families = {name.split(".")[0] for name in model.params}
        assert families == {"vision", "adapter", "lm"}
        assert model.parameter_count() > 0
        assert model.parameter_count("adapter.") < model.parameter_count()

    def test_save_load_roundtrip(self, vocab, tmp_path):
        model = MultimodalModel.create(pool_cfg(), vocab)
        path = tmp_path / "m.ckpt"
        model.save(path)
        loaded = MultimodalModel.load(path, pool_cfg(), vocab)
        for name, tensor in model.params.items():
            assert np.array_equal(tensor.data, loaded.params[name].data)

    def test_load_incompatible_config(self, vocab, tmp_path):
        model = MultimodalModel.create(pool_cfg(), vocab)
        path = tmp_path / "m.ckpt"
        model.save(path)
        with pytest.raises(CheckpointError):
            MultimodalModel.load(path, pool_cfg(scales=(2, 4)), vocab)

    def test_seed_recorded_in_checkpoint(self, vocab, tmp_path):
        from padapt.checkpoint import load_tensors

        model = MultimodalModel.create(pool_cfg(seed=9), vocab)
        model.save(tmp_path / "m.ckpt")
        arrays = load_tensors(tmp_path / "m.ckpt")
        assert arrays["meta.seed"].item() == 9.0


class TestForwardPaths:
    def test_sample_loss_finite(self, vocab):
        model = MultimodalModel.create(pool_cfg(), vocab)
        loss = model.sample_loss(REC, rand_image())
        assert np.isfinite(loss.data)

    def test_generate_deterministic(self, vocab):
        model = MultimodalModel.create(pool_cfg(), vocab)
        img = rand_image(1)
        assert model.generate(REC, img, max_new=8) == model.generate(REC, img, max_new=8)

    def test_grid_cache_bitwise_equivalent(self, vocab):
        model = MultimodalModel.create(pool_cfg(), vocab)
        img = rand_image(2)
        cache = {}
        with Tape():
            a = model.sample_loss(REC, img, grid_cache=cache)
        with Tape():
            b = model.sample_loss(REC, img, grid_cache=cache)  # cache hit
        with Tape():
            c = model.sample_loss(REC, img)
        assert a.data == b.data == c.data
        assert "mem" in cache

    def test_query_model_rejects_scale_selection(self, vocab):
        model = MultimodalModel.create(query_cfg(), vocab)
        with pytest.raises(SelectionError):
            model.generate(REC, rand_image(), max_new=4, selected=[2])

    def test_query_model_runs(self, vocab):
        model = MultimodalModel.create(query_cfg(), vocab)
        loss = model.sample_loss(REC, rand_image(3))
        assert np.isfinite(loss.data)

    def test_pool_scale_selection_changes_splice_length(self, vocab):
        model = MultimodalModel.create(pool_cfg(scales=(2, 4)), vocab)
        grid = model.encode_grid(rand_image(4))
        assert len(model.adapt(grid)) == 20
        assert len(model.adapt(grid, selected=[2])) == 4
