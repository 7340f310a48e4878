"""Run configuration: INI-style file, environment overrides, validation.

Sections: [model], [pool], [query], [stage1]..[stage3], [data], [eval].
Any key can be overridden through the environment as
``PADAPT_<SECTION>_<KEY>`` (e.g. ``PADAPT_STAGE2_TOTAL_STEPS=200``).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .lm import LmConfig
from .model import ModelConfig
from .pool_adapter import PoolConfig
from .query_adapter import QueryAdapterConfig
from .synth import DataConfig, build_vocabulary
from .training import AdamWHyper, StageConfig
from .vision import VisionConfig

ENV_PREFIX = "PADAPT_"

DEFAULTS: dict[str, dict[str, str]] = {
    "model": {
        "seed": "0",
        "adapter": "pool",
        "lm_width": "64",
        "lm_blocks": "2",
        "lm_heads": "4",
        "lm_mlp_hidden": "256",
        "context": "512",
        "vision_channels": "32",
        "vision_blocks": "2",
        "vision_heads": "2",
        "vision_mlp_hidden": "128",
        "patch_size": "4",
    },
    "pool": {
        "scales": "4",
        "mlp_hidden": "64",
        "shared_mlp": "false",
    },
    "query": {
        "num_queries": "0",  # 0: p_min^2 of the pool scales, for count parity
        "attn_dim": "12",
        "mlp_hidden": "43",  # near parameter parity with the default pool adapter
        "key_pos": "false",
    },
    "stage1": {
        "batch_size": "32",
        "peak_lr": "3e-3",
        "min_lr": "-1",
        "warmup_steps": "-1",
        "total_steps": "800",
        "image_resolution": "32",
    },
    "stage2": {
        "batch_size": "16",
        "peak_lr": "1.5e-3",
        "min_lr": "-1",
        "warmup_steps": "-1",
        "total_steps": "5000",
        "image_resolution": "64",
    },
    "stage3": {
        "batch_size": "8",
        "peak_lr": "7e-4",
        "min_lr": "-1",
        "warmup_steps": "-1",
        "total_steps": "2000",
        "image_resolution": "64",
    },
    "data": {
        "root": "data",
        "canvas": "64",
        "grid_units": "8",
        "max_shapes": "3",
        "jitter": "false",
        "train_per_task": "8000",
        "val_per_task": "1000",
        "test_per_task": "1000",
    },
    "eval": {
        "max_new": "40",
        "limit": "0",  # 0: whole split
        "split": "test",
        "scales": "",  # empty: all trained scales
    },
    "optim": {
        "beta1": "0.9",
        "beta2": "0.999",
        "eps": "1e-8",
        "weight_decay": "0.05",
    },
}


def _as_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _as_scales(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    try:
        return tuple(int(part) for part in text.replace("+", ",").split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad scale list {text!r}") from exc


@dataclass
class RunConfig:
    """Merged view of model dims, pooling, stages, data paths, and seed."""

    raw: dict[str, dict[str, str]]
    path: Path | None = None

    def get(self, section: str, key: str) -> str:
        try:
            return self.raw[section][key]
        except KeyError as exc:
            raise ConfigError(f"missing config value [{section}] {key}") from exc

    def getint(self, section: str, key: str) -> int:
        try:
            return int(self.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer") from exc

    def getfloat(self, section: str, key: str) -> float:
        try:
            return float(self.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number") from exc

    @property
    def seed(self) -> int:
        return self.getint("model", "seed")

    @property
    def data_root(self) -> Path:
        root = Path(self.get("data", "root"))
        if self.path is not None and not root.is_absolute():
            root = self.path.parent / root
        return root

    # ----- assembled sub-configs -------------------------------------------

    def data_config(self) -> DataConfig:
        return DataConfig(
            seed=self.seed,
            canvas=self.getint("data", "canvas"),
            grid_units=self.getint("data", "grid_units"),
            max_shapes=self.getint("data", "max_shapes"),
            jitter=_as_bool(self.get("data", "jitter")),
            train_per_task=self.getint("data", "train_per_task"),
            val_per_task=self.getint("data", "val_per_task"),
            test_per_task=self.getint("data", "test_per_task"),
        )

    def stage_config(self, stage: int) -> StageConfig:
        section = f"stage{stage}"
        return StageConfig(
            stage=stage,
            batch_size=self.getint(section, "batch_size"),
            peak_lr=self.getfloat(section, "peak_lr"),
            min_lr=self.getfloat(section, "min_lr"),
            warmup_steps=self.getint(section, "warmup_steps"),
            total_steps=self.getint(section, "total_steps"),
            image_resolution=self.getint(section, "image_resolution"),
        )

    def adamw_hyper(self) -> AdamWHyper:
        return AdamWHyper(
            beta1=self.getfloat("optim", "beta1"),
            beta2=self.getfloat("optim", "beta2"),
            eps=self.getfloat("optim", "eps"),
            weight_decay=self.getfloat("optim", "weight_decay"),
        )

    def grids(self) -> tuple[tuple[int, int], ...]:
        patch = self.getint("model", "patch_size")
        sizes = set()
        for stage in (1, 2, 3):
            res = self.getint(f"stage{stage}", "image_resolution")
            if res % patch:
                raise ConfigError(f"stage {stage} resolution {res} not divisible by patch {patch}")
            sizes.add(res // patch)
        return tuple((g, g) for g in sorted(sizes))

    def pool_config(self) -> PoolConfig:
        scales = _as_scales(self.get("pool", "scales"))
        return PoolConfig(
            scales=scales,
            llm_width=self.getint("model", "lm_width"),
            mlp_hidden=self.getint("pool", "mlp_hidden"),
            shared_mlp=_as_bool(self.get("pool", "shared_mlp")),
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        adapter = self.get("model", "adapter")
        vision = VisionConfig(
            patch_size=self.getint("model", "patch_size"),
            channels=self.getint("model", "vision_channels"),
            blocks=self.getint("model", "vision_blocks"),
            heads=self.getint("model", "vision_heads"),
            mlp_hidden=self.getint("model", "vision_mlp_hidden"),
            grids=self.grids(),
        )
        lm = LmConfig(
            vocab_size=vocab_size,
            width=self.getint("model", "lm_width"),
            blocks=self.getint("model", "lm_blocks"),
            heads=self.getint("model", "lm_heads"),
            mlp_hidden=self.getint("model", "lm_mlp_hidden"),
            context=self.getint("model", "context"),
        )
        pool = self.pool_config()
        query = None
        if adapter == "query":
            num = self.getint("query", "num_queries")
            if num == 0:
                num = min(pool.scales) ** 2  # parity with the smallest pool scale
            query = QueryAdapterConfig(
                num_queries=num,
                in_channels=vision.channels,
                llm_width=lm.width,
                attn_dim=self.getint("query", "attn_dim"),
                mlp_hidden=self.getint("query", "mlp_hidden"),
                key_pos=_as_bool(self.get("query", "key_pos")),
                grids=vision.grids,
            )
        return ModelConfig(
            seed=self.seed, vision=vision, lm=lm, adapter=adapter, pool=pool, query=query
        )

    def eval_scales(self) -> tuple[int, ...] | None:
        scales = _as_scales(self.get("eval", "scales"))
        return scales or None

    def validate(self, *, need_data: bool = False) -> None:
        """Reject contradictions before any compute."""
        self.pool_config()  # raises on duplicates / empties
        self.grids()
        for stage in (1, 2, 3):
            self.stage_config(stage)
        if self.get("model", "adapter") not in ("pool", "query"):
            raise ConfigError(f"unknown adapter {self.get('model', 'adapter')!r}")
        canvas = self.getint("data", "canvas")
        for stage in (1, 2, 3):
            res = self.getint(f"stage{stage}", "image_resolution")
            if canvas % res:
                raise ConfigError(
                    f"stage {stage} resolution {res} unreachable from canvas {canvas}"
                )
        if need_data and not self.data_root.exists():
            raise ConfigError(f"data root {self.data_root} does not exist (run gen-data first)")

    def build_vocab(self):
        return build_vocabulary()


def load_config(path: str | Path | None, env: dict[str, str] | None = None) -> RunConfig:
    """Defaults, overlaid by the INI file, overlaid by environment variables."""
    raw = {section: dict(values) for section, values in DEFAULTS.items()}
    cfg_path = None
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise ConfigError(f"config file {cfg_path} not found")
        parser = configparser.ConfigParser()
        try:
            parser.read(cfg_path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {cfg_path}: {exc}") from exc
        for section in parser.sections():
            if section not in raw:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in raw[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                raw[section][key] = value
    env = os.environ if env is None else env
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        section, _, key = rest.partition("_")
        if section in raw and key in raw[section]:
            raw[section][key] = value
    return RunConfig(raw=raw, path=cfg_path)
