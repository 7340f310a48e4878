"""Three-stage training: freeze masks, AdamW, cosine schedule, task sampler.

Stage contracts over the flat parameter namespace:

  stage 1   only the visual adapter trains
  stage 2   vision encoder + adapter + the LM attention Q/V projections
  stage 3   everything except the vision encoder

Frozen tensors are excluded from gradient tracking and from optimizer
state, so a post-stage audit can demand bitwise equality.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .errors import ConfigError
from .model import MultimodalModel
from .prompt_codec import PromptRecord
from .rng import substream
from .vision import downscale, load_ppm

STAGE_TASKS = {1: ("caption",), 2: ("caption", "vqa", "grounding"), 3: ("caption", "vqa", "grounding")}

_PARAM_FAMILIES = ("vision.", "adapter.", "qadapter.", "lm.")


class TrainingAbort(RuntimeError):
    """Training stopped on a non-finite loss or gradient."""


@dataclass(frozen=True)
class StageConfig:
    stage: int
    batch_size: int
    peak_lr: float
    total_steps: int
    image_resolution: int
    min_lr: float = -1.0  # negative means peak/10
    warmup_steps: int = -1  # negative means 3% of total

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size must be >= 1 and total_steps >= 0")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")

    @property
    def lr_floor(self) -> float:
        return self.peak_lr / 10.0 if self.min_lr < 0 else self.min_lr

    @property
    def warmup(self) -> int:
        if self.warmup_steps >= 0:
            return self.warmup_steps
        return int(round(0.03 * self.total_steps))

    @property
    def tasks(self) -> tuple[str, ...]:
        return STAGE_TASKS[self.stage]


def trainable_predicate(stage: int):
    if stage == 1:
        return lambda name: name.startswith(("adapter.", "qadapter."))
    if stage == 2:
        return lambda name: name.startswith(("vision.", "adapter.", "qadapter.")) or (
            name.startswith("lm.")
            and (name.endswith("attn.q_proj") or name.endswith("attn.v_proj"))
        )
    if stage == 3:
        return lambda name: not name.startswith("vision.")
    raise ConfigError(f"unknown stage {stage}")


def build_freeze_mask(stage: int, names) -> dict[str, bool]:
    """True = trainable.  Unknown parameter families are a config error."""
    pred = trainable_predicate(stage)
    mask: dict[str, bool] = {}
    for name in names:
        if not name.startswith(_PARAM_FAMILIES):
            raise ConfigError(f"parameter {name!r} belongs to no known family")
        mask[name] = bool(pred(name))
    return mask


def cosine_lr(step: int, cfg: StageConfig) -> float:
    """Linear warmup to the peak, then cosine decay to the floor."""
    if step < 0 or step > cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps}]")
    warm = cfg.warmup
    if step < warm:
        return cfg.peak_lr * step / warm
    span = cfg.total_steps - warm
    if span <= 0:
        return cfg.peak_lr
    frac = (step - warm) / span
    return cfg.lr_floor + 0.5 * (cfg.peak_lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class AdamWHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    mask: dict[str, bool],
    state: AdamWState,
    hyper: AdamWHyper,
    lr: float,
) -> None:
    """Decoupled-weight-decay Adam over trainable entries only.

    Frozen tensors are not touched and acquire no optimizer state; a
    trainable tensor with no gradient this step is treated as zero-gradient
    (moments decay, weight decay still applies).
    """
    state.step += 1
    bc1 = 1.0 - hyper.beta1**state.step
    bc2 = 1.0 - hyper.beta2**state.step
    for name, tensor in params.items():
        if not mask.get(name, False):
            continue
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if g.size and not np.isfinite(g.sum()):
            raise TrainingAbort(f"non-finite gradient in {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        tensor.data = tensor.data - lr * (update + hyper.weight_decay * tensor.data)


def zero_grads(params: dict[str, Tensor]) -> None:
    for tensor in params.values():
        tensor.zero_grad()


def sample_batch(
    datasets: dict[str, list[PromptRecord]],
    batch_size: int,
    rng: np.random.Generator,
    tasks=("caption", "vqa", "grounding"),
) -> list[PromptRecord]:
    """Per record: a uniform task, then a uniform record within that task."""
    for task in tasks:
        if not datasets.get(task):
            raise ConfigError(f"dataset for task {task!r} is empty")
    batch = []
    for _ in range(batch_size):
        task = tasks[int(rng.integers(len(tasks)))]
        records = datasets[task]
        batch.append(records[int(rng.integers(len(records)))])
    return batch


class ImageStore:
    """PPM loader with a byte-level cache and exact integer downscaling."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def get(self, rel_path: str, resolution: int) -> np.ndarray:
        img = self._cache.get(rel_path)
        if img is None:
            img = load_ppm(self.root / rel_path)
            self._cache[rel_path] = img
        native = img.shape[0]
        if native % resolution:
            raise ConfigError(
                f"cannot reach resolution {resolution} from {native}-pixel image"
            )
        return downscale(img, native // resolution)


def param_hashes(params: dict[str, Tensor]) -> dict[str, str]:
    return {name: hashlib.sha256(t.data.tobytes()).hexdigest() for name, t in params.items()}


def freeze_audit(
    pre: dict[str, str],
    params: dict[str, Tensor],
    mask: dict[str, bool],
    state: AdamWState | None = None,
) -> list[str]:
    """Violations of the freeze contract after a stage (empty list = clean)."""
    post = param_hashes(params)
    violations = [
        f"frozen tensor {name} changed" for name, trainable in mask.items()
        if not trainable and pre[name] != post[name]
    ]
    if state is not None:
        touched = set(state.m) | set(state.v)
        violations += [
            f"optimizer state created for frozen tensor {name}"
            for name in sorted(touched)
            if not mask.get(name, False)
        ]
    return violations


@dataclass
class StageResult:
    checkpoint_path: Path
    csv_path: Path
    losses: list[float]
    mask: dict[str, bool]
    state: AdamWState


def run_stage(
    model: MultimodalModel,
    cfg: StageConfig,
    datasets: dict[str, list[PromptRecord]],
    images: ImageStore,
    out_dir: str | Path,
    root_seed: int,
    hyper: AdamWHyper = AdamWHyper(),
) -> StageResult:
    """Train one stage; emits a checkpoint and a per-step loss CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask = build_freeze_mask(cfg.stage, model.params)
    for name, tensor in model.params.items():
        tensor.requires_grad = mask[name]
    sampler = substream(root_seed, "sampler", cfg.stage)
    state = AdamWState()
    grid_cache: dict | None = {} if cfg.stage != 2 else None  # vision frozen => cacheable
    losses: list[float] = []
    rows = []
    try:
        for step in range(cfg.total_steps):
            lr = cosine_lr(step, cfg)
            batch = sample_batch(datasets, cfg.batch_size, sampler, cfg.tasks)
            mix = Counter(rec.task for rec in batch)
            total = 0.0
            for rec in batch:
                image = images.get(rec.image, cfg.image_resolution)
                with Tape() as tape:
                    loss = model.sample_loss(rec, image, grid_cache=grid_cache)
                    tape.backward(loss, seed=np.array(1.0 / cfg.batch_size))
                total += loss.item()
            adamw_step(model.params, mask, state, hyper, lr)
            zero_grads(model.params)
            mean_loss = total / cfg.batch_size
            losses.append(mean_loss)
            mix_text = "|".join(f"{task}:{mix[task]}" for task in cfg.tasks if mix[task])
            rows.append((step, repr(lr), repr(mean_loss), mix_text))
    except (NonFiniteError, TrainingAbort) as exc:
        dump = {
            "stage": cfg.stage,
            "failed_at_step": len(losses),
            "error": str(exc),
            "recent_losses": losses[-20:],
        }
        (out / f"stage{cfg.stage}_abort.json").write_text(json.dumps(dump, indent=2))
        raise
    finally:
        for tensor in model.params.values():
            tensor.requires_grad = True
    csv_path = out / f"stage{cfg.stage}_loss.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "task_mix"])
        writer.writerows(rows)
    ckpt_path = out / f"stage{cfg.stage}.ckpt"
    model.save(ckpt_path)
    return StageResult(ckpt_path, csv_path, losses, mask, state)
