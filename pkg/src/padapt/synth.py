"""Deterministic shape-scene generator for caption / vqa / grounding data.

Scenes hold up to three colored shapes snapped to a unit grid (an optional
jitter flag moves them off-grid by pixel offsets).  Colors are unique within
a scene so referring expressions are unambiguous, and every emitted word
belongs to the closed lexicon.  Scene content is hashed and deduplicated
globally during dataset generation, so no scene appears in two splits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .prompt_codec import BoundingBox, PromptRecord, Vocabulary, serialize_box
from .rng import substream
from .vision import save_ppm

# palette in exact 255ths so PPM round-trips are lossless
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 30, 30),
    "green": (30, 160, 30),
    "blue": (30, 60, 220),
    "yellow": (235, 220, 40),
    "purple": (150, 40, 180),
    "orange": (245, 140, 20),
    "cyan": (40, 200, 220),
    "gray": (120, 120, 120),
}

KINDS = ("square", "circle", "bar")
POSITION_WORDS = ("left", "right", "top", "bottom", "center")
COUNT_WORDS = ("one", "two", "three")

LEXICON_WORDS = tuple(
    dict.fromkeys(
        list(PALETTE)
        + list(KINDS)
        + "a and on white background the what color is where how many shapes are there".split()
        + list(POSITION_WORDS)
        + list(COUNT_WORDS)
    )
)

SPLITS = ("train", "val", "test")
SPLIT_SEED_BASE = {"train": 0, "val": 1_000_000, "test": 2_000_000}
TASKS = ("caption", "vqa", "grounding")


class GenerationError(RuntimeError):
    """A record was requested for a scene that cannot support it."""


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    canvas: int = 64
    grid_units: int = 8
    max_shapes: int = 3
    jitter: bool = False
    train_per_task: int = 8000
    val_per_task: int = 1000
    test_per_task: int = 1000

    def split_count(self, split: str) -> int:
        return {"train": self.train_per_task, "val": self.val_per_task, "test": self.test_per_task}[split]


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    box: tuple[float, float, float, float]  # normalized corners
    cell: tuple[int, int, int, int]  # (col, row, width, height) in grid units


@dataclass
class SceneSpec:
    canvas: int
    grid_units: int
    shapes: list[ShapeSpec] = field(default_factory=list)

    def content_hash(self) -> str:
        payload = json.dumps(
            [
                (s.kind, s.color, s.box, s.cell)
                for s in self.shapes
            ],
            sort_keys=True,
        )
        return hashlib.sha256(f"{self.canvas}/{self.grid_units}/{payload}".encode()).hexdigest()


def rect_to_box(x1p: int, y1p: int, x2p: int, y2p: int, canvas: int) -> tuple[float, float, float, float]:
    return (x1p / canvas, y1p / canvas, x2p / canvas, y2p / canvas)


def build_vocabulary() -> Vocabulary:
    return Vocabulary(LEXICON_WORDS)


def _shape_extent(kind: str, rng: np.random.Generator) -> tuple[int, int]:
    if kind in ("square", "circle"):
        return 2, 2
    return (3, 1) if rng.integers(2) else (1, 3)  # bar, either orientation


def gen_scene(cfg: DataConfig, scene_seed: int, salt: int = 0) -> tuple[np.ndarray, SceneSpec]:
    """Deterministic scene + rendered image for one seed (and dedup salt)."""
    rng = substream(cfg.seed, "scene", scene_seed, salt)
    grid = cfg.grid_units
    unit_px = cfg.canvas // grid
    n_shapes = int(rng.integers(1, cfg.max_shapes + 1))
    colors = [list(PALETTE)[i] for i in rng.choice(len(PALETTE), size=n_shapes, replace=False)]
    occupied = np.zeros((grid, grid), dtype=bool)
    shapes: list[ShapeSpec] = []
    for color in colors:
        kind = KINDS[int(rng.integers(len(KINDS)))]
        width, height = _shape_extent(kind, rng)
        for _ in range(30):
            col = int(rng.integers(0, grid - width + 1))
            row = int(rng.integers(0, grid - height + 1))
            if not occupied[row : row + height, col : col + width].any():
                occupied[row : row + height, col : col + width] = True
                x1p, y1p = col * unit_px, row * unit_px
                x2p, y2p = (col + width) * unit_px, (row + height) * unit_px
                if cfg.jitter:
                    dx = int(rng.integers(0, unit_px)) if x2p + unit_px <= cfg.canvas else 0
                    dy = int(rng.integers(0, unit_px)) if y2p + unit_px <= cfg.canvas else 0
                    x1p, x2p, y1p, y2p = x1p + dx, x2p + dx, y1p + dy, y2p + dy
                shapes.append(
                    ShapeSpec(
                        kind=kind,
                        color=color,
                        box=rect_to_box(x1p, y1p, x2p, y2p, cfg.canvas),
                        cell=(col, row, width, height),
                    )
                )
                break
        # cramped scenes simply carry fewer shapes
    shapes.sort(key=lambda s: (s.cell[1], s.cell[0]))  # reading order, so captions are canonical
    spec = SceneSpec(canvas=cfg.canvas, grid_units=grid, shapes=shapes)
    return render_scene(spec), spec


def render_scene(spec: SceneSpec) -> np.ndarray:
    """White canvas with each shape filled from its exact pixel rectangle."""
    size = spec.canvas
    img = np.ones((size, size, 3))
    for shape in spec.shapes:
        rgb = np.array(PALETTE[shape.color]) / 255.0
        x1, y1, x2, y2 = shape.box
        x1p, y1p = round(x1 * size), round(y1 * size)
        x2p, y2p = round(x2 * size), round(y2 * size)
        if shape.kind == "circle":
            cy, cx = (y1p + y2p) / 2.0, (x1p + x2p) / 2.0
            radius = (x2p - x1p) / 2.0
            ys, xs = np.mgrid[y1p:y2p, x1p:x2p]
            mask = (ys + 0.5 - cy) ** 2 + (xs + 0.5 - cx) ** 2 <= radius**2
            region = img[y1p:y2p, x1p:x2p]
            region[mask] = rgb
        else:
            img[y1p:y2p, x1p:x2p] = rgb
    return img


def _position_word(box: tuple[float, float, float, float]) -> str:
    cx = (box[0] + box[2]) / 2.0 - 0.5
    cy = (box[1] + box[3]) / 2.0 - 0.5
    if max(abs(cx), abs(cy)) < 1 / 16:
        return "center"
    if abs(cx) >= abs(cy):
        return "left" if cx < 0 else "right"
    return "top" if cy < 0 else "bottom"


def gen_records(spec: SceneSpec, task: str, image_ref: str = "") -> list[PromptRecord]:
    """All candidate records of one task for a scene."""
    if not spec.shapes:
        raise GenerationError(f"cannot build {task} records for an empty scene")
    if task == "caption":
        phrases = [f"a {s.color} {s.kind}" for s in spec.shapes]
        text = " and ".join(phrases) + " on a white background"
        return [PromptRecord(task="caption", image=image_ref, target=text)]
    if task == "vqa":
        records = []
        kind_counts: dict[str, int] = {}
        for s in spec.shapes:
            kind_counts[s.kind] = kind_counts.get(s.kind, 0) + 1
        for s in spec.shapes:
            if kind_counts[s.kind] == 1:
                records.append(
                    PromptRecord(
                        task="vqa",
                        image=image_ref,
                        question=f"what color is the {s.kind}?",
                        target=s.color,
                    )
                )
            records.append(
                PromptRecord(
                    task="vqa",
                    image=image_ref,
                    question=f"where is the {s.color} {s.kind}?",
                    target=_position_word(s.box),
                )
            )
        records.append(
            PromptRecord(
                task="vqa",
                image=image_ref,
                question="how many shapes are there?",
                target=COUNT_WORDS[len(spec.shapes) - 1],
            )
        )
        return records
    if task == "grounding":
        return [
            PromptRecord(
                task="grounding",
                image=image_ref,
                expr=f"the {s.color} {s.kind}",
                target=serialize_box(BoundingBox(*s.box)),
            )
            for s in spec.shapes
        ]
    raise GenerationError(f"unknown task {task!r}")


def generate_dataset(cfg: DataConfig, out_dir: str | Path) -> dict:
    """Write PPM images, per-task JSONL records, and a manifest for all splits.

    One scene per (split, index) is shared by the three tasks; scene hashes
    are deduplicated globally (bumping a salt) so no scene recurs anywhere,
    in particular not across splits.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seen_hashes: set[str] = set()
    manifest: dict = {
        "seed": cfg.seed,
        "canvas": cfg.canvas,
        "grid_units": cfg.grid_units,
        "max_shapes": cfg.max_shapes,
        "jitter": cfg.jitter,
        "splits": {},
    }
    for split in SPLITS:
        count = cfg.split_count(split)
        base = SPLIT_SEED_BASE[split]
        per_task: dict[str, list[PromptRecord]] = {task: [] for task in TASKS}
        for index in range(count):
            scene_seed = base + index
            for salt in range(1000):
                img, spec = gen_scene(cfg, scene_seed, salt)
                digest = spec.content_hash()
                if digest not in seen_hashes:
                    seen_hashes.add(digest)
                    break
            else:
                raise GenerationError(
                    "scene space exhausted; reduce dataset size or enlarge the grid"
                )
            rel = f"images/{split}/{index:05d}.ppm"
            save_ppm(out / rel, img)
            for task in TASKS:
                candidates = gen_records(spec, task, image_ref=rel)
                chooser = substream(cfg.seed, "records", task, scene_seed)
                per_task[task].append(candidates[int(chooser.integers(len(candidates)))])
        for task in TASKS:
            path = out / f"{split}_{task}.jsonl"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                for rec in per_task[task]:
                    fh.write(rec.to_json() + "\n")
        manifest["splits"][split] = {"seed_start": base, "count": count}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
