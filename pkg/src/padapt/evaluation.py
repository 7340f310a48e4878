"""Metrics and experiment drivers: exact match, soft VQA score, IoU-based
grounding accuracy, the scale-ablation table, and online scale-subset
evaluation of a multi-scale checkpoint."""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SelectionError
from .model import MultimodalModel
from .prompt_codec import BoundingBox, BoxParseError, PromptRecord, parse_box
from .training import ImageStore

# Published full-scale reference trends, documented for context; desk-scale
# runs reproduce the direction, never these values.
REFERENCE_MEAN_TREND = {"smallest_single": 75.23, "largest_single": 77.67, "multi_scale": 78.09}
REFERENCE_SUBSET_TREND = {"mid_single": 61.3, "largest_single": 64.5, "full": 65.1}

METRIC_NAMES = {
    "caption": "exact_match",
    "vqa": "vqa_soft_score",
    "grounding": "accuracy@iou0.5",
}


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for a zero-area union unless boxes coincide."""
    ix1, iy1 = max(a.x1, b.x1), max(a.y1, b.y1)
    ix2, iy2 = min(a.x2, b.x2), min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    if union <= 0.0:
        return 1.0 if a.corners() == b.corners() else 0.0
    return inter / union


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    return " ".join(text.casefold().translate(_PUNCT_TABLE).split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def corpus_exact_match(preds, golds) -> float:
    pairs = list(zip(preds, golds))
    if not pairs:
        return 0.0
    return sum(exact_match(p, g) for p, g in pairs) / len(pairs)


def vqa_soft_score(pred: str, annotator_answers) -> float:
    """min(matching annotator answers / 3, 1), matches after normalization."""
    if not annotator_answers:
        raise ValueError("need at least one annotator answer")
    matches = sum(exact_match(pred, a) for a in annotator_answers)
    return min(matches / 3.0, 1.0)


@dataclass
class GroundingResult:
    accuracy: float
    parse_failures: int
    scored: int
    ious: list[float] = field(default_factory=list)


def grounding_accuracy(pred_texts, gold_boxes, threshold: float = 0.5) -> GroundingResult:
    """Correct iff the prediction parses and reaches the IoU threshold."""
    if len(pred_texts) != len(gold_boxes):
        raise ValueError("prediction/gold length mismatch")
    correct = 0
    failures = 0
    ious: list[float] = []
    for text, gold in zip(pred_texts, gold_boxes):
        try:
            box = parse_box(text)
        except BoxParseError:
            failures += 1
            ious.append(0.0)
            continue
        value = iou(box, gold)
        ious.append(value)
        if value >= threshold:
            correct += 1
    total = len(pred_texts)
    accuracy = correct / total if total else 0.0
    return GroundingResult(accuracy, failures, total - failures, ious)


@dataclass
class TaskResult:
    task: str
    metric: str
    value: float
    total: int
    parse_failures: int
    predictions: list[dict]


@dataclass
class EvalReport:
    task_metrics: dict[str, float]
    counts: dict[str, int]
    parse_failures: int
    metadata: dict
    per_subset: dict[str, dict] = field(default_factory=dict)

    def mean_metric(self) -> float:
        if not self.task_metrics:
            return 0.0
        return sum(self.task_metrics.values()) / len(self.task_metrics)

    def to_json(self) -> str:
        payload = {
            "task_metrics": self.task_metrics,
            "mean": self.mean_metric(),
            "counts": self.counts,
            "parse_failures": self.parse_failures,
            "metadata": self.metadata,
            "per_subset": self.per_subset,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def table(self) -> str:
        headers = ("task", "metric", "value", "total", "parse_failures")
        rows = [headers]
        for task, value in self.task_metrics.items():
            rows.append(
                (
                    task,
                    METRIC_NAMES.get(task, "metric"),
                    f"{value:.4f}",
                    str(self.counts.get(f"{task}_total", 0)),
                    str(self.counts.get(f"{task}_parse_failures", 0)),
                )
            )
        rows.append(("mean", "", f"{self.mean_metric():.4f}", "", ""))
        widths = [max(len(r[c]) for r in rows) for c in range(len(headers))]
        lines = ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)) for row in rows]
        return "\n".join(lines)


def evaluate_task(
    model: MultimodalModel,
    records: list[PromptRecord],
    images: ImageStore,
    resolution: int,
    task: str,
    max_new: int = 40,
    selected=None,
    limit: int = 0,
) -> TaskResult:
    recs = records[:limit] if limit else records
    preds: list[str] = []
    rows: list[dict] = []
    for rec in recs:
        image = images.get(rec.image, resolution)
        text = model.generate(rec, image, max_new=max_new, selected=selected)
        preds.append(text)
        rows.append({"task": task, "image": rec.image, "pred": text, "target": rec.target})
    failures = 0
    if task == "grounding":
        golds = [parse_box(r.target) for r in recs]
        res = grounding_accuracy(preds, golds)
        value, failures = res.accuracy, res.parse_failures
        for row, score in zip(rows, res.ious):
            row["iou"] = score
    elif task == "vqa":
        scores = [vqa_soft_score(p, [r.target]) for p, r in zip(preds, recs)]
        value = sum(scores) / len(scores) if scores else 0.0
    else:
        value = corpus_exact_match(preds, [r.target for r in recs])
    return TaskResult(task, METRIC_NAMES[task], value, len(recs), failures, rows)


def evaluate_model(
    model: MultimodalModel,
    datasets: dict[str, list[PromptRecord]],
    images: ImageStore,
    resolution: int,
    max_new: int = 40,
    selected=None,
    limit: int = 0,
    metadata: dict | None = None,
) -> tuple[EvalReport, list[dict]]:
    task_metrics: dict[str, float] = {}
    counts: dict[str, int] = {}
    predictions: list[dict] = []
    failures = 0
    for task in ("caption", "vqa", "grounding"):
        if task not in datasets:
            continue
        result = evaluate_task(
            model, datasets[task], images, resolution, task, max_new, selected, limit
        )
        task_metrics[task] = result.value
        counts[f"{task}_total"] = result.total
        counts[f"{task}_parse_failures"] = result.parse_failures
        counts[f"{task}_scored"] = result.total - result.parse_failures
        failures += result.parse_failures
        predictions.extend(result.predictions)
    meta = dict(metadata or {})
    if selected is not None:
        meta["selected_scales"] = list(selected)
    report = EvalReport(
        task_metrics=task_metrics,
        counts=counts,
        parse_failures=failures,
        metadata=meta,
    )
    return report, predictions


def checkpoint_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _rank_flags(values: dict[str, float]) -> dict[str, list[str]]:
    """Best / second-best labels per column, ties reported side by side."""
    distinct = sorted(set(values.values()), reverse=True)
    flags: dict[str, list[str]] = {"best": [], "second": []}
    if distinct:
        flags["best"] = sorted(k for k, v in values.items() if v == distinct[0])
    if len(distinct) > 1:
        flags["second"] = sorted(k for k, v in values.items() if v == distinct[1])
    return flags


def scale_ablation(
    models: dict[str, MultimodalModel],
    datasets: dict[str, list[PromptRecord]],
    images: ImageStore,
    resolution: int,
    max_new: int = 40,
    limit: int = 0,
) -> dict:
    """Per-config x per-task metric table with a mean column and rank flags."""
    rows: dict[str, dict[str, float]] = {}
    for label, model in models.items():
        report, _ = evaluate_model(
            model, datasets, images, resolution, max_new=max_new, limit=limit
        )
        row = dict(report.task_metrics)
        row["mean"] = report.mean_metric()
        rows[label] = row
    columns = ["caption", "vqa", "grounding", "mean"]
    flags = {
        col: _rank_flags({label: row[col] for label, row in rows.items() if col in row})
        for col in columns
    }
    return {
        "rows": rows,
        "columns": columns,
        "column_flags": flags,
        "full_scale_reference_mean_trend": REFERENCE_MEAN_TREND,
    }


def online_subset_eval(
    model: MultimodalModel,
    subsets: list[list[int]],
    datasets: dict[str, list[PromptRecord]],
    images: ImageStore,
    resolution: int,
    max_new: int = 40,
    limit: int = 0,
) -> tuple[dict, list[dict]]:
    """Metrics per inference-time scale subset, with deltas against the full set."""
    if model.cfg.adapter != "pool":
        raise SelectionError("online subset evaluation needs the pool adapter")
    trained = set(model.cfg.pool.scales)
    for subset in subsets:
        if not set(subset) <= trained:
            raise SelectionError(f"subset {subset} not within trained scales {sorted(trained)}")
    full_report, full_preds = evaluate_model(
        model, datasets, images, resolution, max_new=max_new,
        selected=list(model.cfg.pool.scales), limit=limit,
    )
    out: dict = {
        "full": {
            "scales": list(model.cfg.pool.scales),
            "task_metrics": full_report.task_metrics,
            "mean": full_report.mean_metric(),
        },
        "subsets": {},
        "full_scale_reference_subset_trend": REFERENCE_SUBSET_TREND,
    }
    for subset in subsets:
        label = "+".join(str(p) for p in subset)
        report, _ = evaluate_model(
            model, datasets, images, resolution, max_new=max_new, selected=subset, limit=limit
        )
        out["subsets"][label] = {
            "scales": list(subset),
            "task_metrics": report.task_metrics,
            "mean": report.mean_metric(),
            "delta_vs_full": report.mean_metric() - full_report.mean_metric(),
        }
    return out, full_preds


def write_predictions(path: str | Path, predictions: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in predictions:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
