"""Command-line entry point: data generation, staged training, evaluation,
scale ablation, gradient checking, and single-sample demo inference.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor, grad_check
from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .errors import ConfigError, SelectionError, StageOrderError
from .evaluation import (
    checkpoint_id,
    evaluate_model,
    iou,
    online_subset_eval,
    scale_ablation,
    write_predictions,
)
from .model import MultimodalModel
from .prompt_codec import (
    BoxParseError,
    PromptRecord,
    TemplateError,
    parse_box,
    read_records,
    render_prompt,
)
from .synth import GenerationError, generate_dataset
from .training import ImageStore, TrainingAbort, run_stage
from .vision import FeatureGrid, load_ppm

USAGE_EXIT, VALIDATION_EXIT, RUNTIME_EXIT = 1, 2, 3

_VALIDATION_ERRORS = (ConfigError, SelectionError, StageOrderError, TemplateError, CheckpointError)
_RUNTIME_ERRORS = (OSError, TrainingAbort, NonFiniteError, GenerationError, ad.ShapeError)


def _load_datasets(cfg: RunConfig, split: str, tasks=("caption", "vqa", "grounding")):
    root = cfg.data_root
    datasets = {}
    for task in tasks:
        path = root / f"{split}_{task}.jsonl"
        if not path.exists():
            raise ConfigError(f"missing dataset file {path}")
        datasets[task] = read_records(path)
    return datasets


def _build_model(cfg: RunConfig, checkpoint: str | None = None) -> MultimodalModel:
    vocab = cfg.build_vocab()
    model_cfg = cfg.model_config(len(vocab))
    if checkpoint is None:
        return MultimodalModel.create(model_cfg, vocab)
    return MultimodalModel.load(checkpoint, model_cfg, vocab)


def cmd_gen_data(args, cfg: RunConfig) -> int:
    cfg.validate()
    manifest = generate_dataset(cfg.data_config(), cfg.data_root)
    counts = {s: v["count"] for s, v in manifest["splits"].items()}
    print(f"dataset written to {cfg.data_root} (per-task counts: {counts})")
    return 0


def _train_one_stage(cfg: RunConfig, stage: int, out: Path) -> None:
    if stage == 1:
        model = _build_model(cfg)
    else:
        prior = out / f"stage{stage - 1}.ckpt"
        if not prior.exists():
            raise StageOrderError(
                f"stage {stage} requires {prior}; run the earlier stage first"
            )
        model = _build_model(cfg, str(prior))
    stage_cfg = cfg.stage_config(stage)
    datasets = _load_datasets(cfg, "train", stage_cfg.tasks)
    images = ImageStore(cfg.data_root)
    result = run_stage(
        model, stage_cfg, datasets, images, out, cfg.seed, cfg.adamw_hyper()
    )
    first = result.losses[0] if result.losses else float("nan")
    last = result.losses[-1] if result.losses else float("nan")
    print(
        f"stage {stage}: {stage_cfg.total_steps} steps, loss {first:.4f} -> {last:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )


def cmd_train(args, cfg: RunConfig) -> int:
    cfg.validate(need_data=True)
    out = Path(args.out)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    for stage in stages:
        _train_one_stage(cfg, stage, out)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    cfg.validate(need_data=True)
    model = _build_model(cfg, args.checkpoint)
    split = cfg.get("eval", "split")
    datasets = _load_datasets(cfg, split)
    images = ImageStore(cfg.data_root)
    resolution = cfg.getint("stage3", "image_resolution")
    selected = None
    if args.scales:
        selected = [int(s) for s in args.scales.replace("+", ",").split(",")]
    elif cfg.eval_scales():
        selected = list(cfg.eval_scales())
    report, predictions = evaluate_model(
        model,
        datasets,
        images,
        resolution,
        max_new=cfg.getint("eval", "max_new"),
        selected=selected,
        limit=cfg.getint("eval", "limit"),
        metadata={
            "checkpoint": str(args.checkpoint),
            "checkpoint_id": checkpoint_id(args.checkpoint),
            "seed": cfg.seed,
            "split": split,
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    write_predictions(out / "predictions.jsonl", predictions)
    print(report.table())
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    cfg.validate(need_data=True)
    scales = cfg.pool_config().scales
    labels = [str(p) for p in scales] + ["+".join(str(p) for p in scales)]
    variants = [(str(p), (p,)) for p in scales] + [(labels[-1], tuple(scales))]
    out = Path(args.out)
    models = {}
    for label, subset in variants:
        sub_cfg = RunConfig(raw={s: dict(v) for s, v in cfg.raw.items()}, path=cfg.path)
        sub_cfg.raw["pool"]["scales"] = ",".join(str(p) for p in subset)
        run_dir = out / f"scales_{label.replace('+', '_')}"
        for stage in (1, 2, 3):
            _train_one_stage(sub_cfg, stage, run_dir)
        models[label] = _build_model(sub_cfg, str(run_dir / "stage3.ckpt"))
    datasets = _load_datasets(cfg, cfg.get("eval", "split"))
    images = ImageStore(cfg.data_root)
    table = scale_ablation(
        models,
        datasets,
        images,
        cfg.getint("stage3", "image_resolution"),
        max_new=cfg.getint("eval", "max_new"),
        limit=cfg.getint("eval", "limit"),
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, sort_keys=True, indent=2) + "\n")
    for label, row in table["rows"].items():
        cells = "  ".join(f"{k}={v:.4f}" for k, v in row.items())
        print(f"{label:>10}  {cells}")
    return 0


def _gradcheck_module(label: str, loss_fn, tensors: dict[str, Tensor], samples: int, rng) -> float:
    if not tensors:
        print(f"warning: {label} exposes no parameters to check; vacuous pass")
        return 0.0
    worst = 0.0
    for name, tensor in tensors.items():
        size = tensor.data.size
        coords = None
        if samples and size > samples:
            coords = sorted(rng.choice(size, size=samples, replace=False).tolist())
        err = grad_check(lambda t: loss_fn(), tensor, coords=coords)
        worst = max(worst, err)
    print(f"{label}: max rel. error {worst:.3e}")
    return worst


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    cfg.validate()
    vocab = cfg.build_vocab()
    model = _build_model(cfg)
    rng = np.random.default_rng(cfg.seed)
    grid_shape = (4, 4, cfg.getint("model", "vision_channels"))
    grid_vals = Tensor(rng.normal(size=grid_shape), requires_grad=True)
    image = rng.uniform(size=(cfg.getint("stage1", "image_resolution"),) * 2 + (3,))
    rec = PromptRecord(task="caption", image="", target="a red square on a white background")

    emb_n = model.adapt(FeatureGrid(4, 4, grid_shape[2], grid_vals)).embeddings.data.size
    weights = rng.normal(size=emb_n)

    def full_loss():
        return model.sample_loss(rec, image)

    def adapter_loss():
        grid = FeatureGrid(4, 4, grid_shape[2], grid_vals)
        emb = model.adapt(grid).embeddings
        flat = ad.reshape(emb, (emb.data.size,))
        return ad.mean(ad.multiply(flat, Tensor(weights)), axis=0)

    adapter_prefix = "adapter." if model.cfg.adapter == "pool" else "qadapter."
    groups = {
        "adapter": {n: t for n, t in model.params.items() if n.startswith(adapter_prefix)},
        "vision": {n: t for n, t in model.params.items() if n.startswith("vision.")},
        "lm": {n: t for n, t in model.params.items() if n.startswith("lm.")},
    }
    worst = 0.0
    worst = max(worst, _gradcheck_module("adapter", adapter_loss, groups["adapter"], args.samples, rng))
    worst = max(worst, _gradcheck_module("vision", full_loss, groups["vision"], args.samples, rng))
    worst = max(worst, _gradcheck_module("lm", full_loss, groups["lm"], args.samples, rng))
    if worst >= 1e-4:
        print(f"FAIL: max relative error {worst:.3e} >= 1e-4")
        return RUNTIME_EXIT
    print(f"PASS: max relative error {worst:.3e} < 1e-4")
    return 0


def cmd_demo(args, cfg: RunConfig) -> int:
    cfg.validate()
    model = _build_model(cfg, args.checkpoint)
    image = load_ppm(args.image)
    if args.task == "vqa":
        rec = PromptRecord(task="vqa", image=str(args.image), question=args.query, target="")
    elif args.task == "grounding":
        rec = PromptRecord(task="grounding", image=str(args.image), expr=args.query, target="")
    else:
        rec = PromptRecord(task="caption", image=str(args.image), target="")
    print(f"prompt: {render_prompt(rec)}")
    text = model.generate(rec, image, max_new=cfg.getint("eval", "max_new"))
    print(f"generation: {text}")
    if args.task == "grounding":
        try:
            box = parse_box(text)
            print(f"parsed box: {box.corners()}")
            if args.gold:
                gold = parse_box(args.gold)
                print(f"iou vs gold: {iou(box, gold):.4f}")
        except BoxParseError as exc:
            print(f"box parse failure: {exc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="padapt",
        description="Desk-scale pooled-adapter multimodal testbed",
    )
    parser.add_argument("--config", default=None, help="INI config file")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic datasets")

    p_train = sub.add_parser("train", help="run one training stage (or all)")
    p_train.add_argument("--stage", required=True, choices=["1", "2", "3", "all"])
    p_train.add_argument("--out", default="runs/default")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--scales", default="", help="scale subset, e.g. 2,4")
    p_eval.add_argument("--out", default="runs/eval")

    p_ablate = sub.add_parser("ablate", help="train and compare scale configurations")
    p_ablate.add_argument("--out", default="runs/ablate")

    p_gc = sub.add_parser("gradcheck", help="finite-difference checks per module")
    p_gc.add_argument("--samples", type=int, default=25, help="coordinates per tensor (0: all)")

    p_demo = sub.add_parser("demo", help="single-sample inference")
    p_demo.add_argument("--checkpoint", required=True)
    p_demo.add_argument("--image", required=True)
    p_demo.add_argument("--task", choices=["caption", "vqa", "grounding"], default="caption")
    p_demo.add_argument("--query", default="", help="question or referring expression")
    p_demo.add_argument("--gold", default="", help="gold box text for IoU reporting")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "demo": cmd_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else USAGE_EXIT
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT
    except _RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
