"""Prompt templating, word-level tokenization, box text codec, and splicing.

Text is a closed synthetic lexicon plus markup tokens; digits and
punctuation tokenize as single characters so coordinate strings like
``(0.074,0.142)`` become digit sequences.  Detokenization re-attaches
punctuation and markup deterministically, so canonical strings (everything
the templates and generators emit) round-trip byte-exactly.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .lm import MixedSequence, SeqItem

logger = logging.getLogger(__name__)

IMAGE_TOKEN = "<image>"
PLACEHOLDER = "<ImageHere>"
REF_OPEN, REF_CLOSE = "<ref>", "</ref>"
BOX_OPEN, BOX_CLOSE = "<box>", "</box>"
EOS, UNK = "<eos>", "<unk>"

SPECIAL_TOKENS = (IMAGE_TOKEN, PLACEHOLDER, REF_OPEN, REF_CLOSE, BOX_OPEN, BOX_CLOSE, EOS, UNK)
PUNCT = (".", ",", "(", ")", ":", "?")
DIGITS = tuple(str(d) for d in range(10))

# words used by the prompt templates themselves
TEMPLATE_WORDS = ("A", "short", "image", "caption", "Question", "Short", "answer")

TASKS = ("caption", "vqa", "grounding")


class TemplateError(ValueError):
    """A prompt record is missing a slot its template needs."""


class SpliceError(ValueError):
    """The prompt does not contain exactly one image placeholder."""


class BoxParseError(ValueError):
    """No well-formed box substring was found."""


class MalformedBoxError(BoxParseError):
    """A box was found but its corners are out of order."""


class RangeError(ValueError):
    """A coordinate lies outside [0, 1]."""


# detokenizer attachment rules
_NO_SPACE_AFTER = set(DIGITS) | {IMAGE_TOKEN, PLACEHOLDER, REF_OPEN, BOX_OPEN, "(", ".", ","}
_NO_SPACE_BEFORE = set(DIGITS) | {".", ",", ")", ":", "?", REF_CLOSE, BOX_CLOSE, BOX_OPEN, EOS}


class Vocabulary:
    """Closed word->id map: markup + punctuation + digits + lexicon words."""

    def __init__(self, words: Iterable[str] = ()):
        tokens = list(SPECIAL_TOKENS) + list(PUNCT) + list(DIGITS) + list(TEMPLATE_WORDS)
        seen = set(tokens)
        for w in words:
            if w not in seen:
                tokens.append(w)
                seen.add(w)
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        special = "|".join(re.escape(t) for t in SPECIAL_TOKENS)
        self._scanner = re.compile(rf"{special}|[A-Za-z]+|[0-9]|[.,():?]|\S")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def placeholder_id(self) -> int:
        return self.index[PLACEHOLDER]

    def tokenize(self, text: str) -> list[int]:
        return [
            self.index.get(m.group(0), self.unk_id) for m in self._scanner.finditer(text)
        ]

    def detokenize(self, ids: Sequence[int]) -> str:
        parts: list[str] = []
        prev: str | None = None
        for i in ids:
            tok = self.tokens[i]
            if prev is not None and prev not in _NO_SPACE_AFTER and tok not in _NO_SPACE_BEFORE:
                parts.append(" ")
            parts.append(tok)
            prev = tok
        return "".join(parts)


@dataclass
class BoundingBox:
    """Normalized corner box; x1 <= x2 and y1 <= y2, all within [0, 1]."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not 0.0 <= v <= 1.0:
                raise RangeError(f"coordinate {v} outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise MalformedBoxError(
                f"corners out of order: ({self.x1},{self.y1}),({self.x2},{self.y2})"
            )

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class PromptRecord:
    """One task-tagged training/eval sample."""

    task: str
    image: str
    target: str
    question: str | None = None
    expr: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise TemplateError(f"unknown task {self.task!r}")

    def to_json(self) -> str:
        payload: dict[str, str] = {"task": self.task, "image": self.image}
        if self.question is not None:
            payload["question"] = self.question
        if self.expr is not None:
            payload["expr"] = self.expr
        payload["target"] = self.target
        return json.dumps(payload)

    @staticmethod
    def from_json(line: str) -> "PromptRecord":
        raw = json.loads(line)
        return PromptRecord(
            task=raw["task"],
            image=raw["image"],
            target=raw["target"],
            question=raw.get("question"),
            expr=raw.get("expr"),
        )


def write_records(path: str | Path, records: Iterable[PromptRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path: str | Path) -> list[PromptRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PromptRecord.from_json(line) for line in fh if line.strip()]


def render_prompt(rec: PromptRecord, stage: int | None = None) -> str:
    """Instantiate the task template; the target is the label, never rendered."""
    if stage == 1 and rec.task != "caption":
        raise TemplateError("stage 1 renders caption prompts only")
    head = f"{IMAGE_TOKEN}{PLACEHOLDER}"
    if rec.task == "caption":
        return f"{head}A short image caption: "
    if rec.task == "vqa":
        if not rec.question:
            raise TemplateError("vqa record is missing its question slot")
        return f"{head}Question: {rec.question} Short answer: "
    if not rec.expr:
        raise TemplateError("grounding record is missing its referring expression")
    return f"{head}{REF_OPEN}{rec.expr}{REF_CLOSE}"


def serialize_box(box: BoundingBox) -> str:
    """``<box>(x1,y1),(x2,y2)</box>`` at exactly 3 decimals, half away from zero."""

    def fmt(v: float) -> str:
        return str(Decimal(v).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))

    x1, y1, x2, y2 = box.corners()
    return f"{BOX_OPEN}({fmt(x1)},{fmt(y1)}),({fmt(x2)},{fmt(y2)}){BOX_CLOSE}"


_NUM = r"([-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)"
_BOX_RE = re.compile(
    rf"{re.escape(BOX_OPEN)}\s*\(\s*{_NUM}\s*,\s*{_NUM}\s*\)\s*,\s*\(\s*{_NUM}\s*,\s*{_NUM}\s*\)"
)


def parse_box(text: str) -> BoundingBox:
    """Inverse of :func:`serialize_box`, tolerant of surrounding text.

    Takes the first well-formed box substring (a trailing ``</box>`` is
    optional), clamps stray coordinates into [0, 1] with a log note, and
    raises :class:`MalformedBoxError` when corners are out of order or
    :class:`BoxParseError` when no box is present.
    """
    match = _BOX_RE.search(text)
    if match is None:
        raise BoxParseError("no box substring found")
    coords = [float(g) for g in match.groups()]
    clamped = [min(1.0, max(0.0, v)) for v in coords]
    if clamped != coords:
        logger.info("clamped out-of-range box coordinates %s", coords)
    x1, y1, x2, y2 = clamped
    if x1 > x2 or y1 > y2:
        raise MalformedBoxError(f"corners out of order in {match.group(0)!r}")
    return BoundingBox(x1, y1, x2, y2)


def splice_plan(prompt_ids: Sequence[int], n_visual: int, vocab: Vocabulary) -> MixedSequence:
    """Replace the single ``<ImageHere>`` token with ``n_visual`` visual rows."""
    placeholder = vocab.placeholder_id
    hits = [i for i, t in enumerate(prompt_ids) if t == placeholder]
    if len(hits) != 1:
        raise SpliceError(f"expected exactly one {PLACEHOLDER}, found {len(hits)}")
    at = hits[0]
    items = [SeqItem.token(t) for t in prompt_ids[:at]]
    items += [SeqItem.visual(r) for r in range(n_visual)]
    items += [SeqItem.token(t) for t in prompt_ids[at + 1 :]]
    return MixedSequence(items=items)


def training_sequence(
    prompt_ids: Sequence[int],
    target_ids: Sequence[int],
    n_visual: int,
    vocab: Vocabulary,
) -> MixedSequence:
    """Spliced prompt followed by target tokens and <eos>, masked for loss."""
    base = splice_plan(prompt_ids, n_visual, vocab)
    items = list(base.items)
    mask = [0.0] * len(items)
    for t in list(target_ids) + [vocab.eos_id]:
        items.append(SeqItem.token(t))
        mask.append(1.0)
    return MixedSequence(items=items, loss_mask=mask)
