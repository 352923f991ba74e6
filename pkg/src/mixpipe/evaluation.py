"""Metrics: box IoU, REC accuracy@0.5, single-word VQA exact match and text perplexity.

Scoring functions take generated strings and ground truth only, so a run
can be re-scored from cached outputs.  The ``*_accuracy``/``*_match``
wrappers first generate with anything exposing ``respond(sample)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .language_core import BOS, encode_text
from .numerics import cross_entropy, no_grad
from .task_data import BBox, ConversationSample, find_bbox, parse_bbox


class Responder(Protocol):
    def respond(self, sample: ConversationSample) -> str: ...


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class RecScore:
    accuracy: float
    parse_failure_rate: float
    n: int


def score_rec(outputs: Sequence[str], truths: Sequence[BBox], threshold: float = 0.5) -> RecScore:
    """Accuracy at IoU >= threshold using the first bbox found in each output."""
    if len(outputs) != len(truths) or not truths:
        raise ValueError("need one output per ground-truth box, at least one")
    hits = fails = 0
    for out, gt in zip(outputs, truths):
        box = find_bbox(out)
        if box is None:
            fails += 1
        elif iou(box, gt) >= threshold:
            hits += 1
    n = len(truths)
    return RecScore(hits / n, fails / n, n)


def _normalise(s: str) -> str:
    return " ".join(s.strip().lower().rstrip(".").split())


def score_vqa(outputs: Sequence[str], answers: Sequence[str]) -> float:
    if len(outputs) != len(answers) or not answers:
        raise ValueError("need one output per answer, at least one")
    return sum(_normalise(o) == _normalise(a) for o, a in zip(outputs, answers)) / len(answers)


def generate_all(model: Responder | Callable[[ConversationSample], str],
                 dataset: Sequence[ConversationSample]) -> list[str]:
    fn = model.respond if hasattr(model, "respond") else model
    return [fn(s) for s in dataset]


def rec_accuracy(model, dataset: Sequence[ConversationSample]) -> RecScore:
    return score_rec(generate_all(model, dataset), [parse_bbox(s.response) for s in dataset])


def vqa_exact_match(model, dataset: Sequence[ConversationSample]) -> float:
    return score_vqa(generate_all(model, dataset), [s.response for s in dataset])


def text_ids(texts: Sequence[str], seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded ``BOS + text`` rows (truncated to ``seq_len``) and their target masks."""
    rows = [[BOS] + encode_text(t)[: seq_len - 1] for t in texts]
    width = max(len(r) for r in rows)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros_like(ids, dtype=bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, 1:len(r)] = True
    return ids, mask


def text_loss_of(lm, texts: Sequence[str], seq_len: int = 64) -> float:
    """Mean next-token cross entropy (nats) of a language model on plain texts."""
    ids, mask = text_ids(texts, seq_len)
    with no_grad():
        logits = lm.forward_batch(None, ids)
        return cross_entropy(logits[:, :-1, :], ids[:, 1:], mask[:, 1:]).item()


def text_perplexity(model, held_out_text: Sequence[str], seq_len: int = 64) -> float:
    lm = getattr(model, "lm", model)
    return math.exp(text_loss_of(lm, held_out_text, seq_len))


@dataclass
class EvalReport:
    config_digest: str
    rows: dict[str, tuple[float, int]] = field(default_factory=dict)

    def add(self, metric: str, value: float, n: int) -> None:
        if n < 1:
            raise ValueError(f"{metric}: sample count must be at least 1")
        if metric.endswith(("accuracy", "match", "rate")) and not 0.0 <= value <= 1.0:
            raise ValueError(f"{metric}: {value} outside [0, 1]")
        self.rows[metric] = (float(value), int(n))

    def to_csv(self) -> str:
        lines = ["metric,value,n,config_digest"]
        for k in sorted(self.rows):
            v, n = self.rows[k]
            lines.append(f"{k},{v!r},{n},{self.config_digest}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        with open(path, newline="") as fh:
            recs = list(csv.DictReader(fh))
        rep = cls(recs[0]["config_digest"] if recs else "")
        for r in recs:
            rep.rows[r["metric"]] = (float(r["value"]), int(r["n"]))
        return rep
