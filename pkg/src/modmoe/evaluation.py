"""Answer-quality metrics, cluster separation and report emission."""

from __future__ import annotations

import csv
import json
import math
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import MultimodalLM, Vocabulary, greedy_generate, make_batch
from .synthdata import Record

CLOSED_ANSWERS = ("yes", "no")
_STRIP = str.maketrans("", "", string.punctuation)


def words(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip ASCII punctuation, drop empties."""
    out = []
    for w in text.lower().split():
        w = w.translate(_STRIP)
        if w:
            out.append(w)
    return out


def _as_words(x) -> list[str]:
    return words(x) if isinstance(x, str) else list(x)


def recall(candidate, reference) -> float:
    """Share of distinct reference words that appear in the candidate."""
    ref = set(_as_words(reference))
    if not ref:
        raise ValueError("recall needs a non-empty reference")
    cand = set(_as_words(candidate))
    tp = len(ref & cand)
    fn = len(ref - cand)
    return tp / (tp + fn)


def exact_match(candidate, reference) -> float:
    """Share of candidate words found in the reference; 0 for an empty candidate."""
    cand = _as_words(candidate)
    if not cand:
        return 0.0
    ref = set(_as_words(reference))
    return sum(w in ref for w in cand) / len(cand)


def ngrams(seq: Sequence[str], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def modified_precision(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    cand = ngrams(candidate, n)
    total = sum(cand.values())
    if total == 0:
        return 0.0
    ref = ngrams(reference, n)
    return sum(min(c, ref[g]) for g, c in cand.items()) / total


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Single-reference BLEU, uniform weights, no smoothing.

    The n-gram order is capped at the candidate length so short answers
    are scored on the orders they actually have.
    """
    cand = _as_words(candidate)
    ref = _as_words(reference)
    c, r = len(cand), len(ref)
    if c == 0 or r == 0:
        return 0.0
    n_max = min(max_n, c)
    logs = []
    for n in range(1, n_max + 1):
        p = modified_precision(cand, ref, n)
        if p == 0.0:
            return 0.0
        logs.append(math.log(p))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(sum(logs) / n_max)


def closed_correct(prediction: str, reference: str) -> bool:
    ref = words(reference)
    if len(ref) != 1 or ref[0] not in CLOSED_ANSWERS:
        raise ValueError(f"closed reference must be yes or no, got {reference!r}")
    pred = words(prediction)
    return bool(pred) and pred[0] == ref[0]


def closed_accuracy(predictions: Sequence[str], references: Sequence[str]) -> float:
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    if not references:
        return 0.0
    return sum(closed_correct(p, r) for p, r in zip(predictions, references)) / len(references)


def classification_accuracy(predictions: Sequence[str], references: Sequence[str]) -> float:
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    if not references:
        return 0.0
    return sum(words(p) == words(r) for p, r in zip(predictions, references)) / len(references)


def silhouette(points, labels) -> float:
    """Mean silhouette under Euclidean distance; singletons score 0."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = np.sqrt(np.maximum(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1), 0.0))
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in classes if c != labels[i])
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return float(s.mean())


# ----------------------------------------------------------------------
# model evaluation
# ----------------------------------------------------------------------

@dataclass
class MetricReport:
    aggregates: dict[str, dict[str, float]]
    rows: list[dict]
    counts: dict[str, int]
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"aggregates": self.aggregates, "counts": self.counts,
                           "extra": self.extra}, sort_keys=True, indent=2) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        cols = ["id", "task", "modality", "prediction", "reference", "metric", "value"]
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)


def score(task: str, prediction: str, reference: str) -> dict[str, float]:
    if task == "open":
        return {"recall": recall(prediction, reference),
                "ems": exact_match(prediction, reference),
                "bleu": bleu(prediction, reference)}
    if task == "closed":
        return {"accuracy": float(closed_correct(prediction, reference))}
    if task == "classification":
        return {"accuracy": float(words(prediction) == words(reference))}
    raise ValueError(f"unknown task kind {task!r}")


def build_report(records: Sequence[Record], predictions: Sequence[str | None]) -> MetricReport:
    """Score predictions; ``None`` marks a record that could not be decoded."""
    rows = []
    per: dict[str, dict[str, list[float]]] = {}
    counts = {"total": len(records), "skipped": 0}
    for rec, pred in zip(records, predictions):
        if pred is None:
            counts["skipped"] += 1
            continue
        counts[rec.task] = counts.get(rec.task, 0) + 1
        for metric, value in score(rec.task, pred, rec.response).items():
            per.setdefault(rec.task, {}).setdefault(metric, []).append(value)
            rows.append({"id": rec.id, "task": rec.task, "modality": rec.modality,
                         "prediction": pred, "reference": rec.response, "metric": metric,
                         "value": value})
    aggregates = {task: {m: float(np.mean(v)) for m, v in ms.items()} for task, ms in sorted(per.items())}
    return MetricReport(aggregates, rows, counts)


def predict(model: MultimodalLM, records: Sequence[Record], vocab: Vocabulary,
            max_new: int = 8) -> list[str | None]:
    """Greedy answers; records whose prompt cannot fit get ``None``."""
    n_image = model.cfg.n_image_tokens
    prompts = [vocab.encode(r.instruction) for r in records]
    fits = [n_image + 1 + len(p) + max_new <= model.cfg.max_seq_len for p in prompts]
    keep = [i for i, ok in enumerate(fits) if ok]
    out: list[str | None] = [None] * len(records)
    if keep:
        batch = make_batch(np.stack([records[i].image for i in keep]), [prompts[i] for i in keep],
                           n_image=n_image)
        for i, ids in zip(keep, greedy_generate(batch, model, max_new)):
            out[i] = vocab.decode(ids)
    return out


def evaluate(model: MultimodalLM, records: Sequence[Record], vocab: Vocabulary,
             max_new: int = 8) -> MetricReport:
    return build_report(records, predict(model, records, vocab, max_new))
