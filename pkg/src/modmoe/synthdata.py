"""Deterministic four-modality image/text corpus.

Each 16x16 image is a modality-specific texture (stripes, checkerboard,
diagonal speckle) optionally carrying one bright square or round lesion.
Every answer is a function of the pixels: :func:`derive_attributes` recovers
the lesion and texture from the image and :func:`answer` maps them to the
response text, and generation re-runs both before writing a record.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .numkernel import SplitMix, derive_seed
from .moe import MODALITIES

FORMAT_VERSION = 1
IMAGE_SIZE = 16
LESION_LEVEL = 1.0
LESION_THRESHOLD = 0.9
MAX_VOCAB = 512
TASKS = ("open", "closed", "classification")
SPLITS = ("align", "instruct", "tune", "test")
CLASSES = ("normal", "benign", "malignant")

MODALITY_PHRASE = {"CT": "ct scan", "MRI": "mri scan", "X-ray": "x-ray film",
                   "Pathology": "pathology slide"}

# (task kind, question, answer key)
QUESTIONS = (
    ("closed", "is there a lesion?", "present"),
    ("open", "what shape is the lesion?", "shape"),
    ("closed", "is the lesion in the upper half?", "upper"),
    ("open", "where is the lesion?", "where"),
    ("closed", "is the lesion on the left side?", "left"),
    ("classification", "classify this image.", "class"),
    ("closed", "is the lesion round?", "round"),
    ("open", "what modality is this image?", "modality"),
)


class RecordError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass
class Record:
    image: np.ndarray
    caption: str
    instruction: str
    response: str
    task: str
    modality: str
    split: str
    id: str = ""
    attributes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "id": self.id,
            "image": [[float(v) for v in row] for row in self.image],
            "caption": self.caption,
            "instruction": self.instruction,
            "response": self.response,
            "task": self.task,
            "modality": self.modality,
            "split": self.split,
            "attributes": self.attributes,
        }
        return json.dumps(d, separators=(",", ":"))

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        return (np.array_equal(self.image, other.image) and self.to_json() == other.to_json())


# ----------------------------------------------------------------------
# images
# ----------------------------------------------------------------------

def _texture(modality: str, contrast: int) -> np.ndarray:
    r, c = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    amp = 0.3 + 0.02 * contrast
    if modality == "CT":
        on = r % 2 == 0
        base = 0.15
    elif modality == "MRI":
        on = c % 2 == 0
        base = 0.2
    elif modality == "X-ray":
        on = (r + c) % 2 == 0
        base = 0.1
    elif modality == "Pathology":
        on = (r + c) % 4 == 0
        base = 0.35
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return base + amp * on


def _lesion_mask(shape: str, cy: int, cx: int) -> np.ndarray:
    r, c = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dy, dx = r - cy, c - cx
    if shape == "square":
        return (np.abs(dy) <= 2) & (np.abs(dx) <= 2)
    if shape == "round":
        return dy * dy + dx * dx <= 5
    raise ValueError(f"unknown lesion shape {shape!r}")


def render(attrs: dict, rng: SplitMix) -> np.ndarray:
    img = _texture(attrs["modality"], attrs["contrast"])
    img = img + (rng.uniform((IMAGE_SIZE, IMAGE_SIZE)) - 0.5) * 0.08
    img = np.clip(img, 0.0, 0.75)
    if attrs["lesion"]:
        img[_lesion_mask(attrs["shape"], attrs["cy"], attrs["cx"])] = LESION_LEVEL
    return np.round(img, 4)


def _texture_features(img: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Mean absolute differences along rows, columns and the two diagonals."""
    def md(a, b, ka, kb):
        m = ka & kb
        return np.abs(a - b)[m].mean() if m.any() else 0.0

    return np.array([
        md(img[1:, :], img[:-1, :], keep[1:, :], keep[:-1, :]),
        md(img[:, 1:], img[:, :-1], keep[:, 1:], keep[:, :-1]),
        md(img[1:, 1:], img[:-1, :-1], keep[1:, 1:], keep[:-1, :-1]),
        md(img[1:, :-1], img[:-1, 1:], keep[1:, :-1], keep[:-1, 1:]),
    ])


# (row, column, diagonal, anti-diagonal) neighbour contrast per texture
_SIGNATURES = {
    (True, False, True, True): "CT",
    (False, True, True, True): "MRI",
    (True, True, False, False): "X-ray",
    (True, True, True, False): "Pathology",
}


def derive_attributes(img: np.ndarray) -> dict:
    """Recover modality and lesion attributes from pixels alone."""
    img = np.asarray(img, dtype=np.float64)
    mask = img >= LESION_THRESHOLD
    f = _texture_features(img, ~mask)
    # which neighbour directions carry texture contrast identifies the family
    pattern = tuple(bool(v) for v in f > 0.5 * f.max()) if f.max() > 0.1 else None
    modality = _SIGNATURES.get(pattern, "unknown")
    out = {"modality": modality, "lesion": bool(mask.any())}
    if mask.any():
        rows, cols = np.nonzero(mask)
        y0, y1, x0, x1 = rows.min(), rows.max(), cols.min(), cols.max()
        area = (y1 - y0 + 1) * (x1 - x0 + 1)
        out["shape"] = "square" if mask.sum() == area else "round"
        out["cy"] = int((y0 + y1) // 2)
        out["cx"] = int((x0 + x1) // 2)
    return out


def answer(attrs: dict, key: str) -> str:
    present = attrs["lesion"]
    if key == "present":
        return "yes" if present else "no"
    if key == "modality":
        return MODALITY_PHRASE[attrs["modality"]]
    if key == "class":
        return "normal" if not present else ("benign" if attrs["shape"] == "round" else "malignant")
    if not present:
        return "no" if key in ("upper", "left", "round") else "no lesion"
    upper = attrs["cy"] < IMAGE_SIZE // 2
    left = attrs["cx"] < IMAGE_SIZE // 2
    if key == "upper":
        return "yes" if upper else "no"
    if key == "left":
        return "yes" if left else "no"
    if key == "round":
        return "yes" if attrs["shape"] == "round" else "no"
    if key == "shape":
        return attrs["shape"]
    if key == "where":
        return ("upper " if upper else "lower ") + ("left" if left else "right")
    raise KeyError(key)


def caption(attrs: dict) -> str:
    phrase = MODALITY_PHRASE[attrs["modality"]]
    if not attrs["lesion"]:
        return f"{phrase} with no lesion"
    return f"{phrase} with a {attrs['shape']} lesion in the {answer(attrs, 'where')}"


# ----------------------------------------------------------------------
# corpus
# ----------------------------------------------------------------------

def attribute_key(attrs: dict) -> tuple:
    if not attrs["lesion"]:
        return (attrs["modality"], attrs["contrast"], False)
    return (attrs["modality"], attrs["contrast"], True, attrs["shape"], attrs["cy"], attrs["cx"])


def _held_out(key: tuple, seed: int) -> bool:
    """Whether an attribute tuple belongs to the test-only pool."""
    return derive_seed(seed, "pool", *key) % 4 == 0


def _draw_attributes(modality: str, rng: SplitMix) -> dict:
    attrs = {"modality": modality, "contrast": int(rng.integers(0, 8)),
             "lesion": bool(rng.uniform() < 0.6)}
    if attrs["lesion"]:
        attrs["shape"] = "round" if rng.uniform() < 0.5 else "square"
        attrs["cy"] = int(rng.integers(2, 14))
        attrs["cx"] = int(rng.integers(2, 14))
    return attrs


def make_record(seed: int, split: str, index: int) -> Record:
    """The ``index``-th record of ``split``; a pure function of its arguments."""
    rng = SplitMix(derive_seed(seed, "record", split, index))
    modality = MODALITIES[index % len(MODALITIES)]
    while True:
        attrs = _draw_attributes(modality, rng)
        if split not in ("tune", "test"):
            break
        if _held_out(attribute_key(attrs), seed) == (split == "test"):
            break
    img = render(attrs, rng)
    kind, question, key = QUESTIONS[(index // len(MODALITIES)) % len(QUESTIONS)]
    return Record(
        image=img, caption=caption(attrs), instruction=question, response=answer(attrs, key),
        task=kind, modality=modality, split=split, id=f"{split}-{index:05d}",
        attributes={k: attrs[k] for k in sorted(attrs)} | {"question": key},
    )


def verify_record(rec: Record) -> None:
    """Re-derive the response from the pixels; raise if it disagrees."""
    derived = derive_attributes(rec.image)
    if derived["modality"] != rec.modality:
        raise RecordError(f"{rec.id}: texture reads as {derived['modality']}, labelled {rec.modality}")
    key = rec.attributes.get("question")
    if key is None:
        key = next(k for _, q, k in QUESTIONS if q == rec.instruction)
    if answer(derived, key) != rec.response:
        raise RecordError(f"{rec.id}: stored response {rec.response!r} does not match the image")


def vocabulary_words() -> list[str]:
    from .backbone import Vocabulary

    texts = [q for _, q, _ in QUESTIONS] + list(MODALITY_PHRASE.values()) + list(CLASSES)
    texts += ["yes no no lesion round square upper lower left right with a in the"]
    words = sorted({w for t in texts for w in Vocabulary.split(t)})
    if len(words) > MAX_VOCAB:
        raise ValueError(f"vocabulary overflow: {len(words)} > {MAX_VOCAB}")
    return words


def mean_patch_features(images: np.ndarray, patch: int = 4) -> np.ndarray:
    images = np.asarray(images)
    B, H, W = images.shape
    p = images.reshape(B, H // patch, patch, W // patch, patch).transpose(0, 1, 3, 2, 4)
    return p.reshape(B, -1, patch * patch).mean(axis=1)


def separability_certificate(records: Iterable[Record]) -> float:
    """Training accuracy of a least-squares linear probe on mean patches."""
    records = list(records)
    X = mean_patch_features(np.stack([r.image for r in records]))
    X = np.hstack([X, np.ones((len(X), 1))])
    y = np.array([MODALITIES.index(r.modality) for r in records])
    Y = np.eye(len(MODALITIES))[y]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return float((np.argmax(X @ W, axis=1) == y).mean())


@dataclass
class DatasetManifest:
    seed: int
    counts: dict
    vocab_hash: str
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "counts": self.counts, "vocab_hash": self.vocab_hash,
                           "format_version": self.format_version}, sort_keys=True, indent=2) + "\n"


def generate_splits(seed: int, sizes: dict[str, int]) -> dict[str, list[Record]]:
    out = {}
    for split, n in sizes.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if n < len(MODALITIES):
            raise ValueError(f"split {split!r} needs at least one record per modality")
        out[split] = [make_record(seed, split, i) for i in range(n)]
    return out


def generate_corpus(seed: int, sizes: dict[str, int], out_dir: str | Path | None = None):
    """Generate, verify and optionally write every split.

    Returns ``(splits, manifest)``. Files written: ``<split>.jsonl``,
    ``vocab.txt``, ``manifest.json``.
    """
    from .backbone import Vocabulary

    splits = generate_splits(seed, sizes)
    all_records = [r for recs in splits.values() for r in recs]
    for rec in all_records:
        verify_record(rec)
    acc = separability_certificate(all_records)
    if acc < 0.99:
        raise RuntimeError(f"modality textures not linearly separable (probe accuracy {acc:.3f})")
    vocab = Vocabulary(vocabulary_words())
    counts = {}
    for split, recs in splits.items():
        counts[split] = {
            "total": len(recs),
            "modality": {m: sum(r.modality == m for r in recs) for m in MODALITIES},
            "task": {t: sum(r.task == t for r in recs) for t in TASKS},
        }
    manifest = DatasetManifest(seed, counts, vocab.digest())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for split, recs in splits.items():
            write_records(recs, out / f"{split}.jsonl")
        vocab.save(out / "vocab.txt")
        (out / "manifest.json").write_text(manifest.to_json())
    return splits, manifest


def write_records(records: Iterable[Record], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


_REQUIRED = ("image", "caption", "instruction", "response", "task", "modality", "split")


def load_records(path: str | Path) -> list[Record]:
    """Parse a JSONL file; a bad line raises ``RecordError`` naming the line."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(d, dict):
                raise RecordError("record is not an object", lineno)
            missing = [k for k in _REQUIRED if k not in d]
            if missing:
                raise RecordError(f"missing fields {missing}", lineno)
            if d["task"] not in TASKS:
                raise RecordError(f"unknown task kind {d['task']!r}", lineno)
            if d["modality"] not in MODALITIES:
                raise RecordError(f"unknown modality {d['modality']!r}", lineno)
            img = np.asarray(d["image"], dtype=np.float64)
            if img.ndim != 2 or not np.all(np.isfinite(img)):
                raise RecordError("image must be a finite 2-D array", lineno)
            records.append(Record(img, d["caption"], d["instruction"], d["response"], d["task"],
                                  d["modality"], d["split"], d.get("id", f"line-{lineno}"),
                                  d.get("attributes", {})))
    return records


def load_corpus(data_dir: str | Path) -> dict[str, list[Record]]:
    data_dir = Path(data_dir)
    return {s: load_records(data_dir / f"{s}.jsonl") for s in SPLITS if (data_dir / f"{s}.jsonl").exists()}


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
