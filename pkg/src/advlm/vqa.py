"""VQA scoring protocol: normalization, matching, accuracy, subsetting.

The match rule is deliberately permissive: after normalization a
prediction counts as correct when it equals any ground truth or when
either string contains the other. Substring matching is raw (no word
boundaries), so "red" matches "bored"; that false-positive class is a
known property of the rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .autodiff import ContractViolation, Tensor
from .seeding import make_rng

__all__ = [
    "normalize_answer",
    "vqa_match",
    "vqa_accuracy",
    "accuracy_drop",
    "sample_subset",
    "margin_of_error",
    "VqaSample",
    "EvalRecord",
    "PerEpsilonStats",
    "EvalReport",
    "read_ppm",
    "write_ppm",
    "load_manifest",
    "write_manifest",
    "load_image",
]

_PUNCTUATION = ".,?!'\";:()"
_ARTICLES = frozenset({"a", "an", "the"})
_DELETE_PUNCT = str.maketrans("", "", _PUNCTUATION)


def normalize_answer(raw: str) -> str:
    """Canonical answer form: lowercase, punctuation stripped, whitespace
    collapsed, standalone articles removed. Idempotent."""
    words = raw.lower().translate(_DELETE_PUNCT).split()
    return " ".join(w for w in words if w not in _ARTICLES)


def vqa_match(prediction: str, ground_truths: Sequence[str]) -> bool:
    """True when the normalized prediction matches at least one normalized
    ground truth, exactly or by substring in either direction. An empty
    normalized prediction never matches."""
    if not ground_truths:
        raise ContractViolation("ground_truths must be non-empty")
    pred = normalize_answer(prediction)
    if not pred:
        return False
    for raw in ground_truths:
        gt = normalize_answer(raw)
        if pred == gt or pred in gt or gt in pred:
            return True
    return False


def vqa_accuracy(records: Sequence[bool]) -> float:
    """Percentage of true entries. Full precision; rounding happens only
    at the report boundary."""
    if len(records) == 0:
        raise ContractViolation("vqa_accuracy needs at least one record")
    return 100.0 * sum(1 for r in records if r) / len(records)


def accuracy_drop(clean: float, adversarial: float) -> float:
    """Clean minus adversarial accuracy, in percentage points. May be
    negative; the sign is preserved."""
    if not (0.0 <= clean <= 100.0 and 0.0 <= adversarial <= 100.0):
        raise ContractViolation("accuracies must lie in [0, 100]")
    return clean - adversarial


def sample_subset(sample_ids: Sequence, n: int, seed: int) -> list:
    """First `n` elements of a seeded partial Fisher-Yates shuffle.

    Draw i swaps position i with a uniform position in [i, len), taken
    from a Philox stream keyed by `seed`; identical inputs give identical
    subsets on every run.
    """
    ids = list(sample_ids)
    n = int(n)
    if n < 0 or n > len(ids):
        raise ContractViolation(f"subset size {n} outside [0, {len(ids)}]")
    rng = make_rng(seed)
    for i in range(n):
        j = int(rng.integers(i, len(ids)))
        ids[i], ids[j] = ids[j], ids[i]
    return ids[:n]


def margin_of_error(n: int, p: float) -> float:
    """Normal-approximation 95% half-width for a proportion, in percent:
    100 * 1.96 * sqrt(p (1 - p) / n)."""
    if n < 1:
        raise ContractViolation("margin_of_error needs n >= 1")
    return 100.0 * 1.96 * math.sqrt(p * (1.0 - p) / n)


# ---------------------------------------------------------------------------
# dataset and report records


@dataclass
class VqaSample:
    """One evaluation triplet: image reference, question, gold answers."""

    sample_id: str
    image_ref: Union[str, Path, Tensor]
    question_text: str
    ground_truth_answers: tuple

    def __post_init__(self):
        self.ground_truth_answers = tuple(self.ground_truth_answers)
        if not self.ground_truth_answers:
            raise ContractViolation(f"sample {self.sample_id!r} has no ground-truth answers")


@dataclass(frozen=True)
class EvalRecord:
    """Per-sample scoring row; correctness is decided solely by vqa_match."""

    sample_id: str
    clean_answer: str
    adversarial_answer: str
    clean_correct: bool
    adversarial_correct: bool
    epsilon: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "sample_id": self.sample_id,
                "clean_answer": self.clean_answer,
                "adversarial_answer": self.adversarial_answer,
                "clean_correct": self.clean_correct,
                "adversarial_correct": self.adversarial_correct,
                "epsilon": self.epsilon,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class PerEpsilonStats:
    """Aggregate row for one perturbation budget."""

    epsilon: float
    n: int
    clean_accuracy: float
    adversarial_accuracy: float
    accuracy_drop: float
    margin_of_error: float
    attack_failures: int = 0


@dataclass
class EvalReport:
    """Evaluation outcome for one model across perturbation budgets."""

    model_label: str
    entries: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def validate(self) -> None:
        """Check internal arithmetic and, when records exist, that the
        stored aggregates replay exactly from the records."""
        for e in self.entries:
            if not (0.0 <= e.clean_accuracy <= 100.0 and 0.0 <= e.adversarial_accuracy <= 100.0):
                raise ContractViolation(f"accuracy outside [0, 100] at epsilon {e.epsilon}")
            if abs(e.accuracy_drop - (e.clean_accuracy - e.adversarial_accuracy)) > 0.05:
                raise ContractViolation(f"drop mismatch at epsilon {e.epsilon}")
        if self.records:
            by_eps: dict = {}
            for r in self.records:
                by_eps.setdefault(r.epsilon, []).append(r)
            for e in self.entries:
                rows = by_eps.get(e.epsilon, [])
                if len(rows) != e.n:
                    continue  # failures excluded from records keep n smaller
                if vqa_accuracy([r.clean_correct for r in rows]) != e.clean_accuracy:
                    raise ContractViolation(f"clean accuracy does not replay at {e.epsilon}")
                if vqa_accuracy([r.adversarial_correct for r in rows]) != e.adversarial_accuracy:
                    raise ContractViolation(f"adversarial accuracy does not replay at {e.epsilon}")


# ---------------------------------------------------------------------------
# image and manifest formats


def write_ppm(path: Union[str, Path], image: Union[Tensor, np.ndarray]) -> None:
    """Write an [H, W, 3] image with values in [0, 1] as binary 8-bit P6."""
    arr = image.array if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractViolation(f"PPM images must be [H, W, 3], got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractViolation("PPM pixel values must lie in [0, 1]")
    h, w, _ = arr.shape
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path: Union[str, Path]) -> Tensor:
    """Read a binary 8-bit P6 file; pixel bytes map to reals by v / 255."""
    blob = Path(path).read_bytes()
    fields = []
    pos = 2
    if blob[:2] != b"P6":
        raise ContractViolation(f"{path}: not a P6 PPM file")
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":  # comment line
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ContractViolation(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    pos += 1  # exactly one whitespace byte after maxval
    raw = blob[pos : pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise ContractViolation(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0
    return Tensor._wrap(arr)


def load_image(ref: Union[str, Path, Tensor]) -> Tensor:
    return ref if isinstance(ref, Tensor) else read_ppm(ref)


def write_manifest(path: Union[str, Path], rows: Sequence[dict]) -> None:
    """Write dataset rows as JSON lines with keys sample_id, image,
    question, answers. `image` is a path relative to the manifest."""
    lines = []
    for row in rows:
        lines.append(json.dumps(
            {
                "sample_id": row["sample_id"],
                "image": row["image"],
                "question": row["question"],
                "answers": list(row["answers"]),
            },
            sort_keys=True,
            separators=(",", ":"),
        ))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest(path: Union[str, Path]) -> list:
    """Read a JSON-lines manifest into VqaSamples; image paths resolve
    relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    samples = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ContractViolation(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        try:
            sample = VqaSample(
                sample_id=str(row["sample_id"]),
                image_ref=base / row["image"],
                question_text=str(row["question"]),
                ground_truth_answers=tuple(str(a) for a in row["answers"]),
            )
        except KeyError as exc:
            raise ContractViolation(f"{path}:{lineno}: missing field {exc}") from exc
        if sample.sample_id in seen:
            raise ContractViolation(f"{path}:{lineno}: duplicate sample_id {sample.sample_id!r}")
        seen.add(sample.sample_id)
        samples.append(sample)
    return samples
