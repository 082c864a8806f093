"""Task registry and instruction embeddings.

Holds the six bench tasks, unit-norm instruction vectors (synthetic clusters
or an imported fixture), instruction selection per split, and the
integer-id embedding used by the no-language baselines.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASK_NAMES = (
    "open_drawer",
    "close_drawer",
    "move_slider_left",
    "move_slider_right",
    "turn_on_lightbulb",
    "turn_on_led",
)

FIXTURE_FORMAT = 1


@dataclass(frozen=True)
class TaskId:
    name: str
    index: int

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.name!r}")
        if TASK_NAMES[self.index] != self.name:
            raise ValueError(f"task index {self.index} does not match {self.name!r}")


TASKS = tuple(TaskId(name, i) for i, name in enumerate(TASK_NAMES))


def task_by_name(name: str) -> TaskId:
    try:
        return TASKS[TASK_NAMES.index(name)]
    except ValueError:
        raise KeyError(f"unknown task {name!r}; expected one of {TASK_NAMES}") from None


@dataclass
class TaskEmbedding:
    task: TaskId
    text: str
    split: str  # "train" | "validation"
    vec: np.ndarray


class FixtureError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    dim: int
    entries: list[TaskEmbedding]
    provenance: str = "synthetic"
    _by_key: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index()

    def _index(self):
        self._by_key = {}
        for e in self.entries:
            self._by_key.setdefault((e.task.name, e.split), []).append(e)

    def select(self, task: TaskId, split: str) -> list[TaskEmbedding]:
        return self._by_key.get((task.name, split), [])

    def tasks(self) -> list[TaskId]:
        return [t for t in TASKS if (t.name, "train") in self._by_key]


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise FixtureError("cannot normalize a zero vector")
    return v / n


def generate_synthetic(seed: int, dim: int, per_task: int, noise: float) -> EmbeddingSet:
    """Clustered unit-norm vectors: one deterministic center per task,
    `per_task` train entries plus one validation entry drawn around it."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if per_task < 2:
        raise ValueError("per_task must be >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    entries: list[TaskEmbedding] = []
    for task in TASKS:
        center = _normalize(rng.standard_normal(dim))
        for k in range(per_task):
            vec = _normalize(center + noise * rng.standard_normal(dim))
            entries.append(TaskEmbedding(task, f"synthetic instruction {k} for {task.name}", "train", vec))
        vec = _normalize(center + noise * rng.standard_normal(dim))
        entries.append(TaskEmbedding(task, f"synthetic validation instruction for {task.name}", "validation", vec))
    out = EmbeddingSet(dim=dim, entries=entries, provenance="synthetic")
    within, cross = cosine_separation(out)
    if within <= cross:
        warnings.warn(
            f"synthetic noise {noise} washes out task clusters "
            f"(within-task cosine {within:.4f} <= cross-task {cross:.4f})"
        )
    return out


def cosine_separation(es: EmbeddingSet) -> tuple[float, float]:
    """Mean within-task and cross-task pairwise cosine, by enumeration."""
    within, cross = [], []
    for i, a in enumerate(es.entries):
        for b in es.entries[i + 1 :]:
            cos = float(np.dot(a.vec, b.vec))
            (within if a.task.name == b.task.name else cross).append(cos)
    return float(np.mean(within)), float(np.mean(cross))


def pick_instruction(es: EmbeddingSet, task: TaskId, split: str, rng: np.random.Generator) -> TaskEmbedding:
    """Train split: uniform over the task's train entries. Validation: the
    single validation entry."""
    entries = es.select(task, split)
    if not entries:
        raise KeyError(f"no {split} instructions for task {task.name}")
    if split == "validation":
        return entries[0]
    return entries[int(rng.integers(len(entries)))]


def integer_id_embedding(task: TaskId, dim: int) -> np.ndarray:
    """(index+1) repeated to dim, scaled to unit norm. After normalization
    every task maps to the same vector, so this baseline carries no
    task signal under cosine; only pre-normalization magnitudes differ."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return _normalize(np.full(dim, float(task.index + 1)))


# ---------------------------------------------------------------------------
# fixture IO


def save_fixture(es: EmbeddingSet, path):
    doc = {
        "format": FIXTURE_FORMAT,
        "dim": es.dim,
        "entries": [
            {"task": e.task.name, "text": e.text, "split": e.split, "vec": [float(v) for v in e.vec]}
            for e in es.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_fixture(path) -> EmbeddingSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FixtureError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("format") != FIXTURE_FORMAT:
        raise FixtureError(f"{path}: unsupported fixture format {doc.get('format')!r}")
    dim = int(doc["dim"])
    entries = []
    for raw in doc["entries"]:
        label = f"({raw.get('task')!r}, {raw.get('text')!r}, {raw.get('split')!r})"
        try:
            task = task_by_name(raw["task"])
        except KeyError as exc:
            raise FixtureError(f"entry {label}: {exc}") from None
        if raw["split"] not in ("train", "validation"):
            raise FixtureError(f"entry {label}: bad split")
        vec = np.asarray(raw["vec"], dtype=np.float64)
        if vec.shape != (dim,):
            raise FixtureError(f"entry {label}: dimension {vec.shape[0]} != {dim}")
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > 1e-3:
            raise FixtureError(f"entry {label}: vector norm {norm:.6f} too far from 1")
        if abs(norm - 1.0) > 1e-9:
            vec = vec / norm
        entries.append(TaskEmbedding(task, raw["text"], raw["split"], vec))
    es = EmbeddingSet(dim=dim, entries=entries, provenance="imported")
    report = validate(es)
    if report:
        raise FixtureError(f"{path}: " + "; ".join(report))
    return es


def validate(es: EmbeddingSet) -> list[str]:
    """Invariant check; returns a list of problems (empty = valid)."""
    problems = []
    seen = set()
    for e in es.entries:
        if e.vec.shape != (es.dim,):
            problems.append(f"{e.task.name}/{e.text!r}: dim {e.vec.shape} != {es.dim}")
        if abs(np.linalg.norm(e.vec) - 1.0) > 1e-6:
            problems.append(f"{e.task.name}/{e.text!r}: not unit norm")
        key = (e.task.name, e.text, e.split)
        if key in seen:
            problems.append(f"duplicate entry {key}")
        seen.add(key)
    for task in es.tasks():
        train = es.select(task, "train")
        val = es.select(task, "validation")
        if len(train) < 2:
            problems.append(f"{task.name}: {len(train)} train entries (< 2)")
        if len(val) != 1:
            problems.append(f"{task.name}: {len(val)} validation entries (!= 1)")
        train_texts = {e.text for e in train}
        if any(v.text in train_texts for v in val):
            problems.append(f"{task.name}: validation text duplicates a train text")
    return problems
