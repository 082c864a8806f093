"""Export instruction embeddings into the trainer's fixture format.

The default encoder is a pretrained MiniLM-class sentence encoder loaded by
name through sentence-transformers. For fully offline use, the built-in
"hashed-bow" encoder embeds token unigrams/bigrams into a fixed random
basis; it captures lexical overlap only, but needs no downloads.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np

from .catalog import TASK_NAMES, InstructionCatalog

DEFAULT_ENCODER = "sentence-transformers/all-MiniLM-L6-v2"
FIXTURE_FORMAT = 1


class EncoderUnavailable(RuntimeError):
    pass


class HashedBowEncoder:
    """Deterministic lexical encoder: each unigram/bigram hashes to a fixed
    direction in a d-dimensional space; a sentence is the normalized sum."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def _term_vec(self, term: str) -> np.ndarray:
        digest = hashlib.sha256(term.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dim)

    def encode(self, sentences) -> np.ndarray:
        out = np.zeros((len(sentences), self.dim))
        for i, sentence in enumerate(sentences):
            words = re.findall(r"[a-z0-9]+", sentence.lower())
            terms = words + [f"{a}_{b}" for a, b in zip(words, words[1:])]
            for term in terms:
                out[i] += self._term_vec(term)
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out


def resolve_encoder(name: str):
    """Return an object with .encode(list[str]) -> (n, d) array."""
    if name == "hashed-bow":
        return HashedBowEncoder()
    try:
        from sentence_transformers import SentenceTransformer
    except ImportError as exc:
        raise EncoderUnavailable(
            f"sentence-transformers is not installed, so encoder {name!r} cannot be "
            "loaded. Install it, use --encoder hashed-bow, or generate synthetic "
            "embeddings with the trainer CLI: `langworld embed synth`."
        ) from exc
    try:
        return SentenceTransformer(name)
    except Exception as exc:
        raise EncoderUnavailable(
            f"pretrained encoder {name!r} could not be loaded ({type(exc).__name__}: {exc}). "
            "If you are offline, use --encoder hashed-bow or generate synthetic "
            "embeddings with `langworld embed synth`."
        ) from exc


def export_embeddings(catalog: InstructionCatalog, encoder_name: str = DEFAULT_ENCODER,
                      out_path=None, encoder=None) -> dict:
    """Encode every catalog instruction to a unit vector and write the
    fixture document. Returns the document."""
    enc = encoder if encoder is not None else resolve_encoder(encoder_name)
    items = list(catalog.entries())
    vectors = np.asarray(enc.encode([text for _, text, _ in items]), dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(items):
        raise ValueError(f"encoder returned shape {vectors.shape} for {len(items)} sentences")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ValueError("encoder produced a zero vector")
    vectors = vectors / norms[:, None]
    doc = {
        "format": FIXTURE_FORMAT,
        "dim": int(vectors.shape[1]),
        "entries": [
            {"task": task, "text": text, "split": split, "vec": [float(v) for v in vec]}
            for (task, text, split), vec in zip(items, vectors)
        ],
    }
    problems = validate_fixture(doc)
    if problems:
        raise ValueError("exported fixture is invalid: " + "; ".join(problems))
    if out_path is not None:
        Path(out_path).write_text(json.dumps(doc, indent=1))
    return doc


def validate_fixture(doc: dict) -> list[str]:
    """Check the documented fixture invariants; empty list means valid."""
    problems = []
    if doc.get("format") != FIXTURE_FORMAT:
        problems.append(f"bad format key {doc.get('format')!r}")
    dim = doc.get("dim")
    seen = set()
    per_task = {}
    for entry in doc.get("entries", []):
        key = (entry["task"], entry["text"], entry["split"])
        if key in seen:
            problems.append(f"duplicate entry {key}")
        seen.add(key)
        if entry["task"] not in TASK_NAMES:
            problems.append(f"unknown task {entry['task']!r}")
            continue
        vec = np.asarray(entry["vec"])
        if vec.shape != (dim,):
            problems.append(f"{entry['text']!r}: dim {vec.shape} != {dim}")
        elif abs(np.linalg.norm(vec) - 1.0) > 1e-6:
            problems.append(f"{entry['text']!r}: not unit norm")
        slot = per_task.setdefault(entry["task"], {"train": [], "validation": []})
        slot[entry["split"]].append(entry["text"])
    for task, slot in per_task.items():
        if len(slot["train"]) < 2:
            problems.append(f"{task}: fewer than 2 train entries")
        if len(slot["validation"]) != 1:
            problems.append(f"{task}: {len(slot['validation'])} validation entries")
        if set(slot["validation"]) & set(slot["train"]):
            problems.append(f"{task}: validation text also in train")
    return problems


def cosine_separation(doc: dict) -> tuple[float, float]:
    """Mean within-task vs cross-task pairwise cosine over fixture entries."""
    entries = doc["entries"]
    within, cross = [], []
    for i, a in enumerate(entries):
        va = np.asarray(a["vec"])
        for b in entries[i + 1 :]:
            cos = float(va @ np.asarray(b["vec"]))
            (within if a["task"] == b["task"] else cross).append(cos)
    return float(np.mean(within)), float(np.mean(cross))
