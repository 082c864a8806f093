"""Episode container and on-disk dataset format.

Datasets are a directory of per-episode binary blobs plus a JSON manifest.
Blob header: format version, T, image dims, proprio dim, reward task, seed,
and first-completion times per task. Body: raw state/image/proprio/action/
reward/done payloads, images as bytes and reals little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lexicon import TASKS, TaskId

EPISODE_MAGIC = b"LWEP"
EPISODE_VERSION = 1


@dataclass
class Episode:
    seed: int
    task: TaskId  # task under which rewards/dones are stored
    states: np.ndarray  # (T+1, 7) float32 raw environment states
    images: np.ndarray  # (T+1, H, W, 3) uint8
    proprios: np.ndarray  # (T+1, d) float32
    actions: np.ndarray  # (T, action_dim) float32
    rewards: np.ndarray  # (T,) float32
    dones: np.ndarray  # (T,) bool
    completed: dict[str, int] = field(default_factory=dict)  # task -> first success step
    instruction_text: str | None = None

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    def completes_any(self, tasks) -> bool:
        return any(t.name in self.completed for t in tasks)

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float32) / 255.0


def save_episode_bytes(ep: Episode) -> bytes:
    t = ep.length
    _, h, w, c = ep.images.shape
    d = ep.proprios.shape[1]
    parts = [
        EPISODE_MAGIC,
        struct.pack("<IIIIII", EPISODE_VERSION, t, h, w, c, d),
        struct.pack("<iQ", ep.task.index, ep.seed),
        struct.pack("<I", len(ep.completed)),
    ]
    for name in sorted(ep.completed):
        parts.append(struct.pack("<II", TASKS[[t_.name for t_ in TASKS].index(name)].index, ep.completed[name]))
    parts.append(np.ascontiguousarray(ep.states, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(ep.images, dtype=np.uint8).tobytes())
    parts.append(np.ascontiguousarray(ep.proprios, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(ep.actions, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(ep.rewards, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(ep.dones, dtype=np.uint8).tobytes())
    return b"".join(parts)


def load_episode_bytes(buf: bytes) -> Episode:
    if buf[:4] != EPISODE_MAGIC:
        raise ValueError("not an episode blob (bad magic)")
    off = 4
    version, t, h, w, c, d = struct.unpack_from("<IIIIII", buf, off)
    off += 24
    if version != EPISODE_VERSION:
        raise ValueError(f"unsupported episode version {version}")
    task_index, seed = struct.unpack_from("<iQ", buf, off)
    off += 12
    (n_completed,) = struct.unpack_from("<I", buf, off)
    off += 4
    completed = {}
    for _ in range(n_completed):
        idx, first_t = struct.unpack_from("<II", buf, off)
        off += 8
        completed[TASKS[idx].name] = first_t

    def read(count, dtype, shape):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        return arr.copy()

    states = read((t + 1) * 7, "<f4", (t + 1, 7))
    images = read((t + 1) * h * w * c, np.uint8, (t + 1, h, w, c))
    proprios = read((t + 1) * d, "<f4", (t + 1, d))
    actions = read(t * 3, "<f4", (t, 3))
    rewards = read(t, "<f4", (t,))
    dones = read(t, np.uint8, (t,)).astype(bool)
    return Episode(
        seed=seed, task=TASKS[task_index], states=states, images=images,
        proprios=proprios, actions=actions, rewards=rewards, dones=dones, completed=completed,
    )


def save_dataset(episodes: list[Episode], out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": 1, "episodes": []}
    for i, ep in enumerate(episodes):
        name = f"ep_{i:05d}.bin"
        (out / name).write_bytes(save_episode_bytes(ep))
        manifest["episodes"].append(
            {
                "id": f"ep_{i:05d}",
                "file": name,
                "seed": ep.seed,
                "task": ep.task.name,
                "completed": {k: int(v) for k, v in sorted(ep.completed.items())},
            }
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"


def load_dataset(dataset_dir) -> list[Episode]:
    root = Path(dataset_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != 1:
        raise ValueError(f"unsupported dataset format {manifest.get('format')}")
    return [load_episode_bytes((root / rec["file"]).read_bytes()) for rec in manifest["episodes"]]
