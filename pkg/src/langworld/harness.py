"""Evaluation protocol, task-switching schedule runner, and
imagined-trajectory decoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import lexicon as lx
from . import minibench as mb
from .autodiff import Tensor
from .system import System
from .tokenizer import TokenizedObs
from .worldmodel import imagine


@dataclass
class EvalReport:
    per_task: dict
    multi_task: float
    n_eval: int
    seed: int
    epoch: int | None = None

    def to_dict(self) -> dict:
        return {"per_task": self.per_task, "multi_task": self.multi_task,
                "n_eval": self.n_eval, "seed": self.seed, "epoch": self.epoch}


def evaluate(system: System, n_eval: int = 20, seed: int = 0,
             policy: str = "mean", epoch: int | None = None) -> EvalReport:
    """Success rates over n_eval rollouts per task using validation
    instructions. `policy` is "mean" (deterministic actions), "sample", or
    "random" (uniform actions in the box, the baseline floor)."""
    cfg = system.cfg.env
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    per_task = {}
    for task in system.tasks:
        instr_vec = system.instruction(task, "validation", rng, consumer="ac")
        wins = 0
        for _ in range(n_eval):
            state = mb.reset(rng, jitter=cfg.reset_jitter)
            succeeded = False
            for _t in range(cfg.episode_len):
                if policy == "random":
                    action = rng.uniform(-mb.A_MAX, mb.A_MAX, 3)
                else:
                    action = system.act_in_env(state, instr_vec, rng,
                                               "mean" if policy == "mean" else "sample")
                state = mb.step(state, action)
                if mb.success(state, task):
                    succeeded = True
                    break
            wins += int(succeeded)
        per_task[task.name] = wins / n_eval
    multi = float(np.mean(list(per_task.values())))
    return EvalReport(per_task=per_task, multi_task=multi, n_eval=n_eval, seed=seed, epoch=epoch)


@dataclass
class SwitchSchedule:
    """Instruction changes within one episode: ordered (timestep, task)."""

    switches: list  # [(t, task_name)]

    def __post_init__(self):
        prev = -1
        for t, name in self.switches:
            if t <= prev:
                raise ValueError(f"schedule timesteps must be strictly increasing, got {t} after {prev}")
            lx.task_by_name(name)
            prev = t

    @classmethod
    def from_json(cls, path) -> "SwitchSchedule":
        doc = json.loads(Path(path).read_text())
        return cls([(int(t), str(name)) for t, name in doc["switches"]])


@dataclass
class ScheduleTranscript:
    steps: list = field(default_factory=list)
    # each step: {"t", "active_task", "action", "instruction", "success": {task: bool}}

    def to_dict(self) -> dict:
        out = []
        for s in self.steps:
            out.append({
                "t": s["t"], "active_task": s["active_task"],
                "action": [float(a) for a in s["action"]],
                "instruction": [float(v) for v in s["instruction"]],
                "success": s["success"],
            })
        return {"steps": out}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def run_schedule(system: System, schedule: SwitchSchedule, seed: int = 0,
                 initial_task: str | None = None) -> ScheduleTranscript:
    """One un-reset episode; at each scheduled step the conditioning vector
    swaps to the new task's validation embedding."""
    cfg = system.cfg.env
    for t, _ in schedule.switches:
        if t >= cfg.episode_len:
            raise ValueError(f"schedule timestep {t} >= episode length {cfg.episode_len}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C4E]))
    switches = dict()
    for t, name in schedule.switches:
        switches[t] = lx.task_by_name(name)
    active = lx.task_by_name(initial_task) if initial_task else system.tasks[0]
    if 0 in switches:
        active = switches[0]
    instr_vec = system.instruction(active, "validation", rng, consumer="ac")

    state = mb.reset(rng, jitter=cfg.reset_jitter)
    transcript = ScheduleTranscript()
    for t in range(cfg.episode_len):
        if t in switches and t > 0:
            active = switches[t]
            instr_vec = system.instruction(active, "validation", rng, consumer="ac")
        action = system.act_in_env(state, instr_vec, rng, "mean")
        state = mb.step(state, action)
        transcript.steps.append({
            "t": t, "active_task": active.name, "action": action,
            "instruction": instr_vec.copy(),
            "success": {task.name: bool(mb.success(state, task)) for task in lx.TASKS},
        })
    return transcript


def decode_imagination(system: System, task: lx.TaskId, horizon: int, out_path,
                       seed: int = 0, start_state: mb.EnvState | None = None) -> np.ndarray:
    """Decode an imagined rollout to images: the reconstructed real first
    frame followed by `horizon` imagined frames, written as a lossless PNG
    strip. Returns the (horizon+1, H, W, 3) float frames."""
    cfg = system.cfg.env
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC0]))
    state = start_state if start_state is not None else mb.reset(rng, jitter=cfg.reset_jitter)
    image, proprio = mb.observe(state, cfg.image_size)
    tok = system.tokenizer.encode(image, proprio)
    instr_wm = system.instruction(task, "validation", rng, consumer="wm")[None]
    instr_ac = system.instruction(task, "validation", rng, consumer="ac")[None]
    agent = system.agent

    def feature_fn(q_x, q_th, theta):
        return agent.features(ad.concat([q_x, q_th], axis=1), instr_ac.astype(np.float32), theta)

    def policy_fn(feats, step_rng):
        action, _ = agent.act(feats, step_rng, mode="mean")
        return action, Tensor(np.zeros(1, np.float32))

    start_ids = tok.ids[None]
    rollout = imagine(system.wm, system.tokenizer, start_ids, instr_wm,
                      feature_fn, policy_fn, horizon, rng, stop_on_done=False)

    kx = system.cfg.tokenizer.image_tokens
    frames = [np.clip(system.tokenizer.decode(tok)[0], 0.0, 1.0)]
    for ids in rollout.token_ids:
        step_tok = TokenizedObs(
            ids_image=ids[0, :kx], ids_proprio=ids[0, kx:],
            q_image=system.tokenizer.codebook_image.data[ids[0, :kx]],
            q_proprio=system.tokenizer.codebook_proprio.data[ids[0, kx:]],
        )
        frames.append(np.clip(system.tokenizer.decode(step_tok)[0], 0.0, 1.0))
    strip = np.concatenate(frames, axis=1)  # side by side
    img8 = (strip * 255.0).round().astype(np.uint8)
    if out_path is not None:
        Image.fromarray(img8).save(str(out_path), format="PNG")
    return np.stack(frames)
