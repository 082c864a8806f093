"""Staged training: tokenizer pretraining, world-model training with task
relabeling, filtered-data refinement, then joint training with actor-critic
imagination, online rollouts, adaptive offline/online mixing, goal
randomization, and recency-prioritized online sampling.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import lexicon as lx
from . import minibench as mb
from .agent import actor_critic_losses
from .autodiff import Tape, Tensor, backward
from .config import Config
from .episodes import Episode, load_dataset, save_dataset
from .optim import Adam
from .system import System, build_system, collect_episode, save_checkpoint
from .worldmodel import imagine


@dataclass
class StagePlan:
    n_t: int
    n_w: int
    n_f: int
    steps_per_epoch: int
    total_epochs: int


def stage_for_epoch(epoch: int, plan: StagePlan) -> str:
    """Dataset and loss schedule as a pure function of the epoch index."""
    if epoch < plan.n_t:
        return "tokenizer"
    if epoch < plan.n_t + plan.n_w:
        return "worldmodel"
    if epoch < plan.n_t + plan.n_w + plan.n_f:
        return "worldmodel_filtered"
    return "joint"


@dataclass
class MixPolicy:
    p_max: float
    relabel_prob: float  # 1 - p
    task_weights: tuple
    n_rollout: int
    n_max: int


class BufferSet:
    """Immutable offline/filtered datasets plus the bounded online FIFO."""

    def __init__(self, offline: list[Episode], tasks: list[lx.TaskId], n_max: int):
        self.offline = offline
        self.tasks = tasks
        self.filtered = [ep for ep in offline if ep.completes_any(tasks)]
        self.online: deque[Episode] = deque(maxlen=n_max)
        self.n_max = n_max


def online_ratio(buffer: BufferSet, mix: MixPolicy) -> float:
    """Fraction of samples drawn from the online buffer: grows linearly with
    its fill level up to p_max."""
    return mix.p_max * len(buffer.online) / mix.n_max


def online_probabilities(n: int) -> np.ndarray:
    """Per-episode draw probabilities for a recency-prioritized buffer of n
    episodes in insertion order: the newest quarter gets 50%, the third
    quarter 25%, and the first half shares 25% uniformly. Remainder episodes
    go to earlier quarters; empty quarters renormalize the rest."""
    if n < 1:
        raise ValueError("empty online buffer")
    base, rem = divmod(n, 4)
    sizes = [base + (1 if i < rem else 0) for i in range(4)]
    group_mass = [0.25, 0.25, 0.5]  # first half, Q3, Q4
    group_sizes = [sizes[0] + sizes[1], sizes[2], sizes[3]]
    probs = np.zeros(n)
    start = 0
    total = sum(m for m, s in zip(group_mass, group_sizes) if s > 0)
    for mass, size in zip(group_mass, group_sizes):
        if size > 0:
            probs[start : start + size] = mass / total / size
            start += size
    return probs


def sample_online(buffer: BufferSet, rng: np.random.Generator, count: int) -> list[Episode]:
    episodes = list(buffer.online)
    probs = online_probabilities(len(episodes))
    idx = rng.choice(len(episodes), size=count, p=probs)
    return [episodes[i] for i in idx]


def relabel(episode: Episode, rng: np.random.Generator, tasks: list[lx.TaskId],
            embeddings: lx.EmbeddingSet, f_s=(1.0, 1.0, 0.0),
            beta_b: float = 10.0, beta_c: float = 50.0,
            task: lx.TaskId | None = None) -> Episode:
    """Reassign an episode to a task drawn uniformly from `tasks` (or the
    given one), resample its instruction, and recompute rewards and
    termination flags from the stored raw states."""
    if episode.states is None or len(episode.states) == 0:
        raise ValueError("episode has no raw states; cannot relabel")
    new_task = task if task is not None else tasks[int(rng.integers(len(tasks)))]
    entry = lx.pick_instruction(embeddings, new_task, "train", rng)
    rewards, dones = mb.episode_rewards(episode.states, new_task, f_s, beta_b, beta_c)
    return Episode(
        seed=episode.seed, task=new_task, states=episode.states,
        images=episode.images, proprios=episode.proprios, actions=episode.actions,
        rewards=rewards.astype(np.float32), dones=dones, completed=episode.completed,
        instruction_text=entry.text,
    )


def sample_goal(episode_task: lx.TaskId, rng: np.random.Generator,
                tasks: list[lx.TaskId], mix: MixPolicy) -> lx.TaskId:
    """Goal randomization: keep the episode's task with probability p, else
    draw another goal from the task set using the configured weights."""
    if rng.random() >= mix.relabel_prob:
        return episode_task
    w = np.array([mix.task_weights[t.index] for t in tasks], dtype=np.float64)
    w /= w.sum()
    return tasks[int(rng.choice(len(tasks), p=w))]


class MetricsWriter:
    """Append-only JSON-lines stream with a mirrored CSV of epoch records."""

    def __init__(self, out_dir: Path, csv_fields: list[str]):
        self.jsonl_path = out_dir / "metrics.jsonl"
        self.csv_path = out_dir / "metrics.csv"
        self.csv_fields = csv_fields
        self.jsonl_path.write_text("")
        with open(self.csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(csv_fields)

    def write_record(self, record: dict):
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if record.get("event") == "epoch":
            row = ["" if record.get(k) is None else record.get(k) for k in self.csv_fields]
            with open(self.csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


class Trainer:
    def __init__(self, cfg: Config, seed: int, out_dir, variant: str | None = None):
        if variant is not None:
            cfg.variant = variant
        cfg.__post_init__()
        self.cfg = cfg.resolve()
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        ss = np.random.SeedSequence([seed, 0x7A1E])
        (self.data_rng, self.train_rng, self.rollout_rng,
         self.sample_rng, self.dropout_rng) = (np.random.default_rng(s) for s in ss.spawn(5))

        self.system = build_system(self.cfg, seed)
        self.plan = StagePlan(cfg.train.n_t, cfg.train.n_w, cfg.train.n_f,
                              cfg.train.steps_per_epoch, cfg.train.total_epochs)
        self.mix = MixPolicy(cfg.train.p_max, cfg.train.relabel_prob,
                             cfg.train.task_weights, cfg.train.n_rollout, cfg.train.n_max)

        betas = (cfg.train.adam_beta1, cfg.train.adam_beta2)
        clip = cfg.train.max_grad_norm
        tok_params = self.system.tokenizer.trainable_parameters()
        book_params = {k: v for k, v in tok_params.items() if k.startswith("codebook_")}
        net_params = {k: v for k, v in tok_params.items() if not k.startswith("codebook_")}
        self.tok_opt = Adam(net_params, cfg.tokenizer.learning_rate, betas, max_grad_norm=clip)
        self.book_opt = Adam(book_params, cfg.tokenizer.codebook_learning_rate, betas,
                             max_grad_norm=clip)
        self.wm_opt = Adam(self.system.wm.trainable_parameters(), cfg.wm.learning_rate,
                           betas, weight_decay=cfg.wm.weight_decay, max_grad_norm=clip)
        self.actor_opt = Adam(self.system.agent.actor.trainable_parameters(),
                              cfg.agent.learning_rate, betas, max_grad_norm=clip)
        self.critic_opt = Adam(self.system.agent.critic.trainable_parameters(),
                               cfg.agent.critic_learning_rate, betas, max_grad_norm=clip)
        self.ac_steps = 0
        self.buffers: BufferSet | None = None

    # -- data -----------------------------------------------------------------

    def prepare_data(self):
        cfg = self.cfg
        if cfg.data.dir:
            episodes = load_dataset(cfg.data.dir)
        else:
            episodes, _ = mb.generate_play_data(
                cfg.data.seed, cfg.data.n_episodes, cfg.env.episode_len, cfg.env.image_size)
        self.buffers = BufferSet(episodes, self.system.tasks, cfg.train.n_max)
        if not self.buffers.filtered:
            raise RuntimeError(
                "no offline episode completes any task of interest; "
                "generate more play data or widen the task set")
        # pin every filtered episode to the task of interest it completed
        # first, recomputing rewards when that differs from the stored task
        fixed = []
        for ep in self.buffers.filtered:
            done_in_set = [t for t in self.system.tasks if t.name in ep.completed]
            target = min(done_in_set, key=lambda t: (ep.completed[t.name], t.index))
            if target == ep.task:
                fixed.append(ep)
            else:
                fixed.append(relabel(ep, self.data_rng, self.system.tasks,
                                     self.system.embeddings, cfg.env.reward_f_s,
                                     cfg.env.reward_beta_b, cfg.env.reward_beta_c,
                                     task=target))
        self.buffers.filtered = fixed

    # -- batch assembly ---------------------------------------------------------

    def _stage_episodes(self, stage: str) -> list[Episode]:
        if stage in ("tokenizer", "worldmodel"):
            return self.buffers.offline
        return self.buffers.filtered

    def _pick_mixed_episode(self, rng) -> Episode:
        p_on = online_ratio(self.buffers, self.mix)
        if self.buffers.online and rng.random() < p_on:
            return sample_online(self.buffers, rng, 1)[0]
        return self.buffers.filtered[int(rng.integers(len(self.buffers.filtered)))]

    def _pick_frame_episode(self, stage: str, rng) -> Episode:
        if stage == "joint":
            return self._pick_mixed_episode(rng)
        eps = self._stage_episodes(stage)
        return eps[int(rng.integers(len(eps)))]

    def _frame_batch(self, stage: str, rng, count: int):
        images = np.empty((count, self.cfg.env.image_size, self.cfg.env.image_size, 3), np.float32)
        proprios = np.empty((count, 3), np.float32)
        for i in range(count):
            ep = self._pick_frame_episode(stage, rng)
            t = int(rng.integers(len(ep.images)))
            images[i] = ep.images[t].astype(np.float32) / 255.0
            proprios[i] = ep.proprios[t]
        return images, proprios

    def _episode_for_wm(self, stage: str, rng) -> Episode:
        tasks = self.system.tasks
        if stage == "joint":
            return self._pick_mixed_episode(rng)
        eps = self._stage_episodes(stage)
        ep = eps[int(rng.integers(len(eps)))]
        if stage == "worldmodel" and not ep.completes_any(tasks):
            # play episodes outside the task set are relabeled uniformly
            return relabel(ep, rng, tasks, self.system.embeddings,
                           self.cfg.env.reward_f_s, self.cfg.env.reward_beta_b,
                           self.cfg.env.reward_beta_c)
        return ep

    def _window_batch(self, stage: str, rng, count: int):
        cfg = self.cfg
        h = cfg.wm.horizon
        k = cfg.tokenizer.tokens_per_obs
        size = cfg.env.image_size
        images = np.zeros((count, h, size, size, 3), np.float32)
        proprios = np.zeros((count, h, 3), np.float32)
        actions = np.zeros((count, h, 3), np.float32)
        rewards = np.zeros((count, h), np.float32)
        dones = np.zeros((count, h), np.float32)
        mask = np.zeros((count, h), np.float32)
        instr = np.empty((count, cfg.embeddings.dim), np.float32)
        for i in range(count):
            ep = self._episode_for_wm(stage, rng)
            # episodes terminated at success can be shorter than the window
            span = min(h, ep.length)
            start = int(rng.integers(0, ep.length - span + 1))
            images[i, :span] = ep.images[start : start + span].astype(np.float32) / 255.0
            proprios[i, :span] = ep.proprios[start : start + span]
            actions[i, :span] = ep.actions[start : start + span]
            rewards[i, :span] = ep.rewards[start : start + span]
            dones[i, :span] = ep.dones[start : start + span]
            mask[i, :span] = 1.0
            instr[i] = self.system.instruction(ep.task, "train", rng, consumer="wm")
        flat_imgs = images.reshape(count * h, size, size, 3)
        flat_props = proprios.reshape(count * h, 3)
        tokens = self.system.tokenizer.encode_batch(flat_imgs, flat_props).reshape(count, h, k)
        return tokens, actions, instr, rewards, dones, mask

    def _ac_batch(self, rng, count: int):
        cfg = self.cfg
        k = cfg.tokenizer.tokens_per_obs
        start_ids = np.empty((count, k), np.int64)
        instr_wm = np.empty((count, cfg.embeddings.dim), np.float32)
        instr_ac = np.empty((count, cfg.embeddings.dim), np.float32)
        images = np.empty((count, cfg.env.image_size, cfg.env.image_size, 3), np.float32)
        proprios = np.empty((count, 3), np.float32)
        for i in range(count):
            ep = self._pick_mixed_episode(rng)
            goal = sample_goal(
                ep.task if ep.task in self.system.tasks else self.system.tasks[0],
                rng, self.system.tasks, self.mix)
            t0 = int(rng.integers(len(ep.images)))
            images[i] = ep.images[t0].astype(np.float32) / 255.0
            proprios[i] = ep.proprios[t0]
            instr_wm[i] = self.system.instruction(goal, "train", rng, consumer="wm")
            instr_ac[i] = self.system.instruction(goal, "train", rng, consumer="ac")
        start_ids[:] = self.system.tokenizer.encode_batch(images, proprios)
        return start_ids, instr_wm, instr_ac

    # -- update steps -----------------------------------------------------------

    def tokenizer_step(self, stage: str) -> dict:
        images, proprios = self._frame_batch(stage, self.train_rng,
                                             self.cfg.train.batch_tokenizer)
        with Tape() as tape:
            loss, breakdown = self.system.tokenizer.loss(images, proprios)
            grads = backward(loss, tape)
        self.tok_opt.step(grads)
        self.book_opt.step(grads)
        self.system.tokenizer.perceptual.project_nonnegative()
        return breakdown

    def wm_step(self, stage: str) -> dict:
        tokens, actions, instr, rewards, dones, mask = self._window_batch(
            stage, self.train_rng, self.cfg.train.batch_wm)
        with Tape() as tape:
            loss, breakdown = self.system.wm.loss(
                tokens, actions, instr, rewards, dones, step_mask=mask,
                dropout_rng=self.dropout_rng)
            grads = backward(loss, tape)
        self.wm_opt.step(grads)
        return breakdown

    def ac_step(self) -> dict:
        cfg = self.cfg
        agent = self.system.agent
        start_ids, instr_wm, instr_ac = self._ac_batch(self.train_rng, cfg.train.batch_ac)
        instr_ac_t = Tensor(instr_ac)

        def feature_fn(q_x, q_th, theta):
            q = ad.concat([q_x, q_th], axis=1)
            return agent.features(q, instr_ac_t, theta)

        def policy_fn(feats, rng):
            return agent.act(feats, rng)

        with Tape() as tape:
            rollout = imagine(
                self.system.wm, self.system.tokenizer, start_ids, instr_wm,
                feature_fn, policy_fn, cfg.train.imagination_horizon,
                self.sample_rng, stop_on_done=False)
            actor_loss, critic_loss, stats = actor_critic_losses(agent, rollout)
            grads = backward(ad.add(actor_loss, critic_loss), tape)
        self.actor_opt.step(grads)
        self.critic_opt.step(grads)
        self.ac_steps += 1
        if self.ac_steps % cfg.agent.critic_sync_interval == 0:
            agent.sync_target()
        stats = dict(stats)
        stats["actor_loss"] = float(actor_loss.data)
        stats["critic_loss"] = float(critic_loss.data)
        return stats

    def collect_rollouts(self) -> dict:
        """n_rollout policy episodes split equally across tasks, appended to
        the online buffer; returns per-task success rates."""
        tasks = self.system.tasks
        per_task = self.mix.n_rollout // len(tasks)
        success = {}
        for task in tasks:
            wins = 0
            for _ in range(per_task):
                ep = collect_episode(self.system, task, self.rollout_rng, mode="sample")
                self.buffers.online.append(ep)
                wins += int(task.name in ep.completed)
            success[task.name] = wins / per_task if per_task else float("nan")
        return success

    # -- main loop ---------------------------------------------------------------

    def run(self) -> Path:
        cfg = self.cfg
        if self.buffers is None:
            self.prepare_data()
        task_names = [t.name for t in self.system.tasks]
        csv_fields = (
            ["epoch", "stage", "tokenizer_loss", "recon_image_l1", "token_ce", "reward_mse",
             "done_ce", "actor_loss", "critic_loss", "p_online", "buffer_size"]
            + [f"success_{n}" for n in task_names]
        )
        metrics = MetricsWriter(self.out_dir, csv_fields)
        metrics.write_record({"event": "config", "profile": cfg.profile,
                              "variant": cfg.variant, "seed": self.seed,
                              "tasks": task_names})
        prev_stage = None
        for epoch in range(self.plan.total_epochs):
            stage = stage_for_epoch(epoch, self.plan)
            if stage != prev_stage:
                metrics.write_record({"event": "stage_transition", "epoch": epoch, "stage": stage})
                prev_stage = stage
            accum: dict[str, list] = {}

            for _ in range(self.plan.steps_per_epoch):
                tok_bd = self.tokenizer_step(stage)
                for k, v in tok_bd.items():
                    accum.setdefault(k, []).append(v)
                if stage in ("worldmodel", "worldmodel_filtered", "joint"):
                    wm_bd = self.wm_step(stage)
                    for k, v in wm_bd.items():
                        accum.setdefault(k, []).append(v)
                if stage == "joint":
                    ac_bd = self.ac_step()
                    for k, v in ac_bd.items():
                        accum.setdefault(k, []).append(v)

            success = {}
            if stage == "joint" and self.mix.n_rollout > 0:
                success = self.collect_rollouts()

            record = {"event": "epoch", "epoch": epoch, "stage": stage,
                      "p_online": online_ratio(self.buffers, self.mix),
                      "buffer_size": len(self.buffers.online)}
            for k, vals in accum.items():
                record[k] = float(np.mean(vals))
            record["tokenizer_loss"] = float(sum(
                record.get(k, 0.0) for k in
                ("recon_image_l1", "recon_proprio_l2", "commit_encoder",
                 "commit_codebook", "perceptual")))
            for name in task_names:
                record[f"success_{name}"] = success.get(name)
            metrics.write_record(record)

        save_checkpoint(self.system, self.out_dir / "checkpoint",
                        meta={"seed": self.seed, "variant": cfg.variant,
                              "epochs": self.plan.total_epochs})
        return self.out_dir


def run_training(cfg: Config, seed: int, out_dir, variant: str | None = None) -> Path:
    trainer = Trainer(cfg, seed, out_dir, variant)
    trainer.prepare_data()
    return trainer.run()
