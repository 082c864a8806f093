"""Assembled tokenizer + world model + actor-critic with variant wiring,
checkpoint IO, and real-environment rollout collection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import lexicon as lx
from . import minibench as mb
from .agent import ActorCritic
from .autodiff import Tensor
from .checkpoint import load_params, save_params
from .config import Config, config_from_dict, config_to_dict
from .episodes import Episode
from .tokenizer import Tokenizer
from .worldmodel import WorldModel


@dataclass
class System:
    cfg: Config
    tokenizer: Tokenizer
    wm: WorldModel
    agent: ActorCritic
    embeddings: lx.EmbeddingSet

    @property
    def tasks(self) -> list[lx.TaskId]:
        return [lx.task_by_name(n) for n in self.cfg.env.tasks]

    # -- instruction wiring per variant --------------------------------------

    def instruction_with_text(self, task: lx.TaskId, split: str, rng,
                              consumer: str) -> tuple[np.ndarray, str | None]:
        """Conditioning vector for `consumer` in {"wm", "ac"}. The integer-id
        baselines replace language embeddings in the world model and/or the
        policy networks."""
        variant = self.cfg.variant
        if variant == "limt_nl" or (variant == "limt_nlac" and consumer == "ac"):
            return lx.integer_id_embedding(task, self.cfg.embeddings.dim), None
        entry = lx.pick_instruction(self.embeddings, task, split, rng)
        return entry.vec, entry.text

    def instruction(self, task: lx.TaskId, split: str, rng, consumer: str) -> np.ndarray:
        return self.instruction_with_text(task, split, rng, consumer)[0]

    # -- features / acting ----------------------------------------------------

    def obs_features(self, image: np.ndarray, proprio: np.ndarray, instr_vec: np.ndarray) -> Tensor:
        tok = self.tokenizer.encode(image, proprio)
        q = np.concatenate([tok.q_image, tok.q_proprio], axis=0)[None]
        theta = Tensor(proprio[None].astype(self.agent.dtype))
        return self.agent.features(Tensor(q.astype(self.agent.dtype)), instr_vec[None], theta)

    def act_in_env(self, state: mb.EnvState, instr_vec: np.ndarray, rng, mode: str) -> np.ndarray:
        image, proprio = mb.observe(state, self.cfg.env.image_size)
        feats = self.obs_features(image, proprio, instr_vec)
        action, _ = self.agent.act(feats, rng, mode=mode)
        return action.data[0]

    def parameters(self):
        params = {}
        for prefix, module in (
            ("tokenizer", self.tokenizer), ("wm", self.wm),
            ("actor", self.agent.actor), ("critic", self.agent.critic),
            ("critic_target", self.agent.critic_target),
        ):
            for k, v in module.parameters().items():
                params[f"{prefix}.{k}"] = v
        # spec'd codebook names live at the top level
        params["codebook.image"] = self.tokenizer.codebook_image
        params["codebook.proprio"] = self.tokenizer.codebook_proprio
        del params["tokenizer.codebook_image"]
        del params["tokenizer.codebook_proprio"]
        return params


def build_system(cfg: Config, seed: int) -> System:
    cfg = cfg.resolve()
    root = np.random.SeedSequence([seed, 0x5EED])
    tok_rng, wm_rng, ac_rng = (np.random.default_rng(s) for s in root.spawn(3))
    tokenizer = Tokenizer(cfg.tokenizer, tok_rng)
    wm = WorldModel(cfg.wm, wm_rng)
    agent = ActorCritic(cfg.agent, ac_rng)
    if cfg.embeddings.path:
        embeddings = lx.load_fixture(cfg.embeddings.path)
        if embeddings.dim != cfg.embeddings.dim:
            raise ValueError(
                f"fixture dim {embeddings.dim} != configured instruction dim "
                f"{cfg.embeddings.dim}; set embeddings.dim to match")
    else:
        embeddings = lx.generate_synthetic(
            cfg.embeddings.seed, cfg.embeddings.dim, cfg.embeddings.per_task, cfg.embeddings.noise)
    return System(cfg=cfg, tokenizer=tokenizer, wm=wm, agent=agent, embeddings=embeddings)


def save_checkpoint(system: System, out_dir, meta: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "params.lw", system.parameters())
    (out / "config.json").write_text(json.dumps(config_to_dict(system.cfg), indent=1, sort_keys=True))
    lx.save_fixture(system.embeddings, out / "embeddings.json")
    (out / "meta.json").write_text(json.dumps(meta or {}, indent=1, sort_keys=True))
    return out


def load_checkpoint(ckpt_dir, seed: int = 0) -> System:
    root = Path(ckpt_dir)
    if not root.exists():
        raise FileNotFoundError(f"checkpoint {root} does not exist")
    cfg = config_from_dict(json.loads((root / "config.json").read_text()))
    system = build_system(cfg, seed)
    system.embeddings = lx.load_fixture(root / "embeddings.json")
    state = load_params(root / "params.lw")
    for name, tens in system.parameters().items():
        if name not in state:
            raise KeyError(f"checkpoint missing parameter {name}")
        arr = state[name]
        if tuple(arr.shape) != tuple(tens.data.shape):
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tens.data.shape}")
        tens.data = arr.astype(tens.data.dtype)
    return system


# ---------------------------------------------------------------------------
# real-environment rollouts


def collect_episode(system: System, task: lx.TaskId, rng: np.random.Generator,
                    mode: str = "sample", split: str = "train",
                    instr_override: np.ndarray | None = None,
                    terminate_on_success: bool = True) -> Episode:
    """Run the policy in the bench for one episode under `task`'s
    instruction; rewards and terminations are stored under that task. By
    default the episode ends when the task completes (the termination the
    world model is trained to predict)."""
    cfg = system.cfg.env
    if instr_override is not None:
        instr_vec, text = instr_override, None
    else:
        instr_vec, text = system.instruction_with_text(task, split, rng, consumer="ac")
    state = mb.reset(rng, jitter=cfg.reset_jitter)
    states = [state]
    actions = []
    completed: dict[str, int] = {}
    for t in range(cfg.episode_len):
        action = system.act_in_env(state, instr_vec, rng, mode)
        state = mb.step(state, action)
        actions.append(action)
        states.append(state)
        for tk in lx.TASKS:
            if tk.name not in completed and mb.success(state, tk):
                completed[tk.name] = t
        if terminate_on_success and mb.success(state, task):
            break
    state_vectors = np.stack([s.as_vector() for s in states])
    rewards, dones = mb.episode_rewards(state_vectors, task, f_s=cfg.reward_f_s)
    images = np.stack([(mb.render(s, cfg.image_size) * 255.0).round().astype(np.uint8) for s in states])
    return Episode(
        seed=int(rng.integers(2**63)),
        task=task,
        states=state_vectors,
        images=images,
        proprios=np.stack([s.proprio() for s in states]),
        actions=np.asarray(actions, dtype=np.float32),
        rewards=rewards.astype(np.float32),
        dones=dones,
        completed=completed,
        instruction_text=text,
    )
