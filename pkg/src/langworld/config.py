"""Configuration profiles and JSON config loading.

Two named profiles: "desk" (small nets, exercised by the test suite) and
"paper" (the published hyperparameters, representable but not exercised).
A config file is a JSON document selecting a profile plus per-section
overrides, e.g. {"profile": "desk", "wm": {"n_layers": 3}}.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .agent import AgentConfig
from .lexicon import TASK_NAMES
from .tokenizer import TokenizerConfig
from .worldmodel import WorldModelConfig

VARIANTS = ("limt", "limt_nl", "limt_nlac", "mbrl_st")


@dataclass
class EnvConfig:
    image_size: int = 32
    episode_len: int = 30  # T
    tasks: tuple = TASK_NAMES
    reward_beta_b: float = 10.0
    reward_beta_c: float = 50.0
    reward_f_s: tuple = (1.0, 1.0, 0.0)
    reset_jitter: float = 0.1


@dataclass
class DataConfig:
    dir: str | None = None  # load a generated dataset from here
    n_episodes: int = 160  # generated on the fly when dir is None
    seed: int = 1


@dataclass
class EmbeddingConfig:
    path: str | None = None  # fixture file; None -> synthetic clusters
    dim: int = 16
    per_task: int = 8
    noise: float = 0.1
    seed: int = 7


@dataclass
class TrainConfig:
    n_t: int = 3  # tokenizer-only epochs
    n_w: int = 3  # + world model epochs (relabeled offline data)
    n_f: int = 2  # filtered-dataset refinement epochs
    total_epochs: int = 28
    steps_per_epoch: int = 50
    batch_tokenizer: int = 16
    batch_wm: int = 16
    batch_ac: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    max_grad_norm: float = 10.0
    p_max: float = 0.5
    relabel_prob: float = 0.15  # 1 - p: goal randomization probability
    task_weights: tuple = (1.0, 1.0, 1.0, 1.0, 2 / 3, 2 / 3)
    n_rollout: int = 12
    n_max: int = 200
    imagination_horizon: int = 6


@dataclass
class Config:
    profile: str = "desk"
    variant: str = "limt"
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    embeddings: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    wm: WorldModelConfig = field(default_factory=WorldModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in self.env.tasks:
            if name not in TASK_NAMES:
                raise ValueError(f"unknown task {name!r} in env.tasks")

    def resolve(self) -> "Config":
        """Propagate cross-section derived fields."""
        self.wm.vocab_size = self.tokenizer.vocab_size
        self.wm.tokens_per_step = self.tokenizer.tokens_per_obs
        self.wm.instr_dim = self.embeddings.dim
        self.agent.token_count = self.tokenizer.tokens_per_obs
        self.agent.token_dim = self.tokenizer.embed_dim
        self.agent.instr_dim = self.embeddings.dim
        self.agent.proprio_dim = self.tokenizer.proprio_dim
        self.tokenizer.image_size = self.env.image_size
        return self


def desk_config() -> Config:
    return Config().resolve()


def paper_config() -> Config:
    """Published hyperparameters (Tables 1-5 of the source method). The env
    stays the 2-D desk bench, so proprio-dependent shapes keep d=3."""
    cfg = Config(
        profile="paper",
        env=EnvConfig(image_size=64, episode_len=50),
        data=DataConfig(n_episodes=1000),
        embeddings=EmbeddingConfig(dim=384, per_task=8, noise=0.1),
        tokenizer=TokenizerConfig(
            image_size=64, vocab_size=512, embed_dim=512, image_tokens=16,
            conv_channels=(64, 64, 64, 64), residual_blocks=2,
            attention_resolutions=(8, 16), learning_rate=1e-4,
        ),
        wm=WorldModelConfig(
            horizon=8, d_model=512, n_layers=10, n_heads=4,
            dropout_embed=0.1, dropout_resid=0.1, dropout_attn=0.1,
            weight_decay=1e-4, learning_rate=2e-5, head_layers=3,
            reward_loss_factor=10.0,
        ),
        agent=AgentConfig(
            hidden_layers=9, hidden_units=2048, lam=0.9, gamma=0.65,
            learning_rate=4e-5, critic_learning_rate=4e-5, critic_sync_interval=200,
            proprio_repeat=10, entropy_weight=1e-4,  # Table 3 values
        ),
        train=TrainConfig(
            n_t=200, n_w=100, n_f=50, total_epochs=500, steps_per_epoch=200,
            batch_tokenizer=64, batch_wm=128, batch_ac=120,
            p_max=0.5, relabel_prob=0.15, n_rollout=120, n_max=5000,
            imagination_horizon=7,
        ),
    )
    return cfg.resolve()


PROFILES = {"desk": desk_config, "paper": paper_config}


def _apply_overrides(obj, overrides: dict, path: str):
    valid = {f.name: f for f in fields(obj)}
    for key, value in overrides.items():
        if key not in valid:
            raise KeyError(f"unknown config key {path}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _apply_overrides(current, value, f"{path}{key}.")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(obj, key, value)


def config_from_dict(doc: dict) -> Config:
    doc = dict(doc)
    profile = doc.pop("profile", "desk")
    if profile not in PROFILES:
        raise KeyError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    cfg = PROFILES[profile]()
    _apply_overrides(cfg, doc, "")
    cfg.__post_init__()
    return cfg.resolve()


def load_config(path) -> Config:
    return config_from_dict(json.loads(Path(path).read_text()))


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def save_config(cfg: Config, path):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
