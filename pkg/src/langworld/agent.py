"""Actor-critic heads trained in latent imagination.

Both networks are skip-connected MLPs over the concatenation of flattened
token embeddings, the instruction embedding, and the decoded proprioception
repeated b times. The actor parameterizes a tanh-squashed diagonal Gaussian
scaled to the action box; the critic regresses lambda-returns computed from
a periodically synced target critic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

LOG2 = float(np.log(2.0))
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class AgentConfig:
    token_count: int = 17  # K
    token_dim: int = 32  # d_enc
    instr_dim: int = 16
    proprio_dim: int = 3
    proprio_repeat: int = 10  # b
    hidden_layers: int = 3  # n
    hidden_units: int = 128
    action_dim: int = 3
    action_max: float = 0.05
    lam: float = 0.9
    gamma: float = 0.65
    # desk default; the paper profile uses 1e-4, too weak to keep the desk
    # actor from saturating the squash early in life
    entropy_weight: float = 1e-2
    learning_rate: float = 1e-3  # actor
    critic_learning_rate: float = 1e-3
    critic_sync_interval: int = 50  # training steps between target syncs
    log_std_bounds: tuple = (-5.0, 2.0)

    @property
    def feature_dim(self) -> int:
        return self.token_count * self.token_dim + self.instr_dim + self.proprio_repeat * self.proprio_dim


class ActorCritic(nn.Module):
    def __init__(self, cfg: AgentConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        f = cfg.feature_dim
        self.actor = nn.SkipMLP(rng, f, cfg.hidden_units, cfg.hidden_layers, 2 * cfg.action_dim, dtype)
        # start near the distribution center: a confidently wrong initial
        # policy saturates the squash and cannot recover
        self.actor.out.w.data *= np.asarray(0.01, dtype=dtype)
        self.critic = nn.SkipMLP(rng, f, cfg.hidden_units, cfg.hidden_layers, 1, dtype)
        self.critic_target = nn.SkipMLP(rng, f, cfg.hidden_units, cfg.hidden_layers, 1, dtype)
        for p in self.critic_target.parameters().values():
            p.requires_grad = False
        self.sync_target()
        self.dtype = dtype

    # -- features -----------------------------------------------------------

    def features(self, q_tokens: Tensor, instr: Tensor | np.ndarray, theta: Tensor) -> Tensor:
        """q_tokens (B, K, d_enc), instr (B, d_l), theta (B, d) ->
        (B, feature_dim) with theta repeated b times."""
        cfg = self.cfg
        b = q_tokens.shape[0]
        flat = ad.reshape(q_tokens, (b, cfg.token_count * cfg.token_dim))
        if not isinstance(instr, Tensor):
            instr = Tensor(np.asarray(instr, dtype=self.dtype))
        reps = ad.concat([theta] * cfg.proprio_repeat, axis=1)
        return ad.concat([flat, instr, reps], axis=1)

    # -- policy -------------------------------------------------------------

    def _dist_params(self, feats: Tensor):
        out = self.actor(feats)
        a = self.cfg.action_dim
        raw_mu = ad.take(out, np.arange(a), axis=1)
        # soft-bound the pre-squash mean: keeps tanh out of the flat tails
        # so the policy can always turn around
        mu = ad.mul(ad.tanh(ad.mul(raw_mu, 1.0 / 3.0)), 3.0)
        raw = ad.take(out, np.arange(a, 2 * a), axis=1)
        lo, hi = self.cfg.log_std_bounds
        log_std = ad.add(ad.mul(ad.add(ad.tanh(raw), 1.0), 0.5 * (hi - lo)), lo)
        return mu, log_std

    def act(self, feats: Tensor, rng: np.random.Generator | None = None, mode: str = "sample"):
        """Returns (action, log_prob): a tanh-squashed Gaussian sample scaled
        to the action box, with the squash-corrected log-density. `mean`
        mode returns the squashed mean deterministically (log_prob None)."""
        mu, log_std = self._dist_params(feats)
        a_max = self.cfg.action_max
        if mode == "mean":
            return ad.mul(ad.tanh(mu), a_max), None
        if rng is None:
            raise ValueError("sample mode requires an rng")
        eps = Tensor(rng.standard_normal(mu.shape).astype(self.dtype))
        std = ad.exp(log_std)
        u = ad.add(mu, ad.mul(std, eps))
        action = ad.mul(ad.tanh(u), a_max)
        # log N(u; mu, std) with reparameterized u
        gauss = ad.mul(ad.add(ad.add(ad.square(eps), ad.mul(log_std, 2.0)), LOG_2PI), -0.5)
        # log|da/du| = log a_max + log(1 - tanh(u)^2)
        #            = log a_max + 2*(log 2 - u - softplus(-2u)), subtracted
        log_jac = ad.mul(ad.sub(ad.sub(LOG2, u), ad.softplus(ad.mul(u, -2.0))), 2.0)
        correction = ad.add(ad.mul(log_jac, -1.0), -float(np.log(a_max)))
        log_prob = ad.reduce_sum(ad.add(gauss, correction), axis=1)
        return action, log_prob

    def log_prob(self, feats: Tensor, action: np.ndarray) -> np.ndarray:
        """Density of a given boxed action under the current policy."""
        mu, log_std = self._dist_params(feats)
        a_max = self.cfg.action_max
        a = np.clip(np.asarray(action, dtype=np.float64) / a_max, -1 + 1e-9, 1 - 1e-9)
        u = np.arctanh(a)
        std = np.exp(log_std.data.astype(np.float64))
        gauss = -0.5 * (((u - mu.data) / std) ** 2 + 2 * np.log(std) + LOG_2PI)
        squash = np.log(a_max * (1.0 - np.tanh(u) ** 2))
        return (gauss - squash).sum(axis=-1)

    def value(self, feats: Tensor, target: bool = False) -> Tensor:
        net = self.critic_target if target else self.critic
        return ad.reshape(net(feats), (feats.shape[0],))

    def sync_target(self):
        """Copy critic weights into the target critic."""
        src = self.critic.parameters()
        dst = self.critic_target.parameters()
        for k in src:
            dst[k].data = src[k].data.copy()


# ---------------------------------------------------------------------------
# lambda returns


def lambda_returns(rewards, values, discounts, lam: float):
    """Backward recursion over a rollout of length S:

        V[S]   = values[S-1]
        V[t]   = rewards[t] + discounts[t] * ((1-lam) * values[t] + lam * V[t+1])

    rewards/discounts are r_t and gamma_t for t = 0..S-1; values[t] is the
    (target-critic) value of the state reached at t+1. Accepts (S,) or (B, S)
    arrays; returns S+1 entries along the last axis.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    discounts = np.asarray(discounts, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != discounts.shape:
        raise ValueError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape}, "
            f"discounts {discounts.shape}"
        )
    s = rewards.shape[-1]
    out = np.zeros(rewards.shape[:-1] + (s + 1,), dtype=np.float64)
    out[..., s] = values[..., s - 1]
    for t in range(s - 1, -1, -1):
        blend = (1.0 - lam) * values[..., t] + lam * out[..., t + 1]
        out[..., t] = rewards[..., t] + discounts[..., t] * blend
    return out


def lambda_returns_t(rewards: list[Tensor], values: list[Tensor], discounts: list[Tensor],
                     lam: float) -> list[Tensor]:
    """Same recursion on tape tensors (per-step (B,) entries)."""
    if not (len(rewards) == len(values) == len(discounts)):
        raise ValueError("length mismatch between rewards, values, discounts")
    s = len(rewards)
    out: list[Tensor | None] = [None] * (s + 1)
    out[s] = values[s - 1]
    for t in range(s - 1, -1, -1):
        blend = ad.add(ad.mul(values[t], 1.0 - lam), ad.mul(out[t + 1], lam))
        out[t] = ad.add(rewards[t], ad.mul(discounts[t], blend))
    return out


# ---------------------------------------------------------------------------
# objectives


def actor_critic_losses(agent: ActorCritic, rollout) -> tuple[Tensor, Tensor, dict]:
    """Actor loss -sum_t V^lambda_t - eta * entropy, and the critic MSE toward
    stop-gradient lambda-returns. V^lambda uses the target critic; the critic
    regression sees detached features so only the critic itself is trained
    by it."""
    cfg = agent.cfg
    s = rollout.length
    if s < 1:
        raise ValueError("rollout has no transitions")
    values = [agent.value(rollout.features[t + 1], target=True) for t in range(s)]
    discounts = [ad.mul(ad.sub(1.0, rollout.done_probs[t]), cfg.gamma) for t in range(s)]
    v_lam = lambda_returns_t(rollout.rewards, values, discounts, cfg.lam)

    total_v = v_lam[0]
    for t in range(1, s):
        total_v = ad.add(total_v, v_lam[t])
    entropy_est = ad.mul(rollout.log_probs[0], -1.0)
    for t in range(1, s):
        entropy_est = ad.add(entropy_est, ad.mul(rollout.log_probs[t], -1.0))
    actor_loss = ad.reduce_mean(
        ad.add(ad.mul(total_v, -1.0), ad.mul(entropy_est, -cfg.entropy_weight)))

    critic_terms = None
    for t in range(s):
        v_pred = agent.value(ad.stop_gradient(rollout.features[t]))
        err = ad.square(ad.sub(v_pred, ad.stop_gradient(v_lam[t])))
        critic_terms = err if critic_terms is None else ad.add(critic_terms, err)
    critic_loss = ad.reduce_mean(critic_terms)

    stats = {
        "v_lambda_mean": float(np.mean([v.data.mean() for v in v_lam[:s]])),
        "entropy_mean": float(entropy_est.data.mean() / s),
        "imagined_reward_mean": float(np.mean([r.data.mean() for r in rollout.rewards])),
    }
    return actor_loss, critic_loss, stats
