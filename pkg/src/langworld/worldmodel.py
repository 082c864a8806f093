"""Instruction-conditioned autoregressive transformer over observation tokens.

Sequence layout per timestep: K observation tokens, one action slot, one
instruction slot. The flattened stream of H timesteps is H*(K+2) positions
long. Causal attention; each observation token is predicted from its strict
prefix, and reward/termination are read at the instruction slot of their
timestep.

The incremental path caches per-layer keys/values so a growing rollout
computes each position exactly once; with causal attention this matches the
full forward bit-for-bit on the shared prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class WorldModelConfig:
    horizon: int = 8  # context window in timesteps
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 64
    tokens_per_step: int = 17  # K
    action_dim: int = 3
    instr_dim: int = 16
    reward_loss_factor: float = 10.0  # weight of the reward term in the loss
    head_layers: int = 3
    dropout_embed: float = 0.0
    dropout_resid: float = 0.0
    dropout_attn: float = 0.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4

    @property
    def slots_per_step(self) -> int:
        return self.tokens_per_step + 2

    @property
    def flat_len(self) -> int:
        return self.horizon * self.slots_per_step


class HeadMLP(nn.Module):
    def __init__(self, rng, d_in: int, d_out: int, layers: int, dtype=np.float32):
        dims = [d_in] * layers + [d_out]
        self.layers = [nn.Linear(rng, dims[i], dims[i + 1], dtype) for i in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = ad.gelu(layer(h))
        return self.layers[-1](h)


class Block(nn.Module):
    """Pre-norm residual transformer block."""

    def __init__(self, rng, d_model: int, n_heads: int, dtype=np.float32):
        self.ln1 = nn.LayerNorm(d_model, dtype)
        self.wq = nn.Linear(rng, d_model, d_model, dtype)
        self.wk = nn.Linear(rng, d_model, d_model, dtype)
        self.wv = nn.Linear(rng, d_model, d_model, dtype)
        self.wo = nn.Linear(rng, d_model, d_model, dtype)
        self.ln2 = nn.LayerNorm(d_model, dtype)
        self.fc1 = nn.Linear(rng, d_model, 4 * d_model, dtype)
        self.fc2 = nn.Linear(rng, 4 * d_model, d_model, dtype)
        self.n_heads = n_heads
        self.d_head = d_model // n_heads

    def _split(self, x: Tensor, b: int, p: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (b, p, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def _attend(self, q, k, v, mask, b, p_q, dropout_rng=None, attn_rate=0.0):
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = ad.mul(scores, 1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = ad.add(scores, Tensor(mask))
        attn = ad.softmax(scores, axis=-1)
        if dropout_rng is not None and attn_rate > 0:
            attn = ad.dropout(attn, attn_rate, dropout_rng)
        ctx = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, p_q, self.n_heads * self.d_head))
        return self.wo(merged)

    def forward_full(self, x: Tensor, mask: np.ndarray, dropout_rng=None,
                     rates=(0.0, 0.0)) -> Tensor:
        attn_rate, resid_rate = rates
        b, p, _ = x.shape
        n = self.ln1(x)
        q, k, v = (self._split(w(n), b, p) for w in (self.wq, self.wk, self.wv))
        attended = self._attend(q, k, v, mask, b, p, dropout_rng, attn_rate)
        if dropout_rng is not None and resid_rate > 0:
            attended = ad.dropout(attended, resid_rate, dropout_rng)
        x = ad.add(x, attended)
        mlp = self.fc2(ad.gelu(self.fc1(self.ln2(x))))
        if dropout_rng is not None and resid_rate > 0:
            mlp = ad.dropout(mlp, resid_rate, dropout_rng)
        x = ad.add(x, mlp)
        return x

    def forward_incremental(self, x_new: Tensor, cache):
        """x_new: (B, p_new, D) new positions; cache: (k, v) over the prefix
        or None. Returns output for the new positions and the grown cache."""
        b, p_new, _ = x_new.shape
        n = self.ln1(x_new)
        q, k_new, v_new = (self._split(w(n), b, p_new) for w in (self.wq, self.wk, self.wv))
        if cache is None:
            k_all, v_all = k_new, v_new
        else:
            k_all = ad.concat([cache[0], k_new], axis=2)
            v_all = ad.concat([cache[1], v_new], axis=2)
        mask = None
        if p_new > 1:
            p_total = k_all.shape[2]
            p_past = p_total - p_new
            m = np.zeros((p_new, p_total), dtype=x_new.dtype)
            sub = np.triu(np.full((p_new, p_new), -np.inf, dtype=x_new.dtype), k=1)
            m[:, p_past:] = sub
            mask = m
        x = ad.add(x_new, self._attend(q, k_all, v_all, mask, b, p_new))
        x = ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))
        return x, (k_all, v_all)


@dataclass
class WMOutputs:
    token_logits: np.ndarray | Tensor  # (B, H, K, N); [t, k] predicts token (t, k)
    token_valid: np.ndarray  # (H, K) bool; False where no prefix exists
    reward: np.ndarray | Tensor  # (B, H)
    done_prob: np.ndarray | Tensor  # (B, H)


class WorldModel(nn.Module):
    def __init__(self, cfg: WorldModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d_model
        self.token_table = nn.glorot(rng, (cfg.vocab_size, d), dtype)
        self.action_proj = nn.Linear(rng, cfg.action_dim, d, dtype)
        self.instr_proj = nn.Linear(rng, cfg.instr_dim, d, dtype)
        self.pos_table = Tensor((rng.standard_normal((cfg.flat_len, d)) * 0.02).astype(dtype),
                                requires_grad=True)
        self.blocks = [Block(rng, d, cfg.n_heads, dtype) for _ in range(cfg.n_layers)]
        self.ln_f = nn.LayerNorm(d, dtype)
        self.token_head = HeadMLP(rng, d, cfg.vocab_size, cfg.head_layers, dtype)
        self.reward_head = HeadMLP(rng, d, 1, cfg.head_layers, dtype)
        self.done_head = HeadMLP(rng, d, 1, cfg.head_layers, dtype)
        self.dtype = dtype

    # -- embedding ----------------------------------------------------------

    def embed_sequence(self, tokens: np.ndarray, actions, instr) -> Tensor:
        """tokens (B, h, K) int, actions (B, h, A), instr (B, d_l) or
        (B, h, d_l) -> embedded (B, h*(K+2), D) with position terms added."""
        cfg = self.cfg
        b, h, k = tokens.shape
        if k != cfg.tokens_per_step or h > cfg.horizon:
            raise ad.ShapeError(
                f"sequence of {h} steps x {k} tokens does not fit layout "
                f"H(K+2) = {cfg.horizon}({cfg.tokens_per_step}+2)"
            )
        tok = ad.embedding(self.token_table, tokens)  # (B, h, K, D)
        if not isinstance(actions, Tensor):
            actions = Tensor(np.asarray(actions, dtype=self.dtype))
        act = ad.reshape(self.action_proj(ad.reshape(actions, (b * h, cfg.action_dim))),
                         (b, h, 1, cfg.d_model))
        if not isinstance(instr, Tensor):
            instr = Tensor(np.asarray(instr, dtype=self.dtype))
        if instr.ndim == 2:
            ins = self.instr_proj(instr)  # (B, D), shared projection
            ins = ad.reshape(ins, (b, 1, 1, cfg.d_model))
            ins = ad.concat([ins] * h, axis=1)
        else:
            ins = ad.reshape(self.instr_proj(ad.reshape(instr, (b * h, cfg.instr_dim))),
                             (b, h, 1, cfg.d_model))
        seq = ad.concat([tok, act, ins], axis=2)  # (B, h, K+2, D)
        seq = ad.reshape(seq, (b, h * cfg.slots_per_step, cfg.d_model))
        pos = ad.take(self.pos_table, np.arange(h * cfg.slots_per_step), axis=0)
        return ad.add(seq, ad.reshape(pos, (1, h * cfg.slots_per_step, cfg.d_model)))

    def _trunk(self, x: Tensor, dropout_rng=None) -> Tensor:
        cfg = self.cfg
        p = x.shape[1]
        mask = np.triu(np.full((p, p), -np.inf, dtype=self.dtype), k=1)
        if dropout_rng is not None and cfg.dropout_embed > 0:
            x = ad.dropout(x, cfg.dropout_embed, dropout_rng)
        for block in self.blocks:
            x = block.forward_full(x, mask, dropout_rng,
                                   (cfg.dropout_attn, cfg.dropout_resid))
        return self.ln_f(x)

    def _slot_indices(self):
        """Flat source positions for token targets and reward/done reads."""
        cfg = self.cfg
        s = cfg.slots_per_step
        token_slots = np.array([t * s + k for t in range(cfg.horizon) for k in range(cfg.tokens_per_step)])
        token_sources = token_slots - 1  # strict prefix; slot 0 has none
        instr_slots = np.array([t * s + cfg.tokens_per_step + 1 for t in range(cfg.horizon)])
        return token_slots, token_sources, instr_slots

    # -- forward ------------------------------------------------------------

    def forward(self, tokens: np.ndarray, actions, instr) -> WMOutputs:
        cfg = self.cfg
        b, h, k = tokens.shape
        x = self._trunk(self.embed_sequence(tokens, actions, instr))
        s = cfg.slots_per_step
        token_slots = np.array([t * s + j for t in range(h) for j in range(k)])
        sources = np.maximum(token_slots - 1, 0)
        hidden_tok = ad.take(x, sources, axis=1)
        logits = ad.reshape(self.token_head(hidden_tok), (b, h, k, cfg.vocab_size))
        valid = np.ones((h, k), dtype=bool)
        valid[0, 0] = False
        instr_slots = np.array([t * s + k + 1 for t in range(h)])
        hidden_step = ad.take(x, instr_slots, axis=1)
        reward = ad.reshape(self.reward_head(hidden_step), (b, h))
        done_logit = ad.reshape(self.done_head(hidden_step), (b, h))
        return WMOutputs(
            token_logits=logits, token_valid=valid, reward=reward,
            done_prob=ad.sigmoid(done_logit),
        )

    # -- loss ---------------------------------------------------------------

    def loss(self, tokens: np.ndarray, actions, instr, rewards, dones, step_mask=None,
             dropout_rng=None):
        """Token cross-entropy (timesteps after the first) + rho * reward MSE
        + termination cross-entropy; masked steps contribute zero.
        Returns (total, breakdown)."""
        cfg = self.cfg
        b, h, k = tokens.shape
        rewards = np.asarray(rewards, dtype=self.dtype)
        dones_f = np.asarray(dones, dtype=self.dtype)
        if rewards.shape != (b, h) or dones_f.shape != (b, h):
            raise ad.ShapeError(
                f"targets misaligned: tokens {tokens.shape} vs rewards "
                f"{rewards.shape} and dones {dones_f.shape}"
            )
        if step_mask is None:
            step_mask = np.ones((b, h), dtype=self.dtype)
        else:
            step_mask = np.asarray(step_mask, dtype=self.dtype)

        x = self._trunk(self.embed_sequence(tokens, actions, instr), dropout_rng)
        s = cfg.slots_per_step

        # tokens of timesteps 1..h-1, each predicted from the previous slot
        token_slots = np.array([t * s + j for t in range(1, h) for j in range(k)])
        hidden_tok = ad.take(x, token_slots - 1, axis=1)
        log_probs = ad.log_softmax(self.token_head(hidden_tok), axis=-1)
        targets = tokens[:, 1:, :].reshape(b, -1)
        picked = ad.take_along_last(log_probs, targets)
        tok_mask = np.repeat(step_mask[:, 1:], k, axis=1)
        n_tok = max(tok_mask.sum(), 1.0)
        token_ce = ad.mul(ad.reduce_sum(ad.mul(picked, Tensor(tok_mask.astype(self.dtype)))),
                          -1.0 / n_tok)

        instr_slots = np.array([t * s + k + 1 for t in range(h)])
        hidden_step = ad.take(x, instr_slots, axis=1)
        reward_pred = ad.reshape(self.reward_head(hidden_step), (b, h))
        done_logit = ad.reshape(self.done_head(hidden_step), (b, h))

        n_step = max(step_mask.sum(), 1.0)
        reward_mse = ad.mul(
            ad.reduce_sum(ad.mul(ad.square(ad.sub(reward_pred, Tensor(rewards))), Tensor(step_mask))),
            1.0 / n_step,
        )
        # binary CE via softplus(x) - x*y, numerically stable in both tails
        bce = ad.sub(ad.softplus(done_logit), ad.mul(done_logit, Tensor(dones_f)))
        done_ce = ad.mul(ad.reduce_sum(ad.mul(bce, Tensor(step_mask))), 1.0 / n_step)

        total = ad.add(ad.add(token_ce, ad.mul(reward_mse, cfg.reward_loss_factor)), done_ce)
        breakdown = {
            "token_ce": float(token_ce.data),
            "reward_mse": float(reward_mse.data),
            "done_ce": float(done_ce.data),
        }
        return total, breakdown

    # -- incremental decoding -----------------------------------------------

    def _feed(self, x_new: Tensor, caches: list):
        """Run new positions through the trunk, growing per-layer KV caches."""
        h = x_new
        new_caches = []
        for block, cache in zip(self.blocks, caches):
            h, grown = block.forward_incremental(h, cache)
            new_caches.append(grown)
        return self.ln_f(h), new_caches

    def _embed_positions(self, vecs: Tensor, flat_start: int) -> Tensor:
        p = vecs.shape[1]
        idx = np.arange(flat_start, flat_start + p)
        pos = ad.take(self.pos_table, idx, axis=0)
        return ad.add(vecs, ad.reshape(pos, (1, p, self.cfg.d_model)))


def sample_token(logits: Tensor, rng: np.random.Generator, temperature: float = 1.0):
    """Categorical sample per row; temperature 0 is argmax. Returns
    (ids (B,), st_weights (B, N)) where st_weights is the one-hot sample with
    a straight-through softmax path for gradients."""
    b, n = logits.shape
    if temperature <= 0.0:
        ids = np.argmax(logits.data, axis=-1)
        probs = ad.softmax(logits, axis=-1)
    else:
        probs = ad.softmax(ad.mul(logits, 1.0 / temperature), axis=-1)
        cum = np.cumsum(probs.data, axis=-1)
        u = rng.random((b, 1)) * cum[:, -1:]
        ids = np.minimum((cum < u).sum(axis=-1), n - 1)
    ids = ad.pin_value(ids)
    onehot = np.zeros((b, n), dtype=logits.dtype)
    onehot[np.arange(b), ids] = 1.0
    st = ad.add(Tensor(onehot), ad.sub(probs, ad.stop_gradient(probs)))
    return ids.astype(np.int64), st


@dataclass
class ImaginedRollout:
    """Latent trajectory generated by the world model under a policy.

    Lists are indexed by rollout step; tensors stay attached to the live
    tape so actor/critic objectives can differentiate through them.
    """

    start_ids: np.ndarray  # (B, K)
    token_ids: list = field(default_factory=list)  # imagined ids per step (B, K)
    features: list = field(default_factory=list)  # policy features, t = 0..S
    proprios: list = field(default_factory=list)  # decoded proprio, t = 0..S
    actions: list = field(default_factory=list)  # t = 0..S-1
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)  # predicted r_t, t = 0..S-1
    done_probs: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.rewards)

    def numpy(self) -> dict:
        def grab(xs):
            return [x.data.copy() if isinstance(x, Tensor) else np.asarray(x) for x in xs]

        return {
            "start_ids": self.start_ids.copy(),
            "token_ids": grab(self.token_ids),
            "proprios": grab(self.proprios),
            "actions": grab(self.actions),
            "rewards": grab(self.rewards),
            "done_probs": grab(self.done_probs),
        }


class _Stream:
    """Growing sequence of position-free input embeddings with per-layer KV
    caches. When the absolute position table would overflow, the oldest
    timestep is dropped and the remaining window is re-encoded at shifted
    positions, so only the last H timesteps ever influence predictions."""

    def __init__(self, wm: WorldModel):
        self.wm = wm
        self.parts: list[Tensor] = []  # raw embeddings, (B, p, D) each
        self.flat = 0
        self.caches = [None] * wm.cfg.n_layers

    def feed(self, vecs: Tensor) -> Tensor:
        p = vecs.shape[1]
        cfg = self.wm.cfg
        while self.flat + p > cfg.flat_len:
            drop = cfg.slots_per_step
            self.parts = self._split_off(drop)
            window = ad.concat(self.parts, axis=1) if len(self.parts) > 1 else self.parts[0]
            self.flat = window.shape[1]
            x, self.caches = self.wm._feed(
                self.wm._embed_positions(window, 0), [None] * cfg.n_layers)
        self.parts.append(vecs)
        out, self.caches = self.wm._feed(
            self.wm._embed_positions(vecs, self.flat), self.caches)
        self.flat += p
        return out

    def _split_off(self, drop: int) -> list[Tensor]:
        kept, skipped = [], 0
        for part in self.parts:
            p = part.shape[1]
            if skipped >= drop:
                kept.append(part)
            elif skipped + p <= drop:
                skipped += p
            else:
                raise RuntimeError("stream parts misaligned with timestep boundary")
        return kept


def imagine(wm: WorldModel, tokenizer, start_ids: np.ndarray, instr_vec: np.ndarray,
            feature_fn, policy_fn, horizon: int, rng: np.random.Generator,
            temperature: float = 1.0, stop_on_done: bool = True) -> ImaginedRollout:
    """Roll the world model forward from real start tokens under a policy.

    Per step: the policy acts on the current token embeddings, the action and
    instruction slots are fed to the transformer, and the next K observation
    tokens are sampled autoregressively (seeded rng). Predicted reward and
    termination are read at the instruction slot. Everything stays on the
    tape; actor gradients flow through the sampled tokens' straight-through
    embeddings.
    """
    cfg = wm.cfg
    b, k = start_ids.shape
    kx = tokenizer.cfg.image_tokens

    instr = Tensor(np.asarray(instr_vec, dtype=wm.dtype))
    instr_emb = ad.reshape(wm.instr_proj(instr), (b, 1, cfg.d_model))

    rollout = ImaginedRollout(start_ids=start_ids.copy())
    q_x0 = ad.embedding(tokenizer.codebook_image, start_ids[:, :kx])
    q_th0 = ad.embedding(tokenizer.codebook_proprio, start_ids[:, kx:])
    theta0 = tokenizer.decode_proprio_embedding(ad.reshape(q_th0, (b, -1)))
    rollout.features.append(feature_fn(q_x0, q_th0, theta0))
    rollout.proprios.append(theta0)

    stream = _Stream(wm)
    stream.feed(ad.embedding(wm.token_table, start_ids))

    for _ in range(horizon):
        action, log_prob = policy_fn(rollout.features[-1], rng)
        rollout.actions.append(action)
        rollout.log_probs.append(log_prob)

        act_emb = ad.reshape(wm.action_proj(action), (b, 1, cfg.d_model))
        x = stream.feed(ad.concat([act_emb, instr_emb], axis=1))
        step_hidden = ad.reshape(ad.take(x, np.array([1]), axis=1), (b, cfg.d_model))
        rollout.rewards.append(ad.reshape(wm.reward_head(step_hidden), (b,)))
        done_prob = ad.reshape(ad.sigmoid(wm.done_head(step_hidden)), (b,))
        rollout.done_probs.append(done_prob)

        # sample the next observation token by token
        prev_hidden = step_hidden
        ids_step = np.zeros((b, k), dtype=np.int64)
        st_weights = []
        for j in range(k):
            logits = wm.token_head(prev_hidden)
            ids_j, st = sample_token(logits, rng, temperature)
            ids_step[:, j] = ids_j
            st_weights.append(st)
            emb_j = ad.reshape(ad.matmul(st, wm.token_table), (b, 1, cfg.d_model))
            x = stream.feed(emb_j)
            prev_hidden = ad.reshape(x, (b, cfg.d_model))
        rollout.token_ids.append(ids_step)

        # policy features via the straight-through codebook embeddings
        st_img = ad.concat([ad.reshape(s, (b, 1, cfg.vocab_size)) for s in st_weights[:kx]], axis=1)
        st_th = ad.concat([ad.reshape(s, (b, 1, cfg.vocab_size)) for s in st_weights[kx:]], axis=1)
        q_x = ad.matmul(st_img, tokenizer.codebook_image)
        q_th = ad.matmul(st_th, tokenizer.codebook_proprio)
        theta = tokenizer.decode_proprio_embedding(ad.reshape(q_th, (b, -1)))
        rollout.features.append(feature_fn(q_x, q_th, theta))
        rollout.proprios.append(theta)

        if stop_on_done and b == 1 and rng.random() < float(done_prob.data[0]):
            break
    return rollout
