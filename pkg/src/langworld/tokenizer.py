"""Discrete autoencoder over image + proprioception observations.

Conv/attention encoder, dual codebooks (image and proprioception) with
nearest-neighbor quantization and a straight-through path, a mirrored
decoder, and the training loss: L1 image reconstruction, squared proprio
reconstruction, both commitment terms, and a feature-space perceptual term
with trainable per-layer 1x1 channel maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class TokenizerConfig:
    image_size: int = 32
    channels: int = 3
    vocab_size: int = 64  # entries per codebook
    embed_dim: int = 32  # token embedding width
    image_tokens: int = 16  # spatial grid cells (must be a square)
    proprio_tokens: int = 1
    proprio_dim: int = 3
    conv_channels: tuple = (16, 24, 32)
    residual_blocks: int = 0  # extra residual conv blocks per stage
    attention_resolutions: tuple = (4,)  # apply self-attention at these grid sizes
    extractor_channels: tuple = (8, 12, 16)
    learning_rate: float = 2e-3
    # codes start in the tiny [-1/N, 1/N] cube; a faster codebook-only rate
    # lets newly selected codes reach the latent cloud in tens of steps
    codebook_learning_rate: float = 2e-2

    def __post_init__(self):
        grid = self.image_size // (2 ** len(self.conv_channels))
        if grid * grid != self.image_tokens:
            raise ValueError(
                f"conv stack of {len(self.conv_channels)} stride-2 stages maps "
                f"{self.image_size}px to a {grid}x{grid} grid, not {self.image_tokens} tokens"
            )

    @property
    def grid(self) -> int:
        return self.image_size // (2 ** len(self.conv_channels))

    @property
    def tokens_per_obs(self) -> int:
        return self.image_tokens + self.proprio_tokens

    def stage_resolutions(self) -> list[int]:
        return [self.image_size // (2 ** (i + 1)) for i in range(len(self.conv_channels))]


@dataclass
class TokenizedObs:
    ids_image: np.ndarray  # (K_x,) int
    ids_proprio: np.ndarray  # (K_th,) int
    q_image: np.ndarray  # (K_x, d_enc)
    q_proprio: np.ndarray  # (K_th, d_enc)

    @property
    def ids(self) -> np.ndarray:
        return np.concatenate([self.ids_image, self.ids_proprio])


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the codebook row with minimal squared Euclidean distance,
    ties broken by the lowest index. z: (..., d), codebook: (N, d)."""
    diff = z[..., None, :] - codebook
    dist = (diff * diff).sum(axis=-1)
    return np.argmin(dist, axis=-1)


class RandomConvExtractor(nn.Module):
    """Fixed, randomly initialized conv stack used as the perceptual feature
    backbone; weights are frozen at construction."""

    def __init__(self, rng, channels_in: int = 3, stages=(8, 12, 16), dtype=np.float32):
        convs = []
        c_prev = channels_in
        for c in stages:
            conv = nn.Conv2d(rng, c_prev, c, kernel=3, stride=2, padding=1, dtype=dtype)
            conv.w.requires_grad = False
            conv.b.requires_grad = False
            convs.append(conv)
            c_prev = c
        self.convs = convs
        self.stages = tuple(stages)

    def features(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = ad.elu(conv(h))
            feats.append(h)
        return feats


class PerceptualHead(nn.Module):
    """Trainable 1x1 channel maps, one per extractor layer, identity-initialized.

    The loss is linear in these weights, so unconstrained descent would push
    them to -inf; training projects them back onto the nonnegative orthant
    after each step (see project_nonnegative)."""

    def __init__(self, stage_channels, dtype=np.float32):
        self.maps = [
            Tensor(np.eye(c, dtype=dtype).reshape(c, c, 1, 1), requires_grad=True)
            for c in stage_channels
        ]

    def parameters(self):
        return {f"maps.{i}": m for i, m in enumerate(self.maps)}

    def project_nonnegative(self):
        for m in self.maps:
            np.maximum(m.data, 0.0, out=m.data)


def perceptual_loss(x: Tensor, x_rec: Tensor, extractor: RandomConvExtractor,
                    head: PerceptualHead) -> Tensor:
    """Sum over layers of mean-normalized, channel-weighted squared feature
    differences; linear in the head's map weights."""
    feats_a = extractor.features(x)
    feats_b = extractor.features(x_rec)
    if len(feats_a) != len(head.maps):
        raise ValueError(f"extractor yields {len(feats_a)} layers, head has {len(head.maps)}")
    total = None
    for fa, fb, a_map in zip(feats_a, feats_b, head.maps):
        if fa.shape[1] != a_map.shape[1]:
            raise ValueError(f"feature channels {fa.shape[1]} != map channels {a_map.shape[1]}")
        diff_sq = ad.square(ad.sub(fa, fb))
        weighted = ad.conv2d(diff_sq, a_map)
        _, cj, hj, wj = fa.shape
        term = ad.mul(ad.reduce_sum(weighted), 1.0 / (cj * hj * wj))
        total = term if total is None else ad.add(total, term)
    batch = x.shape[0]
    return ad.mul(total, 1.0 / batch)


class ResBlock(nn.Module):
    def __init__(self, rng, channels: int, dtype=np.float32):
        self.c1 = nn.Conv2d(rng, channels, channels, 3, padding=1, dtype=dtype)
        self.c2 = nn.Conv2d(rng, channels, channels, 3, padding=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.c2(ad.elu(self.c1(x))))


class Tokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        cs = cfg.conv_channels
        self.enc_convs = [
            nn.Conv2d(rng, cfg.channels if i == 0 else cs[i - 1], cs[i], 3, stride=2, padding=1, dtype=dtype)
            for i in range(len(cs))
        ]
        self.enc_res = [
            ResBlock(rng, cs[i], dtype)
            for i in range(len(cs)) for _ in range(cfg.residual_blocks)
        ]
        self.enc_extra_attn = [
            nn.SelfAttention2d(rng, cs[i], dtype=dtype)
            for i, r in enumerate(cfg.stage_resolutions()[:-1]) if r in cfg.attention_resolutions
        ]
        self.enc_attn = nn.SelfAttention2d(rng, cs[-1], dtype=dtype)
        self.enc_out = nn.Conv2d(rng, cs[-1], cfg.embed_dim, 1, dtype=dtype)
        self.proprio_enc = nn.Linear(rng, cfg.proprio_dim, cfg.embed_dim, dtype=dtype)
        # normalize latents before quantization: a zero-centered cloud at a
        # scale the [-1/N, 1/N]-initialized codes can reach quickly; codes
        # cannot be reset, so they must start near the data
        self.enc_norm = nn.LayerNorm(cfg.embed_dim, dtype)
        self.proprio_norm = nn.LayerNorm(cfg.embed_dim, dtype)
        self.enc_norm.gamma.data *= np.asarray(0.15, dtype=dtype)
        self.proprio_norm.gamma.data *= np.asarray(0.15, dtype=dtype)

        scale = 1.0 / cfg.vocab_size
        self.codebook_image = Tensor(
            rng.uniform(-scale, scale, (cfg.vocab_size, cfg.embed_dim)).astype(dtype), requires_grad=True)
        self.codebook_proprio = Tensor(
            rng.uniform(-scale, scale, (cfg.vocab_size, cfg.embed_dim)).astype(dtype), requires_grad=True)

        self.dec_in = nn.Conv2d(rng, cfg.embed_dim, cs[-1], 1, dtype=dtype)
        self.dec_attn = nn.SelfAttention2d(rng, cs[-1], dtype=dtype)
        dec_out_ch = [cs[-2 - i] if i < len(cs) - 1 else cs[0] for i in range(len(cs))]
        self.dec_convs = [
            nn.Conv2d(rng, cs[-1 - i], dec_out_ch[i], 3, padding=1, dtype=dtype)
            for i in range(len(cs))
        ]
        self.dec_res = [
            ResBlock(rng, dec_out_ch[i], dtype)
            for i in range(len(cs)) for _ in range(cfg.residual_blocks)
        ]
        up_res = list(reversed(cfg.stage_resolutions()[:-1]))  # resolutions after each upsample
        self.dec_extra_attn = [
            nn.SelfAttention2d(rng, dec_out_ch[i], dtype=dtype)
            for i, r in enumerate(up_res) if r in cfg.attention_resolutions
        ]
        self._dec_attn_at = [r in cfg.attention_resolutions for r in up_res] + [False]
        self.dec_out = nn.Conv2d(rng, cs[0], cfg.channels, 3, padding=1, dtype=dtype)
        self.proprio_dec = nn.Linear(rng, cfg.embed_dim, cfg.proprio_dim, dtype=dtype)

        self.extractor = RandomConvExtractor(rng, cfg.channels, cfg.extractor_channels, dtype=dtype)
        self.perceptual = PerceptualHead(cfg.extractor_channels, dtype=dtype)

    # -- encoding -----------------------------------------------------------

    def encode_latents(self, images: Tensor, proprios: Tensor) -> tuple[Tensor, Tensor]:
        """images (B, C, H, W), proprios (B, d) -> pre-quantization latents
        z_x (B, K_x, d_enc), z_th (B, K_th, d_enc)."""
        cfg = self.cfg
        resolutions = cfg.stage_resolutions()
        h = images
        res_i, attn_i = 0, 0
        for i, conv in enumerate(self.enc_convs):
            h = ad.elu(conv(h))
            for _ in range(cfg.residual_blocks):
                h = self.enc_res[res_i](h)
                res_i += 1
            if i < len(self.enc_convs) - 1 and resolutions[i] in cfg.attention_resolutions:
                h = self.enc_extra_attn[attn_i](h)
                attn_i += 1
        h = self.enc_attn(h)
        h = self.enc_out(h)  # (B, d_enc, g, g)
        b = h.shape[0]
        g = self.cfg.grid
        cells = ad.transpose(ad.reshape(h, (b, self.cfg.embed_dim, g * g)), (0, 2, 1))
        # center across the image's own cells: background cells fall near the
        # origin (where the codes start), content cells keep distinct
        # directions instead of one shared dominant one
        cells = ad.sub(cells, ad.reduce_mean(cells, axis=1, keepdims=True))
        z_x = self.enc_norm(cells)
        z_th = self.proprio_norm(ad.reshape(self.proprio_enc(proprios), (b, 1, self.cfg.embed_dim)))
        return z_x, z_th

    def quantize(self, z: Tensor, codebook: Tensor):
        """Returns (ids, q, q_st): nearest codebook rows, their embeddings,
        and the straight-through composition z + sg(q - z)."""
        ids = ad.pin_value(nearest_code(z.data, codebook.data))
        q = ad.embedding(codebook, ids)
        q_st = ad.add(z, ad.stop_gradient(ad.sub(q, z)))
        return ids, q, q_st

    def encode_batch(self, images: np.ndarray, proprios: np.ndarray) -> np.ndarray:
        """Token ids (B, K) for image batches in (B, H, W, C) float layout;
        inference path, no tape required."""
        x = Tensor(np.transpose(images, (0, 3, 1, 2)).astype(self.codebook_image.dtype))
        th = Tensor(proprios.astype(self.codebook_image.dtype))
        z_x, z_th = self.encode_latents(x, th)
        ids_x = nearest_code(z_x.data, self.codebook_image.data)
        ids_th = nearest_code(z_th.data, self.codebook_proprio.data)
        return np.concatenate([ids_x, ids_th], axis=1)

    def encode(self, image: np.ndarray, proprio: np.ndarray) -> TokenizedObs:
        ids = self.encode_batch(image[None], proprio[None])[0]
        kx = self.cfg.image_tokens
        return TokenizedObs(
            ids_image=ids[:kx],
            ids_proprio=ids[kx:],
            q_image=self.codebook_image.data[ids[:kx]].copy(),
            q_proprio=self.codebook_proprio.data[ids[kx:]].copy(),
        )

    # -- decoding -----------------------------------------------------------

    def decode_tensors(self, q_x: Tensor, q_th: Tensor) -> tuple[Tensor, Tensor]:
        """Quantized embeddings -> (B, C, H, W) image and (B, d) proprio."""
        b = q_x.shape[0]
        g = self.cfg.grid
        h = ad.reshape(ad.transpose(q_x, (0, 2, 1)), (b, self.cfg.embed_dim, g, g))
        h = self.dec_in(h)
        h = self.dec_attn(h)
        res_i, attn_i = 0, 0
        for i, conv in enumerate(self.dec_convs):
            h = ad.elu(conv(ad.upsample2x(h)))
            for _ in range(self.cfg.residual_blocks):
                h = self.dec_res[res_i](h)
                res_i += 1
            if self._dec_attn_at[i]:
                h = self.dec_extra_attn[attn_i](h)
                attn_i += 1
        image = self.dec_out(h)
        proprio = self.proprio_dec(ad.reshape(q_th, (b, self.cfg.embed_dim)))
        return image, proprio

    def decode(self, tok: TokenizedObs) -> tuple[np.ndarray, np.ndarray]:
        """Token ids -> (image (H, W, C), proprio (d,)). Raises on ids >= N."""
        q_x = ad.embedding(self.codebook_image, tok.ids_image[None])
        q_th = ad.embedding(self.codebook_proprio, tok.ids_proprio[None])
        image, proprio = self.decode_tensors(q_x, q_th)
        return np.transpose(image.data[0], (1, 2, 0)), proprio.data[0]

    def decode_proprio_embedding(self, q_th: Tensor) -> Tensor:
        return self.proprio_dec(q_th)

    # -- training loss ------------------------------------------------------

    def loss(self, images: np.ndarray, proprios: np.ndarray):
        """Full training objective on a (B, H, W, C) float batch. Returns
        (total, breakdown dict of floats)."""
        dtype = self.codebook_image.dtype
        x = Tensor(np.transpose(images, (0, 3, 1, 2)).astype(dtype))
        th = Tensor(proprios.astype(dtype))

        z_x, z_th = self.encode_latents(x, th)
        _, q_x, qst_x = self.quantize(z_x, self.codebook_image)
        _, q_th, qst_th = self.quantize(z_th, self.codebook_proprio)

        x_rec, th_rec = self.decode_tensors(qst_x, qst_th)

        # per-sample norms (L1 / squared L2), averaged over the batch
        b = x.shape[0]
        recon_image = ad.mul(ad.reduce_sum(ad.absolute(ad.sub(x, x_rec))), 1.0 / b)
        recon_proprio = ad.mul(ad.reduce_sum(ad.square(ad.sub(th_rec, th))), 1.0 / b)

        z_all = ad.concat([z_x, z_th], axis=1)
        q_all = ad.concat([q_x, q_th], axis=1)
        commit_encoder = ad.mul(
            ad.reduce_sum(ad.square(ad.sub(ad.stop_gradient(q_all), z_all))), 1.0 / b)
        commit_codebook = ad.mul(
            ad.reduce_sum(ad.square(ad.sub(q_all, ad.stop_gradient(z_all)))), 1.0 / b)

        perceptual = perceptual_loss(x, x_rec, self.extractor, self.perceptual)

        total = ad.add(ad.add(ad.add(ad.add(recon_image, recon_proprio), commit_encoder),
                              commit_codebook), perceptual)
        breakdown = {
            "recon_image_l1": float(recon_image.data),
            "recon_proprio_l2": float(recon_proprio.data),
            "commit_encoder": float(commit_encoder.data),
            "commit_codebook": float(commit_codebook.data),
            "perceptual": float(perceptual.data),
        }
        return total, breakdown
