"""Toy transformer denoiser with two size presets and per-layer K/V exposure.

One architecture, two built-in sizes ("large", "small"): pre-norm
self-attention blocks over latent tokens, sinusoidal token positions,
additive sinusoidal timestep conditioning, GELU feed-forward. Weights are
regenerated from a 64-bit seed, never serialized.

Besides the plain full-context forward, the denoiser supports a masked
forward: queries come from a subset of tokens while the attention context
is completed from a previous step's K/V cache, with fresh K/V scattered
into their original token positions (so a total mask reproduces the full
forward exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import (
    Grid2D,
    SeededRng,
    _layer_norm_rows_f32,
    _matmul_f32,
    _softmax_rows_f32,
    gaussian,
)

__all__ = [
    "DenoiserConfig",
    "LayerKV",
    "Denoiser",
    "PRESETS",
    "preset_config",
    "build_denoiser",
    "refresh_kv_cache",
    "timestep_embedding",
    "position_embedding",
]

PRESETS = {
    "large": {"layers": 6, "model_dim": 128, "heads": 4},
    "small": {"layers": 2, "model_dim": 64, "heads": 4},
}

FFN_EXPANSION = 4


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int
    heads: int
    model_dim: int
    tokens: int
    channels: int
    weight_seed: int
    preset_name: str = "custom"

    def __post_init__(self):
        for name in ("layers", "heads", "model_dim", "tokens", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"config field '{name}' must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"config field 'model_dim' ({self.model_dim}) must be divisible by 'heads' ({self.heads})"
            )
        side = math.isqrt(self.tokens)
        if side * side != self.tokens:
            raise ValueError(f"config field 'tokens' ({self.tokens}) must be a perfect square")
        if not 0 <= self.weight_seed < 2**64:
            raise ValueError("config field 'weight_seed' must fit in 64 unsigned bits")

    @property
    def side(self) -> int:
        return math.isqrt(self.tokens)


def preset_config(name: str, tokens: int, channels: int, weight_seed: int) -> DenoiserConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset '{name}' (have: {sorted(PRESETS)})")
    return DenoiserConfig(
        tokens=tokens, channels=channels, weight_seed=weight_seed, preset_name=name, **PRESETS[name]
    )


@dataclass(frozen=True)
class LayerKV:
    """Per-layer key/value rows; rows == tokens the forward pass covered."""

    layer: int
    keys: Grid2D
    values: Grid2D

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ValueError(f"LayerKV keys {self.keys.shape} vs values {self.values.shape}")


def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    """Classic interleaved sin/cos table: row p, column 2i is
    sin(p / 10000^(2i/dim)), column 2i+1 the matching cos."""
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / dim))
    angles = positions[:, None] * freqs[None, :]
    table = np.empty((positions.shape[0], 2 * half), dtype=np.float32)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table[:, :dim]


# Steps advance the embedding argument by 1/256 so conditioning drifts
# gently between adjacent steps; K/V reuse across steps presumes the
# context changes slowly, and an O(1) per-step jump in the additive
# conditioning would break that for every cached row.
TIME_SCALE = 1.0 / 256.0


def timestep_embedding(t_index: int, model_dim: int) -> np.ndarray:
    if t_index < 0:
        raise ValueError(f"t_index must be >= 0, got {t_index}")
    return _sinusoid(np.array([t_index * TIME_SCALE]), model_dim)[0]


def position_embedding(tokens: int, model_dim: int) -> np.ndarray:
    return _sinusoid(np.arange(tokens, dtype=np.float64), model_dim)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(0.7978845608028654)  # sqrt(2/pi)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


class Denoiser:
    """Immutable after construction; safe for concurrent forward passes.

    Weights live in ``w_in``, ``blocks`` (per layer: q, k, v, o, ff1, ff2)
    and ``w_out``; ``all_weights()`` iterates them for test hooks.
    """

    def __init__(self, config: DenoiserConfig):
        self.config = config
        d = config.model_dim
        rng = SeededRng(config.weight_seed)

        def init(fan_in: int, fan_out: int) -> np.ndarray:
            w = gaussian(rng, fan_in, fan_out).data.copy()
            return w * np.float32(1.0 / math.sqrt(fan_in))

        # Initialization order is part of the determinism contract:
        # w_in, then per layer q, k, v, o, ff1, ff2, then w_out.
        self.w_in = init(config.channels, d)
        self.blocks = []
        for _ in range(config.layers):
            self.blocks.append(
                {
                    "q": init(d, d),
                    "k": init(d, d),
                    "v": init(d, d),
                    "o": init(d, d),
                    "ff1": init(d, FFN_EXPANSION * d),
                    "ff2": init(FFN_EXPANSION * d, d),
                }
            )
        self.w_out = init(d, config.channels)
        self.pos_emb = position_embedding(config.tokens, d)
        self.head_dim = d // config.heads
        self.attn_scale = 1.0 / math.sqrt(self.head_dim)

    def all_weights(self):
        yield self.w_in
        for block in self.blocks:
            for name in ("q", "k", "v", "o", "ff1", "ff2"):
                yield block[name]
        yield self.w_out

    def _attention(self, q: np.ndarray, k_full: np.ndarray, v_full: np.ndarray) -> np.ndarray:
        heads, hd = self.config.heads, self.head_dim
        out = np.empty_like(q)
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            scores = _matmul_f32(q[:, sl], np.ascontiguousarray(k_full[:, sl].T))
            weights = _softmax_rows_f32(scores, self.attn_scale)
            out[:, sl] = _matmul_f32(weights, v_full[:, sl])
        return out

    def forward_full(self, latent: Grid2D, t: int) -> tuple[Grid2D, list[LayerKV]]:
        """Denoise all tokens; returns noise rows and per-layer K/V for caching."""
        cfg = self.config
        if latent.shape != (cfg.tokens, cfg.channels):
            raise ValueError(
                f"latent shape {latent.shape} does not match config ({cfg.tokens}, {cfg.channels})"
            )
        t_emb = timestep_embedding(t, cfg.model_dim)
        x = _matmul_f32(latent.data, self.w_in) + self.pos_emb + t_emb
        kv: list[LayerKV] = []
        for i, blk in enumerate(self.blocks):
            h = _layer_norm_rows_f32(x)
            q = _matmul_f32(h, blk["q"])
            k = _matmul_f32(h, blk["k"])
            v = _matmul_f32(h, blk["v"])
            kv.append(LayerKV(i, Grid2D.from_array(k), Grid2D.from_array(v)))
            x = x + _matmul_f32(self._attention(q, k, v), blk["o"])
            h2 = _layer_norm_rows_f32(x)
            x = x + _matmul_f32(_gelu(_matmul_f32(h2, blk["ff1"])), blk["ff2"])
        noise = _matmul_f32(_layer_norm_rows_f32(x), self.w_out)
        return Grid2D.from_array(noise), kv

    def forward_masked(
        self,
        latent_rows: Grid2D,
        token_indices,
        prev_kv: list[LayerKV],
        t: int,
    ) -> tuple[Grid2D, list[LayerKV]]:
        """Denoise only the given tokens, padding attention context from ``prev_kv``.

        ``prev_kv`` must cover all tokens (a full-context cache from the
        previous step). Per layer, fresh K/V rows are scattered into a copy
        of the cached full buffers at their original token positions, so
        attention sees the complete context in the original order. FFN and
        normalization touch the masked rows only. Returns noise rows plus
        fresh K/V rows for the masked tokens, in ``token_indices`` order.
        """
        cfg = self.config
        idx = np.asarray(token_indices, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("forward_masked needs a nonempty mask; run forward_full on the small model instead")
        if idx.min() < 0 or idx.max() >= cfg.tokens:
            raise ValueError(f"mask index out of range for {cfg.tokens} tokens")
        if np.unique(idx).size != idx.size:
            raise ValueError("mask indices must be unique")
        if latent_rows.shape != (idx.size, cfg.channels):
            raise ValueError(
                f"latent rows shape {latent_rows.shape} does not match mask size {idx.size} x {cfg.channels}"
            )
        if len(prev_kv) != cfg.layers:
            raise ValueError(f"cache has {len(prev_kv)} layers, config has {cfg.layers}")
        for entry in prev_kv:
            if entry.keys.shape != (cfg.tokens, cfg.model_dim):
                raise ValueError(
                    f"cache layer {entry.layer} shape {entry.keys.shape} must cover all "
                    f"{cfg.tokens} tokens at dim {cfg.model_dim}"
                )

        t_emb = timestep_embedding(t, cfg.model_dim)
        x = _matmul_f32(latent_rows.data, self.w_in) + self.pos_emb[idx] + t_emb
        kv_new: list[LayerKV] = []
        for i, blk in enumerate(self.blocks):
            h = _layer_norm_rows_f32(x)
            q = _matmul_f32(h, blk["q"])
            k = _matmul_f32(h, blk["k"])
            v = _matmul_f32(h, blk["v"])
            kv_new.append(LayerKV(i, Grid2D.from_array(k), Grid2D.from_array(v)))
            k_full = prev_kv[i].keys.data.copy()
            v_full = prev_kv[i].values.data.copy()
            k_full[idx] = k
            v_full[idx] = v
            x = x + _matmul_f32(self._attention(q, k_full, v_full), blk["o"])
            h2 = _layer_norm_rows_f32(x)
            x = x + _matmul_f32(_gelu(_matmul_f32(h2, blk["ff1"])), blk["ff2"])
        noise = _matmul_f32(_layer_norm_rows_f32(x), self.w_out)
        return Grid2D.from_array(noise), kv_new


def build_denoiser(config: DenoiserConfig) -> Denoiser:
    return Denoiser(config)


def refresh_kv_cache(old: list[LayerKV], fresh: list[LayerKV], token_indices) -> list[LayerKV]:
    """Full-context cache with rows at ``token_indices`` replaced by fresh rows.

    Overwrite semantics: refreshing twice with the same inputs is a no-op
    the second time. Rows outside the mask are carried over unchanged.
    """
    idx = np.asarray(token_indices, dtype=np.int64)
    if len(old) != len(fresh):
        raise ValueError(f"cache layer count mismatch: {len(old)} vs {len(fresh)}")
    out: list[LayerKV] = []
    for old_entry, fresh_entry in zip(old, fresh):
        if fresh_entry.keys.rows != idx.size:
            raise ValueError(
                f"layer {old_entry.layer}: {fresh_entry.keys.rows} fresh rows for {idx.size} indices"
            )
        if fresh_entry.keys.cols != old_entry.keys.cols:
            raise ValueError(
                f"layer {old_entry.layer}: fresh dim {fresh_entry.keys.cols} vs cache dim {old_entry.keys.cols}"
            )
        if idx.size and (idx.min() < 0 or idx.max() >= old_entry.keys.rows):
            raise ValueError(f"refresh index out of range for {old_entry.keys.rows} tokens")
        keys = old_entry.keys.data.copy()
        values = old_entry.values.data.copy()
        keys[idx] = fresh_entry.keys.data
        values[idx] = fresh_entry.values.data
        out.append(LayerKV(old_entry.layer, Grid2D.from_array(keys), Grid2D.from_array(values)))
    return out
