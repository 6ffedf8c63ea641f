"""Three-stage region-aware scheduler stitching a large and a small denoiser.

A run starts with the large model on every token (stage 0). When the mean
per-token relative L1 change between consecutive step outputs drops below
the current stage's threshold the run advances one stage: through the
masked stages (1..n, strictly decreasing mask ratios, large model refining
only the hardest tokens over a KV-padded context while the small model
drafts the full grid) and finally into the small-model-only tail. A run
never skips a stage even when the change metric is below several
thresholds at once.
"""

from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .denoiser import Denoiser, LayerKV, refresh_kv_cache
from .grid import Grid2D, SeededRng, gather_rows, gaussian, scatter_rows, topk_indices

__all__ = [
    "LatentGrid",
    "Mask",
    "ThresholdSchedule",
    "StitchState",
    "StepTrace",
    "DiffResult",
    "Variant",
    "diff_metric",
    "update_latent",
    "combine_noise",
    "update_mask",
    "maybe_advance_stage",
    "run_generation",
    "uniform_sigma_schedule",
    "write_trace_csv",
    "TRACE_HEADER",
]

DIFF_EPS = 1e-8

TRACE_HEADER = "step,stage,d_t,mask_ratio,wall_ms_large,wall_ms_small,cache_staleness_max"


@dataclass(frozen=True)
class LatentGrid:
    """Evolving latent state: side^2 tokens x channels, plus the step index."""

    side: int
    channels: int
    data: Grid2D
    step: int = 0

    def __post_init__(self):
        if self.data.shape != (self.side * self.side, self.channels):
            raise ValueError(
                f"latent data {self.data.shape} does not match side {self.side} "
                f"({self.side * self.side} tokens) x {self.channels} channels"
            )

    @property
    def tokens(self) -> int:
        return self.side * self.side


@dataclass(frozen=True)
class Mask:
    """Ascending token indices selected for large-model refinement."""

    indices: tuple[int, ...]
    ratio: float

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"mask ratio must be in (0, 1], got {self.ratio}")
        if len(self.indices) == 0:
            raise ValueError("mask must contain at least one token")
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.min() < 0:
            raise ValueError("mask indices must be non-negative")
        if not (np.diff(idx) > 0).all():
            raise ValueError("mask indices must be strictly ascending")

    def __len__(self) -> int:
        return len(self.indices)


def _mask_size(ratio: float, tokens: int) -> int:
    """Half-up rounding of ratio * tokens, floored at one token."""
    return max(1, int(math.floor(ratio * tokens + 0.5)))


@dataclass(frozen=True)
class ThresholdSchedule:
    """Threshold ladder, mask-ratio ladder and per-step sigma sizes.

    ``thresholds`` has one entry per transition: into each of the n masked
    stages plus one into the pure-small stage, so n+1 entries for n ratios.
    ``mask_bound``, when given, is the latency feasibility limit
    1 - L_s/L_l that the first mask ratio must stay below.
    """

    thresholds: tuple[float, ...]
    mask_ratios: tuple[float, ...]
    sigma_schedule: tuple[float, ...]
    mask_bound: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        object.__setattr__(self, "mask_ratios", tuple(float(x) for x in self.mask_ratios))
        object.__setattr__(self, "sigma_schedule", tuple(float(x) for x in self.sigma_schedule))
        if len(self.thresholds) != len(self.mask_ratios) + 1:
            raise ValueError(
                f"thresholds must number mask_ratios + 1 (one per transition), "
                f"got {len(self.thresholds)} thresholds for {len(self.mask_ratios)} ratios"
            )
        for r in self.mask_ratios:
            if not 0.0 < r <= 1.0:
                raise ValueError(f"mask ratios must be in (0, 1], got {r}")
        if any(b <= a for a, b in zip(self.mask_ratios[1:], self.mask_ratios[:-1])):
            raise ValueError(f"mask ratios must be strictly decreasing, got {self.mask_ratios}")
        if self.mask_bound is not None and self.mask_ratios:
            if self.mask_ratios[0] >= self.mask_bound:
                raise ValueError(
                    f"first mask ratio {self.mask_ratios[0]} must stay below the latency "
                    f"benefit bound {self.mask_bound:.6g} (1 - L_s/L_l)"
                )
        if len(self.sigma_schedule) == 0:
            raise ValueError("sigma schedule must not be empty")
        if any(s <= 0 for s in self.sigma_schedule):
            raise ValueError("sigma schedule entries must be positive")

    @property
    def steps(self) -> int:
        return len(self.sigma_schedule)

    @property
    def masked_stages(self) -> int:
        return len(self.mask_ratios)

    @property
    def final_stage(self) -> int:
        return len(self.mask_ratios) + 1


def uniform_sigma_schedule(steps: int) -> tuple[float, ...]:
    """Uniform Euler step sizes 1/T, the default sampler discretization."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return (1.0 / steps,) * steps


@dataclass
class StitchState:
    stage: int = 0
    current_mask: Mask | None = None
    prev_latent: LatentGrid | None = None
    prev_kv: list[LayerKV] | None = None
    diff_history: list[tuple[int, float, int]] = field(default_factory=list)
    degenerate_tokens: int = 0


@dataclass(frozen=True)
class StepTrace:
    """One record per denoising step; wall times in seconds."""

    step: int
    stage: int
    d_t: float
    mask_ratio: float
    wall_time_large: float
    wall_time_small: float
    cache_staleness_max: int


@dataclass(frozen=True)
class DiffResult:
    d_t: float
    per_token: np.ndarray
    degenerate_tokens: int


class Variant(str, enum.Enum):
    HYBRID = "hybrid"
    STATIC_MASK = "static-mask"
    FULL_LARGE = "full-large"
    PURE_LARGE = "pure-large"
    PURE_SMALL = "pure-small"
    NAIVE_SWITCH = "naive-switch"


def _rows(x) -> np.ndarray:
    return x.data.data if isinstance(x, LatentGrid) else x.data


def diff_metric(x_prev, x_curr, eps: float = DIFF_EPS) -> DiffResult:
    """Per-token relative L1 change and its mean over tokens.

    per_token[i] = |prev_i - curr_i|_1 / max(|prev_i|_1, eps); tokens whose
    reference norm falls below eps are counted as degenerate and clamped
    rather than failing.
    """
    prev = _rows(x_prev).astype(np.float64)
    curr = _rows(x_curr).astype(np.float64)
    if prev.shape != curr.shape:
        raise ValueError(f"diff_metric shape mismatch: {prev.shape} vs {curr.shape}")
    num = np.abs(prev - curr).sum(axis=1)
    den = np.abs(prev).sum(axis=1)
    degenerate = int((den < eps).sum())
    per_token = num / np.maximum(den, eps)
    return DiffResult(float(per_token.mean()), per_token, degenerate)


def update_latent(latent: LatentGrid, noise: Grid2D, sigma_t: float) -> LatentGrid:
    """Euler update: latent - sigma_t * noise, with the step index advanced."""
    if noise.shape != latent.data.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latent {latent.data.shape}")
    data = latent.data.data - np.float32(sigma_t) * noise.data
    return LatentGrid(latent.side, latent.channels, Grid2D.from_array(data), latent.step + 1)


def combine_noise(noise_small: Grid2D, noise_large_masked: Grid2D, mask: Mask) -> Grid2D:
    """Small-model draft with the large model's rows written over the mask.

    Rows at mask indices are taken bit-for-bit from the large output, all
    other rows bit-for-bit from the small output.
    """
    if noise_large_masked.rows != len(mask):
        raise ValueError(
            f"combine_noise got {noise_large_masked.rows} large rows for a {len(mask)}-token mask"
        )
    return scatter_rows(noise_small, mask.indices, noise_large_masked)


def update_mask(per_token_diff, ratio: float) -> Mask:
    """Top-K tokens by change magnitude, K = max(1, round(ratio * tokens))."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"mask ratio must be in (0, 1], got {ratio}")
    diffs = np.asarray(per_token_diff)
    k = _mask_size(ratio, diffs.shape[0])
    return Mask(tuple(int(i) for i in topk_indices(diffs, k)), ratio)


def maybe_advance_stage(state: StitchState, diff: DiffResult, schedule: ThresholdSchedule) -> StitchState:
    """Advance by exactly one stage when d_t falls strictly below the current
    stage's threshold; the terminal stage never advances.

    Entering a masked stage builds that stage's mask from the current
    per-token diff; entering the final stage drops mask and KV cache.
    """
    final = schedule.final_stage
    if state.stage < final and diff.d_t < schedule.thresholds[state.stage]:
        state.stage += 1
        if state.stage < final:
            state.current_mask = update_mask(diff.per_token, schedule.mask_ratios[state.stage - 1])
        else:
            state.current_mask = None
            state.prev_kv = None
    return state


def _timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def run_generation(
    large: Denoiser,
    small: Denoiser,
    schedule: ThresholdSchedule,
    noise_seed: int,
    steps: int,
    variant: Variant | str = Variant.HYBRID,
    simulated_latency: tuple[float, float] | None = None,
) -> tuple[LatentGrid, list[StepTrace]]:
    """Run a full denoising trajectory and return the final latent plus traces.

    ``simulated_latency`` replaces measured wall times with the analytic
    per-step costs (L_l, L_l * mask_ratio, L_s) so latency accounting can be
    checked exactly; it does not change the numerics. ``naive-switch``
    collapses the masked stages: the first threshold sends the whole grid
    to the small model in one transition.
    """
    variant = Variant(variant)
    cfg_l, cfg_s = large.config, small.config
    if (cfg_l.tokens, cfg_l.channels) != (cfg_s.tokens, cfg_s.channels):
        raise ValueError(
            f"model grids differ: large {cfg_l.tokens}x{cfg_l.channels} vs "
            f"small {cfg_s.tokens}x{cfg_s.channels}"
        )
    if schedule.steps != steps:
        raise ValueError(f"sigma schedule has {schedule.steps} entries for {steps} steps")
    if variant is Variant.NAIVE_SWITCH:
        schedule = replace(schedule, thresholds=schedule.thresholds[:1], mask_ratios=())

    tokens, channels = cfg_l.tokens, cfg_l.channels
    n = schedule.masked_stages
    latent = LatentGrid(cfg_l.side, channels, gaussian(SeededRng(noise_seed), tokens, channels))
    state = StitchState(prev_latent=latent)
    staleness = np.zeros(tokens, dtype=np.int64)
    sim = simulated_latency
    traces: list[StepTrace] = []

    for t in range(steps):
        stage = state.stage
        wall_large = wall_small = 0.0
        staleness_max = 0
        mask_ratio = 0.0

        # Non-finite values are detected explicitly (Grid2D rejects them and
        # the abort below names the step), so numpy's overflow warnings
        # during a diverging step are redundant.
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                if variant is Variant.PURE_SMALL:
                    (noise, _), wall_small = _timed(small.forward_full, latent.data, t)
                elif stage == 0:
                    (noise, kv), wall_large = _timed(large.forward_full, latent.data, t)
                    state.prev_kv = kv
                    staleness[:] = 0
                elif stage <= n:
                    mask = state.current_mask
                    mask_ratio = mask.ratio
                    (noise_small, _), wall_small = _timed(small.forward_full, latent.data, t)
                    if variant is Variant.FULL_LARGE:
                        (noise_large, kv_full), wall_large = _timed(
                            large.forward_full, latent.data, t
                        )
                        large_rows = gather_rows(noise_large, mask.indices)
                        state.prev_kv = kv_full
                        staleness[:] = 0
                    else:
                        masked_latent = gather_rows(latent.data, mask.indices)
                        (large_rows, kv_fresh), wall_large = _timed(
                            large.forward_masked, masked_latent, mask.indices, state.prev_kv, t
                        )
                        state.prev_kv = refresh_kv_cache(state.prev_kv, kv_fresh, mask.indices)
                        staleness += 1
                        staleness[np.asarray(mask.indices, dtype=np.int64)] = 0
                    noise = combine_noise(noise_small, large_rows, mask)
                    staleness_max = int(staleness.max())
                else:
                    (noise, _), wall_small = _timed(small.forward_full, latent.data, t)
                latent = update_latent(latent, noise, schedule.sigma_schedule[t])
        except ValueError as exc:
            raise RuntimeError(f"non-finite values at step {t}: {exc}") from exc

        if sim:
            sim_large, sim_small = sim
            if variant is Variant.PURE_SMALL:
                wall_large, wall_small = 0.0, sim_small
            elif stage == 0:
                wall_large, wall_small = sim_large, 0.0
            elif stage <= n:
                wall_small = sim_small
                wall_large = sim_large if variant is Variant.FULL_LARGE else sim_large * mask_ratio
            else:
                wall_large, wall_small = 0.0, sim_small

        diff = diff_metric(state.prev_latent, latent)
        state.prev_latent = latent
        state.degenerate_tokens += diff.degenerate_tokens
        state.diff_history.append((t, diff.d_t, stage))
        traces.append(
            StepTrace(t, stage, diff.d_t, mask_ratio, wall_large, wall_small, staleness_max)
        )

        if variant not in (Variant.PURE_LARGE, Variant.PURE_SMALL):
            before = state.stage
            maybe_advance_stage(state, diff, schedule)
            entered = state.stage != before
            if 1 <= state.stage <= n and not entered and variant is not Variant.STATIC_MASK:
                state.current_mask = update_mask(diff.per_token, schedule.mask_ratios[state.stage - 1])

    return latent, traces


def _sig6(x: float) -> str:
    return f"{x:.6g}"


def write_trace_csv(traces: list[StepTrace], path) -> None:
    """Trace export: one row per step, wall times in milliseconds, floats
    at six significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER.split(","))
        for tr in traces:
            writer.writerow(
                [
                    tr.step,
                    tr.stage,
                    _sig6(tr.d_t),
                    _sig6(tr.mask_ratio),
                    _sig6(tr.wall_time_large * 1e3),
                    _sig6(tr.wall_time_small * 1e3),
                    tr.cache_staleness_max,
                ]
            )
