"""Empirical studies over the toy denoisers: where do a large and a small
model actually disagree, when do runs switch stages, and what does masked
refinement cost.

All studies are deterministic given their seed lists. Seed fan-out across
processes is supported for the non-timing studies; aggregation always
happens in seed order.
"""

from __future__ import annotations

import csv
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .grid import Grid2D, SeededRng, gaussian, topk_indices
from .scheduler import (
    LatentGrid,
    Mask,
    StepTrace,
    ThresholdSchedule,
    Variant,
    diff_metric,
    run_generation,
    update_latent,
    uniform_sigma_schedule,
)

__all__ = [
    "DiffHistogram",
    "QualityProxy",
    "SeedSwitches",
    "MaskLatencyEntry",
    "MaskLatencyStudy",
    "model_divergence_study",
    "switch_step_study",
    "mask_latency_study",
    "quality_proxy",
    "divergence_to_csv",
    "switch_steps_to_csv",
    "mask_latency_to_csv",
    "write_gnuplot_dat",
]

NEAR_ZERO_CUTOFF = 1e-3  # relative; reported with every histogram


@dataclass(frozen=True)
class DiffHistogram:
    """Distribution of per-token large/small prediction differences at one step.

    Bins cover [0, hi] contiguously with hi >= the largest observed value;
    counts sum to the number of token samples pooled into the histogram
    (tokens x seeds). ``fraction_near_zero`` is the share of samples below
    the near-zero cutoff.
    """

    step: int
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]
    fraction_near_zero: float
    near_zero_cutoff: float = NEAR_ZERO_CUTOFF


@dataclass(frozen=True)
class QualityProxy:
    """How far a final latent drifted from the pure-large reference."""

    rel_l1_vs_large: float
    max_abs_dev: float


def _divergence_one_seed(
    config_large: DenoiserConfig,
    config_small: DenoiserConfig,
    seed: int,
    steps: int,
    sigma_schedule: tuple[float, ...],
) -> dict[int, np.ndarray]:
    """Run the motivation protocol for one seed; per-token diffs per step.

    Both models see the same input every step; the large model's output
    drives the next step for both.
    """
    large = build_denoiser(config_large)
    small = build_denoiser(config_small)
    tokens, channels = config_large.tokens, config_large.channels
    latent = LatentGrid(config_large.side, channels, gaussian(SeededRng(seed), tokens, channels))
    diffs: dict[int, np.ndarray] = {}
    for t in range(steps):
        noise_large, _ = large.forward_full(latent.data, t)
        noise_small, _ = small.forward_full(latent.data, t)
        diffs[t] = diff_metric(noise_large, noise_small).per_token
        latent = update_latent(latent, noise_large, sigma_schedule[t])
    return diffs


def model_divergence_study(
    large: Denoiser,
    small: Denoiser,
    seeds: list[int],
    probe_steps: list[int],
    steps: int,
    sigma_schedule: tuple[float, ...] | None = None,
    bins: int = 20,
    near_zero_cutoff: float = NEAR_ZERO_CUTOFF,
    workers: int = 1,
) -> list[DiffHistogram]:
    """Per-token prediction differences between the two models, pooled over
    seeds, histogrammed at each probe step."""
    if (large.config.tokens, large.config.channels) != (small.config.tokens, small.config.channels):
        raise ValueError("models must share token and channel dimensions")
    if sigma_schedule is None:
        sigma_schedule = uniform_sigma_schedule(steps)
    bad = [p for p in probe_steps if not 0 <= p < steps]
    if bad:
        raise ValueError(f"probe steps {bad} outside [0, {steps})")

    args = [(large.config, small.config, seed, steps, tuple(sigma_schedule)) for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_divergence_one_seed, *zip(*args)))
    else:
        per_seed = [_divergence_one_seed(*a) for a in args]

    out = []
    for p in probe_steps:
        values = np.concatenate([d[p] for d in per_seed])
        hi = max(float(values.max()), near_zero_cutoff)
        edges = np.linspace(0.0, hi, bins + 1)
        counts, _ = np.histogram(values, bins=edges)
        out.append(
            DiffHistogram(
                step=p,
                bin_edges=tuple(float(e) for e in edges),
                counts=tuple(int(c) for c in counts),
                fraction_near_zero=float((values < near_zero_cutoff).mean()),
                near_zero_cutoff=near_zero_cutoff,
            )
        )
    return out


@dataclass(frozen=True)
class SeedSwitches:
    seed: int
    switch_steps: tuple[int, ...] | None
    error: str | None = None


def _transition_steps(traces: list[StepTrace]) -> tuple[int, ...]:
    stages = [tr.stage for tr in traces]
    return tuple(i for i in range(1, len(stages)) if stages[i] > stages[i - 1])


def _switch_one_seed(
    config_large: DenoiserConfig,
    config_small: DenoiserConfig,
    schedule: ThresholdSchedule,
    variant: str,
    seed: int,
    steps: int,
    simulated_latency: tuple[float, float] | None,
) -> SeedSwitches:
    try:
        _, traces = run_generation(
            build_denoiser(config_large),
            build_denoiser(config_small),
            schedule,
            seed,
            steps,
            variant,
            simulated_latency,
        )
        return SeedSwitches(seed, _transition_steps(traces))
    except Exception as exc:  # per-seed failures are data, not fatal
        return SeedSwitches(seed, None, f"{type(exc).__name__}: {exc}")


def switch_step_study(
    large: Denoiser,
    small: Denoiser,
    schedule: ThresholdSchedule,
    variants: list[Variant | str],
    seeds: list[int],
    steps: int,
    simulated_latency: tuple[float, float] | None = None,
    workers: int = 1,
) -> dict[str, list[SeedSwitches]]:
    """Stage-transition step indices per seed for each variant."""
    results: dict[str, list[SeedSwitches]] = {}
    for variant in variants:
        name = Variant(variant).value
        args = [
            (large.config, small.config, schedule, name, seed, steps, simulated_latency)
            for seed in seeds
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results[name] = list(pool.map(_switch_one_seed, *zip(*args)))
        else:
            results[name] = [_switch_one_seed(*a) for a in args]
    return results


@dataclass(frozen=True)
class MaskLatencyEntry:
    mask_ratio: float
    mean_s: float
    median_s: float


@dataclass(frozen=True)
class MaskLatencyStudy:
    entries: tuple[MaskLatencyEntry, ...]
    full_mean_s: float
    full_median_s: float
    runs: int


def mask_latency_study(
    large: Denoiser,
    mask_ratios: list[float],
    runs: int,
    warmup: int = 5,
    noise_seed: int = 0,
) -> MaskLatencyStudy:
    """Wall time of the masked forward per mask ratio, against the full forward.

    Timing is sequential on a monotonic clock; ``warmup`` iterations are
    discarded before each series. The mask for each ratio is a seeded
    random-but-fixed token subset so gather patterns are representative.
    """
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    cfg = large.config
    rng = SeededRng(noise_seed)
    latent = gaussian(rng, cfg.tokens, cfg.channels)
    scores = gaussian(rng, 1, cfg.tokens).data[0]
    _, prev_kv = large.forward_full(latent, 0)

    def series(fn) -> tuple[float, float]:
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(runs):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        return statistics.fmean(samples), statistics.median(samples)

    entries = []
    for ratio in mask_ratios:
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"mask ratio must be in (0, 1], got {ratio}")
        k = max(1, int(np.floor(ratio * cfg.tokens + 0.5)))
        mask = Mask(tuple(int(i) for i in topk_indices(scores, k)), ratio)
        rows = Grid2D.from_array(latent.data[np.asarray(mask.indices)])
        mean, median = series(lambda: large.forward_masked(rows, mask.indices, prev_kv, 1))
        entries.append(MaskLatencyEntry(ratio, mean, median))

    full_mean, full_median = series(lambda: large.forward_full(latent, 1))
    return MaskLatencyStudy(tuple(entries), full_mean, full_median, runs)


def quality_proxy(final_hybrid: LatentGrid, final_pure_large: LatentGrid) -> QualityProxy:
    """Mean per-token relative L1 (pure-large as reference) and max abs deviation."""
    if final_hybrid.data.shape != final_pure_large.data.shape:
        raise ValueError(
            f"latent shapes differ: {final_hybrid.data.shape} vs {final_pure_large.data.shape}"
        )
    rel = diff_metric(final_pure_large, final_hybrid).d_t
    max_abs = float(np.abs(final_hybrid.data.data - final_pure_large.data.data).max())
    return QualityProxy(rel, max_abs)


def divergence_to_csv(histograms: list[DiffHistogram], path) -> None:
    """Header: step,bin_lo,bin_hi,count,fraction_near_zero (fraction repeats
    on every row of its step)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "bin_lo", "bin_hi", "count", "fraction_near_zero"])
        for hist in histograms:
            for lo, hi, count in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
                writer.writerow(
                    [hist.step, f"{lo:.6g}", f"{hi:.6g}", count, f"{hist.fraction_near_zero:.6g}"]
                )


def switch_steps_to_csv(results: dict[str, list[SeedSwitches]], path) -> None:
    """Header: variant,seed,transition,step — long format, one row per
    observed transition; failed seeds appear with transition='error'."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "transition", "step"])
        for variant, rows in results.items():
            for row in rows:
                if row.error is not None:
                    writer.writerow([variant, row.seed, "error", row.error])
                    continue
                for i, step in enumerate(row.switch_steps, start=1):
                    writer.writerow([variant, row.seed, i, step])


def mask_latency_to_csv(study: MaskLatencyStudy, path) -> None:
    """Header: kind,mask_ratio,mean_ms,median_ms; the full forward appears
    as kind=full."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "mask_ratio", "mean_ms", "median_ms"])
        for entry in study.entries:
            writer.writerow(
                ["masked", f"{entry.mask_ratio:.6g}", f"{entry.mean_s * 1e3:.6g}", f"{entry.median_s * 1e3:.6g}"]
            )
        writer.writerow(["full", "1", f"{study.full_mean_s * 1e3:.6g}", f"{study.full_median_s * 1e3:.6g}"])


def write_gnuplot_dat(rows: list[tuple], path, comment: str = "") -> None:
    """Space-separated data file with a leading '#' comment header."""
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for row in rows:
            fh.write(" ".join(str(x) for x in row) + "\n")
