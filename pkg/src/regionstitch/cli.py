"""Command-line entry point: build models from a JSON config, run
generations, studies and latency-model validation, and write traces,
latent dumps and reports under the configured output directory.

Exit codes:
    0  requested run completed, all enabled validations passed
    2  config problem (parse error, unknown key, constraint violation, bad flag)
    3  generation failure (model mismatch, non-finite latent)
    4  latency-model validation failed (tolerance exceeded or trace rejected)
    5  study failure
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .analysis import (
    NEAR_ZERO_CUTOFF,
    divergence_to_csv,
    mask_latency_study,
    mask_latency_to_csv,
    model_divergence_study,
    switch_step_study,
    switch_steps_to_csv,
    write_gnuplot_dat,
)
from .costmodel import CostModelParams, feasible_mask_bound, observed_switch_steps, validate_trace
from .denoiser import DenoiserConfig, build_denoiser, preset_config
from .grid import write_sgrd
from .scheduler import (
    StepTrace,
    ThresholdSchedule,
    Variant,
    run_generation,
    uniform_sigma_schedule,
    write_trace_csv,
)

__all__ = ["RunConfig", "ConfigError", "load_config", "dump_config", "main"]


class ConfigError(ValueError):
    pass


_MODEL_KEYS_PRESET = {"preset", "tokens", "channels", "weight_seed"}
_MODEL_KEYS_FULL = {"layers", "heads", "model_dim", "tokens", "channels", "weight_seed", "preset_name"}
_TOP_KEYS = {
    "large",
    "small",
    "steps",
    "thresholds",
    "mask_ratios",
    "sigma_schedule",
    "variant",
    "noise_seed",
    "noise_seeds",
    "output_dir",
    "simulated_latency",
    "sim_latency_large",
    "sim_latency_small",
    "workers",
}


@dataclass(frozen=True)
class RunConfig:
    large: DenoiserConfig
    small: DenoiserConfig
    steps: int
    thresholds: tuple[float, ...]
    mask_ratios: tuple[float, ...]
    sigma_schedule: tuple[float, ...]
    variant: Variant
    noise_seed: int
    noise_seeds: tuple[int, ...]
    output_dir: str
    simulated_latency: bool
    sim_latency_large: float | None
    sim_latency_small: float | None
    workers: int

    def build_schedule(self) -> ThresholdSchedule:
        bound = None
        if self.sim_latency_large is not None and self.sim_latency_small is not None:
            bound = feasible_mask_bound(self.sim_latency_large, self.sim_latency_small)
        return ThresholdSchedule(self.thresholds, self.mask_ratios, self.sigma_schedule, bound)

    def simulated_pair(self) -> tuple[float, float] | None:
        if not self.simulated_latency:
            return None
        return (self.sim_latency_large, self.sim_latency_small)


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise ConfigError(f"missing key '{key}' in {where}")
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"key '{key}' in {where} must be {kind.__name__}, got {type(value).__name__}")
    return value


def _number_list(obj: dict, key: str, where: str, default=None) -> tuple[float, ...]:
    if key not in obj:
        if default is not None:
            return default
        raise ConfigError(f"missing key '{key}' in {where}")
    value = obj[key]
    if not isinstance(value, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in value):
        raise ConfigError(f"key '{key}' in {where} must be a list of numbers")
    return tuple(float(x) for x in value)


def _parse_model(obj, which: str) -> DenoiserConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"key '{which}' must be an object")
    keys = set(obj)
    try:
        if "preset" in keys:
            unknown = keys - _MODEL_KEYS_PRESET
            if unknown:
                raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in '{which}'")
            return preset_config(
                _require(obj, "preset", str, which),
                _require(obj, "tokens", int, which),
                _require(obj, "channels", int, which),
                _require(obj, "weight_seed", int, which),
            )
        unknown = keys - _MODEL_KEYS_FULL
        if unknown:
            raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in '{which}'")
        return DenoiserConfig(
            layers=_require(obj, "layers", int, which),
            heads=_require(obj, "heads", int, which),
            model_dim=_require(obj, "model_dim", int, which),
            tokens=_require(obj, "tokens", int, which),
            channels=_require(obj, "channels", int, which),
            weight_seed=_require(obj, "weight_seed", int, which),
            preset_name=obj.get("preset_name", "custom"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid '{which}' model config: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse and fully validate a JSON run config; unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in config")

    large = _parse_model(raw.get("large"), "large")
    small = _parse_model(raw.get("small"), "small")
    if (large.tokens, large.channels) != (small.tokens, small.channels):
        raise ConfigError(
            f"large and small models must share the latent grid: "
            f"{large.tokens}x{large.channels} vs {small.tokens}x{small.channels}"
        )

    steps = _require(raw, "steps", int, "config")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    thresholds = _number_list(raw, "thresholds", "config")
    mask_ratios = _number_list(raw, "mask_ratios", "config")
    sigma = _number_list(raw, "sigma_schedule", "config", default=uniform_sigma_schedule(steps))
    if len(sigma) != steps:
        raise ConfigError(f"sigma_schedule has {len(sigma)} entries for {steps} steps")

    variant_name = _require(raw, "variant", str, "config")
    try:
        variant = Variant(variant_name)
    except ValueError:
        raise ConfigError(
            f"unknown variant '{variant_name}' (have: {', '.join(v.value for v in Variant)})"
        ) from None

    noise_seed = raw.get("noise_seed", 0)
    if isinstance(noise_seed, bool) or not isinstance(noise_seed, int):
        raise ConfigError("noise_seed must be an integer")
    seeds_raw = raw.get("noise_seeds", [noise_seed])
    if not isinstance(seeds_raw, list) or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds_raw):
        raise ConfigError("noise_seeds must be a list of integers")

    simulated = raw.get("simulated_latency", False)
    if not isinstance(simulated, bool):
        raise ConfigError("simulated_latency must be a boolean")
    sim_large = raw.get("sim_latency_large")
    sim_small = raw.get("sim_latency_small")
    for name, value in (("sim_latency_large", sim_large), ("sim_latency_small", sim_small)):
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{name} must be a number or null")
    if simulated and (sim_large is None or sim_small is None):
        raise ConfigError("simulated_latency requires sim_latency_large and sim_latency_small")
    if (sim_large is None) != (sim_small is None):
        raise ConfigError("sim_latency_large and sim_latency_small must be given together")

    workers = raw.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers must be an integer >= 1")

    cfg = RunConfig(
        large=large,
        small=small,
        steps=steps,
        thresholds=thresholds,
        mask_ratios=mask_ratios,
        sigma_schedule=sigma,
        variant=variant,
        noise_seed=noise_seed,
        noise_seeds=tuple(seeds_raw),
        output_dir=_require(raw, "output_dir", str, "config"),
        simulated_latency=simulated,
        sim_latency_large=float(sim_large) if sim_large is not None else None,
        sim_latency_small=float(sim_small) if sim_small is not None else None,
        workers=workers,
    )
    try:
        cfg.build_schedule()
    except ValueError as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc
    return cfg


def _model_dict(cfg: DenoiserConfig) -> dict:
    return {
        "layers": cfg.layers,
        "heads": cfg.heads,
        "model_dim": cfg.model_dim,
        "tokens": cfg.tokens,
        "channels": cfg.channels,
        "weight_seed": cfg.weight_seed,
        "preset_name": cfg.preset_name,
    }


def dump_config(cfg: RunConfig) -> str:
    """Canonical JSON for the effective config: all keys present, sorted,
    two-space indent, trailing newline. Dumping a dumped config is stable."""
    doc = {
        "large": _model_dict(cfg.large),
        "small": _model_dict(cfg.small),
        "steps": cfg.steps,
        "thresholds": list(cfg.thresholds),
        "mask_ratios": list(cfg.mask_ratios),
        "sigma_schedule": list(cfg.sigma_schedule),
        "variant": cfg.variant.value,
        "noise_seed": cfg.noise_seed,
        "noise_seeds": list(cfg.noise_seeds),
        "output_dir": cfg.output_dir,
        "simulated_latency": cfg.simulated_latency,
        "sim_latency_large": cfg.sim_latency_large,
        "sim_latency_small": cfg.sim_latency_small,
        "workers": cfg.workers,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if getattr(args, "variant", None):
        try:
            updates["variant"] = Variant(args.variant)
        except ValueError:
            raise ConfigError(f"unknown variant '{args.variant}'") from None
    if getattr(args, "seed", None) is not None:
        updates["noise_seed"] = args.seed
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    if getattr(args, "simulated_latency", False):
        updates["simulated_latency"] = True
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError("workers must be >= 1")
        updates["workers"] = args.workers
    cfg = dataclasses.replace(cfg, **updates) if updates else cfg
    if cfg.simulated_latency and (cfg.sim_latency_large is None or cfg.sim_latency_small is None):
        raise ConfigError("simulated_latency requires sim_latency_large and sim_latency_small")
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _total_wall(traces: list[StepTrace]) -> float:
    return sum(tr.wall_time_large + tr.wall_time_small for tr in traces)


def _run(cfg: RunConfig, variant: Variant, seed: int):
    large = build_denoiser(cfg.large)
    small = build_denoiser(cfg.small)
    return run_generation(
        large, small, cfg.build_schedule(), seed, cfg.steps, variant, cfg.simulated_pair()
    )


def cmd_generate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    tag = f"{cfg.variant.value}_seed{cfg.noise_seed}"
    final, traces = _run(cfg, cfg.variant, cfg.noise_seed)
    write_sgrd(final.data, out / f"latent_{tag}.sgrd")
    write_trace_csv(traces, out / f"trace_{tag}.csv")

    total = _total_wall(traces)
    if cfg.variant is Variant.PURE_LARGE:
        ref_total = total
    else:
        _, ref_traces = _run(cfg, Variant.PURE_LARGE, cfg.noise_seed)
        ref_total = _total_wall(ref_traces)
    switch_steps = [
        str(i) for i in range(1, len(traces)) if traces[i].stage > traces[i - 1].stage
    ]
    summary = "\n".join(
        [
            f"variant={cfg.variant.value}",
            f"noise_seed={cfg.noise_seed}",
            f"steps={cfg.steps}",
            f"final_stage={traces[-1].stage}",
            f"switch_steps={','.join(switch_steps) if switch_steps else 'none'}",
            f"total_wall_s={total:.6g}",
            f"reference_pure_large_wall_s={ref_total:.6g}",
            f"speedup_vs_pure_large={(ref_total / total) if total else 0.0:.6g}",
        ]
    )
    (out / f"summary_{tag}.txt").write_text(summary + "\n")
    print(summary)
    return 0


def _calibrate_latencies(cfg: RunConfig, reps: int = 5, warmup: int = 2) -> tuple[float, float]:
    """Mean wall seconds per full forward for each model (used when the run
    is not in simulated-latency mode)."""
    import time as _time

    from .grid import SeededRng, gaussian

    out = []
    for model_cfg in (cfg.large, cfg.small):
        model = build_denoiser(model_cfg)
        latent = gaussian(SeededRng(cfg.noise_seed), model_cfg.tokens, model_cfg.channels)
        for _ in range(warmup):
            model.forward_full(latent, 0)
        t0 = _time.perf_counter()
        for _ in range(reps):
            model.forward_full(latent, 0)
        out.append((_time.perf_counter() - t0) / reps)
    return out[0], out[1]


def derive_cost_params(
    traces: list[StepTrace],
    mask_ratios: tuple[float, ...],
    latency_large: float,
    latency_small: float,
) -> CostModelParams:
    """Cost-model parameters describing an executed trace: switch steps come
    from the observed stage transitions; unreached stages are dropped (a run
    that ends while still masked is modeled with its last switch at T)."""
    max_stage = max(tr.stage for tr in traces)
    n_eff = min(max_stage, len(mask_ratios))
    return CostModelParams(
        latency_large=latency_large,
        latency_small=latency_small,
        total_steps=len(traces),
        switch_steps=observed_switch_steps(traces, n_eff),
        mask_ratios=mask_ratios[:n_eff],
        enforce_benefit=False,
    )


def cmd_validate(cfg: RunConfig, tolerance: float) -> int:
    if cfg.variant is Variant.PURE_SMALL:
        raise ConfigError("validate models large-first runs; variant pure-small has no large stage")
    out = _out_dir(cfg)
    _, traces = _run(cfg, cfg.variant, cfg.noise_seed)
    if cfg.simulated_latency:
        latency_large, latency_small = cfg.sim_latency_large, cfg.sim_latency_small
    else:
        latency_large, latency_small = _calibrate_latencies(cfg)
    try:
        params = derive_cost_params(traces, cfg.mask_ratios, latency_large, latency_small)
    except ValueError as exc:
        report_text = f"status=rejected\nreason={exc}\n"
        (out / "validation_report.txt").write_text(report_text)
        print(report_text, end="")
        return 4
    report = validate_trace(traces, params, tolerance)
    (out / "validation_report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0 if report.passed else 4


def cmd_study(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    large = build_denoiser(cfg.large)
    small = build_denoiser(cfg.small)
    seeds = list(cfg.noise_seeds)

    if args.study == "divergence":
        if args.probe_steps:
            probes = [int(x) for x in args.probe_steps.split(",")]
        else:
            probes = sorted({0, cfg.steps // 2, cfg.steps - 1})
        hists = model_divergence_study(
            large,
            small,
            seeds,
            probes,
            cfg.steps,
            cfg.sigma_schedule,
            near_zero_cutoff=args.near_zero,
            workers=cfg.workers,
        )
        divergence_to_csv(hists, out / "divergence.csv")
        if args.gnuplot:
            rows = [
                (h.step, lo, hi, c)
                for h in hists
                for lo, hi, c in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts)
            ]
            write_gnuplot_dat(rows, out / "divergence.dat", "step bin_lo bin_hi count")
        for h in hists:
            print(f"step={h.step} fraction_near_zero={h.fraction_near_zero:.6g}")
        return 0

    if args.study == "switch-steps":
        variant_names = (args.variants or "hybrid,naive-switch").split(",")
        results = switch_step_study(
            large,
            small,
            cfg.build_schedule(),
            variant_names,
            seeds,
            cfg.steps,
            cfg.simulated_pair(),
            workers=cfg.workers,
        )
        switch_steps_to_csv(results, out / "switch_steps.csv")
        if args.gnuplot:
            rows = [
                (name, row.seed) + row.switch_steps
                for name, rows_ in results.items()
                for row in rows_
                if row.switch_steps is not None
            ]
            write_gnuplot_dat(rows, out / "switch_steps.dat", "variant seed switch_steps...")
        failures = [r for rows_ in results.values() for r in rows_ if r.error]
        for name, rows_ in results.items():
            firsts = [r.switch_steps[0] for r in rows_ if r.switch_steps]
            print(f"variant={name} seeds={len(rows_)} first_switch_min={min(firsts) if firsts else 'none'}")
        return 5 if len(failures) == len(seeds) * len(variant_names) else 0

    if args.study == "mask-latency":
        ratios = [float(x) for x in (args.ratios or "0.1,0.2,0.3,0.4").split(",")]
        study = mask_latency_study(large, ratios, args.runs, noise_seed=cfg.noise_seed)
        mask_latency_to_csv(study, out / "mask_latency.csv")
        if args.gnuplot:
            rows = [(e.mask_ratio, e.mean_s * 1e3, e.median_s * 1e3) for e in study.entries]
            rows.append((1.0, study.full_mean_s * 1e3, study.full_median_s * 1e3))
            write_gnuplot_dat(rows, out / "mask_latency.dat", "mask_ratio mean_ms median_ms")
        for e in study.entries:
            print(f"mask_ratio={e.mask_ratio:.6g} mean_ms={e.mean_s * 1e3:.6g}")
        print(f"full_forward mean_ms={study.full_mean_s * 1e3:.6g}")
        return 0

    raise ConfigError(f"unknown study '{args.study}'")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionstitch",
        description="Region-aware large/small denoiser stitching: generations, studies, latency-model validation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to JSON run config")
        p.add_argument("--variant", help="override config variant")
        p.add_argument("--seed", type=int, help="override config noise_seed")
        p.add_argument("--out", help="override config output_dir")
        p.add_argument("--workers", type=int, help="override config workers")
        p.add_argument(
            "--simulated-latency",
            action="store_true",
            help="force simulated per-step latencies from the config's sim values",
        )

    common(sub.add_parser("generate", help="run one generation; write latent, trace and summary"))

    study = sub.add_parser("study", help="run one of the analysis studies")
    common(study)
    study.add_argument(
        "--study", required=True, choices=["divergence", "switch-steps", "mask-latency"]
    )
    study.add_argument("--probe-steps", help="divergence: comma-separated step indices")
    study.add_argument(
        "--near-zero",
        type=float,
        default=NEAR_ZERO_CUTOFF,
        help="divergence: relative cutoff below which a token counts as near zero",
    )
    study.add_argument("--variants", help="switch-steps: comma-separated variant names")
    study.add_argument("--ratios", help="mask-latency: comma-separated mask ratios")
    study.add_argument("--runs", type=int, default=50, help="mask-latency: timed runs per ratio")
    study.add_argument("--gnuplot", action="store_true", help="also write gnuplot .dat files")

    val = sub.add_parser("validate", help="check measured trace against the latency model")
    common(val)
    val.add_argument("--tolerance", type=float, default=0.25, help="relative error budget")

    dump = sub.add_parser("dump-config", help="print the effective config as canonical JSON")
    dump.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        cfg = load_config(args.config)
        if args.command != "dump-config":
            cfg = _apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "dump-config":
            sys.stdout.write(dump_config(cfg))
            return 0
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "validate":
            return cmd_validate(cfg, args.tolerance)
        if args.command == "study":
            return cmd_study(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError) as exc:
        if args.command == "study":
            print(f"study failed: {exc}", file=sys.stderr)
            return 5
        print(f"run failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
