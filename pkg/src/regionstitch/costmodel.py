"""Analytical latency model for hybrid large/small denoising runs.

With per-step latencies L_l > L_s, total steps T, switch steps
T_1 < ... < T_{n+1} and mask ratios M_1 > ... > M_n, the large model costs

    sum_{i=1..n+1} (T_i - T_{i-1}) * L_l * M_{i-1}        (T_0 = 0, M_0 = 1)

and the small model, active from the first switch onward, costs
L_s * (T - T_1). A masked step only beats a pure large step when
L_l * M + L_s < L_l, i.e. M < 1 - L_s/L_l; schedules are checked against
that bound. ``validate_trace`` closes the loop against measured step
traces.
"""

from __future__ import annotations

from dataclasses import dataclass

from .scheduler import StepTrace

__all__ = [
    "CostModelParams",
    "CostBreakdown",
    "TraceValidationReport",
    "predict",
    "feasible_mask_bound",
    "observed_switch_steps",
    "validate_trace",
]


def feasible_mask_bound(latency_large: float, latency_small: float) -> float:
    """Largest useful mask ratio, 1 - L_s/L_l; above it a masked step costs
    more than running the large model outright."""
    if latency_large <= 0 or latency_small <= 0:
        raise ValueError("per-step latencies must be positive")
    if latency_small >= latency_large:
        raise ValueError(
            f"small-model latency {latency_small} must be below large-model latency {latency_large}"
        )
    return 1.0 - latency_small / latency_large


@dataclass(frozen=True)
class CostModelParams:
    """Inputs to the latency model; ``switch_steps`` holds T_1..T_{n+1}.

    ``enforce_benefit=False`` relaxes the mask constraints (ratios may be 1
    and only non-increasing) for costing ablations that deliberately waste
    compute, e.g. full-image large-model runs.
    """

    latency_large: float
    latency_small: float
    total_steps: int
    switch_steps: tuple[int, ...]
    mask_ratios: tuple[float, ...]
    enforce_benefit: bool = True

    def __post_init__(self):
        object.__setattr__(self, "switch_steps", tuple(int(s) for s in self.switch_steps))
        object.__setattr__(self, "mask_ratios", tuple(float(m) for m in self.mask_ratios))
        feasible_mask_bound(self.latency_large, self.latency_small)  # validates 0 < L_s < L_l
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if len(self.switch_steps) != len(self.mask_ratios) + 1:
            raise ValueError(
                f"switch_steps must number mask_ratios + 1, got {len(self.switch_steps)} "
                f"for {len(self.mask_ratios)} ratios"
            )
        prev = 0
        for s in self.switch_steps:
            if s <= prev:
                raise ValueError(f"switch steps must be strictly increasing from 1, got {self.switch_steps}")
            prev = s
        if self.switch_steps[-1] > self.total_steps:
            raise ValueError(
                f"last switch step {self.switch_steps[-1]} exceeds total steps {self.total_steps}"
            )
        hi = 1.0 if not self.enforce_benefit else None
        for m in self.mask_ratios:
            if not (0.0 < m < 1.0 or (hi is not None and m == hi)):
                raise ValueError(f"mask ratios must be in (0, 1), got {m}")
        pairs = zip(self.mask_ratios[:-1], self.mask_ratios[1:])
        if self.enforce_benefit:
            if any(b >= a for a, b in pairs):
                raise ValueError(f"mask ratios must be strictly decreasing, got {self.mask_ratios}")
            if self.mask_ratios:
                bound = feasible_mask_bound(self.latency_large, self.latency_small)
                if self.mask_ratios[0] >= bound:
                    raise ValueError(
                        f"first mask ratio {self.mask_ratios[0]} must stay below the benefit "
                        f"bound {bound:.6g} (1 - L_s/L_l)"
                    )
        else:
            if any(b > a for a, b in pairs):
                raise ValueError(f"mask ratios must be non-increasing, got {self.mask_ratios}")

    @property
    def masked_stages(self) -> int:
        return len(self.mask_ratios)


@dataclass(frozen=True)
class CostBreakdown:
    hybrid_large: float
    hybrid_small: float
    total: float
    savings: float
    speedup_vs_large: float


def predict(params: CostModelParams) -> CostBreakdown:
    """Evaluate the latency model for one parameter set."""
    boundaries = (0,) + params.switch_steps
    ratios = (1.0,) + params.mask_ratios
    hybrid_large = sum(
        (boundaries[i] - boundaries[i - 1]) * params.latency_large * ratios[i - 1]
        for i in range(1, len(boundaries))
    )
    hybrid_small = params.latency_small * (params.total_steps - params.switch_steps[0])
    total = hybrid_large + hybrid_small
    pure_large = params.latency_large * params.total_steps
    return CostBreakdown(
        hybrid_large=hybrid_large,
        hybrid_small=hybrid_small,
        total=total,
        savings=pure_large - total,
        speedup_vs_large=pure_large / total,
    )


@dataclass(frozen=True)
class TraceValidationReport:
    status: str  # "pass" | "fail" | "rejected"
    reason: str
    tolerance: float
    measured_total: float
    predicted_total: float
    rel_error: float
    stages: tuple[tuple[str, float, float, float], ...]  # (label, measured, predicted, rel_error)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_text(self) -> str:
        lines = [f"status={self.status}"]
        if self.reason:
            lines.append(f"reason={self.reason}")
        lines += [
            f"tolerance={self.tolerance:.6g}",
            f"measured_total_s={self.measured_total:.9g}",
            f"predicted_total_s={self.predicted_total:.9g}",
            f"rel_error={self.rel_error:.9g}",
        ]
        for label, measured, predicted, err in self.stages:
            lines.append(f"{label}_measured_s={measured:.9g}")
            lines.append(f"{label}_predicted_s={predicted:.9g}")
            lines.append(f"{label}_rel_error={err:.9g}")
        return "\n".join(lines) + "\n"


def _rejected(reason: str, tolerance: float) -> TraceValidationReport:
    return TraceValidationReport("rejected", reason, tolerance, 0.0, 0.0, 0.0, ())


def _rel_error(measured: float, predicted: float) -> float:
    if measured == 0.0 and predicted == 0.0:
        return 0.0
    base = measured if measured != 0.0 else predicted
    return abs(measured - predicted) / abs(base)


def observed_switch_steps(traces: list[StepTrace], masked_stages: int) -> tuple[int, ...]:
    """T_i = number of steps executed in stages below i, for i = 1..n+1."""
    stages = [tr.stage for tr in traces]
    return tuple(sum(1 for s in stages if s < i) for i in range(1, masked_stages + 2))


def validate_trace(
    traces: list[StepTrace], params: CostModelParams, tolerance: float
) -> TraceValidationReport:
    """Compare measured per-step wall times against the model's prediction.

    The trace's stage structure must match ``params`` (same step count,
    stages advancing by at most one, observed switch steps equal to
    ``params.switch_steps``); otherwise the report is rejected outright.
    Relative errors are measured-baseline.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    if len(traces) != params.total_steps:
        return _rejected(
            f"trace has {len(traces)} steps but params expect {params.total_steps}", tolerance
        )
    stages = [tr.stage for tr in traces]
    if any(b < a or b > a + 1 for a, b in zip(stages, stages[1:])):
        return _rejected("stage sequence is not non-decreasing with unit increments", tolerance)
    if stages and (stages[0] != 0 or stages[-1] > params.masked_stages + 1):
        return _rejected("stage sequence out of range for the parameter set", tolerance)
    observed = observed_switch_steps(traces, params.masked_stages)
    if observed != params.switch_steps:
        return _rejected(
            f"observed switch steps {observed} do not match params {params.switch_steps}", tolerance
        )

    boundaries = (0,) + params.switch_steps + (params.total_steps,)
    measured_total = sum(tr.wall_time_large + tr.wall_time_small for tr in traces)
    predicted_total = predict(params).total

    stage_rows = []
    for stage in range(params.masked_stages + 2):
        lo, hi = boundaries[stage], boundaries[stage + 1]
        measured = sum(
            tr.wall_time_large + tr.wall_time_small for tr in traces[lo:hi]
        )
        if stage == 0:
            predicted = (hi - lo) * params.latency_large
        elif stage <= params.masked_stages:
            predicted = (hi - lo) * (
                params.latency_large * params.mask_ratios[stage - 1] + params.latency_small
            )
        else:
            predicted = (hi - lo) * params.latency_small
        stage_rows.append((f"stage{stage}", measured, predicted, _rel_error(measured, predicted)))

    rel = _rel_error(measured_total, predicted_total)
    status = "pass" if rel <= tolerance else "fail"
    return TraceValidationReport(
        status, "", tolerance, measured_total, predicted_total, rel, tuple(stage_rows)
    )
