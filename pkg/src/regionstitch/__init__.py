"""Region-aware stitching of a large and a small denoiser.

A three-stage scheduler runs the large model alone first, then refines only
the hardest latent tokens with the large model (attention context completed
from the previous step's KV cache) while the small model drafts the full
grid, and finally hands the tail of the denoising steps to the small model.
Ships with toy seeded denoisers, an analytical latency model, empirical
studies and a CLI harness.
"""

from .analysis import (
    DiffHistogram,
    MaskLatencyStudy,
    QualityProxy,
    mask_latency_study,
    model_divergence_study,
    quality_proxy,
    switch_step_study,
)
from .costmodel import (
    CostBreakdown,
    CostModelParams,
    TraceValidationReport,
    feasible_mask_bound,
    predict,
    validate_trace,
)
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    LayerKV,
    PRESETS,
    build_denoiser,
    preset_config,
    refresh_kv_cache,
)
from .grid import (
    Grid2D,
    SeededRng,
    gaussian,
    matmul,
    read_sgrd,
    softmax_rows,
    topk_indices,
    write_sgrd,
)
from .scheduler import (
    LatentGrid,
    Mask,
    StepTrace,
    StitchState,
    ThresholdSchedule,
    Variant,
    combine_noise,
    diff_metric,
    maybe_advance_stage,
    run_generation,
    uniform_sigma_schedule,
    update_latent,
    update_mask,
    write_trace_csv,
)

__version__ = "0.1.0"
