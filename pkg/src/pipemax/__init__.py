"""Pipeline-parallel LLM decode simulation with KV-cache offloading.

The package splits into closed-form models (`model_core`), the
prefetch-aware scheduler (`scheduler`), the CPU-GPU transfer model
(`transfer`), the event-driven simulator (`pipeline_sim`), workload
generation (`workload`), and independent cross-check oracles (`oracle`).
"""

from .model_core import (
    CalibrationWarning,
    ClusterConfig,
    DegenerateSamples,
    EstimatorParams,
    NoKvHeadroom,
    PrefillInstance,
    Request,
    calibrate_estimator,
    estimate_decode_time,
    kv_footprint,
    per_batch_token_budget,
    prefill_makespan_closed_form,
    system_token_capacity,
)
from .pipeline_sim import (
    CapacityError,
    EpisodeMetrics,
    EventTrace,
    GpuState,
    NoiseSpec,
    OutOfMemory,
    run_baseline,
    run_episode,
    simulate_decode,
    simulate_prefill,
)
from .scheduler import (
    EmptySystem,
    SchedulerState,
    StepPlan,
    batch_indices,
    commit_plan,
    detect_steady,
    initial_partition,
    prefetch_budget,
    residual_set,
    schedule_step,
    select_prefetch_steady,
    select_prefetch_warmup,
)
from .transfer import (
    Layout,
    LinkChannel,
    TransferQueues,
    TransferRequest,
    chunk_kv_transfer,
    fragments_per_block,
    link_utilization,
    next_transfer,
    plan_layer_offload,
    submit_transfer,
    transfer_time,
)
from .workload import (
    LengthSpec,
    WorkloadSpec,
    generate_synthetic,
    load_trace,
    longbench_like,
    sharegpt_like,
    summarize,
)

__version__ = "0.1.0"
