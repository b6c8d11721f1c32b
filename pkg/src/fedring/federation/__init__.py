from .async_engine import AsyncResult, run_async, uniform_successor
from .engine import (
    CENTRAL_HOLDER,
    VARIANTS,
    ConservationError,
    Envelope,
    FedConfig,
    FedResult,
    MetricsRecord,
    MissingGeneratorError,
    RoundPlan,
    agreement,
    evaluate,
    fedavg_round,
    plan_round,
    run_decentralized,
    run_variant,
)
from .metrics import metrics_csv, read_metrics_csv, summary, write_metrics_csv

__all__ = [
    "AsyncResult",
    "CENTRAL_HOLDER",
    "ConservationError",
    "Envelope",
    "FedConfig",
    "FedResult",
    "MetricsRecord",
    "MissingGeneratorError",
    "RoundPlan",
    "VARIANTS",
    "agreement",
    "evaluate",
    "fedavg_round",
    "metrics_csv",
    "plan_round",
    "read_metrics_csv",
    "run_async",
    "run_decentralized",
    "run_variant",
    "summary",
    "uniform_successor",
    "write_metrics_csv",
]
