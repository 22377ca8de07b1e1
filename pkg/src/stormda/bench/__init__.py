"""Cost model and benchmark harness."""
from .cost import CostModel, context_flops, count_attention_flops, feasibility_frontier, frontier_csv, max_context
from .harness import (BenchConfig, BenchRecord, context_doubling, ensemble_csv, kernel_csv, loglog_slope,
                      records_csv, run_ensemble_bench, run_kernel_bench, run_scaling_bench)

__all__ = [
    "CostModel", "context_flops", "count_attention_flops", "feasibility_frontier", "frontier_csv", "max_context",
    "BenchConfig", "BenchRecord", "context_doubling", "ensemble_csv", "kernel_csv", "loglog_slope",
    "records_csv", "run_ensemble_bench", "run_kernel_bench", "run_scaling_bench",
]
