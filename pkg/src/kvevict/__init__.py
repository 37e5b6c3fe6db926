"""KV cache eviction engine and analysis harness.

Core pieces: a bounded per-head KV cache (`KVCache`), an eviction-policy
catalog built around key-similarity scoring plus attention-based
baselines, a block prefill driver, combinatorial and statistical
oracles, numerical verifiers for the geometric bounds, and a binary
trace format (KVTR) with CSV report schemas.
"""

from .attention import (
    AttentionModel,
    BlockResult,
    SimulationReport,
    SynthSpec,
    attend_block,
    full_causal_attention,
    run_block_prompt,
    synth_trace,
)
from .cache import KVCache
from .numerics import (
    cos_sim,
    log_det_gram,
    pairwise_cos_sim,
    softmax_masked,
    spearman_rho,
    topk_indices,
)
from .policies import (
    AnchorKind,
    EvictionPolicySpec,
    MetricKind,
    PolicyKind,
    ScoringContext,
    compute_scores,
    parse_policy,
)
from .traceio import TokenTrace, read_trace, write_report_csv, write_trace

__version__ = "0.1.0"

__all__ = [
    "AttentionModel",
    "AnchorKind",
    "BlockResult",
    "EvictionPolicySpec",
    "KVCache",
    "MetricKind",
    "PolicyKind",
    "ScoringContext",
    "SimulationReport",
    "SynthSpec",
    "TokenTrace",
    "attend_block",
    "compute_scores",
    "cos_sim",
    "full_causal_attention",
    "log_det_gram",
    "pairwise_cos_sim",
    "parse_policy",
    "read_trace",
    "run_block_prompt",
    "softmax_masked",
    "spearman_rho",
    "synth_trace",
    "topk_indices",
    "write_report_csv",
    "write_trace",
]
