"""Oracles and metrics for the eviction engine.

Includes the exact combinatorial subset optimizer that key-similarity
eviction approximates, the relaxed (separable) objective it solves
exactly, an instruction-level FLOP model for the O(n) scorer, wall-clock
scaling fits, and diversity/correlation reports.
"""

import itertools
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import AttentionModel, full_causal_attention
from .errors import SizeError, UndefinedCorrelation
from .numerics import (
    as_mat,
    log_det_gram,
    normalize_rows,
    pairwise_cos_sim,
    spearman_rho,
)
from .policies import (
    AnchorKind,
    EvictionPolicySpec,
    PolicyKind,
    ScoringContext,
    compute_scores,
)
from .traceio import TokenTrace

BRUTE_FORCE_MAX_N = 16


@dataclass(frozen=True)
class SubsetSolution:
    indices: tuple[int, ...]
    objective: float


def subset_objective(K, subset) -> float:
    """Sum of pairwise key cosines over a subset, diagonal included."""
    sims = pairwise_cos_sim(K)
    idx = np.asarray(sorted(subset), dtype=np.int64)
    return float(sims[np.ix_(idx, idx)].sum())


def brute_force_subset(K, size: int) -> SubsetSolution:
    """Exact minimizer of the pairwise-cosine objective over all subsets.

    Enumerates every C(n, size) subset; guarded to n <= 16. Ties break
    to the lexicographically smallest index tuple (first found wins).
    """
    K = as_mat(K, "K")
    n = K.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise SizeError(f"enumeration guarded to n <= {BRUTE_FORCE_MAX_N}, got {n}")
    if not (0 <= size <= n):
        raise SizeError(f"subset size {size} out of range for n = {n}")
    sims = pairwise_cos_sim(K)
    best = None
    best_obj = np.inf
    for subset in itertools.combinations(range(n), size):
        idx = np.asarray(subset, dtype=np.int64)
        obj = sims[np.ix_(idx, idx)].sum()
        if obj < best_obj:
            best_obj = obj
            best = subset
    return SubsetSolution(indices=best, objective=float(best_obj))


def relaxed_objective(K, subset) -> float:
    """Sum over the subset of normalized-key dot products with the global
    normalized-key mean (the separable relaxation of the subset problem)."""
    K = as_mat(K, "K")
    if len(subset) == 0:
        return 0.0
    khat = normalize_rows(K)
    mu = khat.mean(axis=0)
    idx = np.asarray(sorted(subset), dtype=np.int64)
    return float((khat[idx] @ mu).sum())


@dataclass(frozen=True)
class FlopReport:
    """Instruction counts for the O(n) anchor scorer at cache size n, dim d.

    weighted_total applies per-instruction costs (mult 3, add 1, div 47,
    sqrt 1); those weights are hardware-dependent and overridable.
    """

    n: int
    d: int
    mults: int
    adds: int
    divs: int
    sqrts: int
    weighted_total: int


DEFAULT_WEIGHTS = {"mult": 3, "add": 1, "div": 47, "sqrt": 1}


def flop_count_keydiff(n: int, d: int, weights: dict | None = None) -> FlopReport:
    """Exact instruction counts for anchor construction plus per-key cosine.

    Anchor: per-key norm (d mults, d-1 adds, 1 sqrt each), per-key
    normalize (d mults, 1 div each), mean (1 div, (n-1)d adds). Scores:
    anchor dots (nd mults, n(d-1) adds), anchor norm (d mults, d-1 adds,
    1 sqrt), n norm products, n guarded comparisons, n divides.
    """
    if n < 1 or d < 1:
        raise SizeError("need n >= 1 and d >= 1")
    w = dict(DEFAULT_WEIGHTS)
    if weights:
        w.update(weights)
    mults = 3 * n * d + d + n
    adds = 3 * n * d - n - 1
    divs = 2 * n + 2
    sqrts = n + 1
    total = w["mult"] * mults + w["add"] * adds + w["div"] * divs + w["sqrt"] * sqrts
    return FlopReport(n=n, d=d, mults=mults, adds=adds, divs=divs, sqrts=sqrts,
                      weighted_total=total)


def flop_closed_form(n: int, d: int) -> int:
    """(12d + 97) n + 3d + 94, the default-weight total."""
    return (12 * d + 97) * n + 3 * d + 94


def pairwise_rowsum_scores(keys: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """O(n^2) negated row sums of the pairwise cosine matrix, computed in
    row chunks so the full n x n matrix is never materialized."""
    khat = normalize_rows(keys)
    n = khat.shape[0]
    out = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        out[lo:hi] = (khat[lo:hi] @ khat.T).sum(axis=1)
    return -out


def scaling_bench(
    policy: EvictionPolicySpec,
    n_grid,
    d: int = 64,
    trials: int = 5,
    seed: int = 0,
) -> list[tuple[int, float]]:
    """Median scoring wall time per cache size, single-threaded.

    BLAS pools are pinned to one thread for the duration so the fitted
    slope reflects arithmetic growth, not parallel speedup.
    """
    n_grid = sorted(int(n) for n in n_grid)
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n_grid[-1], d))
    results = []
    with threadpool_limits(limits=1):
        for n in n_grid:
            sub = np.ascontiguousarray(keys[:n])
            ctx = ScoringContext(keys=sub, time_ids=np.arange(n, dtype=np.int64))
            times = []
            for _ in range(trials):
                start = time.perf_counter()
                if policy.kind is PolicyKind.KEYDIFF_PAIRWISE:
                    pairwise_rowsum_scores(sub)
                else:
                    compute_scores(policy, ctx, budget=max(1, n // 2))
                times.append(time.perf_counter() - start)
            results.append((n, float(np.median(times))))
    return results


def loglog_slope(points) -> float:
    """Least-squares slope of log(time) against log(n)."""
    ns = np.log([p[0] for p in points])
    ts = np.log([p[1] for p in points])
    slope, _ = np.polyfit(ns, ts, 1)
    return float(slope)


@dataclass(frozen=True)
class DiversityReport:
    logdet_before: float
    logdet_after: float
    mean_pairwise_cos_after: float


def diversity_report(cache_before, cache_after) -> DiversityReport:
    """Spanned-volume and redundancy summary of an eviction step."""
    keys_after = cache_after.keys
    sims = pairwise_cos_sim(keys_after)
    n = sims.shape[0]
    if n > 1:
        mean_cos = float((sims.sum() - n) / (n * (n - 1)))
    else:
        mean_cos = 1.0
    return DiversityReport(
        logdet_before=log_det_gram(cache_before.keys),
        logdet_after=log_det_gram(keys_after),
        mean_pairwise_cos_after=mean_cos,
    )


def key_dissimilarity(keys: np.ndarray) -> np.ndarray:
    """Per-key negated mean cosine to the other keys (diagonal excluded)."""
    sims = pairwise_cos_sim(keys)
    n = sims.shape[0]
    if n < 2:
        return np.zeros(n)
    return -(sims.sum(axis=1) - 1.0) / (n - 1)


def mean_received_attention(attn: np.ndarray) -> np.ndarray:
    """Column mean of a causal attention matrix over its valid entries.

    Column j is averaged over queries i >= j; with a (T, T) matrix the
    count of valid entries for column j is T - j.
    """
    t_total = attn.shape[0]
    counts = t_total - np.arange(t_total)
    return attn.sum(axis=0) / counts


def correlation_report(trace: TokenTrace, model: AttentionModel):
    """Per-(layer, head) Spearman rho between key dissimilarity and mean
    received attention. Undefined correlations yield a None cell."""
    rows = []
    for layer in range(trace.layers):
        for head in range(trace.kv_heads):
            keys = trace.keys[layer, head]
            attn = full_causal_attention(trace, model, layer, head)
            try:
                rho = spearman_rho(key_dissimilarity(keys), mean_received_attention(attn))
            except UndefinedCorrelation:
                rho = None
            rows.append((layer, head, rho))
    return rows
