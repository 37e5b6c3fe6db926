"""Eviction-policy catalog.

Every policy maps a ScoringContext to one score per cached token, with
the convention that larger scores mean "retain". A +inf score marks a
token as unconditionally kept; the shared top-k selection treats those
as maximal and applies the usual older-token tie rule among them.

Key-similarity scoring retains keys *dissimilar* to the rest of the
cache: the score is the negated similarity to an anchor (or the negated
pairwise row sum), so distinctive keys rank highest.
"""

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContextError
from .numerics import EPS_NORM, normalize_rows, pairwise_cos_sim

# side_state key under which the attention accumulator travels with the cache
H2O_STATE_KEY = "h2o_acc"


class PolicyKind(enum.Enum):
    KEYDIFF_PAIRWISE = "keydiff-pairwise"
    KEYDIFF_EFFICIENT = "keydiff"
    KEYDIFF_SLIDING_WINDOW = "keydiff-window"
    TOVA = "tova"
    H2O = "h2o"
    SNAPKV = "snapkv"
    SINK = "sink"
    KEY_L2NORM = "key-l2norm"
    NO_EVICT = "no-evict"
    RANDOM = "random"


class AnchorKind(enum.Enum):
    MEAN_NORMALIZED = "mean-normalized"
    MEAN_RAW = "mean-raw"
    MEDIAN = "median"


class MetricKind(enum.Enum):
    COSINE = "cosine"
    DOT_PRODUCT = "dot"
    EUCLIDEAN = "euclidean"


ATTENTION_BASED = frozenset({PolicyKind.TOVA, PolicyKind.H2O, PolicyKind.SNAPKV})


@dataclass(frozen=True)
class EvictionPolicySpec:
    """Tagged policy configuration.

    anchor/metric apply to the key-similarity family only; snap_* to
    SnapKV; sink_count to Sink; window_fraction to the sliding-window
    variant; seed to Random.
    """

    kind: PolicyKind
    anchor: AnchorKind = AnchorKind.MEAN_RAW
    metric: MetricKind = MetricKind.COSINE
    window_fraction: float = 0.20
    snap_kernel: int = 7
    snap_recent: int = 32
    sink_count: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.snap_kernel < 1 or self.snap_kernel % 2 == 0:
            raise ConfigError(f"snap_kernel must be odd and >= 1, got {self.snap_kernel}")
        if self.snap_recent < 0:
            raise ConfigError("snap_recent must be >= 0")
        if not (0.0 <= self.window_fraction < 1.0):
            raise ConfigError(f"window_fraction must be in [0, 1), got {self.window_fraction}")
        if self.sink_count < 0:
            raise ConfigError("sink_count must be >= 0")

    @property
    def needs_attention(self) -> bool:
        return self.kind in ATTENTION_BASED


@dataclass(frozen=True)
class ScoringContext:
    """Inputs a policy may score from.

    keys: (n, d) union of cached + just-appended keys, in time order.
    block_attention: (B, n) post-softmax attention rows of the current
        block against all n positions, already averaged over the query
        heads of the group; None for attention-free scoring.
    accumulator: (n,) prior H2O mass per token, zeros for new tokens.
    """

    keys: np.ndarray
    time_ids: np.ndarray
    block_attention: np.ndarray | None = None
    accumulator: np.ndarray | None = None

    def with_accumulator(self, acc: np.ndarray) -> "ScoringContext":
        return replace(self, accumulator=acc)


def _require_attention(ctx: ScoringContext, who: str) -> np.ndarray:
    if ctx.block_attention is None:
        raise ContextError(f"{who} requires block attention rows in the scoring context")
    attn = ctx.block_attention
    if attn.ndim != 2 or attn.shape[1] != ctx.keys.shape[0]:
        raise ContextError(
            f"{who}: attention shape {attn.shape} does not cover {ctx.keys.shape[0]} tokens"
        )
    if not np.allclose(attn.sum(axis=1), 1.0, atol=1e-9):
        raise ContextError(f"{who}: attention rows must each sum to 1")
    return attn


def anchor_vector(keys: np.ndarray, anchor: AnchorKind) -> np.ndarray:
    """Representative direction of the cached keys."""
    if anchor is AnchorKind.MEAN_NORMALIZED:
        return normalize_rows(keys).mean(axis=0)
    if anchor is AnchorKind.MEAN_RAW:
        return keys.mean(axis=0)
    if anchor is AnchorKind.MEDIAN:
        return np.median(keys, axis=0)
    raise ConfigError(f"unknown anchor {anchor}")


def score_keydiff_pairwise(ctx: ScoringContext) -> np.ndarray:
    """Negated row sums of the pairwise key cosine matrix.

    The diagonal self-term is included: it shifts every score by the
    same constant and cannot change which tokens are retained.
    """
    return -pairwise_cos_sim(ctx.keys).sum(axis=1)


def score_keydiff_efficient(
    ctx: ScoringContext,
    anchor: AnchorKind = AnchorKind.MEAN_RAW,
    metric: MetricKind = MetricKind.COSINE,
) -> np.ndarray:
    """Negated similarity of each key to a single anchor vector, O(n).

    Cosine is the default metric; dot product and Euclidean distance are
    alternatives (Euclidean keeps the far-from-anchor = retain
    orientation by scoring +distance).
    """
    keys = ctx.keys
    a = anchor_vector(keys, anchor)
    if metric is MetricKind.COSINE:
        denom = np.maximum(np.linalg.norm(a) * np.linalg.norm(keys, axis=1), EPS_NORM)
        return -(keys @ a) / denom
    if metric is MetricKind.DOT_PRODUCT:
        return -(keys @ a)
    if metric is MetricKind.EUCLIDEAN:
        return np.linalg.norm(keys - a, axis=1)
    raise ConfigError(f"unknown metric {metric}")


def sliding_window_size(window_fraction: float, budget: int) -> int:
    w = int(np.floor(window_fraction * budget))
    if w < 1:
        raise ConfigError(
            f"window_fraction {window_fraction} with budget {budget} leaves no window"
        )
    if w >= budget:
        raise ConfigError(f"window {w} must be smaller than budget {budget}")
    return w


def score_keydiff_sliding(
    ctx: ScoringContext, base_scores: np.ndarray, window_fraction: float, budget: int
) -> np.ndarray:
    """Unconditionally retain the most recent tokens; others keep base scores.

    The window holds floor(window_fraction * budget) tokens; the rest of
    the cache competes for the remaining budget on its base scores.
    """
    w = sliding_window_size(window_fraction, budget)
    scores = np.array(base_scores, dtype=np.float64)
    if w > 0:
        scores[-min(w, len(scores)) :] = np.inf
    return scores


def score_tova(ctx: ScoringContext) -> np.ndarray:
    """Attention row of the newest query, averaged over its head group."""
    attn = _require_attention(ctx, "TOVA")
    return np.array(attn[-1], dtype=np.float64)


def score_h2o(ctx: ScoringContext) -> np.ndarray:
    """Prior accumulated attention plus the block's attention column sums.

    The caller persists the returned vector as the new accumulator so
    mass keeps accruing across blocks; eviction gathers it alongside the
    tokens.
    """
    attn = _require_attention(ctx, "H2O")
    n = ctx.keys.shape[0]
    acc = ctx.accumulator
    if acc is None:
        acc = np.zeros(n)
    acc = np.asarray(acc, dtype=np.float64)
    if acc.shape != (n,):
        raise ContextError(f"H2O accumulator shape {acc.shape} misaligned with {n} tokens")
    return acc + attn.sum(axis=0)


def smooth_same_length(x: np.ndarray, kernel: int) -> np.ndarray:
    """Centered moving average with edge-truncated windows.

    Border positions average over the neighbors that exist instead of
    zero-padding, which would artificially depress edge scores.
    """
    if kernel % 2 == 0 or kernel < 1:
        raise ConfigError(f"smoothing kernel must be odd and >= 1, got {kernel}")
    n = len(x)
    half = kernel // 2
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        out[i] = x[lo:hi].mean()
    return out


def score_snapkv(ctx: ScoringContext, kernel: int = 7, recent: int = 32) -> np.ndarray:
    """Smoothed attention column sums, with the newest tokens pinned.

    Column sums of the block's attention rows are average-smoothed with
    an odd kernel; the `recent` most recent tokens are unconditionally
    retained.
    """
    attn = _require_attention(ctx, "SnapKV")
    scores = smooth_same_length(attn.sum(axis=0), kernel)
    if recent > 0:
        scores[-min(recent, len(scores)) :] = np.inf
    return scores


def score_sink(ctx: ScoringContext, sink_count: int, budget: int) -> np.ndarray:
    """Pin the first sink_count positions of the stream; rank the rest by recency."""
    if budget <= sink_count:
        raise ConfigError(f"budget {budget} must exceed sink_count {sink_count}")
    scores = ctx.time_ids.astype(np.float64)
    scores[ctx.time_ids < sink_count] = np.inf
    return scores


def score_key_l2norm(ctx: ScoringContext) -> np.ndarray:
    """Retain small-norm keys: score is the negated key L2 norm."""
    return -np.linalg.norm(ctx.keys, axis=1)


def score_random(ctx: ScoringContext, seed: int) -> np.ndarray:
    """Seeded uniform scores; stateless in the cache contents.

    The generator is keyed on (seed, n, first/last time id) so repeated
    calls on the same cache state draw identical scores.
    """
    n = ctx.keys.shape[0]
    first = int(ctx.time_ids[0]) if n else 0
    last = int(ctx.time_ids[-1]) if n else 0
    rng = np.random.default_rng([seed, n, first, last])
    return rng.random(n)


def compute_scores(
    policy: EvictionPolicySpec, ctx: ScoringContext, budget: int
) -> np.ndarray:
    """Dispatch a policy spec to its scoring function."""
    kind = policy.kind
    if kind is PolicyKind.KEYDIFF_PAIRWISE:
        return score_keydiff_pairwise(ctx)
    if kind is PolicyKind.KEYDIFF_EFFICIENT:
        return score_keydiff_efficient(ctx, policy.anchor, policy.metric)
    if kind is PolicyKind.KEYDIFF_SLIDING_WINDOW:
        base = score_keydiff_efficient(ctx, policy.anchor, policy.metric)
        return score_keydiff_sliding(ctx, base, policy.window_fraction, budget)
    if kind is PolicyKind.TOVA:
        return score_tova(ctx)
    if kind is PolicyKind.H2O:
        return score_h2o(ctx)
    if kind is PolicyKind.SNAPKV:
        return score_snapkv(ctx, policy.snap_kernel, policy.snap_recent)
    if kind is PolicyKind.SINK:
        return score_sink(ctx, policy.sink_count, budget)
    if kind is PolicyKind.KEY_L2NORM:
        return score_key_l2norm(ctx)
    if kind is PolicyKind.RANDOM:
        return score_random(ctx, policy.seed)
    if kind is PolicyKind.NO_EVICT:
        raise ConfigError("NoEvict does not score tokens")
    raise ConfigError(f"unknown policy kind {kind}")


POLICY_ALIASES = {
    "keydiff-efficient": PolicyKind.KEYDIFF_EFFICIENT,
    "keydiff-sliding": PolicyKind.KEYDIFF_SLIDING_WINDOW,
    "keydiff-sliding-window": PolicyKind.KEYDIFF_SLIDING_WINDOW,
}


def parse_policy(text: str, **overrides) -> EvictionPolicySpec:
    """Build a spec from a CLI-style name plus keyword overrides."""
    try:
        kind = POLICY_ALIASES.get(text) or PolicyKind(text)
    except ValueError:
        names = ", ".join(k.value for k in PolicyKind)
        raise ConfigError(f"unknown policy {text!r}; expected one of: {names}") from None
    fields = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "anchor":
            value = AnchorKind(value)
        elif key == "metric":
            value = MetricKind(value)
        fields[key] = value
    return EvictionPolicySpec(kind=kind, **fields)
