"""Causal attention over a KV cache and the block prefill driver.

The driver processes a prompt in blocks: compute the block's keys,
queries and values, attend against cache + block under the causal mask,
append the block to the cache, then evict back to budget. With block
size 1 this is exactly the token-generation phase; with block size T it
reduces to monolithic prompt processing.
"""

import concurrent.futures as _futures
from dataclasses import dataclass, field

import numpy as np

from .cache import KVCache
from .errors import ConfigError, DimError
from .numerics import softmax_masked
from .policies import EvictionPolicySpec, ScoringContext
from .traceio import SOURCE_SYNTHETIC, TokenTrace


@dataclass(frozen=True)
class AttentionModel:
    """Head geometry plus scaling for causal attention."""

    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    scale: float | None = None

    def __post_init__(self):
        if self.num_q_heads % self.num_kv_heads != 0:
            raise DimError(
                f"num_q_heads {self.num_q_heads} not divisible by num_kv_heads {self.num_kv_heads}"
            )
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / np.sqrt(self.head_dim))

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    @classmethod
    def for_trace(cls, trace: TokenTrace) -> "AttentionModel":
        return cls(
            num_q_heads=trace.q_heads,
            num_kv_heads=trace.kv_heads,
            head_dim=trace.head_dim,
        )


@dataclass
class BlockResult:
    """Attention outputs of one block against cache + block.

    outputs: (g, B, d) per query head of the group.
    aggregated_attention: (B, n) post-softmax weights averaged over the
    g query heads; retained_time_ids is filled in by the driver after
    eviction.
    """

    outputs: np.ndarray
    aggregated_attention: np.ndarray
    retained_time_ids: np.ndarray | None = None


def attend_block(
    cache: KVCache,
    q_block: np.ndarray,
    k_block: np.ndarray,
    v_block: np.ndarray,
    model: AttentionModel,
) -> BlockResult:
    """Causal attention of a block of queries against cache + block.

    q_block is (g, B, d) for a group of g query heads sharing this KV
    head, or (B, d) for a single head. Every query sees all cached
    positions (their time ids precede the block) and block positions up
    to its own.
    """
    q = np.asarray(q_block, dtype=np.float64)
    if q.ndim == 2:
        q = q[None, :, :]
    k_block = np.asarray(k_block, dtype=np.float64)
    v_block = np.asarray(v_block, dtype=np.float64)
    g, block_len, dim = q.shape
    if dim != model.head_dim or k_block.shape[1] != model.head_dim:
        raise DimError("query/key dim does not match model head_dim")
    if k_block.shape != v_block.shape or k_block.shape[0] != block_len:
        raise DimError("block key/value shapes do not match the query block")
    if len(cache) and cache.dim != dim:
        raise DimError("cache dim does not match block dim")

    n_cache = len(cache)
    keys_all = np.concatenate([cache.keys, k_block]) if n_cache else k_block
    vals_all = np.concatenate([cache.values, v_block]) if n_cache else v_block
    total = n_cache + block_len

    mask = np.zeros((block_len, total))
    intra = np.triu(np.full((block_len, block_len), -np.inf), k=1)
    mask[:, n_cache:] = intra

    outputs = np.empty((g, block_len, dim))
    weight_sum = np.zeros((block_len, total))
    for head in range(g):
        logits = (q[head] @ keys_all.T) * model.scale
        weights = softmax_masked(logits, mask)
        outputs[head] = weights @ vals_all
        weight_sum += weights
    return BlockResult(outputs=outputs, aggregated_attention=weight_sum / g)


@dataclass
class BlockRecord:
    index: int
    start: int
    length: int
    cache_before: int  # union size scored by the policy
    cache_after: int
    retained_time_ids: np.ndarray


@dataclass
class HeadRecord:
    layer: int
    kv_head: int
    blocks: list[BlockRecord]
    outputs: np.ndarray  # (g, T, d) attention outputs for the group's q heads
    final_cache: KVCache


@dataclass
class SimulationReport:
    budget: int
    block_size: int
    heads: list[HeadRecord]

    def rows(self):
        """Rows under the `simulation` CSV schema."""
        out = []
        for rec in self.heads:
            for blk in rec.blocks:
                out.append(
                    (
                        rec.layer,
                        rec.kv_head,
                        blk.index,
                        blk.start,
                        blk.length,
                        blk.cache_before,
                        blk.cache_after,
                        blk.retained_time_ids,
                    )
                )
        return out


def _run_head(trace, model, policy, budget, block_size, layer, kv_head, on_block):
    g = model.group_size
    t_total = trace.length
    dim = trace.head_dim
    q_heads = trace.queries[layer, kv_head * g : (kv_head + 1) * g]

    cache = KVCache.empty(dim, budget)
    outputs = np.empty((g, t_total, dim))
    blocks: list[BlockRecord] = []
    for index, start in enumerate(range(0, t_total, block_size)):
        stop = min(start + block_size, t_total)
        k_blk = trace.keys[layer, kv_head, start:stop]
        v_blk = trace.values[layer, kv_head, start:stop]
        q_blk = q_heads[:, start:stop, :]

        result = attend_block(cache, q_blk, k_blk, v_blk, model)
        outputs[:, start:stop, :] = result.outputs

        grown = cache.append(k_blk, v_blk, start_pos=start)
        ctx = ScoringContext(
            keys=grown.keys,
            time_ids=grown.time_ids,
            block_attention=result.aggregated_attention,
        )
        cache = grown.evict(policy, ctx)
        record = BlockRecord(
            index=index,
            start=start,
            length=stop - start,
            cache_before=len(grown),
            cache_after=len(cache),
            retained_time_ids=cache.time_ids.copy(),
        )
        blocks.append(record)
        if on_block is not None:
            on_block(layer, kv_head, record)
    return HeadRecord(
        layer=layer, kv_head=kv_head, blocks=blocks, outputs=outputs, final_cache=cache
    )


def run_block_prompt(
    trace: TokenTrace,
    model: AttentionModel,
    policy: EvictionPolicySpec,
    budget: int,
    block_size: int,
    on_block=None,
    max_workers: int = 1,
) -> SimulationReport:
    """Process a full trace block by block under a hard cache budget.

    Iterates append -> attend -> score -> evict per block for every
    (layer, kv head) stream. Streams are independent; with max_workers
    > 1 they are processed by a worker pool and merged back in
    deterministic (layer, head) order.
    """
    if block_size < 1:
        raise ConfigError("block size must be >= 1")
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if trace.head_dim != model.head_dim or trace.kv_heads != model.num_kv_heads:
        raise DimError("trace geometry does not match the attention model")
    if trace.q_heads != model.num_q_heads:
        raise DimError("trace query heads do not match the attention model")

    pairs = [(l, h) for l in range(trace.layers) for h in range(trace.kv_heads)]
    if max_workers > 1:
        with _futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [
                pool.submit(
                    _run_head, trace, model, policy, budget, block_size, l, h, on_block
                )
                for l, h in pairs
            ]
            heads = [f.result() for f in futures]
    else:
        heads = [
            _run_head(trace, model, policy, budget, block_size, l, h, on_block)
            for l, h in pairs
        ]
    return SimulationReport(budget=budget, block_size=block_size, heads=heads)


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic trace generator configuration.

    Bulk keys fan out from a mean key direction, each into its own
    random orthogonal direction, with angular spread 1/concentration
    radians; queries cluster around a direction at an obtuse angle
    (`separation`) to the key mean. Planted outlier keys are rotated
    in-plane almost all the way to the query direction, so they stand
    out both geometrically and in received attention; the first outlier
    sits at position 0 and acts as an attention sink.
    """

    length: int
    head_dim: int
    layers: int = 1
    kv_heads: int = 1
    q_heads: int = 1
    concentration: float = 1.0
    n_outliers: int = 0
    outlier_positions: tuple[int, ...] | None = None
    separation: float = 2.5  # angle (rad) between mean key and mean query
    seed: int = 0

    def __post_init__(self):
        if self.concentration <= 0:
            raise ConfigError("concentration must be > 0")
        if self.length < 1 or self.head_dim < 4:
            raise ConfigError("need length >= 1 and head_dim >= 4")
        if self.q_heads % self.kv_heads != 0:
            raise ConfigError("q_heads must be a multiple of kv_heads")
        if self.n_outliers > self.length:
            raise ConfigError("more outliers than tokens")
        if self.outlier_positions is not None:
            if len(self.outlier_positions) != self.n_outliers:
                raise ConfigError("outlier_positions length must equal n_outliers")
            if any(p < 0 or p >= self.length for p in self.outlier_positions):
                raise ConfigError("outlier position out of range")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# Caps the bulk rotation away from the mean key so bulk keys never point
# past "orthogonal-ish" while outliers stay clearly beyond them.
_MAX_BULK_ANGLE = 1.45


def synth_trace(spec: SynthSpec) -> TokenTrace:
    """Deterministic-for-seed synthetic trace with planted outlier keys."""
    t_total, dim = spec.length, spec.head_dim
    g = spec.q_heads // spec.kv_heads
    base_norm = 2.2 * dim**0.25
    sigma = 1.0 / spec.concentration

    keys = np.empty((spec.layers, spec.kv_heads, t_total, dim))
    values = np.empty((spec.layers, spec.kv_heads, t_total, dim))
    queries = np.empty((spec.layers, spec.q_heads, t_total, dim))

    for layer in range(spec.layers):
        for head in range(spec.kv_heads):
            rng = np.random.default_rng([spec.seed, layer, head])
            mean_key = _unit(rng.normal(size=dim))
            aux = rng.normal(size=dim)
            perp = _unit(aux - (aux @ mean_key) * mean_key)
            mean_query = np.cos(spec.separation) * mean_key + np.sin(spec.separation) * perp

            if spec.outlier_positions is not None:
                outliers = np.asarray(spec.outlier_positions, dtype=np.int64)
            elif spec.n_outliers:
                extra = rng.choice(
                    np.arange(max(1, t_total // 8), t_total),
                    size=spec.n_outliers - 1,
                    replace=False,
                )
                outliers = np.concatenate([[0], extra]).astype(np.int64)
            else:
                outliers = np.zeros(0, dtype=np.int64)

            # bulk keys rotate away from the mean key, each into a private
            # orthogonal direction: dissimilarity to the rest of the cache
            # grows monotonically with the rotation angle
            theta = np.minimum(np.abs(rng.normal(0.0, sigma, size=t_total)), _MAX_BULK_ANGLE)
            away = rng.normal(size=(t_total, dim))
            away -= (away @ mean_key)[:, None] * mean_key[None, :]
            away /= np.linalg.norm(away, axis=1, keepdims=True)
            dirs = (
                np.cos(theta)[:, None] * mean_key[None, :]
                + np.sin(theta)[:, None] * away
            )
            # outliers rotate in-plane, nearly all the way to the query mean
            phi = spec.separation * rng.uniform(0.92, 1.0, size=len(outliers))
            dirs[outliers] = (
                np.cos(phi)[:, None] * mean_key[None, :]
                + np.sin(phi)[:, None] * perp[None, :]
            )
            norms = base_norm * (1.0 + 0.05 * rng.normal(size=t_total))
            keys[layer, head] = dirs * norms[:, None]
            values[layer, head] = rng.normal(size=(t_total, dim))

            for sub in range(g):
                qdirs = mean_query[None, :] + rng.normal(
                    0.0, 0.25, size=(t_total, dim)
                ) / np.sqrt(dim)
                qdirs /= np.linalg.norm(qdirs, axis=1, keepdims=True)
                qnorms = base_norm * (1.0 + 0.05 * rng.normal(size=t_total))
                queries[layer, head * g + sub] = qdirs * qnorms[:, None]

    return TokenTrace(
        keys=keys,
        values=values,
        queries=queries,
        source=SOURCE_SYNTHETIC,
        meta={"seed": spec.seed, "generator": "synth"},
    )


def full_causal_attention(
    trace: TokenTrace, model: AttentionModel, layer: int, kv_head: int
) -> np.ndarray:
    """Monolithic (T, T) causal attention, averaged over the head group.

    Reference path for oracles and analysis; never used by the block
    driver itself.
    """
    g = model.group_size
    t_total = trace.length
    mask = np.triu(np.full((t_total, t_total), -np.inf), k=1)
    acc = np.zeros((t_total, t_total))
    for sub in range(g):
        q = trace.queries[layer, kv_head * g + sub]
        k = trace.keys[layer, kv_head]
        acc += softmax_masked((q @ k.T) * model.scale, mask)
    return acc / g
