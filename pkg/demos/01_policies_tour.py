"""Tour of the eviction-policy catalog on a hand-built cache.

Builds a cache of 12 keys (10 tightly clustered, 2 pointing elsewhere)
and shows which token ids each policy retains at budget 4. The
key-similarity policies retain the distinctive keys; recency policies
keep the newest; the attention-based ones follow the block's weights.
"""

import numpy as np

from kvevict import EvictionPolicySpec, KVCache, PolicyKind, ScoringContext
from kvevict.numerics import pairwise_cos_sim

rng = np.random.default_rng(0)
d, budget = 8, 4

center = rng.normal(size=d)
center /= np.linalg.norm(center)
keys = center + 0.08 * rng.normal(size=(12, d))
for idx in (3, 9):  # two distinctive keys, each in its own direction
    v = rng.normal(size=d)
    v -= (v @ center) * center
    keys[idx] = v / np.linalg.norm(v)

cache = KVCache.empty(d, budget).append(keys, rng.normal(size=(12, d)), 0)
print(f"cache: {len(cache)} tokens, budget {budget}")
print(f"mean pairwise key cosine: {pairwise_cos_sim(keys).mean():.3f}")
print(f"planted distinctive keys at positions 3 and 9\n")

# a synthetic block-attention matrix for the attention-based baselines:
# two rows, causal, each row sums to 1
attn = rng.random((2, 12))
attn /= attn.sum(axis=1, keepdims=True)
ctx = ScoringContext(keys=cache.keys, time_ids=cache.time_ids, block_attention=attn)

for kind in PolicyKind:
    if kind is PolicyKind.NO_EVICT:
        continue
    # window_fraction 0.3 keeps a 1-token window at this small budget
    policy = EvictionPolicySpec(kind, snap_recent=2, sink_count=2, window_fraction=0.3)
    retained = cache.evict(policy, ctx).time_ids.tolist()
    print(f"{kind.value:18s} retains {retained}")
