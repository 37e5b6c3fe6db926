"""Bounded per-(layer, head) KV store.

A KVCache holds the key/value vectors of cached tokens in time order
together with their global positions. Appending may push the cache over
its budget; `evict` restores the budget by scoring tokens with a policy
and keeping the top N. All operations return new caches; the stored
arrays are treated as immutable.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContextError, DimError, OrderError
from .numerics import as_mat, topk_indices


@dataclass
class KVCache:
    """Ordered key/value store with a hard token budget.

    side_state carries policy-private per-token rows (e.g. an attention
    accumulator); every array in it is aligned with `keys` and is
    gathered with the same index set on eviction.
    """

    keys: np.ndarray  # (n, d)
    values: np.ndarray  # (n, d)
    time_ids: np.ndarray  # (n,) global token positions, strictly increasing
    budget: int
    side_state: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.time_ids = np.asarray(self.time_ids, dtype=np.int64)
        if self.keys.shape != self.values.shape:
            raise DimError(
                f"keys shape {self.keys.shape} != values shape {self.values.shape}"
            )
        if len(self.time_ids) != self.keys.shape[0]:
            raise DimError("time_ids length does not match cache length")
        if len(self.time_ids) > 1 and not np.all(np.diff(self.time_ids) > 0):
            raise OrderError("time_ids must be strictly increasing")
        if self.budget < 1:
            raise DimError("budget must be >= 1")
        for name, arr in self.side_state.items():
            if arr.shape[0] != self.keys.shape[0]:
                raise DimError(f"side_state[{name!r}] misaligned with cache")

    @classmethod
    def empty(cls, dim: int, budget: int) -> "KVCache":
        return cls(
            keys=np.zeros((0, dim)),
            values=np.zeros((0, dim)),
            time_ids=np.zeros(0, dtype=np.int64),
            budget=budget,
        )

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def append(self, new_keys, new_values, start_pos: int) -> "KVCache":
        """Concatenate a block of B tokens at positions start_pos..start_pos+B-1.

        The result may exceed the budget; `evict` restores it. side_state
        rows for the new tokens are initialized to zero.
        """
        new_keys = as_mat(new_keys, "new_keys")
        new_values = as_mat(new_values, "new_values")
        if new_keys.shape != new_values.shape:
            raise DimError("new_keys and new_values shapes differ")
        if new_keys.shape[0] < 1:
            raise DimError("append: block must contain at least one token")
        if new_keys.shape[1] != self.dim:
            raise DimError(
                f"append: key dim {new_keys.shape[1]} != cache dim {self.dim}"
            )
        if len(self) and start_pos <= int(self.time_ids[-1]):
            raise OrderError(
                f"append: start_pos {start_pos} not after last time_id {int(self.time_ids[-1])}"
            )
        block = new_keys.shape[0]
        new_ids = np.arange(start_pos, start_pos + block, dtype=np.int64)
        side = {
            name: np.concatenate(
                [arr, np.zeros((block,) + arr.shape[1:], dtype=arr.dtype)]
            )
            for name, arr in self.side_state.items()
        }
        return KVCache(
            keys=np.concatenate([self.keys, new_keys]),
            values=np.concatenate([self.values, new_values]),
            time_ids=np.concatenate([self.time_ids, new_ids]),
            budget=self.budget,
            side_state=side,
        )

    def gather(self, indices) -> "KVCache":
        """Keep only the given indices, preserving time order.

        keys, values, time_ids and every side_state row are gathered with
        the same index set.
        """
        idx = np.asarray(sorted(set(int(i) for i in indices)), dtype=np.int64)
        if len(idx) and (idx[0] < 0 or idx[-1] >= len(self)):
            raise IndexError(f"gather: index out of range for cache of length {len(self)}")
        return KVCache(
            keys=self.keys[idx],
            values=self.values[idx],
            time_ids=self.time_ids[idx],
            budget=self.budget,
            side_state={name: arr[idx] for name, arr in self.side_state.items()},
        )

    def evict(self, policy, ctx=None) -> "KVCache":
        """Score tokens with `policy` and keep the top `budget`.

        Returns the cache unchanged when already within budget, except
        that stateful policies still fold the current block into their
        side state (an attention accumulator must see every block, not
        only the over-budget ones). Attention-based policies require a
        ctx carrying the block's aggregated attention rows.
        """
        from . import policies as pol

        if ctx is None:
            ctx = pol.ScoringContext(keys=self.keys, time_ids=self.time_ids)
        if ctx.keys.shape[0] != len(self):
            raise ContextError(
                f"ctx covers {ctx.keys.shape[0]} tokens, cache holds {len(self)}"
            )

        cache = self
        if policy.kind is pol.PolicyKind.H2O:
            acc = cache.side_state.get(pol.H2O_STATE_KEY)
            if acc is None:
                acc = np.zeros(len(cache))
            ctx = replace(ctx, accumulator=acc)
            scores = pol.compute_scores(policy, ctx, cache.budget)
            cache = replace(
                cache, side_state={**cache.side_state, pol.H2O_STATE_KEY: scores}
            )
            if len(cache) <= cache.budget:
                return cache
            return cache.gather(topk_indices(scores, cache.budget))

        if policy.kind is pol.PolicyKind.NO_EVICT or len(cache) <= cache.budget:
            return cache
        scores = pol.compute_scores(policy, ctx, cache.budget)
        return cache.gather(topk_indices(scores, cache.budget))
