"""Cost model and measured scaling of the two scoring routes.

The anchor scorer needs (12d + 97) n + 3d + 94 weighted FLOPs -- linear
in the cache size -- while the pairwise route is quadratic. The wall
clock fit below reproduces those shapes on this machine.
"""

from kvevict import EvictionPolicySpec, PolicyKind
from kvevict.analysis import flop_count_keydiff, loglog_slope, scaling_bench

print("weighted FLOPs of the O(n) scorer (mult=3, add=1, div=47, sqrt=1):")
print(f"{'n':>8s} {'d':>5s} {'total':>14s}")
for n, d in ((1, 1), (256, 64), (1024, 128), (8192, 128), (65536, 128)):
    rep = flop_count_keydiff(n, d)
    print(f"{n:8d} {d:5d} {rep.weighted_total:14,d}")

grid = [2**e for e in range(10, 15)]
print("\nmeasured scoring time (single-threaded, median of 3):")
for kind in (PolicyKind.KEYDIFF_EFFICIENT, PolicyKind.KEYDIFF_PAIRWISE):
    points = scaling_bench(EvictionPolicySpec(kind), grid, d=64, trials=3)
    slope = loglog_slope(points)
    times = "  ".join(f"{n}:{t * 1e3:.2f}ms" for n, t in points)
    print(f"  {kind.value:18s} slope {slope:.2f}   {times}")
