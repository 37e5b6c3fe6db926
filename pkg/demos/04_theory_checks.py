"""Randomized verification of the geometric bounds.

Three facts connect attention weights to key geometry: a lower bound on
a heavily-attended key's cosine to the query, an upper bound on its
cosine to the mean key, and the orthonormal-expansion identity the
proof of the second rests on. All are theorems, so the suites must
report zero violations; a deliberately sign-flipped run shows the
harness actually detects violations.
"""

import numpy as np

from kvevict.theory import (
    BoundInstance,
    check_lemma1,
    check_theorem2,
    run_lemma1_suite,
    run_orthsum_suite,
    run_theorem2_suite,
    theorem2_rhs,
)

for suite in (
    run_lemma1_suite(3000, seed=1),
    run_theorem2_suite(3000, seed=2),
    run_orthsum_suite(3000, seed=3),
):
    print(f"{suite.check:9s}: {suite.instances} instances, "
          f"{suite.violations} violations, max slack {suite.max_slack:+.2e}, "
          f"{suite.skipped} skipped")

faulty = run_lemma1_suite(300, seed=1, fault=True)
print(f"\nnegative control (sign flip): {faulty.violations} violations detected")

# a single instance, end to end
rng = np.random.default_rng(7)
q = np.zeros(8)
q[0] = 1.0
keys = np.tile(-1.2 * q, (20, 1)) + 0.05 * rng.normal(size=(20, 8))
k_star = 1.5 * q
inst = BoundInstance(q=q, keys=keys, k_star=k_star, m_bound=4.0)
lemma = check_lemma1(inst)
theorem = check_theorem2(inst)
print(f"\nworked instance: w = {inst.w:.4f}")
print(f"  attention-weight bound: {lemma.lhs_finite:+.4f} <= CosSim(k*, q) = {lemma.rhs:+.4f}")
print(f"  mean-key bound: CosSim(kbar, k*) = {theorem.lhs:+.4f} <= {theorem.rhs:+.4f}")
print(f"  bound surface at the corner: rhs(-1, 1) = {theorem2_rhs(-1.0, 1.0):+.1f}")
