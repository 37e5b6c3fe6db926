import numpy as np
import pytest

from kvevict.attention import AttentionModel, SynthSpec, synth_trace
from kvevict.errors import BasisError, DomainError, SkippedInstance
from kvevict.theory import (
    BoundInstance,
    bound_pipeline,
    check_lemma1,
    check_orthsum,
    check_theorem2,
    outlier_identification,
    random_bound_instance,
    run_lemma1_suite,
    run_orthsum_suite,
    run_theorem2_suite,
    theorem2_rhs,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestBoundInstance:
    def test_weight_matches_direct_softmax(self, rng):
        d = 6
        inst = random_bound_instance(rng, d=d, n=12, m_bound=4.0)
        logits = np.concatenate([[inst.k_star @ inst.q], inst.keys @ inst.q])
        ex = np.exp(logits)
        assert inst.w == pytest.approx(float(ex[0] / ex.sum()), abs=1e-12)

    def test_norm_bounds_enforced(self):
        q = unit([1.0, 0.0])
        with pytest.raises(DomainError):
            BoundInstance(q=q, keys=np.array([[3.0, 0.0]]), k_star=np.array([0.5, 0.0]),
                          m_bound=4.0)
        with pytest.raises(DomainError):
            BoundInstance(q=np.array([2.0, 0.0]), keys=np.array([[0.5, 0.0]]),
                          k_star=np.array([0.5, 0.0]), m_bound=4.0)


class TestLemma1:
    def test_vacuous_for_tiny_weight(self):
        # many strong competitors force w -> 0+ and the bound below -1
        q = unit([1.0, 0.0, 0.0])
        keys = np.tile([[0.0, 1.9, 0.0]], (50, 1))
        k_star = np.array([-1.9, 0.0, 0.0])
        inst = BoundInstance(q=q, keys=keys, k_star=k_star, m_bound=4.0)
        res = check_lemma1(inst)
        assert res.lhs_finite < -1.0
        assert res.holds

    def test_constructed_instance_near_bound(self):
        # k* aligned with q at near-maximal norm, 50 keys orthogonal to q
        m, delta = 4.0, 1e-6
        d = 52
        q = np.zeros(d)
        q[0] = 1.0
        k_star = np.zeros(d)
        k_star[0] = np.sqrt(m - delta)
        keys = np.zeros((50, d))
        for i in range(50):
            keys[i, 1 + i] = np.sqrt(m - delta)
        inst = BoundInstance(q=q, keys=keys, k_star=k_star, m_bound=m)
        # direct softmax evaluation of w
        ex_star = np.exp(np.sqrt(m - delta))
        w_want = ex_star / (ex_star + 50 * np.exp(0.0))
        assert inst.w == pytest.approx(w_want, abs=1e-12)
        res = check_lemma1(inst)
        assert res.holds
        assert res.rhs == pytest.approx(1.0, abs=1e-9)

    def test_finite_bound_tighter_than_asymptotic(self, rng):
        inst = random_bound_instance(rng, d=8, n=16, m_bound=9.0)
        res = check_lemma1(inst)
        # log(n/(n+1)) < 0 shifts the finite form below the limit form
        assert res.lhs_finite < res.lhs_asymptotic

    def test_randomized_suite_no_violations(self):
        suite = run_lemma1_suite(2000, seed=5)
        assert suite.violations == 0
        assert suite.instances == 2000

    def test_fault_injection_detected(self):
        suite = run_lemma1_suite(200, seed=5, fault=True)
        assert suite.violations > 0


class TestTheorem2:
    def test_boundary_equality(self):
        # keys average to -q, k* parallel to q: alpha=-1, beta=1, rhs=-1
        d = 4
        q = unit([1.0, 0.0, 0.0, 0.0])
        keys = np.tile(-0.9 * q, (8, 1))
        k_star = 1.2 * q
        inst = BoundInstance(q=q, keys=keys, k_star=k_star, m_bound=4.0)
        res = check_theorem2(inst)
        assert res.rhs == pytest.approx(-1.0, abs=1e-12)
        assert res.lhs == pytest.approx(-1.0, abs=1e-12)
        assert res.holds

    def test_arithmetic_spot_value(self):
        assert theorem2_rhs(-0.5, 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_hypotheses_enforced(self, rng):
        d = 4
        q = unit(rng.normal(size=d))
        keys = np.tile(0.5 * q, (4, 1))  # alpha = +1 violates alpha < 0
        inst = BoundInstance(q=q, keys=keys, k_star=0.5 * q, m_bound=4.0)
        with pytest.raises(SkippedInstance):
            check_theorem2(inst)

    def test_rhs_grid_bounded(self):
        alphas = np.arange(-1.0, 0.0, 0.01)
        betas = np.arange(0.01, 1.0 + 1e-9, 0.01)
        A, B = np.meshgrid(alphas, betas)
        vals = 1 + A * B - 0.5 * A**2 - 0.5 * B**2
        assert vals.max() <= 1.0
        assert vals.min() >= -1.0
        at_corner = theorem2_rhs(-1.0, 1.0)
        assert at_corner == -1.0
        # -1 attained nowhere else on the grid
        assert (vals <= -1.0 + 1e-12).sum() == 0 or alphas[0] == -1.0

    def test_randomized_suite_no_violations(self):
        suite = run_theorem2_suite(2000, seed=6)
        assert suite.violations == 0
        assert suite.instances == 2000

    def test_fault_injection_detected(self):
        suite = run_theorem2_suite(300, seed=6, fault=True)
        assert suite.violations > 0


class TestOrthsum:
    def test_standard_basis_aligned(self):
        total, holds = check_orthsum(np.eye(4), [1.0, 0.0, 0.0, 0.0])
        assert total == pytest.approx(1.0, abs=1e-12)
        assert holds

    def test_standard_basis_diagonal_vector(self):
        total, holds = check_orthsum(np.eye(3), [1.0, 1.0, 1.0])
        assert total == pytest.approx(1.0, abs=1e-12)
        assert holds
        # each squared cosine is exactly 1/3
        from kvevict.numerics import cos_sim

        for i in range(3):
            assert cos_sim(np.eye(3)[i], np.ones(3)) ** 2 == pytest.approx(1 / 3, abs=1e-12)

    def test_rotated_basis(self, rng):
        basis, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        total, holds = check_orthsum(basis, rng.normal(size=16))
        assert holds
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_non_orthonormal_rejected(self, rng):
        bad = rng.normal(size=(4, 4))
        with pytest.raises(BasisError):
            check_orthsum(bad, rng.normal(size=4))

    def test_suite(self):
        suite = run_orthsum_suite(500, seed=2)
        assert suite.violations == 0
        faulty = run_orthsum_suite(50, seed=2, fault=True)
        assert faulty.violations == 50


class TestBoundPipeline:
    def test_planted_outlier_dominates(self):
        agree = 0
        seeds = 40
        for seed in range(seeds):
            trace = synth_trace(SynthSpec(length=48, head_dim=16, n_outliers=1, seed=seed))
            model = AttentionModel.for_trace(trace)
            max_attn, max_dissim = outlier_identification(trace, model)
            agree += max_attn == max_dissim
        assert agree >= 0.95 * seeds

    def test_scatter_rows_and_trend(self):
        trace = synth_trace(SynthSpec(length=32, head_dim=16, n_outliers=2, seed=1))
        model = AttentionModel.for_trace(trace)
        rows, trend = bound_pipeline(trace, model)
        assert len(rows) == 31  # query positions 1..T-1 for one head
        for layer, head, t, w, beta, score in rows:
            assert 0.0 < w <= 1.0
            assert -1.0 <= beta <= 1.0
            assert -1.0 <= score <= 1.0
        assert trend is not None and trend > 0.0

    def test_degenerate_identical_keys_null_trend(self):
        from kvevict.traceio import TokenTrace

        keys = np.ones((1, 1, 6, 4))
        trace = TokenTrace(keys=keys, values=keys.copy(), queries=keys.copy())
        rows, trend = bound_pipeline(trace, AttentionModel.for_trace(trace))
        assert trend is None
