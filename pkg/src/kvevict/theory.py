"""Numerical verifiers for the geometric facts behind key-diversity scoring.

Three statements are machine-checked on randomized instances:

1. A key holding attention weight w against a unit query, with all key
   norms squared below M, must satisfy
   (log(n/(n+1)) - log(1-w)) / 2M - 1 <= CosSim(k*, q)
   (and the n -> infinity form drops the log(n/(n+1)) term).
2. If CosSim(k*, q) = beta > 0 and CosSim(kbar, q) = alpha < 0 then
   CosSim(kbar, k*) <= 1 + alpha*beta - alpha^2/2 - beta^2/2.
3. For an orthonormal basis {x_i} of R^n and any nonzero y,
   sum_i CosSim(x_i, y)^2 = 1.

These are theorems: any violation is an implementation bug, so the
suites assert zero violations at tiny slack.
"""

from dataclasses import dataclass

import numpy as np

from .attention import AttentionModel, full_causal_attention
from .errors import BasisError, DomainError, SkippedInstance, UndefinedCorrelation
from .numerics import cos_sim, spearman_rho
from .traceio import TokenTrace

LEMMA_SLACK = 1e-10
ORTHSUM_SLACK = 1e-9
ORTHONORMALITY_TOL = 1e-10
MEAN_KEY_MIN_NORM = 1e-8


@dataclass(frozen=True)
class BoundInstance:
    """A query, a key set with bounded norms, and one distinguished key.

    The attention weight w of the distinguished key is computed with
    softmax at scale 1, matching the statement being checked.
    """

    q: np.ndarray
    keys: np.ndarray
    k_star: np.ndarray
    m_bound: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-12:
            raise DomainError("q must be unit norm")
        if np.any(np.sum(self.keys**2, axis=1) >= self.m_bound):
            raise DomainError("all key norms squared must be < m_bound")
        if np.sum(self.k_star**2) >= self.m_bound:
            raise DomainError("k_star norm squared must be < m_bound")

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    @property
    def mean_key(self) -> np.ndarray:
        return self.keys.mean(axis=0)

    @property
    def w(self) -> float:
        """Softmax weight of k_star among {k_star} + keys, scale 1."""
        logits = np.concatenate([[self.k_star @ self.q], self.keys @ self.q])
        logits -= logits.max()
        ex = np.exp(logits)
        return float(ex[0] / ex.sum())

    @property
    def alpha_q(self) -> float:
        return cos_sim(self.mean_key, self.q)

    @property
    def beta_q(self) -> float:
        return cos_sim(self.k_star, self.q)


@dataclass(frozen=True)
class Lemma1Result:
    lhs_finite: float
    lhs_asymptotic: float
    rhs: float
    holds: bool


def check_lemma1(inst: BoundInstance) -> Lemma1Result:
    """Attention-weight lower bound on CosSim(k*, q), finite-n and limit forms."""
    w = inst.w
    if not (0.0 < w < 1.0):
        raise DomainError(f"attention weight w = {w} outside (0, 1)")
    n, m = inst.n, inst.m_bound
    finite = (np.log(n / (n + 1.0)) - np.log1p(-w)) / (2.0 * m) - 1.0
    asymptotic = -np.log1p(-w) / (2.0 * m) - 1.0
    rhs = inst.beta_q
    return Lemma1Result(
        lhs_finite=float(finite),
        lhs_asymptotic=float(asymptotic),
        rhs=rhs,
        holds=bool(finite <= rhs + LEMMA_SLACK),
    )


def theorem2_rhs(alpha: float, beta: float) -> float:
    return 1.0 + alpha * beta - 0.5 * alpha**2 - 0.5 * beta**2


@dataclass(frozen=True)
class Theorem2Result:
    lhs: float
    rhs: float
    holds: bool


def check_theorem2(inst: BoundInstance) -> Theorem2Result:
    """Upper bound on CosSim(kbar, k*) from the two query similarities.

    Raises SkippedInstance when the hypotheses (beta > 0 > alpha) fail.
    """
    alpha, beta = inst.alpha_q, inst.beta_q
    if not (beta > 0.0 and alpha < 0.0):
        raise SkippedInstance(f"hypotheses unmet: alpha = {alpha}, beta = {beta}")
    lhs = cos_sim(inst.mean_key, inst.k_star)
    rhs = theorem2_rhs(alpha, beta)
    return Theorem2Result(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + LEMMA_SLACK))


def check_orthsum(basis: np.ndarray, y) -> tuple[float, bool]:
    """Sum of squared cosines of an orthonormal basis against y equals 1."""
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim != 2 or basis.shape[0] != basis.shape[1]:
        raise BasisError(f"basis must be square, got shape {basis.shape}")
    gram = basis @ basis.T
    if np.max(np.abs(gram - np.eye(basis.shape[0]))) > ORTHONORMALITY_TOL:
        raise BasisError("vectors are not orthonormal at 1e-10")
    y = np.asarray(y, dtype=np.float64)
    if np.linalg.norm(y) == 0.0:
        raise DomainError("y must be nonzero")
    sums = float(np.sum([cos_sim(x, y) ** 2 for x in basis]))
    return sums, bool(abs(sums - 1.0) <= ORTHSUM_SLACK)


# -- randomized suites -------------------------------------------------------


def random_bound_instance(
    rng: np.random.Generator, d: int, n: int, m_bound: float
) -> BoundInstance:
    """Instance with the key cluster tilted away from q and k* toward it.

    Rejects draws whose mean key is shorter than 1e-8 (cosine against it
    would be undefined); the suite counts rejections.
    """
    q = rng.normal(size=d)
    q /= np.linalg.norm(q)
    center = rng.normal(size=d)
    center /= np.linalg.norm(center)
    if center @ q > 0:
        center -= 2.0 * (center @ q) * q
    dirs = center + 0.4 * rng.normal(size=(n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    norms = np.sqrt(m_bound) * rng.uniform(0.2, 0.99, size=n)
    keys = dirs * norms[:, None]
    if np.linalg.norm(keys.mean(axis=0)) < MEAN_KEY_MIN_NORM:
        raise SkippedInstance("mean key too short")
    star_dir = q + 0.4 * rng.normal(size=d)
    star_dir /= np.linalg.norm(star_dir)
    k_star = star_dir * np.sqrt(m_bound) * rng.uniform(0.2, 0.99)
    return BoundInstance(q=q, keys=keys, k_star=k_star, m_bound=m_bound)


@dataclass(frozen=True)
class SuiteResult:
    check: str
    instances: int
    violations: int
    max_slack: float
    skipped: int = 0

    def row(self):
        return (self.check, self.instances, self.violations, self.max_slack)


def run_lemma1_suite(count: int, seed: int = 0, fault: bool = False) -> SuiteResult:
    """Randomized verification of the attention-weight bound.

    `fault` flips the bound's sign as a negative control for the CLI.
    """
    rng = np.random.default_rng(seed)
    checked = violations = skipped = 0
    max_slack = -np.inf
    while checked < count:
        d = int(rng.choice([2, 8, 64]))
        n = int(rng.integers(4, 257))
        m = float(rng.uniform(1.0, 16.0))
        try:
            inst = random_bound_instance(rng, d, n, m)
        except SkippedInstance:
            skipped += 1
            continue
        res = check_lemma1(inst)
        lhs = -res.lhs_finite if fault else res.lhs_finite
        slack = lhs - res.rhs
        max_slack = max(max_slack, slack)
        if slack > LEMMA_SLACK:
            violations += 1
        checked += 1
    return SuiteResult("lemma1", checked, violations, float(max_slack), skipped)


def run_theorem2_suite(count: int, seed: int = 1, fault: bool = False) -> SuiteResult:
    """Randomized verification of the mean-key dissimilarity bound."""
    rng = np.random.default_rng(seed)
    checked = violations = skipped = 0
    max_slack = -np.inf
    while checked < count:
        d = int(rng.choice([2, 8, 64]))
        n = int(rng.integers(4, 257))
        m = float(rng.uniform(1.0, 16.0))
        try:
            inst = random_bound_instance(rng, d, n, m)
            res = check_theorem2(inst)
        except SkippedInstance:
            skipped += 1
            continue
        lhs = -res.lhs if fault else res.lhs
        slack = lhs - res.rhs
        max_slack = max(max_slack, slack)
        if slack > LEMMA_SLACK:
            violations += 1
        checked += 1
    return SuiteResult("theorem2", checked, violations, float(max_slack), skipped)


def run_orthsum_suite(count: int, seed: int = 2, fault: bool = False) -> SuiteResult:
    """Randomized verification of the squared-cosine expansion identity."""
    rng = np.random.default_rng(seed)
    violations = 0
    max_slack = -np.inf
    for _ in range(count):
        d = int(rng.integers(2, 33))
        basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
        y = rng.normal(size=d)
        while np.linalg.norm(y) == 0.0:
            y = rng.normal(size=d)
        total, _ = check_orthsum(basis, y)
        if fault:
            total += 1.0
        slack = abs(total - 1.0)
        max_slack = max(max_slack, slack)
        if slack > ORTHSUM_SLACK:
            violations += 1
    return SuiteResult("orthsum", count, violations, float(max_slack))


# -- trace-level pipeline ----------------------------------------------------


def bound_pipeline(trace: TokenTrace, model: AttentionModel):
    """Scatter rows linking attention weight to the key-diversity score.

    For every (layer, head, query position) the argmax-attention key is
    located; the row carries its weight w, its cosine to the query, and
    its negated cosine to the mean of the *other* keys (the statement's
    k-bar excludes the distinguished key). The returned trend is the
    Spearman rho between weight and score pooled over every (query, key)
    pair, i.e. across keys, not along the argmax time series -- the
    latter is confounded by the mean diluting as the cache grows. None
    when degenerate.
    """
    rows = []
    ws = []
    scores = []
    for layer in range(trace.layers):
        for head in range(trace.kv_heads):
            keys = trace.keys[layer, head]
            attn = full_causal_attention(trace, model, layer, head)
            g = model.group_size
            prefix = np.cumsum(keys, axis=0)
            for t in range(1, trace.length):
                row = attn[t, : t + 1]
                j = int(np.argmax(row))
                q_mean = trace.queries[layer, head * g : (head + 1) * g, t].mean(axis=0)
                kbar_excl = (prefix[t] - keys[j]) / t
                rows.append(
                    (layer, head, t, float(row[j]), cos_sim(keys[j], q_mean),
                     -cos_sim(kbar_excl, keys[j]))
                )
                for k in range(t + 1):
                    kbar_k = (prefix[t] - keys[k]) / t
                    ws.append(float(row[k]))
                    scores.append(-cos_sim(kbar_k, keys[k]))
    try:
        trend = spearman_rho(ws, scores)
    except UndefinedCorrelation:
        trend = None
    return rows, trend


def outlier_identification(trace: TokenTrace, model: AttentionModel, layer: int = 0,
                           head: int = 0) -> tuple[int, int]:
    """(argmax mean received attention, argmax key dissimilarity) for one head."""
    from .analysis import key_dissimilarity, mean_received_attention

    attn = full_causal_attention(trace, model, layer, head)
    received = mean_received_attention(attn)
    dissim = key_dissimilarity(trace.keys[layer, head])
    return int(np.argmax(received)), int(np.argmax(dissim))
