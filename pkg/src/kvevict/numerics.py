"""Dense linear-algebra and statistics primitives shared by every other module.

All functions operate on float64 numpy arrays and are pure: they never
mutate their inputs. Vectors are 1-D arrays, matrices 2-D row-major.
"""

import numpy as np

from .errors import DimError, FullyMaskedError, UndefinedCorrelation

# Guard for cosine denominators: cos(a, b) = a.b / max(|a||b|, EPS_NORM).
EPS_NORM = 1e-12

# Cholesky factor threshold below which a Gram matrix is reported singular.
GRAM_SINGULAR_TOL = 1e-10


def as_vec(x, name: str = "vector") -> np.ndarray:
    """Validate and widen a 1-D sequence to a float64 vector.

    Rejects empty input and non-finite entries.
    """
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimError(f"{name}: expected 1-D, got shape {v.shape}")
    if v.size == 0:
        raise DimError(f"{name}: length must be > 0")
    if not np.all(np.isfinite(v)):
        raise DimError(f"{name}: entries must be finite")
    return v


def as_mat(x, name: str = "matrix") -> np.ndarray:
    """Validate and widen a 2-D sequence to a float64 matrix."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimError(f"{name}: expected 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DimError(f"{name}: entries must be finite")
    return m


def cos_sim(a, b) -> float:
    """Cosine similarity a.b / max(|a||b|, eps), clamped to [-1, 1]."""
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape != b.shape:
        raise DimError(f"cos_sim: shapes {a.shape} and {b.shape} differ")
    denom = max(np.linalg.norm(a) * np.linalg.norm(b), EPS_NORM)
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def normalize_rows(K: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm, with the EPS_NORM guard on each denominator."""
    norms = np.linalg.norm(K, axis=1, keepdims=True)
    return K / np.maximum(norms, EPS_NORM)


def pairwise_cos_sim(K) -> np.ndarray:
    """Pairwise cosine similarity matrix of the rows of K.

    Returns an n x n symmetric matrix with unit diagonal.
    """
    K = as_mat(K, "K")
    if K.shape[0] < 1:
        raise DimError("pairwise_cos_sim: need at least one row")
    Khat = normalize_rows(K)
    G = Khat @ Khat.T
    G = np.clip((G + G.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(G, 1.0)
    return G


def softmax_masked(logits, mask) -> np.ndarray:
    """Row-wise softmax of `logits + mask` where mask entries are 0 or -inf.

    Masked entries come out exactly 0; each row sums to 1 over the
    unmasked entries. Stabilized by subtracting the row max over the
    unmasked support.
    """
    logits = as_mat(logits, "logits")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != logits.shape:
        raise DimError(f"softmax_masked: mask shape {mask.shape} != logits shape {logits.shape}")
    valid = mask == 0.0
    if not np.all(valid | np.isneginf(mask)):
        raise DimError("softmax_masked: mask entries must be 0 or -inf")
    if not np.all(valid.any(axis=1)):
        bad = int(np.flatnonzero(~valid.any(axis=1))[0])
        raise FullyMaskedError(f"row {bad} has no unmasked entries")

    x = np.where(valid, logits, -np.inf)
    x = x - np.max(x, axis=1, keepdims=True)
    ex = np.exp(x)  # exp(-inf) == 0 exactly for masked entries
    return ex / ex.sum(axis=1, keepdims=True)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = np.arange(1, len(x) + 1, dtype=np.float64)
    # Average the rank over each group of equal values.
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Spearman rank correlation with average ranks for ties.

    Raises UndefinedCorrelation when either sequence is constant.
    """
    x = as_vec(x, "x")
    y = as_vec(y, "y")
    if x.shape != y.shape:
        raise DimError(f"spearman_rho: lengths {len(x)} and {len(y)} differ")
    if len(x) < 2:
        raise DimError("spearman_rho: need at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("constant input sequence")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    return float(np.clip(rx @ ry / denom, -1.0, 1.0))


def log_det_gram(K) -> float:
    """log det(K K^T) via Cholesky; -inf when the Gram matrix is singular.

    Singularity is reported when factorization fails or the smallest
    Cholesky diagonal entry falls below GRAM_SINGULAR_TOL.
    """
    K = as_mat(K, "K")
    G = K @ K.T
    G = (G + G.T) / 2.0
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return -np.inf
    d = np.diag(L)
    if np.min(d) <= GRAM_SINGULAR_TOL:
        return -np.inf
    return float(2.0 * np.sum(np.log(d)))


def topk_indices(scores, n_top: int) -> np.ndarray:
    """Indices of the n_top largest scores, ascending, ties to the lower index.

    Scores may contain +inf sentinels (unconditional keep) but not NaN.
    If n_top >= len(scores) every index is returned.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise DimError(f"topk_indices: expected 1-D scores, got shape {scores.shape}")
    if np.any(np.isnan(scores)):
        raise DimError("topk_indices: scores must not contain NaN")
    if n_top < 0:
        raise DimError("topk_indices: n_top must be >= 0")
    n = len(scores)
    if n_top >= n:
        return np.arange(n, dtype=np.int64)
    # lexsort uses the last key as primary: sort by -score, then index.
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:n_top]).astype(np.int64)
