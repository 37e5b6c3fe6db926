import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def clustered_keys(rng, n, d, n_outliers=1, spread=0.1):
    """n-row key matrix: a tight cluster plus `n_outliers` rows pointing in
    random directions nearly orthogonal to the cluster (cosine to the
    cluster mean stays below ~0.15). Returns (keys, outlier_indices)."""
    center = rng.normal(size=d)
    center /= np.linalg.norm(center)
    keys = center + spread * rng.normal(size=(n, d))
    outliers = rng.choice(n, size=n_outliers, replace=False)
    for idx in outliers:
        v = rng.normal(size=d)
        v -= (v @ center) * center
        v /= np.linalg.norm(v)
        keys[idx] = v + 0.1 * rng.normal() * center
    return keys, np.sort(outliers)
