"""Statistical dependence and projection primitives.

Squared distance correlation follows the double-centring recipe: pairwise
Euclidean distance matrices, row/column/grand-mean centring, then
dCov^2 = mean(A * B) normalised by sqrt(dVar_X * dVar_Y).
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

from msidebias.core import settings
from msidebias.core.errors import DimensionError, EncodingError, NumericError

# Set up logging
logger = logging.getLogger(__name__)

# Sum-of-squares below this fraction of the raw scale counts as zero variance
_ZERO_VAR = 1e-20


@dataclass(frozen=True)
class DcValue:
    """Squared distance correlation and the sample count it was computed on"""
    value: float
    n: int


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def subsample_rows(n: int, cap: int, seed: int) -> np.ndarray:
    """Sorted uniform subsample of row indices (all rows when n <= cap)"""
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=cap, replace=False))


def _double_centered(x: np.ndarray) -> Tuple[np.ndarray, float]:
    """Double-centred distance matrix and its distance variance"""
    a = squareform(pdist(x, metric="euclidean"))
    row = a.mean(axis=1)
    col = a.mean(axis=0)
    a -= row[:, None]
    a -= col[None, :]
    a += row.mean()
    return a, float(np.vdot(a, a)) / a.shape[0] ** 2


def _dc_from_centered(a: np.ndarray, var_a: float, b: np.ndarray, var_b: float) -> float:
    if var_a <= 0.0 or var_b <= 0.0:
        return 0.0
    dcov2 = float(np.vdot(a, b)) / a.shape[0] ** 2
    value = dcov2 / np.sqrt(var_a * var_b)
    return float(min(1.0, max(0.0, value)))


def _prepare(X, Ys: Sequence, cap: Optional[int], seed: int):
    x = _as_matrix(X, "X")
    ys = [_as_matrix(y, f"Y[{i}]") for i, y in enumerate(Ys)]
    for i, y in enumerate(ys):
        if y.shape[0] != x.shape[0]:
            raise DimensionError(f"X has {x.shape[0]} rows but Y[{i}] has {y.shape[0]}")
    if x.shape[0] < 2:
        raise DimensionError("distance correlation needs at least 2 samples")
    cap = settings.DC_MAX_SAMPLES if cap is None else cap
    rows = subsample_rows(x.shape[0], cap, seed)
    if rows.size < x.shape[0]:
        logger.info(f"Subsampling {rows.size} of {x.shape[0]} rows for distance correlation (seed={seed})")
        x = x[rows]
        ys = [y[rows] for y in ys]
    return x, ys


def distance_correlation_sq(X, Y, cap: Optional[int] = None, seed: int = 0) -> DcValue:
    """Squared distance correlation between paired samples of X (n x p) and Y (n x q).

    Returns 0 when either distance variance is zero. Inputs above ``cap``
    rows are uniformly subsampled with the given seed.
    """
    x, (y,) = _prepare(X, [Y], cap, seed)
    a, var_a = _double_centered(x)
    b, var_b = _double_centered(y)
    return DcValue(_dc_from_centered(a, var_a, b, var_b), x.shape[0])


def distance_correlation_sq_many(X, Ys: Sequence, cap: Optional[int] = None, seed: int = 0) -> List[DcValue]:
    """dc of X against each of several matrices, centring X once"""
    x, ys = _prepare(X, Ys, cap, seed)
    a, var_a = _double_centered(x)
    out = []
    for y in ys:
        b, var_b = _double_centered(y)
        out.append(DcValue(_dc_from_centered(a, var_a, b, var_b), x.shape[0]))
    return out


def pearson_corr_sq(u, v) -> float:
    """Squared sample Pearson correlation; 0 when either vector is constant"""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.size} vs {v.size}")
    if u.size < 2:
        raise DimensionError("pearson correlation needs at least 2 samples")
    uc = u - u.mean()
    vc = v - v.mean()
    suu = float(uc @ uc)
    svv = float(vc @ vc)
    if suu <= _ZERO_VAR * (1.0 + float(u @ u)) or svv <= _ZERO_VAR * (1.0 + float(v @ v)):
        return 0.0
    r2 = float(uc @ vc) ** 2 / (suu * svv)
    return min(1.0, max(0.0, r2))


def one_hot(labels, K: int) -> np.ndarray:
    """n x K indicator matrix of integer labels in [0, K)"""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise EncodingError(f"labels must be a vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        bad = labels[(labels < 0) | (labels >= K)][0]
        raise EncodingError(f"label {bad} outside [0, {K})")
    out = np.zeros((labels.size, K), dtype=np.float64)
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray
    scores: np.ndarray
    explained_variance_ratio: np.ndarray


def pca_project(X, k: int) -> PcaResult:
    """Principal components from the eigendecomposition of the sample covariance.

    Each component is signed so that its largest-magnitude entry is positive.
    """
    x = _as_matrix(X, "X")
    n, p = x.shape
    if n < 2:
        raise DimensionError("PCA needs at least 2 samples")
    if k < 1 or k > min(n, p):
        raise DimensionError(f"k={k} outside [1, min(n={n}, p={p})]")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order[:k]]
    for j in range(k):
        pivot = np.argmax(np.abs(eigvecs[:, j]))
        if eigvecs[pivot, j] < 0:
            eigvecs[:, j] *= -1
    total = eigvals.sum()
    ratio = eigvals[:k] / total if total > 0 else np.zeros(k)
    components = eigvecs.T
    return PcaResult(components, centered @ eigvecs, ratio)
