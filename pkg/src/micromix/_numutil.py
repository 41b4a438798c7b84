"""Internal numeric helpers: SPD repair, seeded k-means, weighted moments.

Everything here is deterministic given explicit ``numpy.random.Generator``
inputs; nothing reads global RNG state.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

from .errors import DomainError, UnsplittableError

SPD_FLOOR = 1e-6


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed, a SeedSequence, or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def is_spd(a: np.ndarray, tol: float = 0.0) -> bool:
    """Cheap SPD check via Cholesky; `tol` shifts the diagonal first."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if not np.allclose(a, a.T, atol=1e-8 * (1.0 + np.abs(a).max())):
        return False
    try:
        np.linalg.cholesky(a + tol * np.eye(a.shape[0]))
        return True
    except np.linalg.LinAlgError:
        return False


def spd_floor(a: np.ndarray, floor: float = SPD_FLOOR) -> np.ndarray:
    """Symmetrize and floor eigenvalues at `floor`.

    Returns the input untouched (aside from symmetrization) when it is
    already comfortably SPD, so repeated application is cheap and exact.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    try:
        np.linalg.cholesky(a - floor * (1.0 - 1e-9) * np.eye(a.shape[0]))
        return a
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(a)
    w = np.maximum(w, floor)
    return symmetrize((v * w) @ v.T)


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix via Cholesky; raises DomainError otherwise."""
    a = np.asarray(a, dtype=float)
    try:
        c, low = sla.cho_factor(a, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DomainError(f"matrix is not symmetric positive definite: {exc}") from exc
    inv = sla.cho_solve((c, low), np.eye(a.shape[0]))
    return symmetrize(inv)


def spd_logdet(a: np.ndarray) -> float:
    """log det of an SPD matrix via Cholesky."""
    try:
        c = np.linalg.cholesky(np.asarray(a, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise DomainError("logdet of non-SPD matrix") from exc
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def gaussian_logpdf_rows(x: np.ndarray, mu: np.ndarray, precision: np.ndarray,
                         logdet_prec: float | None = None) -> np.ndarray:
    """log N(x_i; mu, precision^-1) for each row of x. Shape (n,)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    if logdet_prec is None:
        logdet_prec = spd_logdet(precision)
    diff = x - mu
    maha = np.einsum("ij,jk,ik->i", diff, precision, diff)
    return 0.5 * (logdet_prec - d * np.log(2.0 * np.pi) - maha)


def weighted_mean(rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean of rows; weights must have positive sum."""
    wsum = float(np.sum(weights))
    if wsum <= 0.0:
        raise DomainError("weight mass is zero")
    return (weights @ rows) / wsum


def weighted_scatter(rows: np.ndarray, weights: np.ndarray, center: np.ndarray) -> np.ndarray:
    """sum_i w_i (r_i - c)(r_i - c)^T / sum_i w_i."""
    wsum = float(np.sum(weights))
    if wsum <= 0.0:
        raise DomainError("weight mass is zero")
    diff = rows - center
    return symmetrize((diff.T * weights) @ diff / wsum)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def kmeans(x: np.ndarray, k: int, rng, n_init: int = 5, max_iter: int = 100):
    """Seeded Lloyd k-means with k-means++ starts.

    Returns (labels, centers, inertia). May yield empty clusters on
    degenerate data; callers decide whether that is an error.
    """
    x = np.asarray(x, dtype=float)
    rng = as_rng(rng)
    n = x.shape[0]
    if k < 1 or k > n:
        raise DomainError(f"k={k} out of range for n={n}")
    best = None
    for _ in range(n_init):
        centers = _kmeans_pp_init(x, k, rng)
        labels = np.zeros(n, dtype=int)
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            if np.array_equal(new_labels, labels) and _ > 0:
                break
            labels = new_labels
            for j in range(k):
                mask = labels == j
                if mask.any():
                    centers[j] = x[mask].mean(axis=0)
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        inertia = float(d2[np.arange(n), labels].sum())
        if best is None or inertia < best[2]:
            best = (labels.copy(), centers.copy(), inertia)
    return best


def kmeans_nonempty(x: np.ndarray, k: int, seed, retries: int = 10):
    """k-means that retries with fresh seeds until every cluster is nonempty."""
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    for child in ss.spawn(retries):
        labels, centers, inertia = kmeans(x, k, np.random.default_rng(child))
        if len(np.unique(labels)) == k:
            return labels, centers, inertia
    raise UnsplittableError(f"could not split {x.shape[0]} samples into {k} nonempty clusters")
