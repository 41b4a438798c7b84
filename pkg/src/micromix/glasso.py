"""Sparse precision estimation:  argmax  log det(T) - tr(S T) - rho * ||T||_1.

The solver does block coordinate ascent directly on the precision matrix
(one row/column pair per block), so the primal objective is non-decreasing
after every block update. For the column block (t12, t22) with T11 fixed,

    log det T = log det T11 + log(t22 - t12' Q t12),      Q = T11^{-1}
    t22* = 1/(s22 + rho_diag)
    t12* = argmin  1/2 u' [(s22 + rho_diag) Q] u + s12' u + rho ||u||_1

where the inner problem is an ordinary lasso solved by coordinate descent
warm-started at the current t12. Q is read off the maintained inverse W
via the block identity Q = W11 - w12 w12' / w22.

By default the diagonal is not penalized (rho_diag = 0), so at the
solution W = T^{-1} satisfies W_jj = S_jj and |W_ij - S_ij| <= rho off
the diagonal, with equality signed by T_ij on the support. That KKT
certificate is the convergence criterion.

Four strategies pick rho: a fixed formula 2 d^2 / (N ||T_init||_1),
the same formula re-applied to the current iterate, K-fold cross
validation on held-out Gaussian log-likelihood, and stability selection
(smallest rho whose monotonized edge instability stays under a cap).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._numutil import as_rng, spd_inverse, spd_logdet, symmetrize
from .errors import DomainError

try:
    from numba import njit as _njit
    _HAVE_NUMBA = True
except ImportError:                                  # pragma: no cover
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco

__all__ = [
    "GlassoSolution", "glasso_fit", "tune_fixed", "tune_iterative",
    "tune_cv", "tune_stars", "StarsResult",
]


@dataclass(frozen=True)
class GlassoSolution:
    precision: np.ndarray
    rho: float
    objective: float
    iterations: int
    converged: bool
    kkt_residual: float
    objective_trace: tuple = ()


def _check_cov_input(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DomainError("S must be square")
    if not np.allclose(s, s.T, atol=1e-8 * (1.0 + np.abs(s).max())):
        raise DomainError("S must be symmetric")
    if (np.diag(s) <= 0).any():
        raise DomainError("S must have a strictly positive diagonal")
    return symmetrize(s)


def glasso_objective(precision: np.ndarray, s: np.ndarray, rho: float,
                     penalize_diagonal: bool = False) -> float:
    pen = np.abs(precision).sum()
    if not penalize_diagonal:
        pen -= np.abs(np.diag(precision)).sum()
    return spd_logdet(precision) - float(np.sum(s * precision)) - rho * pen


@_njit(cache=True)
def _lasso_cd_kernel(a, b, rho, u, tol, max_sweeps):      # pragma: no cover
    m = u.shape[0]
    grad = a @ u + b
    for _ in range(max_sweeps):
        delta_max = 0.0
        for k in range(m):
            g0 = grad[k] - a[k, k] * u[k]
            if g0 > rho:
                new = -(g0 - rho) / a[k, k]
            elif g0 < -rho:
                new = -(g0 + rho) / a[k, k]
            else:
                new = 0.0
            step = new - u[k]
            if step != 0.0:
                for i in range(m):
                    grad[i] += a[i, k] * step
                u[k] = new
                if abs(step) > delta_max:
                    delta_max = abs(step)
        if delta_max <= tol:
            break
    return u


def _lasso_cd(a: np.ndarray, b: np.ndarray, rho: float, u: np.ndarray,
              tol: float, max_sweeps: int = 300) -> np.ndarray:
    """Coordinate descent for  min 1/2 u'Au + b'u + rho||u||_1,  A SPD.

    Warm-started in place at u; monotone in its own objective, which is
    what makes the outer block update safe to truncate.
    """
    return _lasso_cd_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b),
                            float(rho), u, float(tol), int(max_sweeps))


def _kkt_residual(precision: np.ndarray, w: np.ndarray, s: np.ndarray, rho: float,
                  rho_diag: float) -> float:
    """Max violation of the stationarity conditions for W = precision^{-1}."""
    d = s.shape[0]
    off = ~np.eye(d, dtype=bool)
    diff = w - s
    zero = off & (precision == 0.0)
    nonzero = off & (precision != 0.0)
    resid = 0.0
    if zero.any():
        resid = max(resid, float((np.abs(diff[zero]) - rho).max()))
    if nonzero.any():
        resid = max(resid, float(np.abs(diff[nonzero] - rho * np.sign(precision[nonzero])).max()))
    resid = max(resid, float(np.abs(np.diag(diff) - rho_diag).max()))
    return resid


def glasso_fit(s, rho: float, tol: float = 1e-6, max_iter: int = 200,
               penalize_diagonal: bool = False,
               precision_init: np.ndarray | None = None) -> GlassoSolution:
    """Solve the penalized precision problem for one value of rho.

    Convergence means the KKT residual is <= tol. When max_iter sweeps
    are exhausted first, the current (still SPD) iterate is returned with
    converged=False. precision_init warm-starts the block ascent (any
    SPD matrix works; path fits reuse the previous solution).
    """
    s = _check_cov_input(s)
    if rho < 0:
        raise DomainError("rho must be >= 0")
    d = s.shape[0]
    rho_diag = rho if penalize_diagonal else 0.0

    if d == 1:
        prec = np.array([[1.0 / (s[0, 0] + rho_diag)]])
        obj = glasso_objective(prec, s, rho, penalize_diagonal)
        return GlassoSolution(prec, float(rho), obj, 0, True, 0.0, (obj,))

    if precision_init is not None:
        prec = symmetrize(np.asarray(precision_init, dtype=float).copy())
        w = spd_inverse(prec)
    else:
        # Feasible start: diagonal solution (exact when everything thresholds).
        prec = np.diag(1.0 / (np.diag(s) + rho_diag))
        w = np.diag(np.diag(s) + rho_diag)

    trace = [glasso_objective(prec, s, rho, penalize_diagonal)]
    # inner lasso runs two decades tighter than the outer certificate
    inner_tol = max(tol * 1e-2, 1e-12) * max(1.0, float(np.abs(s).max()))
    converged = False
    sweeps = 0
    resid = np.inf
    idx_all = np.arange(d)
    for sweeps in range(1, max_iter + 1):
        for j in range(d):
            idx = np.delete(idx_all, j)
            w11 = w[np.ix_(idx, idx)]
            w12 = w[idx, j]
            w22 = w[j, j]
            q = w11 - np.outer(w12, w12) / w22          # = T11^{-1}
            s12 = s[idx, j]
            c = s[j, j] + rho_diag
            u = prec[idx, j].copy()
            u = _lasso_cd(c * q, s12, rho, u, inner_tol)
            qu = q @ u
            t = 1.0 / c                              # optimal t22 - u'Qu
            prec[idx, j] = u
            prec[j, idx] = u
            prec[j, j] = t + u @ qu
            # refresh W = T^{-1} from the block identity
            w[np.ix_(idx, idx)] = q + np.outer(qu, qu) / t
            w[idx, j] = -qu / t
            w[j, idx] = -qu / t
            w[j, j] = 1.0 / t
        trace.append(glasso_objective(prec, s, rho, penalize_diagonal))
        resid = _kkt_residual(prec, w, s, rho, rho_diag)
        if resid <= tol:
            converged = True
            break

    prec = symmetrize(prec)
    # report the certificate against an exactly inverted solution
    resid = _kkt_residual(prec, spd_inverse(prec), s, rho, rho_diag)
    return GlassoSolution(prec, float(rho), trace[-1], sweeps, converged or resid <= tol,
                          resid, tuple(trace))


# ---------------------------------------------------------------------------
# Tuning strategies


def tune_fixed(d: int, n: int, precision_init: np.ndarray) -> float:
    """rho = 2 d^2 / (N ||T_init||_1) with the entrywise l1 norm."""
    if n <= 0:
        raise DomainError("N must be positive")
    norm1 = float(np.abs(np.asarray(precision_init, dtype=float)).sum())
    if norm1 <= 0:
        raise DomainError("initial precision has zero l1 norm")
    return 2.0 * d * d / (n * norm1)


def tune_iterative(current_precision: np.ndarray, d: int, n: int) -> float:
    """Same formula as tune_fixed, applied to the current iterate."""
    return tune_fixed(d, n, current_precision)


def _fold_indices(n: int, k_folds: int, rng) -> list:
    order = as_rng(rng).permutation(n)
    return [np.sort(order[f::k_folds]) for f in range(k_folds)]


def _gaussian_holdout_loglik(test: np.ndarray, mu: np.ndarray, precision: np.ndarray) -> float:
    d = test.shape[1]
    diff = test - mu
    s_test = symmetrize(diff.T @ diff / test.shape[0])
    return 0.5 * (spd_logdet(precision) - float(np.sum(s_test * precision))
                  - d * np.log(2.0 * np.pi))


def tune_cv(data, k_folds: int, rho_grid, fit_fn=None, seed: int = 0,
            penalize_diagonal: bool = False, glasso_tol: float = 1e-5,
            glasso_max_iter: int = 100) -> float:
    """Pick the grid rho with the best mean held-out Gaussian log-likelihood.

    Folds are a seeded permutation split. A degenerate (fold, rho) pair
    scores -inf instead of failing the whole search.
    """
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    grid = [float(r) for r in rho_grid]
    if not grid:
        raise DomainError("rho_grid must be nonempty")
    if k_folds < 2 or n < k_folds:
        raise DomainError(f"need n >= k_folds >= 2, got n={n}, k_folds={k_folds}")
    external_fit = fit_fn is not None

    folds = _fold_indices(n, k_folds, np.random.default_rng(seed))
    scores = np.zeros(len(grid))
    # evaluate the grid descending with warm starts; report in input order
    order = np.argsort(grid)[::-1]
    for fold in folds:
        mask = np.ones(n, dtype=bool)
        mask[fold] = False
        train, test = data[mask], data[fold]
        mu = train.mean(axis=0)
        diff = train - mu
        s_train = symmetrize(diff.T @ diff / train.shape[0])
        warm = None
        for gi in order:
            rho = grid[gi]
            try:
                if external_fit:
                    prec = fit_fn(s_train, rho)
                else:
                    prec = glasso_fit(s_train, rho, tol=glasso_tol,
                                      max_iter=glasso_max_iter,
                                      penalize_diagonal=penalize_diagonal,
                                      precision_init=warm).precision
                    warm = prec
                scores[gi] += _gaussian_holdout_loglik(test, mu, prec)
            except (DomainError, np.linalg.LinAlgError):
                scores[gi] += -np.inf
    return grid[int(np.argmax(scores))]


@dataclass(frozen=True)
class StarsResult:
    rho: float
    instability: tuple
    monotonized: tuple
    grid: tuple
    cap_satisfied: bool


def tune_stars(data, rho_grid, n_subsamples: int = 20, subsample_frac: float | None = None,
               instability_cap: float = 0.05, seed: int = 0, fit_fn=None,
               penalize_diagonal: bool = False, glasso_tol: float = 1e-5,
               glasso_max_iter: int = 100) -> StarsResult:
    """Stability selection over a descending rho grid.

    Per edge, instability is 2 p (1 - p) where p is the selection
    frequency across subsample fits; the total is the mean over edges.
    Returns the smallest rho whose running-max (monotonized) instability
    stays <= the cap, or the largest grid rho with cap_satisfied=False.
    """
    data = np.asarray(data, dtype=float)
    n, d = data.shape
    grid = [float(r) for r in rho_grid]
    if sorted(grid, reverse=True) != grid:
        raise DomainError("rho_grid must be sorted descending for stability selection")
    if n_subsamples < 2:
        raise DomainError("need at least 2 subsamples")
    if subsample_frac is None:
        subsample_frac = min(10.0 * np.sqrt(1.0 / n), 0.8)
    m = int(np.floor(subsample_frac * n))
    if m < 2:
        raise DomainError("subsample size too small")
    external_fit = fit_fn is not None

    rng = np.random.default_rng(seed)
    iu = np.triu_indices(d, k=1)
    freq = np.zeros((len(grid), iu[0].size))
    for _ in range(n_subsamples):
        rows = data[rng.choice(n, size=m, replace=False)]
        mu = rows.mean(axis=0)
        diff = rows - mu
        s_sub = symmetrize(diff.T @ diff / m)
        warm = None
        for gi, rho in enumerate(grid):          # grid is descending
            if external_fit:
                prec = fit_fn(s_sub, rho)
            else:
                prec = glasso_fit(s_sub, rho, tol=glasso_tol,
                                  max_iter=glasso_max_iter,
                                  penalize_diagonal=penalize_diagonal,
                                  precision_init=warm).precision
                warm = prec
            freq[gi] += (prec[iu] != 0.0)
    p = freq / n_subsamples
    instability = (2.0 * p * (1.0 - p)).mean(axis=1)
    monotonized = np.maximum.accumulate(instability)
    ok = monotonized <= instability_cap
    if ok.any():
        pick = int(np.where(ok)[0][-1])          # smallest rho still under the cap
        return StarsResult(grid[pick], tuple(instability), tuple(monotonized), tuple(grid), True)
    return StarsResult(grid[0], tuple(instability), tuple(monotonized), tuple(grid), False)
