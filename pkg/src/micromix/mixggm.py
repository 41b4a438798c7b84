"""Compositional route: CLR transform, then a Gaussian mixture by MM.

Counts are mapped to Z = clr(X + pseudo_count), whose rows sum to zero,
and Z is modeled as a K-component multivariate Gaussian mixture. The
update sweep is the Gaussian specialization of the MPLN block updates:

    w_il    <- pi_l N(z_i; mu_l, Sigma_l) / sum_m ...   (log-sum-exp)
    pi_l    <- mean_i w_il
    mu_l    <- sum_i w_il z_i / sum_i w_il
    Sigma_l <- weighted scatter about mu_l (eigenvalue-floored)

With a sparsity penalty the scatter goes through the graphical lasso and
the component precision is the penalized estimate. The reported network
for component l is Sigma_l^{-1} of the CLR data, which approximates the
log-basis precision when d is moderately large (the centering projector
G = I - J/d is then close to the identity).

Note the CLR covariance is singular in exact arithmetic (rows sum to
zero); the pseudo-counted, eigenvalue-floored scatter keeps the fit
well-posed, which is the standard practical treatment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._numutil import (kmeans_nonempty, spd_floor, spd_inverse, spd_logdet,
                       symmetrize, weighted_mean, weighted_scatter)
from .datamodel import ComponentParams, FitConfig, MixtureModel, SampleTaxaMatrix
from .errors import DomainError, FitError, UnsplittableError, ValidationError
from .glasso import glasso_fit, tune_cv, tune_fixed, tune_iterative, tune_stars
from .mixmpln import DEATH_PI, SIGMA_FLOOR, _deterministic_labels, update_pi

__all__ = ["ClrMatrix", "clr", "GaussState", "gaussian_mm_step", "fit_mixggm",
           "fit_gaussian_mixture", "gaussian_mixture_loglik"]


@dataclass(frozen=True)
class ClrMatrix:
    """Centered log-ratio matrix; every row sums to zero (within 1e-9)."""

    values: np.ndarray
    pseudo_count: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if np.abs(values.sum(axis=1)).max() > 1e-9:
            raise ValidationError("CLR rows must sum to zero")
        object.__setattr__(self, "values", values)


def clr(x, pseudo_count: float = 0.5) -> ClrMatrix:
    """Z_ij = log((x_ij + c) / geometric_row_mean(x_i + c)), re-centered.

    The pseudo count keeps zeros finite; scaling a whole row leaves its
    transform unchanged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if (x < 0).any():
        raise DomainError("counts must be nonnegative")
    shifted = x + pseudo_count
    if (shifted <= 0).any():
        raise DomainError("zero entries need a positive pseudo_count")
    logs = np.log(shifted)
    z = logs - logs.mean(axis=1, keepdims=True)
    z = z - z.mean(axis=1, keepdims=True)        # exact re-centering
    return ClrMatrix(z, pseudo_count)


# ---------------------------------------------------------------------------
# Gaussian mixture MM


@dataclass
class GaussState:
    pi: np.ndarray
    mu: np.ndarray                  # (K, d)
    sigma: np.ndarray               # (K, d, d)
    precision: np.ndarray
    logdet: np.ndarray
    weights: np.ndarray             # (n, K)
    alive: np.ndarray
    rho: np.ndarray | None = None
    objective: float = -np.inf
    counters: dict = field(default_factory=lambda: {
        "underflow_rows": 0, "dead_components": []})

    @property
    def k(self) -> int:
        return self.pi.shape[0]


def _gauss_logliks(z: np.ndarray, state: GaussState) -> np.ndarray:
    n, d = z.shape
    out = np.empty((n, state.k))
    for l in range(state.k):
        diff = z - state.mu[l]
        maha = np.einsum("ij,jk,ik->i", diff, state.precision[l], diff)
        out[:, l] = 0.5 * (state.logdet[l] - d * np.log(2.0 * np.pi) - maha)
    return out


def _gauss_weights(state: GaussState, z: np.ndarray):
    logliks = _gauss_logliks(z, state)
    with np.errstate(divide="ignore"):
        log_mix = logliks + np.log(state.pi)[None, :]
    row_lse = logsumexp(log_mix, axis=1)
    bad = ~np.isfinite(row_lse)
    weights = np.exp(log_mix - row_lse[:, None])
    if bad.any():
        state.counters["underflow_rows"] += int(bad.sum())
        alive = state.pi > 0
        weights[bad] = 0.0
        weights[np.ix_(bad, alive)] = 1.0 / alive.sum()
    return weights, float(row_lse.sum())


def _gauss_init(z: np.ndarray, k: int, seed, deterministic: bool) -> GaussState:
    n, d = z.shape
    if deterministic:
        labels = _deterministic_labels(z, k)
        if len(np.unique(labels)) < k:
            raise UnsplittableError("farthest-point start produced an empty cluster")
    else:
        labels, _, _ = kmeans_nonempty(z, k, seed)
    pi = np.array([(labels == l).mean() for l in range(k)])
    mu = np.empty((k, d))
    sigma = np.empty((k, d, d))
    for l in range(k):
        rows = z[labels == l]
        mu[l] = rows.mean(axis=0)
        sigma[l] = spd_floor(np.cov(rows, rowvar=False, bias=True).reshape(d, d),
                             SIGMA_FLOOR)
    precision = np.array([spd_inverse(s) for s in sigma])
    logdet = np.array([spd_logdet(p) for p in precision])
    weights = np.zeros((n, k))
    weights[np.arange(n), labels] = 1.0
    return GaussState(pi=pi, mu=mu, sigma=sigma, precision=precision, logdet=logdet,
                      weights=weights, alive=np.ones(k, dtype=bool))


def _gauss_sigma_update(state: GaussState, l: int, config: FitConfig, z: np.ndarray):
    scatter = weighted_scatter(z, state.weights[:, l], state.mu[l])
    if config.penalty == "none":
        state.sigma[l] = spd_floor(scatter, SIGMA_FLOOR)
        state.precision[l] = spd_inverse(state.sigma[l])
        state.logdet[l] = spd_logdet(state.precision[l])
        return
    if config.penalty == "iterative":
        state.rho[l] = tune_iterative(state.precision[l], scatter.shape[0],
                                      state.weights.shape[0])
    s = scatter.copy()
    np.fill_diagonal(s, np.maximum(np.diag(s), 1e-8))
    sol = glasso_fit(s, float(state.rho[l]), tol=config.glasso_tol,
                     max_iter=config.glasso_max_iter,
                     penalize_diagonal=config.penalize_diagonal,
                     precision_init=state.precision[l])
    state.precision[l] = sol.precision
    state.sigma[l] = spd_inverse(sol.precision)
    state.logdet[l] = spd_logdet(sol.precision)


def gaussian_mm_step(z, state: GaussState, config: FitConfig | None = None) -> GaussState:
    """One full sweep: weights, pi, mu, Sigma. Returns the mutated state."""
    z = np.asarray(z, dtype=float)
    config = config or FitConfig(engine="mixggm")
    weights, obj = _gauss_weights(state, z)
    state.weights = weights
    state.objective = obj
    _gauss_block_updates(z, state, config)
    return state


def _gauss_block_updates(z: np.ndarray, state: GaussState, config: FitConfig):
    """pi, mu, Sigma updates given the current responsibilities."""
    state.pi = update_pi(state.weights)
    newly_dead = (state.pi < DEATH_PI) & state.alive
    for l in np.where(newly_dead)[0]:
        state.alive[l] = False
        state.counters["dead_components"].append(int(l))
    for l in range(state.k):
        if not state.alive[l]:
            continue
        w_col = state.weights[:, l]
        if w_col.sum() <= 0:
            state.alive[l] = False
            state.counters["dead_components"].append(int(l))
            continue
        state.mu[l] = weighted_mean(z, w_col)
        _gauss_sigma_update(state, l, config, z)


def gaussian_mixture_loglik(z, pi, mus, sigmas) -> float:
    """log prod_i sum_l pi_l N(z_i; mu_l, Sigma_l)."""
    z = np.asarray(z, dtype=float)
    k = len(pi)
    precs = [spd_inverse(np.asarray(s)) for s in sigmas]
    logdets = [spd_logdet(p) for p in precs]
    n, d = z.shape
    logliks = np.empty((n, k))
    for l in range(k):
        diff = z - np.asarray(mus[l])
        maha = np.einsum("ij,jk,ik->i", diff, precs[l], diff)
        logliks[:, l] = 0.5 * (logdets[l] - d * np.log(2.0 * np.pi) - maha)
    with np.errstate(divide="ignore"):
        return float(logsumexp(logliks + np.log(np.asarray(pi))[None, :], axis=1).sum())


def _fit_gauss_once(z: np.ndarray, config: FitConfig, seed, deterministic: bool):
    state = _gauss_init(z, config.k, seed, deterministic)
    labels = state.weights.argmax(axis=1)
    if config.penalty != "none":
        d = z.shape[1]
        rho = np.zeros(config.k)
        for l in range(config.k):
            if config.penalty in ("fixed", "iterative"):
                rho[l] = tune_fixed(d, z.shape[0], state.precision[l])
            elif config.penalty == "cv":
                rows = z[labels == l]
                if rows.shape[0] < config.cv_folds:
                    rows = z
                rho[l] = tune_cv(rows, config.cv_folds, config.rho_grid, seed=config.seed,
                                 penalize_diagonal=config.penalize_diagonal,
                                 glasso_tol=config.glasso_tol)
            else:
                rows = z[labels == l] if (labels == l).sum() >= 4 else z
                grid = tuple(sorted(config.rho_grid, reverse=True))
                rho[l] = tune_stars(rows, grid, n_subsamples=config.stars_subsamples,
                                    instability_cap=config.stars_cap, seed=config.seed,
                                    penalize_diagonal=config.penalize_diagonal,
                                    glasso_tol=config.glasso_tol).rho
        state.rho = rho

    def penalty_now():
        return sum(0.5 * state.weights[:, l].sum() * state.rho[l]
                   * (np.abs(state.precision[l]).sum()
                      - np.abs(np.diag(state.precision[l])).sum())
                   for l in range(state.k))

    trace = []
    pen_trace = []
    prev = None
    calm = 0
    converged = False
    for it in range(config.max_iter):
        weights, obj = _gauss_weights(state, z)
        state.weights = weights
        state.objective = obj
        trace.append(obj)
        if state.rho is not None:
            pen_trace.append(obj - penalty_now())
        if prev is not None:
            rel = abs(obj - prev) / max(1.0, abs(prev))
            calm = calm + 1 if rel < config.tol else 0
            if calm >= config.patience:
                converged = True
                break
        prev = obj
        _gauss_block_updates(z, state, config)
    weights, obj = _gauss_weights(state, z)
    state.weights = weights
    state.objective = obj
    trace.append(obj)
    if state.rho is not None:
        pen_trace.append(obj - penalty_now())
    state.counters["trace"] = trace
    if pen_trace:
        state.counters["penalized_trace"] = pen_trace
    state.counters["converged"] = converged
    state.counters["iterations"] = len(trace) - 1
    return state


def fit_gaussian_mixture(z, config: FitConfig) -> MixtureModel:
    """Gaussian mixture on an arbitrary real matrix (no CLR), best restart."""
    z = np.asarray(z, dtype=float)
    ss = np.random.SeedSequence(config.seed)
    best = None
    failures = []
    for r, child in enumerate(ss.spawn(max(config.n_restarts, 1))):
        try:
            state = _fit_gauss_once(z, config, child, deterministic=(r == 0))
        except (DomainError, UnsplittableError, np.linalg.LinAlgError) as exc:
            failures.append(f"restart {r}: {type(exc).__name__}: {exc}")
            continue
        if best is None or state.objective > best.objective:
            best = state
            best.counters["restart"] = r
    if best is None:
        raise FitError("all restarts failed", diagnostics={"failures": failures})
    comps = tuple(ComponentParams(best.mu[l], best.sigma[l], best.precision[l])
                  for l in range(best.k))
    diag = {
        "converged": bool(best.counters.get("converged", False)),
        "iterations": int(best.counters.get("iterations", 0)),
        "dead_components": list(best.counters.get("dead_components", [])),
        "underflow_rows": int(best.counters.get("underflow_rows", 0)),
        "objective": float(best.objective),
        "restart": int(best.counters.get("restart", 0)),
        "failed_restarts": failures,
    }
    if best.rho is not None:
        diag["rho"] = [float(r) for r in best.rho]
    return MixtureModel(pi=best.pi, components=comps, responsibilities=best.weights,
                        lambdas=None, loglik_trace=tuple(best.counters.get("trace", ())),
                        diagnostics=diag)


def fit_mixggm(x, config: FitConfig) -> MixtureModel:
    """CLR the counts, then fit the Gaussian mixture; the returned component
    precisions are the network estimates."""
    if config.engine != "mixggm":
        raise DomainError(f"config.engine is {config.engine!r}, expected 'mixggm'")
    if isinstance(x, SampleTaxaMatrix):
        x = x.counts
    z = clr(x, config.pseudo_count).values
    model = fit_mixggm_on_clr(z, config)
    return model


def fit_mixggm_on_clr(z, config: FitConfig) -> MixtureModel:
    model = fit_gaussian_mixture(np.asarray(z, dtype=float), config)
    model.diagnostics["transform"] = "clr"
    model.diagnostics["pseudo_count"] = config.pseudo_count
    return model
