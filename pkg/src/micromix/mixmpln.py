"""K-component Poisson log-normal mixture fitted by minorize-maximize.

Counts x_ij are conditionally Poisson(exp(lambda_ij)) with latent rows
lambda_i ~ N_d(mu_l, Sigma_l) under component l. The mixture
log-likelihood log prod_i sum_l pi_l p_l(x_i | lambda_il, Theta_l) is
lower-bounded through the log-concavity surrogate, giving weights

    w_il = pi_l p_l(x_i | lambda_il) / sum_m pi_m p_m(x_i | lambda_im)

and block coordinate ascent on the surrogate:

    pi_l     <- (1/n) sum_i w_il
    lambda   <- per-coordinate root of  -exp(v) + x_ij - <(lambda-mu), Theta_.j> = 0
                (safeguarded Newton; strictly decreasing, so the root is unique)
    mu_l     <- sum_i w_il lambda_il / sum_i w_il
    Sigma_l  <- sum_i w_il (lambda_il - mu_l)(lambda_il - mu_l)' / sum_i w_il

Coordinates are swept in ascending order using the freshest values of the
other coordinates; each exact coordinate root maximizes the (jointly
concave) latent block, which keeps the recorded objective non-decreasing.
With a sparsity penalty, the scatter is handed to the graphical lasso and
Sigma_l is re-derived from the penalized precision.

The recorded objective is the surrogate evaluated at the touching point,
i.e. sum_i log sum_l pi_l p_l(x_i | lambda_il, Theta_l).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from ._numutil import (spd_floor, spd_inverse, spd_logdet, symmetrize,
                       weighted_mean, weighted_scatter)
from .datamodel import ComponentParams, FitConfig, MixtureModel, SampleTaxaMatrix
from .errors import DomainError, FitError, NonconvergenceError, UnsplittableError
from .glasso import glasso_fit, tune_cv, tune_fixed, tune_iterative, tune_stars

__all__ = [
    "MmState", "mpln_log_density", "init_kmeans_moments", "compute_weights",
    "update_pi", "update_lambda_newton", "update_mu", "update_sigma",
    "fit_mixmpln", "mm_objective", "mm_surrogate",
]

DEATH_PI = 1e-8
SIGMA_FLOOR = 1e-6
LAMBDA_BRACKET = 30.0


# ---------------------------------------------------------------------------
# Densities


def _poisson_terms(x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """sum_j [-exp(lam_j) + lam_j x_j - log x_j!] per row."""
    return np.sum(-np.exp(lam) + lam * x - gammaln(x + 1.0), axis=-1)


def mpln_log_density(x, lam, mu, sigma=None, precision=None) -> float:
    """log of the joint count/latent density for one sample.

    The factorial term uses log-gamma, so counts up to 1e6 stay finite.
    """
    x = np.asarray(x, dtype=float).ravel()
    lam = np.asarray(lam, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    if precision is None:
        if sigma is None:
            raise DomainError("need sigma or precision")
        precision = spd_inverse(np.asarray(sigma, dtype=float))
    logdet = spd_logdet(precision)
    diff = lam - mu
    gauss = 0.5 * (logdet - lam.shape[0] * np.log(2.0 * np.pi)
                   - diff @ precision @ diff)
    return float(_poisson_terms(x, lam) + gauss)


def _component_logliks(x: np.ndarray, state: "MmState") -> np.ndarray:
    """(n, K) matrix of log p_l(x_i | lambda_il, Theta_l)."""
    n, d = x.shape
    out = np.empty((n, state.k))
    for l in range(state.k):
        lam = state.lambdas[l]
        diff = lam - state.mu[l]
        maha = np.einsum("ij,jk,ik->i", diff, state.precision[l], diff)
        out[:, l] = (_poisson_terms(x, lam)
                     + 0.5 * (state.logdet[l] - d * np.log(2.0 * np.pi) - maha))
    return out


# ---------------------------------------------------------------------------
# State


@dataclass
class MmState:
    pi: np.ndarray                 # (K,)
    mu: np.ndarray                 # (K, d)
    sigma: np.ndarray              # (K, d, d)
    precision: np.ndarray          # (K, d, d)
    logdet: np.ndarray             # (K,)
    lambdas: np.ndarray            # (K, n, d)
    weights: np.ndarray            # (n, K)
    alive: np.ndarray              # (K,) bool
    rho: np.ndarray | None = None  # per-component penalty, None = unpenalized
    iteration: int = 0
    objective: float = -np.inf
    counters: dict = field(default_factory=lambda: {
        "underflow_rows": 0, "newton_unbracketed": 0, "dead_components": []})

    @property
    def k(self) -> int:
        return self.pi.shape[0]

    def refresh_precision(self, l: int):
        self.precision[l] = spd_inverse(self.sigma[l])
        self.logdet[l] = spd_logdet(self.precision[l])


def _deterministic_labels(x: np.ndarray, k: int) -> np.ndarray:
    """Farthest-point k-means start; invariant under sample duplication."""
    n = x.shape[0]
    centers = [x[int(np.argmin(np.linalg.norm(x - x.mean(axis=0), axis=1)))]]
    for _ in range(1, k):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in centers], axis=0)
        centers.append(x[int(np.argmax(d2))])
    centers = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for _ in range(100):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        if np.array_equal(new, labels) and _ > 0:
            break
        labels = new
        for j in range(k):
            if (labels == j).any():
                centers[j] = x[labels == j].mean(axis=0)
    return labels


def _shrink_to_condition(sig: np.ndarray, eig_frac: float = 0.1) -> np.ndarray:
    """Blend toward diag(sig) until min eigenvalue >= eig_frac * min diag.

    lambda_min is concave, so the blend weight has a closed form; the
    diagonal is preserved exactly.
    """
    diag = np.diag(sig)
    target = eig_frac * diag.min()
    w_min = float(np.linalg.eigvalsh(sig)[0])
    if w_min >= target:
        return sig
    delta = (target - w_min) / (diag.min() - w_min)
    delta = min(max(delta, 0.0), 1.0)
    out = (1.0 - delta) * sig + delta * np.diag(diag)
    return spd_floor(out, SIGMA_FLOOR)


def _moment_component(counts: np.ndarray, sigma_floor: float = 1e-4):
    """Invert E[x] = exp(mu + s/2), var, cov to (mu, Sigma) for one cluster."""
    alpha = np.maximum(counts.mean(axis=0), 1e-6)
    var = counts.var(axis=0)
    sig_diag = np.log1p(np.maximum((var - alpha) / alpha ** 2, 0.0))
    sig_diag = np.maximum(sig_diag, sigma_floor)
    mu = np.log(alpha) - 0.5 * sig_diag
    d = counts.shape[1]
    if counts.shape[0] > 1:
        cov = np.cov(counts, rowvar=False, bias=True).reshape(d, d)
    else:
        cov = np.zeros((d, d))
    with np.errstate(divide="ignore", invalid="ignore"):
        sig_off = np.log(np.maximum(1.0 + cov / np.outer(alpha, alpha), 1e-6))
    # keep implied correlations inside (-1, 1), then condition jointly
    bound = 0.99 * np.sqrt(np.outer(sig_diag, sig_diag))
    sig = np.clip(sig_off, -bound, bound)
    np.fill_diagonal(sig, sig_diag)
    return mu, _shrink_to_condition(symmetrize(sig))


def init_kmeans_moments(x, k: int, seed=0, deterministic: bool = False,
                        retries: int = 10) -> MmState:
    """Cluster on log1p(counts), invert the moment equations per cluster.

    deterministic=True swaps the seeded k-means++ start for a
    farthest-point start so the init (and hence the whole fit) is
    invariant under duplicating every sample.
    """
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if n < k:
        raise DomainError(f"need n >= K, got n={n}, K={k}")
    feats = np.log1p(x)
    if deterministic:
        labels = _deterministic_labels(feats, k)
        if len(np.unique(labels)) < k:
            raise UnsplittableError("farthest-point start produced an empty cluster")
    else:
        from ._numutil import kmeans_nonempty
        labels, _, _ = kmeans_nonempty(feats, k, seed, retries=retries)

    pi = np.array([(labels == l).mean() for l in range(k)])
    mu = np.empty((k, d))
    sigma = np.empty((k, d, d))
    for l in range(k):
        mu[l], sigma[l] = _moment_component(x[labels == l])
    precision = np.empty_like(sigma)
    logdet = np.empty(k)
    for l in range(k):
        precision[l] = spd_inverse(sigma[l])
        logdet[l] = spd_logdet(precision[l])
    lambdas = np.repeat(np.log1p(x)[None, :, :], k, axis=0)
    weights = np.zeros((n, k))
    weights[np.arange(n), labels] = 1.0
    return MmState(pi=pi, mu=mu, sigma=sigma, precision=precision, logdet=logdet,
                   lambdas=lambdas, weights=weights, alive=np.ones(k, dtype=bool))


# ---------------------------------------------------------------------------
# Block updates


def compute_weights(state: MmState, x: np.ndarray):
    """(weights, objective): responsibilities via log-sum-exp and the
    mixture pseudo log-likelihood at the current latent matrices."""
    logliks = _component_logliks(np.asarray(x, dtype=float), state)
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
        row_lse = np.where(bad, np.nanmin(row_lse[~bad]) if (~bad).any() else -1e300, row_lse)
    return weights, float(row_lse.sum())


def update_pi(weights: np.ndarray) -> np.ndarray:
    """pi_l = (1/n) sum_i w_il; exact simplex membership."""
    w = np.asarray(weights, dtype=float)
    pi = w.mean(axis=0)
    return pi / pi.sum()


def _newton_block(x_block, lam, mu, precision, inner_tol, inner_max):
    """One Gauss-Seidel sweep of per-coordinate latent roots, vectorized
    over samples. Returns the number of unbracketed coordinates."""
    d = lam.shape[1]
    unbracketed = 0
    for j in range(d):
        v = lam[:, j].copy()
        cross = (lam - mu) @ precision[:, j] - precision[j, j] * (v - mu[j])
        tjj = precision[j, j]
        xj = x_block[:, j]

        def f(vv):
            return -np.exp(vv) + xj - cross - tjj * (vv - mu[j])

        lo = np.full_like(v, -LAMBDA_BRACKET)
        hi = np.full_like(v, LAMBDA_BRACKET)
        f_lo, f_hi = f(lo), f(hi)
        ok = (f_lo > 0) & (f_hi < 0)          # f is strictly decreasing
        unbracketed += int((~ok).sum())
        if not ok.any():
            continue
        v = np.clip(v, lo, hi)
        fv = f(v)
        active = ok & (np.abs(fv) > inner_tol)
        for _ in range(inner_max):
            if not active.any():
                break
            lo = np.where(active & (fv > 0), np.maximum(lo, v), lo)
            hi = np.where(active & (fv < 0), np.minimum(hi, v), hi)
            step = fv / (-np.exp(v) - tjj)
            cand = v - step
            outside = (cand <= lo) | (cand >= hi)
            cand = np.where(outside, 0.5 * (lo + hi), cand)
            v = np.where(active, cand, v)
            fv = np.where(active, f(v), fv)
            active = active & (np.abs(fv) > inner_tol)
        lam[ok, j] = v[ok]
    return unbracketed


def update_lambda_newton(x_i, lambda_il, mu_l, precision_l,
                         inner_tol: float = 1e-10, inner_max: int = 100) -> np.ndarray:
    """Latent update for one sample: sweep coordinates in ascending order,
    solving each root exactly; a coordinate with no sign change inside
    [-30, 30] is left untouched."""
    lam = np.asarray(lambda_il, dtype=float).copy()[None, :]
    x = np.asarray(x_i, dtype=float)[None, :]
    _newton_block(x, lam, np.asarray(mu_l, dtype=float),
                  np.asarray(precision_l, dtype=float), inner_tol, inner_max)
    return lam[0]


def update_mu(w_col, lambda_l) -> np.ndarray:
    """Weighted mean of latent rows."""
    return weighted_mean(np.asarray(lambda_l, dtype=float), np.asarray(w_col, dtype=float))


def update_sigma(w_col, lambda_l, mu_l, floor: float = SIGMA_FLOOR) -> np.ndarray:
    """Weighted scatter about mu_l, eigenvalue-floored to stay SPD."""
    scatter = weighted_scatter(np.asarray(lambda_l, dtype=float),
                               np.asarray(w_col, dtype=float),
                               np.asarray(mu_l, dtype=float))
    return spd_floor(scatter, floor)


# ---------------------------------------------------------------------------
# Objective helpers (used by tests)


def mm_objective(state: MmState, x) -> float:
    """sum_i log sum_l pi_l p_l(x_i | lambda_il, Theta_l)."""
    _, obj = compute_weights(state, np.asarray(x, dtype=float))
    return obj


def mm_surrogate(state: MmState, x) -> float:
    """The minorizer sum_il w_il [log pi_l - log w_il + log p_l(...)],
    evaluated with weights recomputed at the current iterate; equals
    mm_objective there (the touching property)."""
    x = np.asarray(x, dtype=float)
    logliks = _component_logliks(x, state)
    weights, _ = compute_weights(state, x)
    with np.errstate(divide="ignore"):
        log_pi = np.log(state.pi)
        log_w = np.log(weights)
    terms = weights * (log_pi[None, :] - log_w + logliks)
    return float(np.sum(np.where(weights > 0, terms, 0.0)))


# ---------------------------------------------------------------------------
# Penalty strategies


def _init_rho(state: MmState, x_log1p: np.ndarray, labels_rows: list, config: FitConfig):
    """Fill state.rho once per restart for penalties chosen before iterating."""
    d = state.mu.shape[1]
    n = x_log1p.shape[0]
    if config.penalty == "none":
        state.rho = None
        return
    rho = np.zeros(state.k)
    for l in range(state.k):
        if config.penalty in ("fixed", "iterative"):
            rho[l] = tune_fixed(d, n, state.precision[l])
        elif config.penalty == "cv":
            rows = x_log1p[labels_rows[l]]
            if rows.shape[0] < config.cv_folds:
                rows = x_log1p
            rho[l] = tune_cv(rows, config.cv_folds, config.rho_grid,
                             seed=config.seed, penalize_diagonal=config.penalize_diagonal,
                             glasso_tol=config.glasso_tol)
        elif config.penalty == "stars":
            rows = x_log1p[labels_rows[l]]
            if rows.shape[0] < 4:
                rows = x_log1p
            grid = tuple(sorted(config.rho_grid, reverse=True))
            rho[l] = tune_stars(rows, grid, n_subsamples=config.stars_subsamples,
                                instability_cap=config.stars_cap, seed=config.seed,
                                penalize_diagonal=config.penalize_diagonal,
                                glasso_tol=config.glasso_tol).rho
    state.rho = rho


def _sigma_block_update(state: MmState, l: int, config: FitConfig):
    """Sigma/Theta update for one component, penalized or not."""
    w_col = state.weights[:, l]
    scatter = weighted_scatter(state.lambdas[l], w_col, state.mu[l])
    if config.penalty == "none":
        state.sigma[l] = spd_floor(scatter, SIGMA_FLOOR)
        state.refresh_precision(l)
        return
    if config.penalty == "iterative":
        state.rho[l] = tune_iterative(state.precision[l], scatter.shape[0],
                                      state.lambdas[l].shape[0])
    s = scatter.copy()
    diag_floor = 1e-8
    np.fill_diagonal(s, np.maximum(np.diag(s), diag_floor))
    sol = glasso_fit(s, float(state.rho[l]), tol=config.glasso_tol,
                     max_iter=config.glasso_max_iter,
                     penalize_diagonal=config.penalize_diagonal,
                     precision_init=state.precision[l])
    state.precision[l] = sol.precision
    state.sigma[l] = spd_inverse(sol.precision)
    state.logdet[l] = spd_logdet(sol.precision)


# ---------------------------------------------------------------------------
# Fit loop (shared with the sampling engine)


def _penalized_objective(state: MmState, obj: float) -> float:
    """obj minus sum_l (W_l rho_l / 2) ||Theta_l||_1 (off-diagonal)."""
    pen = 0.0
    for l in range(state.k):
        theta = state.precision[l]
        off = np.abs(theta).sum() - np.abs(np.diag(theta)).sum()
        pen += 0.5 * state.weights[:, l].sum() * state.rho[l] * off
    return obj - pen


def _run_mm_loop(x, config: FitConfig, state: MmState, lambda_updater) -> MmState:
    """Iterate weights -> pi -> Lambda -> mu -> Sigma until the relative
    objective change stays under tol for `patience` consecutive checks."""
    trace = []
    pen_trace = []
    prev = None
    calm = 0
    converged = False
    for it in range(config.max_iter):
        state.iteration = it
        weights, obj = compute_weights(state, x)
        state.weights = weights
        state.objective = obj
        trace.append(obj)
        if state.rho is not None:
            pen_trace.append(_penalized_objective(state, obj))
        if prev is not None:
            rel = abs(obj - prev) / max(1.0, abs(prev))
            calm = calm + 1 if rel < config.tol else 0
            if calm >= config.patience:
                converged = True
                break
        prev = obj

        state.pi = update_pi(weights)
        newly_dead = (state.pi < DEATH_PI) & state.alive
        for l in np.where(newly_dead)[0]:
            state.alive[l] = False
            state.counters["dead_components"].append(int(l))

        lambda_updater(state, x, it)

        for l in range(state.k):
            if not state.alive[l]:
                continue
            w_col = state.weights[:, l]
            if w_col.sum() <= 0:
                state.alive[l] = False
                state.counters["dead_components"].append(int(l))
                continue
            state.mu[l] = update_mu(w_col, state.lambdas[l])
            _sigma_block_update(state, l, config)

    weights, obj = compute_weights(state, x)
    state.weights = weights
    state.objective = obj
    trace.append(obj)
    if state.rho is not None:
        pen_trace.append(_penalized_objective(state, obj))
        state.counters["penalized_trace"] = pen_trace
    state.counters["trace"] = trace
    state.counters["converged"] = converged
    state.counters["iterations"] = state.iteration + 1
    return state


def _newton_lambda_updater(config: FitConfig):
    def updater(state: MmState, x, iteration):
        for l in range(state.k):
            if not state.alive[l]:
                continue
            n_bad = _newton_block(x, state.lambdas[l], state.mu[l],
                                  state.precision[l], config.inner_tol, config.inner_max)
            state.counters["newton_unbracketed"] += n_bad
    return updater


def _state_to_model(state: MmState, store_lambdas: bool = True) -> MixtureModel:
    comps = []
    for l in range(state.k):
        comps.append(ComponentParams(state.mu[l], state.sigma[l], state.precision[l]))
    diag = {
        "converged": bool(state.counters.get("converged", False)),
        "iterations": int(state.counters.get("iterations", 0)),
        "dead_components": list(state.counters.get("dead_components", [])),
        "underflow_rows": int(state.counters.get("underflow_rows", 0)),
        "newton_unbracketed": int(state.counters.get("newton_unbracketed", 0)),
        "objective": float(state.objective),
    }
    if state.rho is not None:
        diag["rho"] = [float(r) for r in state.rho]
        diag["penalized_trace"] = [float(v) for v in state.counters.get("penalized_trace", ())]
    if "mcmc_rows" in state.counters:
        diag["mcmc"] = state.counters["mcmc_rows"]
    return MixtureModel(
        pi=state.pi,
        components=tuple(comps),
        responsibilities=state.weights,
        lambdas=tuple(state.lambdas[l] for l in range(state.k)) if store_lambdas else None,
        loglik_trace=tuple(state.counters.get("trace", ())),
        diagnostics=diag,
    )


def _fit_engine(x, config: FitConfig, lambda_updater_factory) -> MixtureModel:
    if isinstance(x, SampleTaxaMatrix):
        x = x.counts
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    ss = np.random.SeedSequence(config.seed)
    children = ss.spawn(max(config.n_restarts, 1))
    best = None
    failures = []
    for r, child in enumerate(children):
        try:
            state = init_kmeans_moments(x, config.k, seed=child, deterministic=(r == 0))
            labels = state.weights.argmax(axis=1)
            labels_rows = [np.where(labels == l)[0] for l in range(config.k)]
            _init_rho(state, np.log1p(x), labels_rows, config)
            state = _run_mm_loop(x, config, state, lambda_updater_factory(config, r))
        except (DomainError, UnsplittableError, NonconvergenceError,
                np.linalg.LinAlgError) as exc:
            failures.append(f"restart {r}: {type(exc).__name__}: {exc}")
            continue
        if best is None or state.objective > best.objective:
            best = state
            best.counters["restart"] = r
    if best is None:
        raise FitError("all restarts failed", diagnostics={"failures": failures})
    model = _state_to_model(best)
    model.diagnostics["restart"] = int(best.counters.get("restart", 0))
    model.diagnostics["failed_restarts"] = failures
    return model


def fit_mixmpln(x, config: FitConfig) -> MixtureModel:
    """Fit the mixture with Newton latent updates; best of n_restarts."""
    if config.engine != "mixmpln":
        raise DomainError(f"config.engine is {config.engine!r}, expected 'mixmpln'")
    return _fit_engine(x, config, lambda config_, r: _newton_lambda_updater(config_))
