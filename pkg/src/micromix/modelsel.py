"""Estimating the number of mixture components.

The workhorse is truncated variational inference: fit M_max components
with conjugate priors (Normal on means, Wishart on precisions, pointwise
mixing weights) and count how many mixing weights survive above a
threshold after convergence; superfluous components decay toward zero.
Closed-form coordinate updates exist for the Gaussian case; the count
(Poisson log-normal) case adds per-(component, sample, coordinate)
Gaussian posteriors N(a, b) over the latent log-rates, with

    a:  root of  A e^a + B a + C = 0,   A = e^{b/2},  B = <T>_jj        (unique)
    b:  fixed point of  b = 1 / (P_in (e^{a + b/2} + <T>_jj))

Both scalar problems come from differentiating the evidence lower bound;
the printed forms of these equations in the source derivation carry sign
slips (the published cross-term sign contradicts the bound itself and
the b-equation as printed has no positive root), so the solvers use the
re-derived stationarity conditions, which keep the bound non-decreasing.

Wishart convention: W(nu, V) with V the INVERSE scale, so
<T> = nu V^{-1} and ln-normalizer (nu/2)ln|V| - (nu d/2)ln 2 - ln Gamma_d(nu/2).

BIC and silhouette baselines plus the PCA preprocessing used before VI
round out the module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp, multigammaln, psi
from scipy.spatial.distance import cdist

from ._numutil import kmeans, spd_floor, spd_inverse, spd_logdet, symmetrize
from .errors import DomainError, FitError, ValidationError
from .mixggm import fit_gaussian_mixture
from .datamodel import FitConfig

__all__ = [
    "VIPriors", "VIState", "pca_reduce", "PcaProjection", "preprocess_counts",
    "vi_gmm_fit", "vi_mpln_fit", "select_k", "bic_select", "silhouette",
    "solve_a_root", "solve_b_fixed_point",
]

B_MAX = 50.0
B_MIN = 1e-10
DEAD_P = 1e-10


@dataclass(frozen=True)
class VIPriors:
    """Hyperpriors: mean precision beta, Wishart (nu, V), truncation M_max."""

    beta: float = 1e-6
    nu: float | None = None          # defaults to d at fit time
    v_scale: float = 0.1             # V = v_scale * I
    m_max: int = 5

    def __post_init__(self):
        if self.beta <= 0:
            raise ValidationError("beta must be positive")
        if self.v_scale <= 0:
            raise ValidationError("v_scale must be positive")
        if self.m_max < 2:
            raise ValidationError("M_max must be >= 2")


@dataclass
class VIState:
    """All variational posteriors plus the mixing weights and ELBO trace."""

    p: np.ndarray                    # (N, M) responsibilities
    m_mu: np.ndarray                 # (M, d)
    t_mu: np.ndarray                 # (M, d, d) posterior mean-precisions
    nu_t: np.ndarray                 # (M,)
    v_t: np.ndarray                  # (M, d, d) Wishart inverse scales
    pi: np.ndarray                   # (M,)
    a: np.ndarray | None = None      # (M, N, d) latent means (count model)
    b: np.ndarray | None = None      # (M, N, d) latent variances (count model)
    elbo_trace: list = field(default_factory=list)
    warnings: dict = field(default_factory=lambda: {"b_frozen": 0, "spd_repairs": 0})

    @property
    def m(self) -> int:
        return self.pi.shape[0]


# ---------------------------------------------------------------------------
# PCA preprocessing


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray           # (d_reduced, d)
    scales: np.ndarray               # post-projection column stds
    d_reduced: int

    def apply(self, data) -> np.ndarray:
        z = (np.asarray(data, dtype=float) - self.mean) @ self.components.T
        return z / self.scales


def pca_reduce(data, cutoff: float = 0.90):
    """Project onto the leading PCs reaching `cutoff` cumulative variance,
    then re-standardize the projected columns. Returns (reduced, projection)."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise DomainError("need an (n >= 2, d) matrix")
    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    var = svals ** 2
    total = var.sum()
    if total <= 0:
        raise DomainError("data has zero total variance")
    ratios = var / total
    cum = np.cumsum(ratios)
    d_red = int(np.searchsorted(cum, cutoff * (1.0 - 1e-12)) + 1)
    d_red = min(d_red, int((var > 1e-12 * total).sum()))
    comps = vt[:d_red]
    proj = centered @ comps.T
    scales = proj.std(axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    return proj / scales, PcaProjection(mean, comps, scales, d_red)


def preprocess_counts(counts, cutoff: float = 0.90):
    """log1p, column-standardize, PCA-reduce: the preprocessing applied
    before variational model selection."""
    x = np.log1p(np.asarray(counts, dtype=float))
    std = x.std(axis=0)
    x = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)
    return pca_reduce(x, cutoff)


# ---------------------------------------------------------------------------
# Shared Wishart/Gaussian expectation helpers


def _wishart_ln_b(nu: float, v: np.ndarray) -> float:
    """Log normalizer of W(nu, V) with V the inverse scale."""
    d = v.shape[0]
    return 0.5 * nu * spd_logdet(v) - 0.5 * nu * d * np.log(2.0) - multigammaln(0.5 * nu, d)


def _expect_ln_det_t(nu: float, v: np.ndarray) -> float:
    d = v.shape[0]
    s = np.arange(1, d + 1)
    return float(psi(0.5 * (nu + 1 - s)).sum() + d * np.log(2.0) - spd_logdet(v))


def _init_common(data_for_clustering: np.ndarray, m_max: int, seed):
    """Softened k-means responsibilities and cluster means."""
    n, d = data_for_clustering.shape
    rng_ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    labels, centers, _ = kmeans(data_for_clustering, min(m_max, n), np.random.default_rng(rng_ss))
    p = np.full((n, m_max), 0.1 / max(m_max - 1, 1))
    p[np.arange(n), labels] = 0.9
    p /= p.sum(axis=1, keepdims=True)
    m_mu = np.empty((m_max, d))
    jitter = np.random.default_rng(rng_ss.spawn(1)[0])
    grand = data_for_clustering.mean(axis=0)
    for i in range(m_max):
        rows = data_for_clustering[labels == i] if i < centers.shape[0] else np.empty((0, d))
        if rows.shape[0] > 0:
            m_mu[i] = rows.mean(axis=0)
        else:
            m_mu[i] = grand + 0.1 * jitter.standard_normal(d)
    return p, m_mu


# ---------------------------------------------------------------------------
# VI for the Gaussian mixture


def _gmm_update_p(x, state: VIState):
    n, d = x.shape
    log_p = np.empty((n, state.m))
    with np.errstate(divide="ignore"):
        log_pi = np.log(state.pi)
    for i in range(state.m):
        t_mean = state.nu_t[i] * spd_inverse(state.v_t[i])
        ln_det = _expect_ln_det_t(state.nu_t[i], state.v_t[i])
        mu_outer = spd_inverse(state.t_mu[i]) + np.outer(state.m_mu[i], state.m_mu[i])
        quad = (np.einsum("nj,jk,nk->n", x, t_mean, x)
                - 2.0 * x @ (t_mean @ state.m_mu[i])
                + np.trace(t_mean @ mu_outer))
        log_p[:, i] = 0.5 * ln_det + log_pi[i] - 0.5 * quad
    log_p -= logsumexp(log_p, axis=1, keepdims=True)
    state.p = np.exp(log_p)


def _gmm_update_mu(x, state: VIState, priors: VIPriors):
    d = x.shape[1]
    for i in range(state.m):
        t_mean = state.nu_t[i] * spd_inverse(state.v_t[i])
        n_i = state.p[:, i].sum()
        state.t_mu[i] = priors.beta * np.eye(d) + t_mean * n_i
        rhs = t_mean @ (state.p[:, i] @ x)
        state.m_mu[i] = np.linalg.solve(state.t_mu[i], rhs)


def _gmm_update_t(x, state: VIState, priors: VIPriors, v_prior: np.ndarray, nu_prior: float):
    for i in range(state.m):
        n_i = state.p[:, i].sum()
        state.nu_t[i] = nu_prior + n_i
        sx = state.p[:, i] @ x
        sxx = (x.T * state.p[:, i]) @ x
        mu_outer = spd_inverse(state.t_mu[i]) + np.outer(state.m_mu[i], state.m_mu[i])
        v = (v_prior + sxx - np.outer(sx, state.m_mu[i])
             - np.outer(state.m_mu[i], sx) + mu_outer * n_i)
        v = symmetrize(v)
        if np.linalg.eigvalsh(v)[0] <= 0:
            state.warnings["spd_repairs"] += 1
            v = spd_floor(v, 1e-10)
        state.v_t[i] = v


def _xlogy_sum(p, logq):
    with np.errstate(invalid="ignore"):
        terms = p * logq
    return float(np.sum(np.where(p > 0, terms, 0.0)))


def _gmm_elbo(x, state: VIState, priors: VIPriors, v_prior, nu_prior) -> float:
    n, d = x.shape
    elbo = 0.0
    with np.errstate(divide="ignore"):
        log_pi = np.log(state.pi)
        log_p = np.log(state.p)
    for i in range(state.m):
        t_mean = state.nu_t[i] * spd_inverse(state.v_t[i])
        ln_det = _expect_ln_det_t(state.nu_t[i], state.v_t[i])
        t_mu_inv = spd_inverse(state.t_mu[i])
        mu_outer = t_mu_inv + np.outer(state.m_mu[i], state.m_mu[i])
        quad = (np.einsum("nj,jk,nk->n", x, t_mean, x)
                - 2.0 * x @ (t_mean @ state.m_mu[i])
                + np.trace(t_mean @ mu_outer))
        # <ln P(D | mu, T, S)>
        elbo += float(np.sum(state.p[:, i] * (0.5 * ln_det - 0.5 * d * np.log(2 * np.pi)
                                              - 0.5 * quad)))
        # <ln P(mu)> and -<ln Q(mu)>
        mu_sq = np.trace(t_mu_inv) + state.m_mu[i] @ state.m_mu[i]
        elbo += 0.5 * d * np.log(priors.beta / (2 * np.pi)) - 0.5 * priors.beta * mu_sq
        elbo -= -0.5 * d * (1 + np.log(2 * np.pi)) + 0.5 * spd_logdet(state.t_mu[i])
        # <ln P(T)> and -<ln Q(T)>
        elbo += (_wishart_ln_b(nu_prior, v_prior)
                 + 0.5 * (nu_prior - d - 1) * ln_det
                 - 0.5 * float(np.sum(v_prior * t_mean)))
        elbo -= (_wishart_ln_b(state.nu_t[i], state.v_t[i])
                 + 0.5 * (state.nu_t[i] - d - 1) * ln_det
                 - 0.5 * float(np.sum(state.v_t[i] * t_mean)))
        # <ln P(S)> - <ln Q(S)>
        elbo += _xlogy_sum(state.p[:, i], log_pi[i])
        elbo -= _xlogy_sum(state.p[:, i], log_p[:, i])
    return float(elbo)


def vi_gmm_fit(data, priors: VIPriors | None = None, tol: float = 1e-6,
               max_iter: int = 200, seed: int = 0) -> VIState:
    """Truncated variational Gaussian mixture; ELBO is non-decreasing."""
    x = np.asarray(data, dtype=float)
    if not np.isfinite(x).all():
        raise DomainError("data must be finite")
    n, d = x.shape
    priors = priors or VIPriors()
    nu_prior = float(max(d, priors.nu if priors.nu is not None else d))
    v_prior = priors.v_scale * np.eye(d)
    m = priors.m_max

    p, m_mu = _init_common(x, m, seed)
    state = VIState(
        p=p, m_mu=m_mu,
        t_mu=np.repeat(np.eye(d)[None, :, :], m, axis=0),
        nu_t=np.full(m, nu_prior),
        v_t=np.repeat(v_prior[None, :, :], m, axis=0),
        pi=np.full(m, 1.0 / m),
    )
    prev = None
    for _ in range(max_iter):
        _gmm_update_p(x, state)
        _gmm_update_mu(x, state, priors)
        _gmm_update_t(x, state, priors, v_prior, nu_prior)
        state.pi = state.p.mean(axis=0)
        elbo = _gmm_elbo(x, state, priors, v_prior, nu_prior)
        if not np.isfinite(elbo):
            raise FitError("ELBO became non-finite")
        state.elbo_trace.append(elbo)
        if prev is not None and abs(elbo - prev) <= tol * max(1.0, abs(prev)):
            break
        prev = elbo
    return state


# ---------------------------------------------------------------------------
# Scalar solvers for the count model


def solve_a_root(a0: float, big_a: float, big_b: float, big_c: float,
                 tol: float = 1e-10, max_iter: int = 100) -> float:
    """Unique root of g(a) = A e^a + B a + C with A, B > 0 (g increasing)."""
    if big_a <= 0 or big_b <= 0:
        raise DomainError("need A > 0 and B > 0")
    a = float(a0)
    lo, hi = -60.0, 60.0

    def g(v):
        return big_a * np.exp(v) + big_b * v + big_c

    if g(lo) > 0:
        return lo
    if g(hi) < 0:
        return hi
    a = min(max(a, lo), hi)
    ga = g(a)
    for _ in range(max_iter):
        if abs(ga) <= tol:
            return a
        if ga > 0:
            hi = a
        else:
            lo = a
        step = ga / (big_a * np.exp(a) + big_b)
        cand = a - step
        if not lo < cand < hi:
            cand = 0.5 * (lo + hi)
        a, ga = cand, g(cand)
    return a


def solve_b_fixed_point(b0: float, p_in: float, a: float, t_jj: float,
                        tol: float = 1e-12, max_iter: int = 200, damp: float = 0.5):
    """Damped iteration of b <- 1 / (P (e^{a + b/2} + t_jj)), clipped to
    [1e-10, 50]. The damping is halved whenever the residual grows, which
    keeps the map contractive even for large roots. Returns (b, converged)."""
    if p_in <= 0 or t_jj <= 0:
        raise DomainError("need P > 0 and t_jj > 0")

    def g(v):
        return min(max(1.0 / (p_in * (np.exp(min(a + 0.5 * v, 500.0)) + t_jj)),
                       B_MIN), B_MAX)

    b = float(min(max(b0, B_MIN), B_MAX))
    resid = abs(g(b) - b)
    gamma = damp
    for _ in range(max_iter):
        if resid <= tol * max(1.0, b):
            return b, True
        new = (1.0 - gamma) * b + gamma * g(b)
        new_resid = abs(g(new) - new)
        if new_resid > resid:
            gamma *= 0.5
            if gamma < 1e-6:
                return b, False
            continue
        b, resid = new, new_resid
    return b, resid <= 1e-8 * max(1.0, b)


# ---------------------------------------------------------------------------
# VI for the Poisson log-normal mixture


def _mpln_update_p(x, state: VIState):
    n, d = x.shape
    lgam = gammaln(x + 1.0).sum(axis=1)
    log_p = np.empty((n, state.m))
    with np.errstate(divide="ignore"):
        log_pi = np.log(state.pi)
    for i in range(state.m):
        t_mean = state.nu_t[i] * spd_inverse(state.v_t[i])
        ln_det = _expect_ln_det_t(state.nu_t[i], state.v_t[i])
        a, b = state.a[i], state.b[i]
        e_lam = np.exp(a + 0.5 * b)
        pois = (-e_lam + a * x).sum(axis=1) - lgam
        diff = a - state.m_mu[i]
        quad = (np.einsum("nj,jk,nk->n", diff, t_mean, diff)
                + b @ np.diag(t_mean)
                + np.trace(t_mean @ spd_inverse(state.t_mu[i])))
        log_p[:, i] = pois + 0.5 * ln_det + log_pi[i] - 0.5 * quad
    log_p -= logsumexp(log_p, axis=1, keepdims=True)
    state.p = np.exp(log_p)


def _mpln_update_mu(state: VIState, priors: VIPriors, d: int):
    for i in range(state.m):
        t_mean = state.nu_t[i] * spd_inverse(state.v_t[i])
        n_i = state.p[:, i].sum()
        state.t_mu[i] = priors.beta * np.eye(d) + t_mean * n_i
        rhs = t_mean @ (state.p[:, i] @ state.a[i])
        state.m_mu[i] = np.linalg.solve(state.t_mu[i], rhs)


def _mpln_update_t(state: VIState, v_prior, nu_prior):
    for i in range(state.m):
        p_i = state.p[:, i]
        n_i = p_i.sum()
        state.nu_t[i] = nu_prior + n_i
        a = state.a[i]
        sa = p_i @ a
        saa = (a.T * p_i) @ a + np.diag(p_i @ state.b[i])
        mu_outer = spd_inverse(state.t_mu[i]) + np.outer(state.m_mu[i], state.m_mu[i])
        v = (v_prior + saa - np.outer(sa, state.m_mu[i])
             - np.outer(state.m_mu[i], sa) + mu_outer * n_i)
        v = symmetrize(v)
        if np.linalg.eigvalsh(v)[0] <= 0:
            state.warnings["spd_repairs"] += 1
            v = spd_floor(v, 1e-10)
        state.v_t[i] = v


def _mpln_update_ab(x, state: VIState):
    """Gauss-Seidel sweep of the scalar a-roots, then the b fixed points.

    Coordinates belonging to effectively dead components (P_in < 1e-10)
    are left frozen; with zero responsibility their bound contribution is
    dominated by the entropy term, whose unconstrained optimum diverges.
    """
    n, d = x.shape
    for i in range(state.m):
        t_mean = state.nu_t[i] * spd_inverse(state.v_t[i])
        t_diag = np.diag(t_mean).copy()
        a, b = state.a[i], state.b[i]
        m_i = state.m_mu[i]
        live = state.p[:, i] >= DEAD_P
        if not live.any():
            continue
        diff = a - m_i
        cross_full = diff @ t_mean.T                 # (n, d), includes j term
        for j in range(d):
            cross = cross_full[:, j] - t_diag[j] * diff[:, j]
            big_c = -x[:, j] - t_diag[j] * m_i[j] + cross
            for idx in np.where(live)[0]:
                new = solve_a_root(a[idx, j], np.exp(0.5 * b[idx, j]),
                                   t_diag[j], float(big_c[idx]))
                delta = new - a[idx, j]
                if delta != 0.0:
                    a[idx, j] = new
                    diff[idx, j] += delta
                    cross_full[idx] += delta * t_mean[j]
        for j in range(d):
            for idx in np.where(live)[0]:
                p_in = float(state.p[idx, i])
                new_b, ok = solve_b_fixed_point(b[idx, j], p_in, float(a[idx, j]),
                                                float(t_diag[j]))
                if ok:
                    b[idx, j] = new_b
                else:
                    state.warnings["b_frozen"] += 1


def _mpln_elbo(x, state: VIState, priors: VIPriors, v_prior, nu_prior) -> float:
    n, d = x.shape
    lgam = gammaln(x + 1.0).sum(axis=1)
    elbo = 0.0
    with np.errstate(divide="ignore"):
        log_pi = np.log(state.pi)
        log_p = np.log(state.p)
    for i in range(state.m):
        p_i = state.p[:, i]
        t_mean = state.nu_t[i] * spd_inverse(state.v_t[i])
        ln_det = _expect_ln_det_t(state.nu_t[i], state.v_t[i])
        t_mu_inv = spd_inverse(state.t_mu[i])
        a, b = state.a[i], state.b[i]
        e_lam = np.exp(np.minimum(a + 0.5 * b, 500.0))
        # <ln P(D | lambda)>
        pois = (-e_lam + a * x).sum(axis=1) - lgam
        elbo += float(np.sum(np.where(p_i > 0, p_i * pois, 0.0)))
        # <ln P(lambda | mu, T, S)>
        diff = a - state.m_mu[i]
        quad = (np.einsum("nj,jk,nk->n", diff, t_mean, diff)
                + b @ np.diag(t_mean) + np.trace(t_mean @ t_mu_inv))
        gaussian = 0.5 * ln_det - 0.5 * d * np.log(2 * np.pi) - 0.5 * quad
        elbo += float(np.sum(np.where(p_i > 0, p_i * gaussian, 0.0)))
        # -<ln Q(lambda)>: full Gaussian entropy
        elbo += 0.5 * float(np.sum(np.log(2 * np.pi * np.e * b)))
        # <ln P(mu)> - <ln Q(mu)>
        mu_sq = np.trace(t_mu_inv) + state.m_mu[i] @ state.m_mu[i]
        elbo += 0.5 * d * np.log(priors.beta / (2 * np.pi)) - 0.5 * priors.beta * mu_sq
        elbo -= -0.5 * d * (1 + np.log(2 * np.pi)) + 0.5 * spd_logdet(state.t_mu[i])
        # <ln P(T)> - <ln Q(T)>
        elbo += (_wishart_ln_b(nu_prior, v_prior) + 0.5 * (nu_prior - d - 1) * ln_det
                 - 0.5 * float(np.sum(v_prior * t_mean)))
        elbo -= (_wishart_ln_b(state.nu_t[i], state.v_t[i])
                 + 0.5 * (state.nu_t[i] - d - 1) * ln_det
                 - 0.5 * float(np.sum(state.v_t[i] * t_mean)))
        # <ln P(S)> - <ln Q(S)>
        elbo += _xlogy_sum(p_i, log_pi[i])
        elbo -= _xlogy_sum(p_i, log_p[:, i])
    return float(elbo)


def vi_mpln_fit(counts, priors: VIPriors | None = None, tol: float = 1e-6,
                max_iter: int = 100, seed: int = 0) -> VIState:
    """Truncated variational Poisson log-normal mixture on raw counts."""
    x = np.asarray(counts, dtype=float)
    if (x < 0).any() or not np.all(x == np.floor(x)):
        raise DomainError("counts must be nonnegative integers")
    n, d = x.shape
    priors = priors or VIPriors()
    nu_prior = float(max(d, priors.nu if priors.nu is not None else d))
    v_prior = priors.v_scale * np.eye(d)
    m = priors.m_max

    loglam = np.log1p(x)
    p, m_mu = _init_common(loglam, m, seed)
    state = VIState(
        p=p, m_mu=m_mu,
        t_mu=np.repeat(np.eye(d)[None, :, :], m, axis=0),
        nu_t=np.full(m, nu_prior),
        v_t=np.repeat(v_prior[None, :, :], m, axis=0),
        pi=np.full(m, 1.0 / m),
        a=np.repeat(loglam[None, :, :], m, axis=0),
        b=np.full((m, n, d), 0.1),
    )
    prev = None
    for _ in range(max_iter):
        _mpln_update_p(x, state)
        _mpln_update_mu(state, priors, d)
        _mpln_update_t(state, v_prior, nu_prior)
        _mpln_update_ab(x, state)
        state.pi = state.p.mean(axis=0)
        elbo = _mpln_elbo(x, state, priors, v_prior, nu_prior)
        if not np.isfinite(elbo):
            raise FitError("ELBO became non-finite")
        state.elbo_trace.append(elbo)
        if prev is not None and abs(elbo - prev) <= tol * max(1.0, abs(prev)):
            break
        prev = elbo
    return state


# ---------------------------------------------------------------------------
# Baselines


def select_k(pi, threshold: float = 0.1) -> int:
    """Number of mixing weights above the survival threshold."""
    pi = np.asarray(pi, dtype=float)
    if abs(pi.sum() - 1.0) > 1e-8 or (pi < -1e-12).any():
        raise DomainError("pi must lie on the simplex")
    return int((pi > threshold).sum())


def _default_bic_fit(data, k: int, seed: int = 0) -> float:
    cfg = FitConfig(engine="mixggm", k=k, penalty="none", tol=1e-6,
                    max_iter=200, n_restarts=2, seed=seed)
    model = fit_gaussian_mixture(np.asarray(data, dtype=float), cfg)
    return float(model.loglik_trace[-1])


def bic_select(data, k_range, fit_fn=None, variant: str = "free_params",
               seed: int = 0):
    """(best_K, scores): argmin of -logL + penalty over the K grid.

    variant "free_params" charges p log n with p the full Gaussian
    parameter count K(d + d(d+1)/2) + (K-1); variant "literal" charges
    K log n. Failed fits score +inf and are never selected.
    """
    data = np.asarray(data, dtype=float)
    ks = [int(k) for k in k_range]
    if not ks:
        raise DomainError("K_range must be nonempty")
    if variant not in ("free_params", "literal"):
        raise DomainError(f"unknown variant {variant!r}")
    n, d = data.shape
    fit = fit_fn if fit_fn is not None else (lambda x_, k_: _default_bic_fit(x_, k_, seed))
    scores = {}
    for k in ks:
        try:
            loglik = fit(data, k)
            p = k * (d + d * (d + 1) // 2) + (k - 1) if variant == "free_params" else k
            scores[k] = -loglik + p * np.log(n)
        except Exception:
            scores[k] = float("inf")
    finite = {k: s for k, s in scores.items() if np.isfinite(s)}
    if not finite:
        raise FitError("every K failed to fit", diagnostics={"scores": scores})
    best = min(finite, key=finite.get)
    return best, scores


def silhouette(data, labels) -> float:
    """Mean silhouette score (b - a)/max(a, b), Euclidean metric.

    Singleton clusters contribute 0 for their lone sample; a clustering
    made only of singletons (or a single cluster) is rejected.
    """
    data = np.asarray(data, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise DomainError("need at least 2 clusters")
    sizes = {u: int((labels == u).sum()) for u in uniq}
    if all(s == 1 for s in sizes.values()):
        raise DomainError("all clusters are singletons")
    dist = cdist(data, data)
    scores = np.zeros(data.shape[0])
    for idx in range(data.shape[0]):
        own = labels[idx]
        if sizes[own] == 1:
            scores[idx] = 0.0
            continue
        mask_own = labels == own
        a = dist[idx, mask_own].sum() / (sizes[own] - 1)
        b = np.inf
        for u in uniq:
            if u == own:
                continue
            b = min(b, dist[idx, labels == u].mean())
        scores[idx] = (b - a) / max(a, b)
    return float(scores.mean())
