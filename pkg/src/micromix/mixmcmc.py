"""Sampling variant of the mixture fit: latent rows are posterior means.

Instead of the per-coordinate Newton root, each latent vector is the
mean of the posterior

    p(lambda | x) ~ exp( sum_j [-exp(lambda_j) + lambda_j x_j] ) * N_d(lambda; mu_l, Sigma_l)

estimated by adaptive random-walk Metropolis: one Gaussian proposal per
coordinate per iteration, with per-coordinate step sizes tuned toward a
0.44 acceptance rate during warm-up and frozen afterwards. Three chains
run in parallel from overdispersed starts; the first half of every run
is discarded. A run is accepted only if split-Rhat < 1.1 and
n_eff > 100 for every coordinate; otherwise the run is repeated with
100 more iterations, up to a configurable extension budget.

Everything outside the latent update (weights, pi, mu, Sigma, penalties)
is shared with the Newton engine, so swapping the sampler for the exact
Newton update reproduces that engine bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import FitConfig, MixtureModel, SampleTaxaMatrix
from .errors import DomainError, NonconvergenceError
from .mixmpln import _fit_engine, _newton_lambda_updater

try:
    from numba import njit as _njit
except ImportError:                                  # pragma: no cover
    def _njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco

__all__ = ["ChainDiagnostics", "rhat", "neff", "sample_lambda_posterior",
           "fit_mixmcmc"]

RHAT_MAX = 1.1
NEFF_MIN = 100.0
EXTENSION_STEP = 100


@dataclass(frozen=True)
class ChainDiagnostics:
    """Per-coordinate convergence summary of one posterior run."""

    rhat: np.ndarray
    neff: np.ndarray
    n_iter: int
    n_chains: int
    warmup: int

    def __post_init__(self):
        rh = np.maximum(np.asarray(self.rhat, dtype=float), 1.0 - 1e-6)
        kept = self.n_chains * (self.n_iter - self.warmup)
        ne = np.clip(np.asarray(self.neff, dtype=float), 0.0, 1.5 * kept)
        object.__setattr__(self, "rhat", rh)
        object.__setattr__(self, "neff", ne)

    @property
    def converged(self) -> bool:
        return bool(self.rhat.max() < RHAT_MAX and self.neff.min() > NEFF_MIN)


# ---------------------------------------------------------------------------
# Diagnostics


def rhat(chains) -> float:
    """Split-chain potential scale reduction for one parameter.

    chains: (C, T) array, C >= 2, T >= 4. Returns +inf when the
    within-chain variance vanishes.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 4:
        raise DomainError("need a (C >= 2, T >= 4) chain array")
    t2 = chains.shape[1] // 2
    halves = np.vstack([chains[:, :t2], chains[:, t2:2 * t2]])
    w = halves.var(axis=1, ddof=1).mean()
    if w <= 0.0:
        return float("inf")
    var_means = halves.mean(axis=1).var(ddof=1)
    varplus = (t2 - 1) / t2 * w + var_means
    return float(np.sqrt(varplus / w))


def neff(chains) -> float:
    """Effective sample size  C*T / (1 + 2 sum_k rho_k)  for one parameter.

    Autocorrelations combine per-chain autocovariances with the
    between-chain correction and are summed over consecutive pairs until
    the first pair with a negative sum (initial-positive-sequence rule).
    Returns 0 for a zero-variance (constant) chain set; capped at
    1.5 * C * T.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 4:
        raise DomainError("need a (C >= 2, T >= 4) chain array")
    c, t = chains.shape
    w = chains.var(axis=1, ddof=1).mean()
    if w <= 0.0:
        return 0.0
    var_means = chains.mean(axis=1).var(ddof=1)
    varplus = (t - 1) / t * w + var_means

    centered = chains - chains.mean(axis=1, keepdims=True)
    # biased per-chain autocovariance via FFT, averaged over chains
    size = 2 ** int(np.ceil(np.log2(2 * t)))
    fts = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(fts * np.conj(fts), n=size, axis=1)[:, :t].real / t
    mean_acov = acov.mean(axis=0)

    rho = 1.0 - (w - mean_acov) / varplus
    tau = 0.0
    k = 0
    while k + 1 < t:
        pair = rho[k] + rho[k + 1]
        if pair < 0.0:
            break
        tau += pair
        k += 2
    tau = max(2.0 * tau - 1.0, 1e-12)
    return float(min(c * t / tau, 1.5 * c * t))


# ---------------------------------------------------------------------------
# Adaptive random-walk Metropolis


@_njit(cache=True)
def _rwm_kernel(lam, q, theta, x, step, normals, unifs, warmup):  # pragma: no cover
    """In-place RWM over a (B, C, d) state; returns post-warmup draws.

    lam: current state; q = (lam - mu) @ theta maintained incrementally;
    normals/unifs: (T, B, C, d) pre-generated randoms; step adapted
    toward 0.44 acceptance during warm-up only.
    """
    t_total = normals.shape[0]
    b_n, c_n, d = lam.shape
    kept = t_total - warmup
    draws = np.empty((kept, b_n, c_n, d))
    for t in range(t_total):
        gamma = (t + 1.0) ** -0.6
        for j in range(d):
            tjj = theta[j, j]
            for b in range(b_n):
                xbj = x[b, j]
                for c in range(c_n):
                    cur = lam[b, c, j]
                    delta = step[b, c, j] * normals[t, b, c, j]
                    prop = cur + delta
                    dlogp = (-(np.exp(prop) - np.exp(cur)) + xbj * delta
                             - q[b, c, j] * delta - 0.5 * tjj * delta * delta)
                    accept = np.log(unifs[t, b, c, j]) < dlogp
                    if accept:
                        lam[b, c, j] = prop
                        for m in range(d):
                            q[b, c, m] += theta[j, m] * delta
                    if t < warmup:
                        acc = 1.0 if accept else 0.0
                        step[b, c, j] *= np.exp(gamma * (acc - 0.44))
        if t >= warmup:
            for b in range(b_n):
                for c in range(c_n):
                    for j in range(d):
                        draws[t - warmup, b, c, j] = lam[b, c, j]
    return draws


def _run_chains(x_rows, mu, precision, sigma_diag, n_chains, n_iter, rng):
    """One full run for a batch of samples; returns (draws, means)."""
    b_n = x_rows.shape[0]
    d = mu.shape[0]
    warmup = n_iter // 2
    start = np.log1p(x_rows)[:, None, :] + (rng.standard_normal((b_n, n_chains, d))
                                            * np.sqrt(sigma_diag)[None, None, :])
    lam = np.ascontiguousarray(start)
    diff = lam - mu
    q = np.ascontiguousarray(np.einsum("bcj,jk->bck", diff, precision))
    step = np.full((b_n, n_chains, d), 0.5)
    normals = rng.standard_normal((n_iter, b_n, n_chains, d))
    unifs = rng.uniform(0.0, 1.0, (n_iter, b_n, n_chains, d))
    draws = _rwm_kernel(lam, q, np.ascontiguousarray(precision),
                        np.ascontiguousarray(x_rows.astype(float)), step,
                        normals, unifs, warmup)
    means = draws.mean(axis=(0, 2))                    # (B, d)
    return draws, means


def _batch_diagnostics(draws, n_iter, n_chains):
    """Per-sample ChainDiagnostics from (T_kept, B, C, d) draws."""
    kept, b_n, c_n, d = draws.shape
    out = []
    for b in range(b_n):
        rh = np.empty(d)
        ne = np.empty(d)
        for j in range(d):
            chains = draws[:, b, :, j].T               # (C, T_kept)
            rh[j] = rhat(chains)
            ne[j] = neff(chains)
        out.append(ChainDiagnostics(rh, ne, n_iter, c_n, n_iter // 2))
    return out


def sample_lambda_batch(x_rows, mu, sigma=None, precision=None, n_chains: int = 3,
                        init_iter: int = 1000, seed=0, max_extensions: int = 50):
    """Posterior means for a batch of count rows sharing (mu, Sigma).

    Non-converged rows are rerun with init_iter + 100k iterations at
    extension k; exhausting the budget raises NonconvergenceError with
    the failing diagnostics attached.
    """
    from ._numutil import spd_inverse
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
    mu = np.asarray(mu, dtype=float).ravel()
    if precision is None:
        precision = spd_inverse(np.asarray(sigma, dtype=float))
    sigma_diag = np.diag(spd_inverse(precision))
    b_n = x_rows.shape[0]
    means = np.empty_like(x_rows, dtype=float)
    diags: list = [None] * b_n
    pending = np.arange(b_n)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    for attempt in range(max_extensions + 1):
        n_iter = init_iter + EXTENSION_STEP * attempt
        rng = np.random.default_rng(ss.spawn(1)[0] if attempt else ss)
        draws, batch_means = _run_chains(x_rows[pending], mu, precision, sigma_diag,
                                         n_chains, n_iter, rng)
        batch_diags = _batch_diagnostics(draws, n_iter, n_chains)
        still = []
        for idx, b in enumerate(pending):
            if batch_diags[idx].converged:
                means[b] = batch_means[idx]
                diags[b] = batch_diags[idx]
            else:
                still.append((idx, b))
        if not still:
            return means, diags
        pending = np.array([b for _, b in still])
    bad = pending.tolist()
    raise NonconvergenceError(
        f"{len(bad)} sample(s) failed the Rhat/n_eff gate after "
        f"{max_extensions} extensions", diagnostics={"samples": bad})


def sample_lambda_posterior(x_i, mu_l, sigma_l, n_chains: int = 3,
                            init_iter: int = 1000, seed=0, max_extensions: int = 50):
    """Posterior mean and diagnostics for a single count vector."""
    means, diags = sample_lambda_batch(np.atleast_2d(x_i), mu_l, sigma=sigma_l,
                                       n_chains=n_chains, init_iter=init_iter,
                                       seed=seed, max_extensions=max_extensions)
    return means[0], diags[0]


# ---------------------------------------------------------------------------
# Fit


def _mcmc_lambda_updater(config: FitConfig, restart: int):
    def updater(state, x, iteration):
        rows = []
        for l in range(state.k):
            if not state.alive[l]:
                continue
            seed = np.random.SeedSequence([int(config.seed) & 0x7FFFFFFF,
                                           restart, iteration, l])
            means, diags = sample_lambda_batch(
                x, state.mu[l], precision=state.precision[l],
                n_chains=config.n_chains, init_iter=config.mcmc_init_iter,
                seed=seed, max_extensions=config.mcmc_max_extensions)
            state.lambdas[l] = means
            for i, dg in enumerate(diags):
                assert dg.converged, "accepted a non-converged latent update"
                rows.append({"sample": i, "component": l,
                             "rhat_max": float(dg.rhat.max()),
                             "neff_min": float(dg.neff.min()),
                             "iterations": int(dg.n_iter)})
        state.counters["mcmc_rows"] = rows
    return updater


def fit_mixmcmc(x, config: FitConfig, newton_mode: bool = False) -> MixtureModel:
    """Mixture fit with sampled latent updates.

    newton_mode=True swaps the sampler for the exact Newton update (a
    loop-structure test hook); the result then matches the Newton engine
    bit for bit.
    """
    if config.engine != "mixmcmc":
        raise DomainError(f"config.engine is {config.engine!r}, expected 'mixmcmc'")
    if isinstance(x, SampleTaxaMatrix):
        x = x.counts
    factory = (lambda cfg, r: _newton_lambda_updater(cfg)) if newton_mode \
        else _mcmc_lambda_updater
    model = _fit_engine(x, config, factory)
    return model
