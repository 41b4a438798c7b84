"""Synthetic benchmark data: graphs, SPD precisions, counts, subsampling.

The count pipelines mirror the two evaluation setups the fit engines are
benchmarked on:

* latent-Gaussian counts: draw lambda ~ N_d(mu, Sigma) per sample and
  x_j ~ Poisson(exp(lambda_j));
* copula counts: draw z ~ N_d(0, R) and push each coordinate through
  Phi, then through the inverse CDF of a zero-inflated negative binomial
  (or Poisson-lognormal) marginal.

Mixture datasets combine K components (n_l rows each, pi_l = n_l / n),
then emulate sequencing by renormalizing every row to a random library
size in [5000, 10000] and optionally applying a trimmed-mean-of-M-values
style normalization.

Every generator is a pure function of (arguments, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._numutil import spd_inverse, symmetrize
from .datamodel import GroundTruth, SampleTaxaMatrix
from .errors import DomainError, InfeasibleSpecError, ValidationError

__all__ = [
    "GraphSpec", "MarginalSpec", "MixtureSpec", "SyntheticDataset",
    "gen_graph", "gen_precision", "sample_mpln", "norta_sample",
    "gen_mixture_dataset", "compositional_subsample", "tmm_normalize",
]

TOPOLOGIES = ("band", "cluster", "scale_free", "random")
SPARSITY_TOL = 0.02
MIN_EIGENVALUE = 0.1


@dataclass(frozen=True)
class GraphSpec:
    """Target topology, dimension and off-diagonal zero fraction."""

    topology: str
    d: int
    sparsity: float
    band_width: int | None = None
    n_clusters: int | None = None
    attach_count: int | None = None

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValidationError(f"unknown topology {self.topology!r}")
        if self.d < 2:
            raise ValidationError("d must be >= 2")
        if not 0.0 < self.sparsity < 1.0:
            raise ValidationError("sparsity must lie in (0, 1)")


@dataclass(frozen=True)
class MarginalSpec:
    """Per-taxon marginal family for copula sampling.

    zinb:              zero_prob, nb_size, nb_mean  (each length d)
    poisson_lognormal: pln_mu, pln_sigma            (each length d)
    """

    family: str
    zero_prob: np.ndarray | None = None
    nb_size: np.ndarray | None = None
    nb_mean: np.ndarray | None = None
    pln_mu: np.ndarray | None = None
    pln_sigma: np.ndarray | None = None

    def __post_init__(self):
        if self.family == "zinb":
            zp = np.asarray(self.zero_prob, dtype=float).ravel()
            size = np.asarray(self.nb_size, dtype=float).ravel()
            mean = np.asarray(self.nb_mean, dtype=float).ravel()
            if not (zp.shape == size.shape == mean.shape):
                raise ValidationError("zinb parameter arrays must share one length")
            if ((zp < 0) | (zp > 1)).any():
                raise ValidationError("zero_prob must lie in [0, 1]")
            if (size <= 0).any() or (mean <= 0).any():
                raise ValidationError("nb_size and nb_mean must be positive")
            object.__setattr__(self, "zero_prob", zp)
            object.__setattr__(self, "nb_size", size)
            object.__setattr__(self, "nb_mean", mean)
        elif self.family == "poisson_lognormal":
            mu = np.asarray(self.pln_mu, dtype=float).ravel()
            sig = np.asarray(self.pln_sigma, dtype=float).ravel()
            if mu.shape != sig.shape:
                raise ValidationError("pln parameter arrays must share one length")
            if (sig <= 0).any():
                raise ValidationError("pln_sigma must be positive")
            object.__setattr__(self, "pln_mu", mu)
            object.__setattr__(self, "pln_sigma", sig)
        else:
            raise ValidationError(f"unknown marginal family {self.family!r}")

    @property
    def d(self) -> int:
        arr = self.zero_prob if self.family == "zinb" else self.pln_mu
        return arr.shape[0]

    @staticmethod
    def default_zinb(d: int, seed: int = 0) -> "MarginalSpec":
        """Moderately zero-inflated, overdispersed per-taxon marginals."""
        rng = np.random.default_rng(seed)
        return MarginalSpec(
            family="zinb",
            zero_prob=rng.uniform(0.05, 0.3, size=d),
            nb_size=rng.uniform(1.0, 5.0, size=d),
            nb_mean=np.exp(rng.uniform(np.log(5.0), np.log(50.0), size=d)),
        )


@dataclass(frozen=True)
class SyntheticDataset:
    original: SampleTaxaMatrix           # X, absolute counts
    sampled: SampleTaxaMatrix            # XS, depth-resampled counts
    normalized: np.ndarray               # TS, real-valued normalized matrix
    truth: GroundTruth
    pi_true: np.ndarray
    mus: tuple = ()                      # generating log-means (latent mode)

    def __post_init__(self):
        if not (self.original.counts.shape == self.sampled.counts.shape
                == self.normalized.shape):
            raise ValidationError("X, XS, TS must share a shape")
        pi = np.asarray(self.pi_true, dtype=float)
        if abs(pi.sum() - 1.0) > 1e-10 or (pi < 0).any():
            raise ValidationError("pi_true must lie on the simplex")


# ---------------------------------------------------------------------------
# Graphs


def _zero_fraction(adj: np.ndarray) -> float:
    d = adj.shape[0]
    return 1.0 - adj.sum() / (d * (d - 1))


def _band_adjacency(d: int, width: int) -> np.ndarray:
    adj = np.zeros((d, d), dtype=np.int64)
    for k in range(1, width + 1):
        idx = np.arange(d - k)
        adj[idx, idx + k] = 1
        adj[idx + k, idx] = 1
    return adj


def _band_width_for(d: int, sparsity: float) -> int:
    best, best_err = None, np.inf
    for w in range(1, d):
        err = abs(_zero_fraction(_band_adjacency(d, w)) - sparsity)
        if err < best_err:
            best, best_err = w, err
    if best_err > SPARSITY_TOL:
        raise InfeasibleSpecError(
            f"band: no width within {SPARSITY_TOL:.0%} of sparsity {sparsity}")
    return best


def _cluster_adjacency(d: int, n_clusters: int, sparsity: float, rng) -> np.ndarray:
    sizes = [d // n_clusters + (1 if i < d % n_clusters else 0) for i in range(n_clusters)]
    blocks = []
    start = 0
    intra_pairs = []
    for sz in sizes:
        nodes = np.arange(start, start + sz)
        for a in range(sz):
            for b in range(a + 1, sz):
                intra_pairs.append((nodes[a], nodes[b]))
        start += sz
    total_pairs = d * (d - 1) // 2
    target_edges = int(round((1.0 - sparsity) * total_pairs))
    if target_edges > len(intra_pairs):
        raise InfeasibleSpecError(
            f"cluster: sparsity {sparsity} needs {target_edges} edges, "
            f"only {len(intra_pairs)} intra-cluster pairs exist")
    chosen = rng.choice(len(intra_pairs), size=target_edges, replace=False)
    adj = np.zeros((d, d), dtype=np.int64)
    for idx in chosen:
        a, b = intra_pairs[idx]
        adj[a, b] = adj[b, a] = 1
    return adj


def _scale_free_adjacency(d: int, m: int, rng) -> np.ndarray:
    """Preferential attachment: each new node attaches to m earlier nodes
    chosen proportional to current degree (seed = star on m+1 nodes)."""
    adj = np.zeros((d, d), dtype=np.int64)
    repeated = []                       # node list where multiplicity = degree
    for v in range(1, m + 1):
        adj[0, v] = adj[v, 0] = 1
        repeated += [0, v]
    for v in range(m + 1, d):
        targets = set()
        while len(targets) < m:
            targets.add(repeated[rng.integers(len(repeated))])
        for t in targets:
            adj[v, t] = adj[t, v] = 1
            repeated += [v, t]
    return adj


def _attach_count_for(d: int, sparsity: float) -> int:
    total = d * (d - 1) // 2
    best, best_err = 1, np.inf
    for m in range(1, d):
        edges = m + (d - m - 1) * m      # star seed + m per later node
        err = abs(1.0 - edges / total - sparsity)
        if err < best_err:
            best, best_err = m, err
    return best


def _random_adjacency(d: int, sparsity: float, rng) -> np.ndarray:
    total_pairs = d * (d - 1) // 2
    target_edges = int(round((1.0 - sparsity) * total_pairs))
    iu = np.triu_indices(d, k=1)
    chosen = rng.choice(total_pairs, size=target_edges, replace=False)
    adj = np.zeros((d, d), dtype=np.int64)
    adj[iu[0][chosen], iu[1][chosen]] = 1
    return adj + adj.T


def gen_graph(spec: GraphSpec, seed: int = 0) -> np.ndarray:
    """Symmetric 0/1 adjacency with zero diagonal matching the spec.

    The achieved off-diagonal zero fraction is within +-2% of
    spec.sparsity for band/cluster/random; scale-free picks the closest
    achievable integer attachment count.
    """
    rng = np.random.default_rng(seed)
    d, sp = spec.d, spec.sparsity
    if spec.topology == "band":
        width = spec.band_width if spec.band_width is not None else _band_width_for(d, sp)
        if not 1 <= width < d:
            raise InfeasibleSpecError(f"band width {width} out of range")
        adj = _band_adjacency(d, width)
    elif spec.topology == "cluster":
        n_clusters = spec.n_clusters if spec.n_clusters is not None else 2
        if n_clusters < 1 or n_clusters > d:
            raise InfeasibleSpecError(f"cluster count {n_clusters} out of range")
        adj = _cluster_adjacency(d, n_clusters, sp, rng)
    elif spec.topology == "scale_free":
        m = spec.attach_count if spec.attach_count is not None else _attach_count_for(d, sp)
        if not 1 <= m < d:
            raise InfeasibleSpecError(f"attachment count {m} out of range")
        adj = _scale_free_adjacency(d, m, rng)
    else:
        adj = _random_adjacency(d, sp, rng)
        if abs(_zero_fraction(adj) - sp) > SPARSITY_TOL:
            raise InfeasibleSpecError(f"random: cannot hit sparsity {sp} at d={d}")
    return adj


def gen_precision(adjacency: np.ndarray, seed: int = 0,
                  cond_target: float = MIN_EIGENVALUE,
                  mag_low: float = 0.4, mag_high: float = 0.8) -> np.ndarray:
    """SPD precision supported exactly on the adjacency.

    Off-diagonal magnitudes are uniform in +-[mag_low, mag_high] with
    random signs; the diagonal starts at 1 and is shifted up until the
    smallest eigenvalue reaches cond_target, which leaves the support
    untouched. The default magnitude floor of 0.4 keeps every edge's
    partial correlation large enough to be detectable at benchmark
    sample sizes; wider ranges produce near-invisible edges.
    """
    adj = np.asarray(adjacency)
    d = adj.shape[0]
    if not np.array_equal(adj, adj.T) or np.diag(adj).any():
        raise DomainError("adjacency must be symmetric with zero diagonal")
    if not 0 <= mag_low <= mag_high or mag_high <= 0:
        raise DomainError("need 0 <= mag_low <= mag_high, mag_high > 0")
    rng = np.random.default_rng(seed)
    theta = np.zeros((d, d))
    iu = np.triu_indices(d, k=1)
    mask = adj[iu] == 1
    n_edges = int(mask.sum())
    lo = max(mag_low, 1e-9)           # keep the support exact even at floor 0
    vals = rng.uniform(lo, mag_high, size=n_edges) * rng.choice([-1.0, 1.0], size=n_edges)
    theta[iu[0][mask], iu[1][mask]] = vals
    theta = theta + theta.T + np.eye(d)
    w_min = float(np.linalg.eigvalsh(theta)[0])
    if w_min < cond_target:
        theta = theta + (cond_target - w_min) * np.eye(d)
    return symmetrize(theta)


def _normalize_to_unit_variance(precision: np.ndarray):
    """Rescale so the implied covariance has unit diagonal.

    Diagonal congruence D @ Theta @ D preserves the zero pattern, so the
    adjacency of the returned precision is unchanged.
    """
    sigma = spd_inverse(precision)
    scale = np.sqrt(np.diag(sigma))
    corr = symmetrize(sigma / np.outer(scale, scale))
    prec = symmetrize(precision * np.outer(scale, scale))
    return prec, corr


# ---------------------------------------------------------------------------
# Count sampling


def sample_mpln(mu: np.ndarray, sigma: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """n rows of counts: lambda ~ N_d(mu, sigma), x_j ~ Poisson(exp(lambda_j))."""
    if n <= 0:
        raise DomainError("n must be positive")
    mu = np.asarray(mu, dtype=float).ravel()
    sigma = np.asarray(sigma, dtype=float)
    try:
        chol = np.linalg.cholesky(symmetrize(sigma))
    except np.linalg.LinAlgError as exc:
        raise DomainError("sigma must be SPD") from exc
    rng = np.random.default_rng(seed)
    lam = mu + rng.standard_normal((n, mu.shape[0])) @ chol.T
    return rng.poisson(np.exp(lam)).astype(np.int64)


def _zinb_ppf(u: np.ndarray, zero_prob: float, size: float, mean: float) -> np.ndarray:
    """Right-continuous inverse CDF of the zero-inflated negative binomial."""
    if zero_prob >= 1.0:
        return np.zeros_like(u, dtype=np.int64)
    p = size / (size + mean)
    out = np.zeros_like(u, dtype=np.int64)
    above = u > zero_prob
    if above.any():
        q = (u[above] - zero_prob) / (1.0 - zero_prob)
        out[above] = stats.nbinom.ppf(q, size, p).astype(np.int64)
    return out


def _pln_quadrature(mu: float, sigma: float):
    nodes, weights = np.polynomial.hermite_e.hermegauss(64)
    return np.exp(mu + sigma * nodes), weights / np.sqrt(2.0 * np.pi)


def _pln_mixture_cdf(ks, rates, wts) -> np.ndarray:
    cdf = stats.poisson.cdf(np.asarray(ks, dtype=float)[:, None], rates[None, :]) @ wts
    return np.minimum(cdf, 1.0)


def _pln_ppf(u: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    """Smallest k with PLN-CDF(k) >= u, via a tabulated quadrature CDF.

    The table grows by doubling until it covers max(u), so heavy-tailed
    parameter choices cannot blow up memory on typical quantiles.
    """
    rates, wts = _pln_quadrature(mu, sigma)
    umax = float(np.max(u))
    top = max(8, int(4.0 * np.exp(mu + 0.5 * sigma * sigma)))
    while _pln_mixture_cdf([top], rates, wts)[0] < umax and top < 10 ** 7:
        top *= 2
    ks = np.arange(top + 1)
    cdf = _pln_mixture_cdf(ks, rates, wts)
    idx = np.searchsorted(cdf, u, side="left")
    return ks[np.minimum(idx, top)].astype(np.int64)


def marginal_cdf(spec: MarginalSpec, j: int, x: np.ndarray) -> np.ndarray:
    """CDF of taxon j's marginal evaluated at integer points x."""
    x = np.asarray(x)
    if spec.family == "zinb":
        p = spec.nb_size[j] / (spec.nb_size[j] + spec.nb_mean[j])
        base = stats.nbinom.cdf(x, spec.nb_size[j], p)
        return spec.zero_prob[j] + (1.0 - spec.zero_prob[j]) * base
    rates, wts = _pln_quadrature(float(spec.pln_mu[j]), float(spec.pln_sigma[j]))
    out = _pln_mixture_cdf(np.maximum(x, 0), rates, wts)
    return np.where(x < 0, 0.0, out)


def norta_sample(corr: np.ndarray, marginals: MarginalSpec, n: int, seed: int = 0) -> np.ndarray:
    """Copula counts: z ~ N_d(0, corr); x_j = F_j^{-1}(Phi(z_j)).

    The discrete inverse is the smallest x with F(x) >= u.
    """
    corr = np.asarray(corr, dtype=float)
    d = corr.shape[0]
    if marginals.d != d:
        raise DomainError("marginal count does not match corr dimension")
    if np.abs(np.diag(corr) - 1.0).max() > 1e-8:
        raise DomainError("corr must have a unit diagonal")
    w = np.linalg.eigvalsh(symmetrize(corr))
    if w[0] < -1e-10:
        raise DomainError("corr must be positive semidefinite")
    if n <= 0:
        raise DomainError("n must be positive")
    # PSD square root tolerates semidefinite inputs (e.g. degenerate corr)
    vals, vecs = np.linalg.eigh(symmetrize(corr))
    root = vecs * np.sqrt(np.maximum(vals, 0.0))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, d)) @ root.T
    u = stats.norm.cdf(z)
    x = np.zeros((n, d), dtype=np.int64)
    for j in range(d):
        if marginals.family == "zinb":
            x[:, j] = _zinb_ppf(u[:, j], float(marginals.zero_prob[j]),
                                float(marginals.nb_size[j]), float(marginals.nb_mean[j]))
        else:
            x[:, j] = _pln_ppf(u[:, j], float(marginals.pln_mu[j]),
                               float(marginals.pln_sigma[j]))
    return x


# ---------------------------------------------------------------------------
# Mixture datasets


@dataclass(frozen=True)
class MixtureSpec:
    """Everything needed to generate one benchmark dataset."""

    graph: GraphSpec
    n_per_component: tuple
    mode: str = "mpln"                   # "mpln" (latent Gaussian) or "norta"
    marginals: MarginalSpec | None = None
    mean_low: float = 0.0                # latent log-mean range (mpln mode)
    mean_high: float = 2.0
    depth_lo: int = 5000
    depth_hi: int = 10000
    independent_graphs: bool = True      # mpln mode: fresh graph per component
    cond_target: float = MIN_EIGENVALUE  # forwarded to gen_precision
    mag_low: float | None = None         # None: 0.0 for random graphs, 0.4 otherwise
    mag_high: float = 0.8

    def __post_init__(self):
        if self.mode not in ("mpln", "norta"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        n_per = tuple(int(v) for v in self.n_per_component)
        if not n_per or any(v < 1 for v in n_per):
            raise ValidationError("every component needs at least one sample")
        if self.mode == "norta" and self.marginals is None:
            raise ValidationError("norta mode requires marginals")
        object.__setattr__(self, "n_per_component", n_per)

    @property
    def k(self) -> int:
        return len(self.n_per_component)


def gen_mixture_dataset(spec: MixtureSpec, seed: int = 0) -> SyntheticDataset:
    """Generate X, XS, TS and the ground truth for a K-component mixture.

    Component l contributes n_l consecutive rows, pi_l = n_l / n. In
    norta mode the graphs of components l > 1 are node permutations of
    component 1's graph; in mpln mode each component gets its own graph
    (unless independent_graphs=False, which also permutes).

    Precisions are rescaled by a diagonal congruence so the implied
    covariance/correlation has unit diagonal; this keeps the adjacency
    intact while bounding the latent variances.
    """
    k = spec.k
    root = np.random.SeedSequence(seed)
    graph_ss, prec_ss, perm_ss, mu_ss, count_ss, depth_ss = root.spawn(6)

    # random graphs carry arbitrary coupling magnitudes (down to 0, so some
    # edges are intrinsically faint); structured topologies use the floored
    # range, mirroring how the benchmark generators differ per topology
    mag_low = spec.mag_low
    if mag_low is None:
        mag_low = 0.0 if spec.graph.topology == "random" else 0.4

    def make_precision(adj, seed):
        prec = gen_precision(adj, seed, cond_target=spec.cond_target,
                             mag_low=mag_low, mag_high=spec.mag_high)
        return _normalize_to_unit_variance(prec)

    adjacency, precisions, corrs = [], [], []
    permute = (spec.mode == "norta") or not spec.independent_graphs
    if permute:
        base_adj = gen_graph(spec.graph, graph_ss.generate_state(1)[0])
        base_prec, base_corr = make_precision(base_adj, prec_ss.generate_state(1)[0])
        perm_rng = np.random.default_rng(perm_ss)
        for l in range(k):
            if l == 0:
                perm = np.arange(spec.graph.d)
            else:
                perm = perm_rng.permutation(spec.graph.d)
            adjacency.append(base_adj[np.ix_(perm, perm)])
            precisions.append(base_prec[np.ix_(perm, perm)])
            corrs.append(base_corr[np.ix_(perm, perm)])
    else:
        for l, (gss, pss) in enumerate(zip(graph_ss.spawn(k), prec_ss.spawn(k))):
            adj = gen_graph(spec.graph, gss.generate_state(1)[0])
            prec, corr = make_precision(adj, pss.generate_state(1)[0])
            adjacency.append(adj)
            precisions.append(prec)
            corrs.append(corr)

    mu_rng = np.random.default_rng(mu_ss)
    mus = tuple(mu_rng.uniform(spec.mean_low, spec.mean_high, size=spec.graph.d)
                for _ in range(k))

    blocks = []
    for l, css in enumerate(count_ss.spawn(k)):
        n_l = spec.n_per_component[l]
        if spec.mode == "mpln":
            blocks.append(sample_mpln(mus[l], spd_inverse(precisions[l]), n_l,
                                      css.generate_state(1)[0]))
        else:
            blocks.append(norta_sample(corrs[l], spec.marginals, n_l,
                                       css.generate_state(1)[0]))
    x = np.vstack(blocks)
    assignments = np.repeat(np.arange(k), spec.n_per_component)
    n = x.shape[0]
    pi_true = np.array(spec.n_per_component, dtype=float) / n

    original = SampleTaxaMatrix.from_counts(x)
    xs_counts = compositional_subsample(x, spec.depth_lo, spec.depth_hi,
                                        depth_ss.generate_state(1)[0])
    sampled = SampleTaxaMatrix.from_counts(xs_counts,
                                           sample_ids=original.sample_ids,
                                           taxon_ids=original.taxon_ids)
    ts = tmm_normalize(xs_counts)
    truth = GroundTruth(tuple(precisions), tuple(adjacency), assignments)
    return SyntheticDataset(original, sampled, ts, truth, pi_true, mus)


# ---------------------------------------------------------------------------
# Compositional resampling and normalization


def compositional_subsample(x, depth_lo: int = 5000, depth_hi: int = 10000,
                            seed: int = 0) -> np.ndarray:
    """Rescale every row to a random integer library size in [lo, hi].

    Entries become round_half_even(x_ij / sum_i * Y_i); absolute scale is
    destroyed, so X and c*X give identical output for the same seed.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DomainError("x must be a matrix")
    sums = x.sum(axis=1)
    if (sums <= 0).any():
        raise DomainError("every row needs a positive sum")
    rng = np.random.default_rng(seed)
    depths = rng.integers(depth_lo, depth_hi + 1, size=x.shape[0])
    scaled = x / sums[:, None] * depths[:, None]
    return np.rint(scaled).astype(np.int64)


def tmm_normalize(xs, m_trim: float = 0.30, a_trim: float = 0.05) -> np.ndarray:
    """Trimmed-mean-of-M-values style normalization.

    The reference is the row whose library size is closest to the median.
    For every other row, the log2 fold changes of proportions against the
    reference (M values) are doubly trimmed (30% per tail by M, 5% per
    tail by mean abundance A) and combined by a precision-weighted mean;
    2^that is the row's composition factor. Counts are divided by
    library size times factor and rescaled to the mean library size.
    Identical rows get factor exactly 1.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2:
        raise DomainError("xs must be a matrix")
    if (xs < 0).any():
        raise DomainError("counts must be nonnegative")
    lib = xs.sum(axis=1)
    if (lib <= 0).any():
        raise DomainError("every row needs a positive sum")
    median_lib = np.median(lib)
    ref = int(np.argmin(np.abs(lib - median_lib)))
    factors = np.ones(xs.shape[0])
    for i in range(xs.shape[0]):
        factors[i] = _tmm_factor(xs[i], lib[i], xs[ref], lib[ref], m_trim, a_trim)
    return xs / (lib[:, None] * factors[:, None]) * lib.mean()


def _tmm_factor(row, n_i, ref, n_r, m_trim, a_trim) -> float:
    keep = (row > 0) & (ref > 0)
    if keep.sum() == 0:
        return 1.0
    p_i = row[keep] / n_i
    p_r = ref[keep] / n_r
    m = np.log2(p_i / p_r)
    a = 0.5 * np.log2(p_i * p_r)
    if np.allclose(m, 0.0):
        return 1.0
    g = m.size
    lo_m, hi_m = np.floor(g * m_trim), np.ceil(g * (1.0 - m_trim))
    lo_a, hi_a = np.floor(g * a_trim), np.ceil(g * (1.0 - a_trim))
    rank_m = stats.rankdata(m, method="ordinal") - 1
    rank_a = stats.rankdata(a, method="ordinal") - 1
    kept = (rank_m >= lo_m) & (rank_m < hi_m) & (rank_a >= lo_a) & (rank_a < hi_a)
    if not kept.any():
        return 1.0
    x_i, x_r = row[keep][kept], ref[keep][kept]
    var = (n_i - x_i) / (n_i * x_i) + (n_r - x_r) / (n_r * x_r)
    weights = np.where(var > 0, 1.0 / np.maximum(var, 1e-12), 1e12)
    return float(2.0 ** (np.sum(weights * m[kept]) / np.sum(weights)))
