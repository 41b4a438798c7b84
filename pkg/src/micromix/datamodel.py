"""Core value types: count matrices, mixture models, fit configuration.

All types are immutable after construction (arrays are marked read-only),
validated eagerly, and serialized as JSON with full-precision floats so
experiment artifacts diff cleanly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ._numutil import is_spd, spd_inverse, symmetrize
from .errors import DomainError, IoError, ParseError, SchemaError, ValidationError

PRECISION_SYNC_TOL = 1e-8


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Count matrix


@dataclass(frozen=True)
class SampleTaxaMatrix:
    """n x d matrix of nonnegative integer counts with row/column labels."""

    counts: np.ndarray
    sample_ids: tuple
    taxon_ids: tuple

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ValidationError("counts must be a 2-D matrix")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.floor(counts)):
                raise ValidationError("counts must be integers")
            counts = counts.astype(np.int64)
        else:
            counts = counts.astype(np.int64)
        n, d = counts.shape
        if n < 1 or d < 2:
            raise ValidationError(f"need n >= 1 and d >= 2, got {n} x {d}")
        if (counts < 0).any():
            i, j = np.argwhere(counts < 0)[0]
            raise ValidationError(f"negative count at ({i},{j})", row=int(i), col=int(j))
        sample_ids = tuple(str(s) for s in self.sample_ids)
        taxon_ids = tuple(str(t) for t in self.taxon_ids)
        if len(sample_ids) != n or len(taxon_ids) != d:
            raise ValidationError("label lengths do not match matrix shape")
        if len(set(sample_ids)) != n:
            raise ValidationError("duplicate sample ids")
        if len(set(taxon_ids)) != d:
            raise ValidationError("duplicate taxon ids")
        object.__setattr__(self, "counts", _freeze(counts))
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "taxon_ids", taxon_ids)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def d(self) -> int:
        return self.counts.shape[1]

    @staticmethod
    def from_counts(counts, sample_ids=None, taxon_ids=None) -> "SampleTaxaMatrix":
        counts = np.asarray(counts)
        n, d = counts.shape
        if sample_ids is None:
            sample_ids = tuple(f"s{i}" for i in range(n))
        if taxon_ids is None:
            taxon_ids = tuple(f"t{j}" for j in range(d))
        return SampleTaxaMatrix(counts, sample_ids, taxon_ids)


def load_counts(path, fmt: str | None = None) -> SampleTaxaMatrix:
    """Read a count matrix from TSV/CSV.

    Layout: header row with the sample-id column name followed by taxon ids;
    one row per sample, first column the sample id. Cells must be base-10
    integer literals; anything else raises ParseError with (row, col), and
    negative values raise ValidationError.
    """
    if fmt is None:
        fmt = "csv" if str(path).lower().endswith(".csv") else "tsv"
    if fmt not in ("tsv", "csv"):
        raise ValidationError(f"unknown format {fmt!r}")
    sep = "\t" if fmt == "tsv" else ","
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n").rstrip("\r") for ln in fh]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ParseError("empty file")
    header = lines[0].split(sep)
    taxon_ids = [h.strip() for h in header[1:]]
    sample_ids = []
    rows = []
    for r, line in enumerate(lines[1:]):
        cells = line.split(sep)
        if len(cells) != len(header):
            raise ParseError(f"row {r} has {len(cells)} cells, expected {len(header)}", row=r)
        sample_ids.append(cells[0].strip())
        row = []
        for c, cell in enumerate(cells[1:]):
            try:
                value = int(cell.strip())
            except ValueError as exc:
                raise ParseError(f"cell ({r},{c}) is not an integer: {cell!r}",
                                 row=r, col=c) from exc
            if value < 0:
                raise ValidationError(f"negative count at ({r},{c})", row=r, col=c)
            row.append(value)
        rows.append(row)
    counts = np.array(rows, dtype=np.int64)
    return SampleTaxaMatrix(counts, tuple(sample_ids), tuple(taxon_ids))


def save_counts(matrix: SampleTaxaMatrix, path, fmt: str = "tsv", id_column: str = "sample_id"):
    sep = "\t" if fmt == "tsv" else ","
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(sep.join([id_column, *matrix.taxon_ids]) + "\n")
            for sid, row in zip(matrix.sample_ids, matrix.counts):
                fh.write(sep.join([sid, *(str(int(v)) for v in row)]) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Derived quantities


def partial_correlation(precision: np.ndarray) -> np.ndarray:
    """P[i,j] = -C[i,j] / sqrt(C[i,i] C[j,j]) for a precision matrix C.

    The diagonal comes out exactly -1. Scale-invariant: pc(cC) == pc(C)
    for any c > 0.
    """
    c = np.asarray(precision, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DomainError("precision must be square")
    if not np.allclose(c, c.T, atol=1e-8 * (1.0 + np.abs(c).max())):
        raise DomainError("precision must be symmetric")
    diag = np.diag(c)
    if (diag <= 0).any():
        raise DomainError("precision diagonal must be strictly positive")
    scale = np.sqrt(np.outer(diag, diag))
    return -(c / scale)


def edge_list(precision: np.ndarray, taxon_ids=None):
    """Upper-triangle edges as (taxon_i, taxon_j, partial_correlation) tuples."""
    pc = partial_correlation(precision)
    d = pc.shape[0]
    if taxon_ids is None:
        taxon_ids = [f"t{j}" for j in range(d)]
    out = []
    for i in range(d):
        for j in range(i + 1, d):
            out.append((taxon_ids[i], taxon_ids[j], float(pc[i, j])))
    return out


def save_edge_list(precision, path, taxon_ids=None):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("taxon_i\ttaxon_j\tpartial_correlation\n")
            for a, b, w in edge_list(precision, taxon_ids):
                fh.write(f"{a}\t{b}\t{w!r}\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Mixture model


@dataclass(frozen=True)
class ComponentParams:
    """One mixture component: log-scale mean, covariance, and its inverse.

    Covariance and precision are kept in sync; construction verifies
    ||sigma @ precision - I||_inf <= 1e-8 and re-derives the precision
    when it is not supplied.
    """

    mu: np.ndarray
    sigma: np.ndarray
    precision: np.ndarray | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        sigma = symmetrize(np.asarray(self.sigma, dtype=float))
        d = mu.shape[0]
        if sigma.shape != (d, d):
            raise ValidationError("sigma shape does not match mu")
        if not is_spd(sigma):
            raise ValidationError("sigma must be symmetric positive definite")
        if self.precision is None:
            precision = spd_inverse(sigma)
        else:
            precision = symmetrize(np.asarray(self.precision, dtype=float))
        resid = np.abs(sigma @ precision - np.eye(d)).max()
        if resid > PRECISION_SYNC_TOL:
            raise ValidationError(
                f"sigma/precision out of sync: ||sigma@precision - I||_inf = {resid:.3g}")
        object.__setattr__(self, "mu", _freeze(mu))
        object.__setattr__(self, "sigma", _freeze(sigma))
        object.__setattr__(self, "precision", _freeze(precision))

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @staticmethod
    def from_precision(mu, precision) -> "ComponentParams":
        precision = symmetrize(np.asarray(precision, dtype=float))
        return ComponentParams(mu, spd_inverse(precision), precision)


@dataclass(frozen=True)
class MixtureModel:
    """Fitted mixture: weights, per-component parameters, responsibilities."""

    pi: np.ndarray
    components: tuple
    responsibilities: np.ndarray
    lambdas: tuple | None = None
    loglik_trace: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).ravel()
        k = pi.shape[0]
        components = tuple(self.components)
        if len(components) != k:
            raise ValidationError("len(components) != len(pi)")
        if (pi < -1e-12).any():
            raise ValidationError("mixing weights must be nonnegative")
        if abs(pi.sum() - 1.0) > 1e-10:
            raise ValidationError(f"mixing weights sum to {pi.sum()!r}, not 1")
        w = np.asarray(self.responsibilities, dtype=float)
        if w.ndim != 2 or w.shape[1] != k:
            raise ValidationError("responsibilities must be n x K")
        if (w < -1e-12).any() or (w > 1 + 1e-12).any():
            raise ValidationError("responsibilities must lie in [0, 1]")
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-10:
            raise ValidationError("responsibility rows must sum to 1")
        lambdas = self.lambdas
        if lambdas is not None:
            lambdas = tuple(_freeze(np.asarray(lam, dtype=float)) for lam in lambdas)
            if len(lambdas) != k:
                raise ValidationError("need one latent matrix per component")
        object.__setattr__(self, "pi", _freeze(pi))
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "responsibilities", _freeze(np.clip(w, 0.0, 1.0)))
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "loglik_trace", tuple(float(v) for v in self.loglik_trace))

    @property
    def k(self) -> int:
        return self.pi.shape[0]

    @property
    def d(self) -> int:
        return self.components[0].d

    def precisions(self) -> list:
        return [c.precision for c in self.components]


@dataclass(frozen=True)
class GroundTruth:
    """Generating precision matrices, adjacency, and component labels."""

    precisions: tuple
    adjacency: tuple
    assignments: np.ndarray

    def __post_init__(self):
        precisions = tuple(_freeze(np.asarray(p, dtype=float)) for p in self.precisions)
        adjacency = tuple(_freeze(np.asarray(a, dtype=np.int64)) for a in self.adjacency)
        if len(precisions) != len(adjacency):
            raise ValidationError("precisions/adjacency length mismatch")
        for p, a in zip(precisions, adjacency):
            if p.shape != a.shape:
                raise ValidationError("precision/adjacency shape mismatch")
            if not np.array_equal(a, a.T) or np.diag(a).any():
                raise ValidationError("adjacency must be symmetric with zero diagonal")
            off = ~np.eye(p.shape[0], dtype=bool)
            if not np.array_equal((np.abs(p) > 0) & off, (a == 1) & off):
                raise ValidationError("adjacency must equal the off-diagonal support of the precision")
        assignments = np.asarray(self.assignments, dtype=np.int64).ravel()
        if assignments.size and (assignments.min() < 0 or assignments.max() >= len(precisions)):
            raise ValidationError("assignments reference unknown components")
        object.__setattr__(self, "precisions", precisions)
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "assignments", _freeze(assignments))

    @property
    def k(self) -> int:
        return len(self.precisions)


VALID_ENGINES = ("mixmpln", "mixmcmc", "mixggm")
VALID_PENALTIES = ("none", "cv", "fixed", "iterative", "stars")


@dataclass(frozen=True)
class FitConfig:
    """Engine selection plus every knob a fit needs, with safe defaults."""

    engine: str = "mixmpln"
    k: int = 1
    penalty: str = "none"
    rho_grid: tuple = ()
    tol: float = 1e-6
    max_iter: int = 200
    n_restarts: int = 3
    seed: int = 0
    # shared numeric knobs
    patience: int = 5
    inner_tol: float = 1e-10
    inner_max: int = 100
    glasso_tol: float = 1e-5
    glasso_max_iter: int = 200
    penalize_diagonal: bool = False
    cv_folds: int = 5
    stars_subsamples: int = 20
    stars_cap: float = 0.05
    pseudo_count: float = 0.5
    # mixmcmc knobs
    n_chains: int = 3
    mcmc_init_iter: int = 1000
    mcmc_max_extensions: int = 50

    def __post_init__(self):
        if self.engine not in VALID_ENGINES:
            raise ValidationError(f"unknown engine {self.engine!r}")
        if self.penalty not in VALID_PENALTIES:
            raise ValidationError(f"unknown penalty {self.penalty!r}")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not self.tol > 0:
            raise ValidationError("tol must be > 0")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if self.n_restarts < 1:
            raise ValidationError("n_restarts must be >= 1")
        grid = tuple(float(r) for r in self.rho_grid)
        if self.penalty in ("cv", "stars") and not grid:
            raise ValidationError(f"penalty={self.penalty!r} requires a nonempty rho_grid")
        if any(r <= 0 for r in grid):
            raise ValidationError("rho_grid values must be positive")
        object.__setattr__(self, "rho_grid", grid)


# ---------------------------------------------------------------------------
# Model serialization (JSON, full-precision floats)


def _component_to_dict(c: ComponentParams) -> dict:
    return {"mu": c.mu.tolist(), "sigma": c.sigma.tolist(), "precision": c.precision.tolist()}


def save_model(model: MixtureModel, path) -> None:
    """Write a model as JSON. The model is re-validated before writing."""
    if not isinstance(model, MixtureModel):
        raise ValidationError("save_model expects a MixtureModel")
    payload = {
        "format": "micromix-model",
        "version": 1,
        "k": model.k,
        "pi": model.pi.tolist(),
        "components": [_component_to_dict(c) for c in model.components],
        "responsibilities": model.responsibilities.tolist(),
        "lambdas": None if model.lambdas is None else [lam.tolist() for lam in model.lambdas],
        "loglik_trace": list(model.loglik_trace),
        "diagnostics": _jsonable(model.diagnostics),
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_model(path) -> MixtureModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    for key in ("pi", "components", "responsibilities"):
        if key not in payload:
            raise SchemaError(f"model file missing {key!r}")
    try:
        components = tuple(
            ComponentParams(np.array(c["mu"]), np.array(c["sigma"]), np.array(c["precision"]))
            for c in payload["components"]
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed component entry: {exc}") from exc
    lambdas = payload.get("lambdas")
    if lambdas is not None:
        lambdas = tuple(np.array(lam, dtype=float) for lam in lambdas)
    return MixtureModel(
        pi=np.array(payload["pi"], dtype=float),
        components=components,
        responsibilities=np.array(payload["responsibilities"], dtype=float),
        lambdas=lambdas,
        loglik_trace=tuple(payload.get("loglik_trace", ())),
        diagnostics=payload.get("diagnostics", {}) or {},
    )


def save_truth(truth: GroundTruth, path) -> None:
    payload = {
        "format": "micromix-truth",
        "version": 1,
        "precisions": [p.tolist() for p in truth.precisions],
        "adjacency": [a.tolist() for a in truth.adjacency],
        "assignments": truth.assignments.tolist(),
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_truth(path) -> GroundTruth:
    if not os.path.exists(path):
        raise IoError(f"truth file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    for key in ("precisions", "adjacency", "assignments"):
        if key not in payload:
            raise SchemaError(f"truth file missing {key!r}")
    return GroundTruth(
        precisions=tuple(np.array(p) for p in payload["precisions"]),
        adjacency=tuple(np.array(a) for a in payload["adjacency"]),
        assignments=np.array(payload["assignments"]),
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
