"""Ground-truth tables: nonlinear latent-factor data, the eight-pattern
Gaussian mixture, CSV ingestion, and observed-entry standardisation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError, ParseError, ShapeError, SpecError
from .nn import make_rng

logger = logging.getLogger(__name__)


@dataclass
class DataTable:
    """``values`` paired with an observation ``mask`` (1 = observed).

    Entries where ``mask == 0`` may hold anything, including NaN or the
    ground truth kept around for scoring; nothing in the package that fits a
    model reads them.
    """

    values: np.ndarray
    mask: np.ndarray
    columns: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise ShapeError(f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-d shapes")
        if not np.isin(self.mask, (0, 1)).all():
            raise DomainError("mask entries must be 0 or 1")
        self.mask = self.mask.astype(np.int8)
        observed = self.mask == 1
        if not np.all(np.isfinite(self.values[observed])):
            raise DomainError("observed entries must be finite")
        if self.columns is not None and len(self.columns) != self.values.shape[1]:
            raise ShapeError("one column name per column required")

    @classmethod
    def complete(cls, values, columns=None) -> "DataTable":
        values = np.asarray(values, dtype=float)
        return cls(values, np.ones(values.shape, dtype=np.int8), columns)

    @classmethod
    def from_nan(cls, values, columns=None) -> "DataTable":
        """Build from an array that encodes missing entries as NaN."""
        values = np.asarray(values, dtype=float)
        return cls(values, (~np.isnan(values)).astype(np.int8), columns)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def with_mask(self, mask) -> "DataTable":
        return DataTable(self.values, mask, self.columns, dict(self.meta))

    def observed(self) -> np.ndarray:
        """Values with NaN at every unobserved position."""
        return np.where(self.mask == 1, self.values, np.nan)

    def fully_missing(self) -> np.ndarray:
        return self.mask.sum(axis=1) == 0

    def rows(self, index) -> "DataTable":
        return DataTable(self.values[index], self.mask[index], self.columns, dict(self.meta))

    def drop_fully_missing(self) -> tuple["DataTable", int]:
        keep = ~self.fully_missing()
        return self.rows(keep), int((~keep).sum())

    def missing_rate(self) -> float:
        return float(1.0 - self.mask.mean())


# --------------------------------------------------------------------------
# nonlinear latent-factor data
# --------------------------------------------------------------------------

@dataclass
class LatentFactorSpec:
    n: int
    p: int
    latent_dim: int = 3
    noise_std: float = 0.1
    hidden: int = 8
    coef_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.latent_dim < 1 or self.hidden < 1:
            raise SpecError("n, p, latent_dim and hidden must be positive")
        if self.noise_std < 0 or self.coef_scale < 0:
            raise SpecError("noise_std and coef_scale must be non-negative")


@dataclass
class LatentFactorMap:
    """Column maps ``f_j(z) = tanh(z W1_j + b1_j) . w2_j + b2_j``."""

    w1: np.ndarray   # (p, q, H)
    b1: np.ndarray   # (p, H)
    w2: np.ndarray   # (p, H)
    b2: np.ndarray   # (p,)

    @classmethod
    def from_spec(cls, spec: LatentFactorSpec) -> "LatentFactorMap":
        rng = make_rng(spec.seed, 0)
        s = spec.coef_scale
        p, q, h = spec.p, spec.latent_dim, spec.hidden
        return cls(rng.uniform(-s, s, (p, q, h)), rng.uniform(-s, s, (p, h)),
                   rng.uniform(-s, s, (p, h)), rng.uniform(-s, s, p))

    def __call__(self, z):
        hidden = np.tanh(np.einsum("nq,pqh->nph", z, self.w1) + self.b1)
        return np.einsum("nph,ph->np", hidden, self.w2) + self.b2


def gen_latent_factor_data(spec: LatentFactorSpec, return_latent=False):
    """Complete table ``X_j = f_j(Z) + eps_j`` with ``Z ~ N(0, I)``."""
    fmap = LatentFactorMap.from_spec(spec)
    z = make_rng(spec.seed, 1).standard_normal((spec.n, spec.latent_dim))
    noise = make_rng(spec.seed, 2).standard_normal((spec.n, spec.p)) * spec.noise_std
    table = DataTable.complete(fmap(z) + noise)
    if return_latent:
        return table, z
    return table


# --------------------------------------------------------------------------
# eight-pattern Gaussian mixture
# --------------------------------------------------------------------------

MIXTURE_PATTERNS = ((1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1),
                    (1, 0, 1), (0, 1, 1), (1, 1, 1), (0, 0, 0))
MIXTURE_PROBS = (0.169, 0.153, 0.136, 0.119, 0.102, 0.085, 0.169, 0.068)
MIXTURE_H = ((1.4, 1.6, 0.9), (1.9, 1.1, 1.4), (1.9, 1.6, 0.2), (0.5, 1.9, 2.1),
             (0.5, 2.4, 0.9), (1.0, 1.9, 1.4), (1.0, 2.4, 0.2), (1.4, 1.1, 2.1))
MIXTURE_SIGMA = ((4.4, 1.3, -2.8), (1.3, 3.2, 1.3), (-2.8, 1.3, 3.5))


@dataclass
class GaussianMixtureSpec:
    """``R ~ Multinomial(probs)`` over ``patterns``; ``X | R=r ~ N(Sigma h(r), Sigma)``.

    The listed probabilities are rescaled to sum to one; the raw total is kept
    in ``raw_prob_sum`` for reporting.
    """

    n: int = 20000
    seed: int = 0
    patterns: tuple = MIXTURE_PATTERNS
    probs: tuple = MIXTURE_PROBS
    h: tuple = MIXTURE_H
    sigma: tuple = MIXTURE_SIGMA
    raw_prob_sum: float = field(init=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if np.any(probs < 0) or probs.sum() <= 0:
            raise SpecError("pattern probabilities must be non-negative with positive total")
        if len(self.patterns) != len(probs) or len(self.h) != len(probs):
            raise SpecError("patterns, probs and h must have equal length")
        self.raw_prob_sum = float(probs.sum())
        self.probs = tuple(probs / probs.sum())
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1] or sigma.shape[0] != len(self.patterns[0]):
            raise SpecError("sigma must be a square matrix matching the pattern length")
        if not np.allclose(sigma, sigma.T):
            raise DomainError("mixture covariance must be symmetric")
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise DomainError("mixture covariance must be positive definite") from None

    @property
    def pattern_means(self) -> np.ndarray:
        return np.asarray(self.h, dtype=float) @ np.asarray(self.sigma, dtype=float).T

    def true_mean(self) -> np.ndarray:
        """Closed-form ``E[X] = sum_r p(r) Sigma h(r)``."""
        return np.asarray(self.probs) @ self.pattern_means


def gen_gaussian_mixture(spec: GaussianMixtureSpec) -> DataTable:
    """Draw patterns then data; ``values`` holds the complete truth and
    ``mask`` the sampled pattern. All-missing rows stay in the table and are
    flagged in ``meta['excluded']``."""
    rng = make_rng(spec.seed, 0)
    labels = rng.choice(len(spec.probs), size=spec.n, p=np.asarray(spec.probs))
    sigma = np.asarray(spec.sigma, dtype=float)
    chol = np.linalg.cholesky(sigma)
    noise = make_rng(spec.seed, 1).standard_normal((spec.n, sigma.shape[0])) @ chol.T
    values = spec.pattern_means[labels] + noise
    mask = np.asarray(spec.patterns, dtype=np.int8)[labels]
    table = DataTable(values, mask)
    table.meta.update(pattern=labels, excluded=table.fully_missing(),
                      raw_prob_sum=spec.raw_prob_sum)
    return table


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

DEFAULT_MISSING_TOKENS = ("", "NaN", "nan", "NA")


def _parse_cell(cell, missing_tokens):
    cell = cell.strip()
    if cell in missing_tokens:
        return math.nan
    return float(cell)


def load_csv(path, missing_token=None, header=None, drop_fully_missing=True) -> DataTable:
    """Read a numeric CSV table.

    ``missing_token`` may be a string or a collection of strings; by default
    empty cells and ``NaN``/``NA`` mark missing entries. ``header=None``
    detects a header row as one whose cells do not parse as numbers.
    Fully missing rows are dropped and counted in ``meta['dropped_rows']``.
    """
    if missing_token is None:
        tokens = set(DEFAULT_MISSING_TOKENS)
    elif isinstance(missing_token, str):
        tokens = {missing_token}
    else:
        tokens = set(missing_token)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh)]
    while rows and not any(c.strip() for c in rows[-1]) and len(rows[-1]) <= 1:
        rows.pop()
    if not rows:
        raise ParseError(f"{path}: empty file")

    columns = None
    if header is None:
        try:
            [_parse_cell(c, tokens) for c in rows[0]]
            header = False
        except ValueError:
            header = True
    if header:
        columns = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise ParseError(f"{path}: header but no data rows")

    width = len(columns) if columns else len(rows[0])
    values = np.empty((len(rows), width))
    offset = 2 if header else 1
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{path}: row {i + offset} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = _parse_cell(cell, tokens)
            except ValueError:
                raise ParseError(f"{path}: row {i + offset}, column {j + 1}: "
                                 f"non-numeric value {cell!r}") from None
    table = DataTable.from_nan(values, columns)
    if drop_fully_missing:
        table, dropped = table.drop_fully_missing()
        table.meta["dropped_rows"] = dropped
        if dropped:
            logger.warning("%s: dropped %d fully missing rows", path, dropped)
    return table


def write_csv(path, values, columns=None, mask=None, missing_token="NaN"):
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if columns:
            writer.writerow(columns)
        for i, row in enumerate(values):
            cells = []
            for j, v in enumerate(row):
                missing = (mask is not None and mask[i, j] == 0) or np.isnan(v)
                cells.append(missing_token if missing else repr(float(v)))
            writer.writerow(cells)


# --------------------------------------------------------------------------
# standardisation
# --------------------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def fit_standardizer(table: DataTable) -> Standardizer:
    """Column mean and population std over observed entries only."""
    obs = table.mask == 1
    counts = obs.sum(axis=0)
    names = table.columns or [str(j) for j in range(table.p)]
    for j in np.flatnonzero(counts < 2):
        raise DomainError(f"column {names[j]!r} has fewer than 2 observed entries")
    filled = np.where(obs, table.values, 0.0)
    mean = filled.sum(axis=0) / counts
    var = (np.where(obs, table.values - mean, 0.0) ** 2).sum(axis=0) / counts
    for j in np.flatnonzero(var <= 0):
        raise DomainError(f"column {names[j]!r} is constant over its observed entries")
    return Standardizer(mean, np.sqrt(var))


def standardize(table: DataTable, stats: Standardizer | None = None):
    """Return ``(standardised table, stats)``.

    ``stats`` come from observed entries only; the affine map is applied to
    every cell so a ground truth stored under the mask stays comparable.
    """
    stats = fit_standardizer(table) if stats is None else stats
    values = stats.transform(table.values)
    return DataTable(values, table.mask, table.columns, dict(table.meta)), stats


def destandardize(table: DataTable, stats: Standardizer) -> DataTable:
    return DataTable(stats.inverse(table.values), table.mask, table.columns, dict(table.meta))
