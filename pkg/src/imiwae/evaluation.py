"""Imputation RMSE, kernel two-sample distance, bootstrap mean estimates and
cross-validated choice of the data latent dimension."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist, pdist
from sklearn.model_selection import KFold

from .datagen import DataTable, fit_standardizer
from .exceptions import DomainError, ShapeError, SpecError
from .imputer import ImputeConfig, impute
from .model import ModelConfig
from .nn import derive_seed, make_rng
from .trainer import TrainConfig, train

MMD_MAX_PER_SIDE = 2000


def imputation_rmse(truth, imputed, original_mask) -> float:
    """Root mean squared error over the entries where ``original_mask == 0``."""
    truth = np.asarray(truth, dtype=float)
    imputed = np.asarray(imputed, dtype=float)
    original_mask = np.asarray(original_mask)
    if not (truth.shape == imputed.shape == original_mask.shape):
        raise ShapeError(f"shapes differ: truth {truth.shape}, imputed {imputed.shape}, "
                         f"mask {original_mask.shape}")
    miss = original_mask == 0
    if not miss.any():
        raise DomainError("no missing entries to score")
    err = truth[miss] - imputed[miss]
    return float(np.sqrt(np.mean(err * err)))


def column_mean_impute(table: DataTable) -> np.ndarray:
    """Fill each missing entry with its column's observed mean."""
    obs = table.mask == 1
    counts = obs.sum(axis=0)
    if np.any(counts == 0):
        raise DomainError("a column has no observed entries")
    means = np.where(obs, table.values, 0.0).sum(axis=0) / counts
    return np.where(obs, table.values, means)


def median_bandwidth(a, b) -> float:
    """Median pairwise Euclidean distance of the pooled sample."""
    pooled = np.vstack([a, b])
    return float(np.median(pdist(pooled)))


def mmd_squared(sample_a, sample_b, bandwidth=None) -> float:
    """Unbiased estimate of squared MMD under the RBF kernel
    ``exp(-||x - y||^2 / (2 h^2))``; ``h`` defaults to the pooled median
    pairwise distance."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=float))
    b = np.atleast_2d(np.asarray(sample_b, dtype=float))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"samples must share their dimension, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise DomainError("each sample needs at least 2 points")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DomainError("kernel bandwidth must be positive")
    scale = -0.5 / (h * h)
    m, n = len(a), len(b)
    kaa = np.exp(scale * pdist(a, "sqeuclidean")).sum() * 2.0 / (m * (m - 1))
    kbb = np.exp(scale * pdist(b, "sqeuclidean")).sum() * 2.0 / (n * (n - 1))
    kab = np.exp(scale * cdist(a, b, "sqeuclidean")).mean()
    return float(kaa + kbb - 2.0 * kab)


def subsample_rows(x, size, seed):
    """At most ``size`` rows of ``x`` drawn without replacement."""
    x = np.asarray(x)
    if len(x) <= size:
        return x
    idx = make_rng(seed, 0).choice(len(x), size=size, replace=False)
    return x[np.sort(idx)]


@dataclass
class MeanEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    bootstrap_reps: int

    def to_dict(self) -> dict:
        return asdict(self)

    def covers(self, value) -> bool:
        return self.ci_low <= value <= self.ci_high


def mean_estimate_with_ci(values, bootstrap_reps=1000, seed=0, level=0.95, chunk=100) -> MeanEstimate:
    """Column mean with a percentile bootstrap interval over resampled rows."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise DomainError("cannot estimate the mean of an empty column")
    if bootstrap_reps < 100:
        raise SpecError("bootstrap_reps must be >= 100")
    n = values.size
    rng = make_rng(seed, 0)
    means = np.empty(bootstrap_reps)
    for start in range(0, bootstrap_reps, chunk):
        k = min(chunk, bootstrap_reps - start)
        idx = rng.integers(0, n, size=(k, n))
        means[start:start + k] = values[idx].mean(axis=1)
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    est = float(values.mean())
    # quantiles of a constant column can drift by one ulp
    lo, hi = min(float(lo), est), max(float(hi), est)
    return MeanEstimate(est, lo, hi, int(bootstrap_reps))


# --------------------------------------------------------------------------
# cross-validation over the data latent dimension
# --------------------------------------------------------------------------

@dataclass
class CvReport:
    candidates: list
    folds: int
    mask_fraction: float
    fold_rmse: dict                  # kappa -> list of per-fold RMSEs
    fold_masks: list = field(default_factory=list)   # per fold: row indices and synthetic mask
    seed: int = 0

    @property
    def mean_rmse(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.fold_rmse.items()}

    @property
    def selected(self) -> int:
        means = self.mean_rmse
        return min(self.candidates, key=lambda k: (means[k], k))

    @property
    def selected_elbow(self) -> int:
        return elbow_select(self.candidates, [self.mean_rmse[k] for k in self.candidates])

    def to_dict(self) -> dict:
        return {"candidates": list(self.candidates), "folds": self.folds,
                "mask_fraction": self.mask_fraction, "seed": self.seed,
                "fold_rmse": {str(k): list(v) for k, v in self.fold_rmse.items()},
                "mean_rmse": {str(k): v for k, v in self.mean_rmse.items()},
                "selected": self.selected, "selected_elbow": self.selected_elbow}


def elbow_select(candidates, scores) -> int:
    """Point of the (candidate, score) curve farthest below the chord joining
    its ends, both axes rescaled to [0, 1]; falls back to the minimum for
    fewer than three candidates."""
    order = np.argsort(candidates)
    k = np.asarray(candidates, dtype=float)[order]
    s = np.asarray(scores, dtype=float)[order]
    if len(k) < 3:
        return int(k[np.argmin(s)])
    kn = (k - k[0]) / (k[-1] - k[0])
    span = s.max() - s.min()
    if span == 0:
        return int(k[0])
    sn = (s - s.min()) / span
    chord = sn[0] + (sn[-1] - sn[0]) * kn
    return int(k[np.argmax(chord - sn)])


def mcar_validation_mask(mask, fraction, rng):
    """Hide ``fraction`` of the observed entries of ``mask`` uniformly at
    random; returns the reduced mask."""
    mask = np.asarray(mask)
    obs = np.flatnonzero(mask.ravel() == 1)
    n_hide = int(round(fraction * len(obs)))
    hide = rng.choice(obs, size=n_hide, replace=False)
    out = mask.copy().ravel()
    out[hide] = 0
    return out.reshape(mask.shape)


def cross_validate_kappa1(table: DataTable, candidates, folds=5, mask_fraction=0.2, seed=0,
                          model_config: dict | None = None, train_config: TrainConfig | None = None,
                          impute_config: ImputeConfig | None = None) -> CvReport:
    """K-fold selection of the data latent dimension.

    Each fold trains on the remaining rows, hides ``mask_fraction`` of the
    observed validation entries completely at random, imputes them with the
    ignorable (``mar``) estimator and scores RMSE on the hidden entries.
    Columns are standardised with statistics of the training rows.
    """
    candidates = [int(k) for k in candidates]
    if not candidates:
        raise SpecError("need at least one candidate latent dimension")
    bad = [k for k in candidates if k < 1 or k > table.p]
    if bad:
        raise SpecError(f"candidate latent dimensions {bad} outside 1..p={table.p}")
    if not 0 < mask_fraction <= 0.5:
        raise SpecError("mask_fraction must lie in (0, 0.5]")
    if folds < 2 or folds > table.n:
        raise SpecError(f"folds must be in 2..n, got {folds}")
    base = dict(model_config or {})
    base["p"] = table.p
    tc = train_config or TrainConfig(max_epochs=300, batch_size=128)
    ic = impute_config or ImputeConfig(B=1000)
    ic = replace(ic, mode="mar")

    kf = KFold(n_splits=folds, shuffle=True, random_state=derive_seed(seed, 0) % (2 ** 32))
    fold_rmse = {k: [] for k in candidates}
    fold_masks = []
    for f, (tr_idx, va_idx) in enumerate(kf.split(np.arange(table.n))):
        tr, _ = table.rows(tr_idx).drop_fully_missing()
        stats = fit_standardizer(tr)
        tr = DataTable(stats.transform(tr.values), tr.mask, tr.columns)
        va = table.rows(va_idx)
        va_vals = stats.transform(va.values)
        reduced = mcar_validation_mask(va.mask, mask_fraction, make_rng(seed, 1, f))
        hidden = (va.mask == 1) & (reduced == 0)
        fold_masks.append({"validation_rows": va_idx.tolist(), "hidden": np.argwhere(hidden).tolist()})
        va_in = DataTable(np.where(reduced == 1, va_vals, np.nan), reduced, va.columns)
        for k in candidates:
            mc = ModelConfig.from_dict({**base, "latent_dim": k})
            params, _ = train(tr, mc, replace(tc, seed=derive_seed(seed, 2, f, k)))
            filled = impute(params, va_in, replace(ic, seed=derive_seed(seed, 3, f, k)))
            err = filled.values[hidden] - va_vals[hidden]
            fold_rmse[k].append(float(np.sqrt(np.mean(err * err))))
    return CvReport(candidates, folds, float(mask_fraction), fold_rmse, fold_masks, int(seed))
