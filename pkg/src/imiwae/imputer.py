"""Self-normalised importance-sampling imputation and sampling from the
fitted generative model.

For a row with missing entries, ``B`` tuples ``(z, zt, x_m)`` are drawn from
the encoders and the data decoder; with ``mode="mnar"`` each draw is weighted
by ``p(x_o | z) p(r | x_o, x_m, zt) p(z) p(zt) / (q(z | x) q(zt | x))`` and
with ``mode="mar"`` the ``p(r | ...)`` factor is dropped. The imputation is
the weighted mean of the ``x_m`` draws.

Every row draws from its own stream, keyed by the seed and the row's
observed content, so results do not depend on row order or batching.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import logsumexp, softmax

from .datagen import DataTable
from .exceptions import NumericError, ShapeError, SpecError
from .model import ModelParams, _check_log_w, _forward, decode_data, draw_noise
from .nn import content_key, make_rng

ESS_WARN_FRACTION = 0.01


@dataclass
class ImputeConfig:
    B: int = 10000
    mode: str = "mnar"
    seed: int = 0
    chunk: int = 10000

    def __post_init__(self):
        problems = []
        if self.B < 1:
            problems.append("B must be >= 1")
        if self.mode not in ("mnar", "mar"):
            problems.append(f"mode must be 'mnar' or 'mar', got {self.mode!r}")
        if self.chunk < 1:
            problems.append("chunk must be >= 1")
        if problems:
            raise SpecError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "ImputeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown impute config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ImputedTable:
    values: np.ndarray
    ess: np.ndarray
    mask: np.ndarray
    columns: list | None = None

    def as_table(self) -> DataTable:
        """Completed values as a fully observed table."""
        return DataTable.complete(self.values, self.columns)

    def diagnostics(self) -> dict:
        incomplete = self.mask.min(axis=1) == 0
        ess = self.ess[incomplete]
        return {"rows": int(len(self.ess)), "imputed_rows": int(incomplete.sum()),
                "ess_min": float(ess.min()) if len(ess) else None,
                "ess_median": float(np.median(ess)) if len(ess) else None,
                "ess": self.ess.tolist()}


def normalized_weights(log_w):
    """Self-normalised weights along the last axis, computed in log space."""
    log_w = np.asarray(log_w, dtype=np.float64)
    if np.any(np.all(np.isneginf(log_w), axis=-1)):
        raise NumericError("all importance weights are zero")
    return softmax(log_w, axis=-1)


def effective_sample_size(log_w):
    """``(sum w)^2 / sum w^2`` along the last axis."""
    log_w = np.asarray(log_w, dtype=np.float64)
    return np.exp(2.0 * logsumexp(log_w, axis=-1) - logsumexp(2.0 * log_w, axis=-1))


def row_key(x_filled_row, mask_row) -> int:
    return content_key(x_filled_row, mask_row)


def _row_draws(params: ModelParams, x_row, m_row, rng, K, mnar):
    """``(log_w, x_hat)`` for one row: shapes ``(K,)`` and ``(K, p)``."""
    noise = draw_noise(rng, 1, K, params.config)
    state = _forward(params, x_row[None], m_row[None], noise, include_missingness=mnar)
    _check_log_w(state)
    return state["log_w"][0].astype(np.float64), state["x_hat"][0].astype(np.float64)


def _impute_row(params, x_row, m_row, config, key):
    """Streaming SNIS over chunks: weighted mean and ESS of one row."""
    mnar = config.mode == "mnar"
    top = -np.inf
    s_w = 0.0
    s_w2 = 0.0
    s_wx = np.zeros(len(x_row))
    done, chunk_id = 0, 0
    while done < config.B:
        k = min(config.chunk, config.B - done)
        rng = make_rng(config.seed, key, chunk_id)
        log_w, x_hat = _row_draws(params, x_row, m_row, rng, k, mnar)
        new_top = max(top, float(log_w.max()))
        shift = np.exp(top - new_top) if np.isfinite(top) else 0.0
        w = np.exp(log_w - new_top)
        s_w = s_w * shift + w.sum()
        s_w2 = s_w2 * shift * shift + np.dot(w, w)
        s_wx = s_wx * shift + w @ x_hat
        top = new_top
        done += k
        chunk_id += 1
    if not s_w > 0:
        raise NumericError("all importance weights are zero")
    return s_wx / s_w, s_w * s_w / s_w2


def impute(params: ModelParams, table: DataTable, config: ImputeConfig | None = None) -> ImputedTable:
    """Fill every missing entry of ``table`` with its SNIS conditional mean.

    Observed entries are copied through untouched; fully observed rows are
    skipped and report ``ESS = B``.
    """
    config = config or ImputeConfig()
    c = params.config
    if table.p != c.p:
        raise ShapeError(f"table has {table.p} columns, model expects {c.p}")
    if params.trained_steps == 0:
        warnings.warn("imputing with untrained parameters", RuntimeWarning, stacklevel=2)
    values = table.values.copy()
    mask = table.mask.copy()
    x_filled = np.where(mask == 1, table.values, 0.0)
    ess = np.full(table.n, float(config.B))
    for i in np.flatnonzero(mask.min(axis=1) == 0):
        key = row_key(x_filled[i], mask[i])
        mean, ess[i] = _impute_row(params, x_filled[i], mask[i].astype(float), config, key)
        miss = mask[i] == 0
        values[i, miss] = mean[miss]
    low = int(np.sum(ess < ESS_WARN_FRACTION * config.B))
    if low:
        warnings.warn(f"{low} rows have effective sample size below "
                      f"{ESS_WARN_FRACTION:g} * B", RuntimeWarning, stacklevel=2)
    return ImputedTable(values, ess, mask, table.columns)


def multiple_imputations(params: ModelParams, table: DataTable, m: int,
                         config: ImputeConfig | None = None) -> list:
    """``m`` completed tables, each missing block resampled from the
    normalised importance weights (single chunk of ``B`` draws per row)."""
    config = config or ImputeConfig()
    if m < 1:
        raise SpecError("m must be >= 1")
    mnar = config.mode == "mnar"
    out = [table.values.copy() for _ in range(m)]
    mask = table.mask
    x_filled = np.where(mask == 1, table.values, 0.0)
    for i in np.flatnonzero(mask.min(axis=1) == 0):
        key = row_key(x_filled[i], mask[i])
        log_w, x_hat = _row_draws(params, x_filled[i], mask[i].astype(float),
                                  make_rng(config.seed, key, 0), config.B, mnar)
        alpha = normalized_weights(log_w)
        picks = make_rng(config.seed, key, 1).choice(config.B, size=m, p=alpha)
        miss = mask[i] == 0
        for t, b in enumerate(picks):
            out[t][i, miss] = x_hat[b, miss]
    return [DataTable.complete(v, table.columns) for v in out]


def generate(params: ModelParams, n: int, seed: int = 0) -> DataTable:
    """Sample ``n`` rows: ``z ~ N(0, I)``, ``x ~ N(mu_x(z), gamma I)``."""
    if n < 0:
        raise SpecError("n must be >= 0")
    c = params.config
    rng = make_rng(seed, 0)
    z = rng.standard_normal((n, c.latent_dim))
    eps = rng.standard_normal((n, c.p))
    mux, gamma = decode_data(params, z)
    return DataTable.complete(np.asarray(mux, dtype=np.float64) + np.sqrt(gamma) * eps)
