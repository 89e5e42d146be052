"""Synthetic MNAR masks for complete tables.

Four families are supported:

``latent``
    ``R_j ~ Bernoulli(sigmoid(h_j(X_{-j}, zt) + offset))`` with a per-row
    latent ``zt ~ N(0, I)`` shared by all indicators.
``threshold``
    ``R_j = 1`` iff ``U_j > sigmoid(g_j(X_{-j}) + offset)``, ``U_j`` uniform.
``blockwise``
    the threshold construction with one indicator per column group, driven by
    the columns outside the group.
``self_censoring``
    the second half of the columns goes missing whenever a value exceeds its
    column mean.

Unless ``self_censoring_allowed`` is set, the inputs that belong to an
indicator's own column (or group) are zeroed before the mechanism map is
evaluated, so the indicator is a constant function of them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit

from .datagen import DataTable
from .exceptions import CalibrationError, SpecError
from .nn import make_rng

MECHANISMS = ("latent", "threshold", "blockwise", "self_censoring")
LOGIT_CLAMP = 30.0
BISECTION_STEPS = 60
OFFSET_BRACKET = (-64.0, 64.0)
MASK_STREAM = 1


@dataclass
class MissingnessSpec:
    mechanism: str = "latent"
    linearity: str = "linear"
    self_censoring_allowed: bool = False
    latent_dim: int = 1
    group_size: int | None = None
    groups: list | None = None
    target_rate: tuple = (0.30, 0.40)
    hidden: int = 8
    offset: float | None = None
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.mechanism not in MECHANISMS:
            problems.append(f"unknown mechanism {self.mechanism!r}")
        if self.linearity not in ("linear", "nonlinear"):
            problems.append(f"unknown linearity {self.linearity!r}")
        if self.latent_dim < 1:
            problems.append("latent_dim must be >= 1")
        lo, hi = self.target_rate
        if not (0.0 < lo < hi < 1.0):
            problems.append(f"target_rate must satisfy 0 < lo < hi < 1, got {self.target_rate}")
        if self.mechanism == "blockwise" and self.group_size is None and self.groups is None:
            problems.append("blockwise mechanism needs group_size or groups")
        if self.group_size is not None and self.group_size < 1:
            problems.append("group_size must be >= 1")
        if problems:
            raise SpecError("; ".join(problems))
        self.target_rate = (float(lo), float(hi))

    def resolve_groups(self, p: int) -> list:
        """Column groups that share an indicator."""
        if self.mechanism != "blockwise":
            return [[j] for j in range(p)]
        if self.groups is not None:
            groups = [list(map(int, g)) for g in self.groups]
        else:
            gs = self.group_size
            groups = [list(range(s, min(s + gs, p))) for s in range(0, p, gs)]
        flat = sorted(j for g in groups for j in g)
        if any(j < 0 or j >= p for j in flat):
            raise SpecError(f"group references a column outside 0..{p - 1}")
        if flat != list(range(p)):
            raise SpecError("groups must partition the columns")
        return groups

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MissingnessSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown missingness keys: {sorted(unknown)}")
        d = dict(d)
        if "target_rate" in d:
            d["target_rate"] = tuple(d["target_rate"])
        return cls(**d)


@dataclass
class MechanismMap:
    """Random map from ``(X, zt)`` to one logit per indicator unit."""

    groups: list
    input_mask: np.ndarray       # (units, p) 1 where a column feeds the unit
    w1: np.ndarray               # (units, p + q, H) or (units, p + q, 1) when linear
    b1: np.ndarray
    w2: np.ndarray | None
    b2: np.ndarray | None
    latent_dim: int

    @classmethod
    def build(cls, spec: MissingnessSpec, p: int) -> "MechanismMap":
        groups = spec.resolve_groups(p)
        units = len(groups)
        input_mask = np.ones((units, p))
        if not spec.self_censoring_allowed:
            for u, g in enumerate(groups):
                input_mask[u, g] = 0.0
        q = spec.latent_dim if spec.mechanism == "latent" else 0
        rng = make_rng(spec.seed, 0)
        if spec.linearity == "linear":
            w1 = rng.uniform(-1, 1, (units, p + q, 1))
            b1 = rng.uniform(-1, 1, (units, 1))
            w2 = b2 = None
        else:
            w1 = rng.uniform(-1, 1, (units, p + q, spec.hidden))
            b1 = rng.uniform(-1, 1, (units, spec.hidden))
            w2 = rng.uniform(-1, 1, (units, spec.hidden))
            b2 = rng.uniform(-1, 1, units)
        return cls(groups, input_mask, w1, b1, w2, b2, q)

    def logits(self, x, zt=None):
        """Raw unit logits, shape ``(n, units)``, before the offset."""
        x = np.asarray(x, dtype=float)
        n = len(x)
        xin = x[:, None, :] * self.input_mask[None]                     # (n, units, p)
        if self.latent_dim:
            zin = np.broadcast_to(zt[:, None, :], (n, len(self.groups), self.latent_dim))
            xin = np.concatenate([xin, zin], axis=-1)
        pre = np.einsum("nui,uih->nuh", xin, self.w1) + self.b1
        if self.w2 is None:
            return pre[..., 0]
        return np.einsum("nuh,uh->nu", np.tanh(pre), self.w2) + self.b2

    def expand(self, unit_values, p):
        """Copy each unit's column of ``unit_values`` to all columns of its group."""
        out = np.empty((unit_values.shape[0], p), dtype=unit_values.dtype)
        for u, g in enumerate(self.groups):
            out[:, g] = unit_values[:, [u]]
        return out


def _clamp(logit):
    return np.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP)


def _draws(spec: MissingnessSpec, n: int, units: int, stream: int):
    rng = make_rng(spec.seed, stream)
    zt = rng.standard_normal((n, spec.latent_dim)) if spec.mechanism == "latent" else None
    u = rng.random((n, units))
    return zt, u


def _mask_from_draws(mmap, x, offset, spec, zt, u):
    logit = _clamp(mmap.logits(x, zt) + offset)
    if spec.mechanism == "latent":
        # Bernoulli(sigmoid(logit)) realised through the uniform draw
        unit_obs = u < expit(logit)
    else:
        unit_obs = u > expit(logit)
    return mmap.expand(unit_obs.astype(np.int8), x.shape[1])


def _require_complete(table: DataTable):
    if not np.all(table.mask == 1):
        raise SpecError("missingness mechanisms need a fully observed table")


def _apply(table: DataTable, spec: MissingnessSpec, offset=None, stream=None) -> DataTable:
    _require_complete(table)
    mmap = MechanismMap.build(spec, table.p)
    if offset is None:
        offset = spec.offset if spec.offset is not None else calibrate_offset(table, spec)
    zt, u = _draws(spec, table.n, len(mmap.groups), MASK_STREAM if stream is None else stream)
    out = table.with_mask(_mask_from_draws(mmap, table.values, offset, spec, zt, u))
    out.meta.update(missingness=spec.mechanism, offset=float(offset), missing_rate=retained_missing_rate(out.mask))
    return out


def apply_latent_mechanism(table: DataTable, spec: MissingnessSpec, offset=None) -> DataTable:
    if spec.mechanism != "latent":
        raise SpecError("spec mechanism must be 'latent'")
    return _apply(table, spec, offset)


def apply_threshold_mechanism(table: DataTable, spec: MissingnessSpec, offset=None) -> DataTable:
    if spec.mechanism != "threshold":
        raise SpecError("spec mechanism must be 'threshold'")
    return _apply(table, spec, offset)


def apply_blockwise(table: DataTable, spec: MissingnessSpec, offset=None) -> DataTable:
    if spec.mechanism != "blockwise":
        raise SpecError("spec mechanism must be 'blockwise'")
    return _apply(table, spec, offset)


def apply_self_censoring(table: DataTable) -> DataTable:
    """Columns from ``ceil(p/2)`` on are missing where the value is strictly
    above the column mean; the first half stays fully observed."""
    _require_complete(table)
    x = table.values
    mask = np.ones(x.shape, dtype=np.int8)
    start = math.ceil(table.p / 2)
    means = x.mean(axis=0)
    mask[:, start:] = (x[:, start:] <= means[start:]).astype(np.int8)
    out = table.with_mask(mask)
    out.meta.update(missingness="self_censoring", missing_rate=out.missing_rate())
    return out


def apply_mechanism(table: DataTable, spec: MissingnessSpec, offset=None) -> DataTable:
    if spec.mechanism == "self_censoring":
        return apply_self_censoring(table)
    return _apply(table, spec, offset)


def unit_logits(table_values, spec: MissingnessSpec, zt=None, offset=0.0):
    """Clamped logits per indicator unit, exposed for structural checks."""
    mmap = MechanismMap.build(spec, np.asarray(table_values).shape[1])
    if spec.mechanism == "latent" and zt is None:
        raise SpecError("latent mechanism needs zt")
    return _clamp(mmap.logits(table_values, zt) + offset)


def retained_missing_rate(mask) -> float:
    """Missing fraction over rows that keep at least one observed entry.

    Fully missing rows are dropped before training, so they do not count
    toward the rate; ``nan`` when no row survives.
    """
    mask = np.asarray(mask)
    keep = mask.any(axis=1)
    if not keep.any():
        return float("nan")
    return float(1.0 - mask[keep].mean())


def calibrate_offset(table: DataTable, spec: MissingnessSpec) -> float:
    """Find a logit offset whose simulated missing rate lies in
    ``spec.target_rate``.

    The rate is measured on ``table`` with the same random stream that
    :func:`apply_mechanism` uses for the realised mask, over rows that are not entirely missing. The
    raw entry-level rate is monotone in the offset; its direction differs
    between the latent and threshold families and is read off the bracket
    ends.
    """
    if spec.mechanism == "self_censoring":
        raise SpecError("self-censoring masks have no offset to calibrate")
    _require_complete(table)
    lo_t, hi_t = spec.target_rate
    target = 0.5 * (lo_t + hi_t)
    mmap = MechanismMap.build(spec, table.p)
    zt, u = _draws(spec, table.n, len(mmap.groups), stream=MASK_STREAM)

    def mask_at(offset):
        return _mask_from_draws(mmap, table.values, offset, spec, zt, u)

    a, b = OFFSET_BRACKET
    increasing = mask_at(b).mean() < mask_at(a).mean()   # missing rate rises with offset
    best = None
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (a + b)
        r = retained_missing_rate(mask_at(mid))
        if lo_t <= r <= hi_t:
            # settle once inside the central half of the interval
            if abs(r - target) <= 0.25 * (hi_t - lo_t):
                return float(mid)
            if best is None or abs(r - target) < abs(best[1] - target):
                best = (mid, r)
        too_low = r < target          # nan (nothing retained) counts as too high
        if too_low == increasing:
            a = mid
        else:
            b = mid
    if best is not None:
        return float(best[0])
    raise CalibrationError(f"no offset reached missing rate in {spec.target_rate} "
                           f"after {BISECTION_STEPS} bisection steps")
