"""Monte Carlo checks of the importance-weighted bound and an exact oracle
for the threshold construction of discrete missingness mechanisms.

Weight laws are positive with closed-form moments, so the behaviour of
``Lhat_K = log(mean of K weights)`` can be compared with known limits:

* ``E[Lhat_K]`` is nondecreasing in ``K`` and bounded by ``log mu``;
* ``K * bias -> -mu2 / (2 mu^2)`` and ``K * var -> mu2 / mu^2``;
* ``Lhat_K -> log mu`` in probability.

Draws are normalised by the mean before averaging (``w / mu``), so a
constant law reproduces ``log c`` exactly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DomainError, SpecError
from .nn import make_rng

CHUNK_ELEMENTS = 4_000_000


# --------------------------------------------------------------------------
# weight laws
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightLaw:
    """Positive weight distribution.

    ``family`` is ``"lognormal"`` (params ``mu0, sigma``), ``"two_point"``
    (``a, b, q``: value ``a`` with probability ``q``, else ``b``) or
    ``"constant"`` (``c``).
    """

    family: str
    params: tuple

    def __post_init__(self):
        f, prm = self.family, tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", prm)
        if f == "lognormal":
            if len(prm) != 2 or not prm[1] >= 0:
                raise DomainError("lognormal needs (mu0, sigma >= 0)")
        elif f == "two_point":
            if len(prm) != 3 or min(prm[0], prm[1]) <= 0 or not 0 <= prm[2] <= 1:
                raise DomainError("two_point needs (a > 0, b > 0, 0 <= q <= 1)")
        elif f == "constant":
            if len(prm) != 1 or prm[0] <= 0:
                raise DomainError("constant needs c > 0")
        else:
            raise DomainError(f"unknown weight law {f!r}")

    @classmethod
    def lognormal(cls, mu0=0.0, sigma=0.5):
        return cls("lognormal", (mu0, sigma))

    @classmethod
    def two_point(cls, a, b, q):
        return cls("two_point", (a, b, q))

    @classmethod
    def constant(cls, c):
        return cls("constant", (c,))

    @property
    def mean(self) -> float:
        f, prm = self.family, self.params
        if f == "lognormal":
            return math.exp(prm[0] + 0.5 * prm[1] ** 2)
        if f == "two_point":
            a, b, q = prm
            return q * a + (1 - q) * b
        return prm[0]

    @property
    def log_mean(self) -> float:
        f, prm = self.family, self.params
        if f == "lognormal":
            return prm[0] + 0.5 * prm[1] ** 2
        return math.log(self.mean)

    @property
    def mu2(self) -> float:
        f, prm = self.family, self.params
        if f == "lognormal":
            s2 = prm[1] ** 2
            return math.expm1(s2) * math.exp(2 * prm[0] + s2)
        if f == "two_point":
            a, b, q = prm
            return q * (1 - q) * (a - b) ** 2
        return 0.0

    @property
    def mu3(self) -> float:
        f, prm = self.family, self.params
        if f == "lognormal":
            s2 = prm[1] ** 2
            return (math.exp(s2) + 2) * math.sqrt(math.expm1(s2)) * self.mu2 ** 1.5
        if f == "two_point":
            a, b, q = prm
            return q * (1 - q) * (1 - 2 * q) * (a - b) ** 3
        return 0.0

    @property
    def cv2(self) -> float:
        """Squared coefficient of variation ``mu2 / mu^2``."""
        return self.mu2 / self.mean ** 2

    def sample_ratio(self, rng, shape):
        """Draws of ``w / mu``."""
        f, prm = self.family, self.params
        if f == "lognormal":
            s = prm[1]
            out = rng.standard_normal(shape)
            out *= s
            out -= 0.5 * s * s
            return np.exp(out, out=out)
        if f == "two_point":
            a, b, q = prm
            mu = self.mean
            return np.where(rng.random(shape) < q, a / mu, b / mu)
        return np.ones(shape)

    def predicted_bias(self, K) -> float:
        return -self.cv2 / (2.0 * K)

    def predicted_variance(self, K) -> float:
        return self.cv2 / K

    def to_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params), "mean": self.mean,
                "mu2": self.mu2, "mu3": self.mu3}


def _chunks(reps, width):
    rows = max(1, CHUNK_ELEMENTS // max(width, 1))
    for start in range(0, reps, rows):
        yield min(rows, reps - start)


# --------------------------------------------------------------------------
# monotonicity of the bound
# --------------------------------------------------------------------------

@dataclass
class CheckReport:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), **self.details}


def check_monotone_bounds(law: WeightLaw, Ks=(1, 2, 5, 20, 100, 1000), outer_reps=100_000,
                          seed=0, se_factor=2.0) -> CheckReport:
    """Monte Carlo ``L_K = E[Lhat_K]`` on nested prefixes of shared draws.

    Each replication draws ``max(Ks)`` weights and every ``K`` uses the first
    ``K`` of them. Passes when every consecutive difference is above
    ``-se_factor`` pooled standard errors and every ``L_K`` is below
    ``log mu`` plus ``se_factor`` standard errors.
    """
    Ks = [int(k) for k in Ks]
    if Ks != sorted(Ks) or len(set(Ks)) != len(Ks) or Ks[0] < 1:
        raise SpecError("Ks must be strictly ascending positive integers")
    if outer_reps < 10_000:
        raise SpecError("outer_reps must be >= 10^4")
    kmax = Ks[-1]
    cols = np.asarray(Ks) - 1
    rng = make_rng(seed, 0)
    s1 = np.zeros(len(Ks))
    s2 = np.zeros(len(Ks))
    for rows in _chunks(outer_reps, kmax):
        ratio = law.sample_ratio(rng, (rows, kmax))
        cs = np.cumsum(ratio, axis=1)[:, cols]
        dev = np.log(cs / np.asarray(Ks, dtype=float))
        s1 += dev.sum(axis=0)
        s2 += (dev * dev).sum(axis=0)
    mean_dev = s1 / outer_reps
    var = np.maximum(s2 / outer_reps - mean_dev ** 2, 0.0) * outer_reps / (outer_reps - 1)
    se = np.sqrt(var / outer_reps)
    L = law.log_mean + mean_dev
    diffs = np.diff(mean_dev)
    pooled = np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
    monotone = bool(np.all(diffs >= -se_factor * pooled))
    bounded = bool(np.all(mean_dev <= se_factor * se))
    return CheckReport("monotone_bounds", monotone and bounded, {
        "law": law.to_dict(), "Ks": Ks, "outer_reps": int(outer_reps), "seed": seed,
        "L_K": L.tolist(), "se": se.tolist(), "log_mean": law.log_mean,
        "monotone": monotone, "bounded": bounded})


# --------------------------------------------------------------------------
# bias and variance
# --------------------------------------------------------------------------

def check_bias_variance(law: WeightLaw, Ks=(100, 300, 1000), reps=1_000_000, seed=0,
                        rel_tol=0.10) -> CheckReport:
    """Empirical bias and variance of ``Lhat_K`` against the leading terms.

    The bias is estimated two ways: the plain Monte Carlo mean of
    ``Lhat_K - log mu``, and a control-variate version that subtracts the
    mean-zero quantity ``Wbar / mu - 1``. Both estimate the same expectation;
    the second has a far smaller standard error and decides the check.
    """
    if reps < 1_000_000:
        raise SpecError("reps must be >= 10^6 per K")
    rows_out = []
    passed = True
    for K in [int(k) for k in Ks]:
        rng = make_rng(seed, K)
        acc = np.zeros(5)   # sum dev, sum dev^2, sum cv, sum cv^2, count
        for rows in _chunks(reps, K):
            delta = law.sample_ratio(rng, (rows, K)).mean(axis=1) - 1.0
            dev = np.log1p(delta)
            cv = dev - delta
            acc += (dev.sum(), (dev * dev).sum(), cv.sum(), (cv * cv).sum(), rows)
        n = acc[4]
        bias_mc = acc[0] / n
        var = (acc[1] / n - bias_mc ** 2) * n / (n - 1)
        bias_cv = acc[2] / n
        se_cv = math.sqrt(max(acc[3] / n - bias_cv ** 2, 0.0) / n)
        se_mc = math.sqrt(max(var, 0.0) / n)
        pred_b, pred_v = law.predicted_bias(K), law.predicted_variance(K)
        if pred_b == 0.0:
            ok_b = bias_cv == 0.0 and bias_mc == 0.0
            ok_v = var == 0.0
        else:
            ok_b = abs(bias_cv - pred_b) <= rel_tol * abs(pred_b)
            ok_v = abs(var - pred_v) <= rel_tol * abs(pred_v)
        passed &= bool(ok_b and ok_v)
        rows_out.append({"K": K, "bias": bias_cv, "bias_se": se_cv, "bias_plain": bias_mc,
                         "bias_plain_se": se_mc, "variance": var,
                         "K_bias": K * bias_cv, "K_variance": K * var,
                         "predicted_K_bias": K * pred_b, "predicted_K_variance": K * pred_v,
                         "bias_ok": bool(ok_b), "variance_ok": bool(ok_v)})
    return CheckReport("bias_variance", passed, {"law": law.to_dict(), "reps": int(reps),
                                                 "seed": seed, "rel_tol": rel_tol, "per_K": rows_out})


# --------------------------------------------------------------------------
# convergence in probability
# --------------------------------------------------------------------------

def check_convergence_probability(law: WeightLaw, K_grid=(10, 100, 1000, 10000), epsilon=0.05,
                                  trials=10_000, seed=0, final_bound=0.01,
                                  chebyshev_factor=10.0) -> CheckReport:
    """Exceedance frequency ``P(|Lhat_K - log mu| >= epsilon)`` along ``K_grid``.

    Passes when the frequencies do not increase along the grid, the last
    one is below ``final_bound``, and each stays within ``chebyshev_factor``
    of the Chebyshev bound ``(var + bias^2) / epsilon^2`` built from the
    leading-order moments.
    """
    if not epsilon > 0:
        raise SpecError("epsilon must be > 0")
    K_grid = [int(k) for k in K_grid]
    if K_grid != sorted(K_grid) or K_grid[0] < 1:
        raise SpecError("K_grid must be ascending positive integers")
    cols = np.asarray(K_grid) - 1
    rng = make_rng(seed, 0)
    hits = np.zeros(len(K_grid))
    for rows in _chunks(trials, K_grid[-1]):
        cs = np.cumsum(law.sample_ratio(rng, (rows, K_grid[-1])), axis=1)[:, cols]
        dev = np.log(cs / np.asarray(K_grid, dtype=float))
        hits += (np.abs(dev) >= epsilon).sum(axis=0)
    prob = hits / trials
    cheb = np.array([min(1.0, (law.predicted_variance(k) + law.predicted_bias(k) ** 2) / epsilon ** 2)
                     for k in K_grid])
    nonincreasing = bool(np.all(np.diff(prob) <= 0))
    final_ok = bool(prob[-1] < final_bound)
    cheb_ok = bool(np.all(prob <= chebyshev_factor * cheb))
    return CheckReport("convergence_probability", nonincreasing and final_ok and cheb_ok, {
        "law": law.to_dict(), "K_grid": K_grid, "epsilon": epsilon, "trials": int(trials),
        "seed": seed, "exceedance": prob.tolist(), "chebyshev_bound": cheb.tolist(),
        "nonincreasing": nonincreasing, "final_below_bound": final_ok, "within_chebyshev": cheb_ok})


# --------------------------------------------------------------------------
# discrete mechanism oracle
# --------------------------------------------------------------------------

def patterns(p: int, order: str = "msb") -> list:
    """All ``2^p`` patterns sorted as binary numbers.

    ``order="msb"`` reads ``r_1`` as the most significant bit, so
    ``(0, 0, 1) < (0, 1, 0)``; ``order="lsb"`` reads ``r_1`` as the least
    significant bit.
    """
    pats = list(itertools.product((0, 1), repeat=p))
    if order == "lsb":
        pats.sort(key=lambda r: r[::-1])
    elif order != "msb":
        raise SpecError(f"order must be 'msb' or 'lsb', got {order!r}")
    return pats


@dataclass
class DiscreteMechanism:
    """``probs[x]`` maps each pattern (tuple of 0/1, ``r_1`` first) to
    ``P(R = r | x)`` for a finite set of covariate values ``x``."""

    p: int
    probs: dict

    def __post_init__(self):
        if not 1 <= self.p <= 3:
            raise DomainError(f"p must be in 1..3, got {self.p}")
        full = set(itertools.product((0, 1), repeat=self.p))
        for x, table in self.probs.items():
            keys = {tuple(int(v) for v in r) for r in table}
            if keys != full:
                raise DomainError(f"x={x!r}: table must cover exactly the {2 ** self.p} patterns")
            vals = np.array(list(table.values()), dtype=float)
            if np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise DomainError(f"x={x!r}: probabilities must be finite and nonnegative")
            if abs(vals.sum() - 1.0) > 1e-12:
                raise DomainError(f"x={x!r}: probabilities sum to {vals.sum()!r}, not 1")

    @classmethod
    def random(cls, p: int, n_x: int, rng) -> "DiscreteMechanism":
        pats = list(itertools.product((0, 1), repeat=p))
        probs = {}
        for x in range(n_x):
            v = rng.dirichlet(np.ones(len(pats)))
            v[-1] = 1.0 - v[:-1].sum()
            if v[-1] < 0:
                v = np.maximum(v, 0.0)
                v /= v.sum()
            probs[x] = dict(zip(pats, v.tolist()))
        return cls(p, probs)


def threshold_decoder(mech: DiscreteMechanism, x, order: str = "msb"):
    """Deterministic decoder ``u -> (f_1(x, u), ..., f_p(x, u))``.

    Patterns are laid out on ``[0, 1]`` in binary order, pattern ``r``
    owning ``(C_r, C_r + p_r]`` with ``C_r`` the total mass of the patterns
    before it; ``f_j`` is 1 exactly on the intervals of patterns with
    ``r_j = 1``. Returns the decoder and the sorted breakpoints.
    """
    pats = patterns(mech.p, order)
    table = {tuple(int(v) for v in r): float(pr) for r, pr in mech.probs[x].items()}
    mass = np.array([table[r] for r in pats])
    upper = np.cumsum(mass)
    upper[-1] = 1.0
    bits = np.array(pats, dtype=np.int8)          # (2^p, p)

    def decoder(u):
        u = np.asarray(u, dtype=float)
        # interval index: first upper end >= u (u = 0 belongs to the first interval)
        idx = np.searchsorted(upper, u, side="left")
        idx = np.minimum(idx, len(pats) - 1)
        return bits[idx]

    return decoder, np.concatenate([[0.0], upper])


@dataclass
class Lemma1Result:
    truth: dict
    exact: dict
    grid: dict
    max_error_exact: float
    max_error_grid: float
    grid_size: int

    @property
    def passed(self) -> bool:
        return self.max_error_exact < 1e-12 and self.max_error_grid < 2.0 / self.grid_size

    def to_dict(self) -> dict:
        return {"max_error_exact": self.max_error_exact, "max_error_grid": self.max_error_grid,
                "grid_size": self.grid_size, "passed": self.passed}


def _bernoulli_product(f_vals, r):
    """``prod_j Bernoulli(r_j | f_j)`` for decoder outputs ``f_vals`` (n, p)."""
    r = np.asarray(r)
    return np.prod(np.where(r == 1, f_vals, 1 - f_vals), axis=-1)


def lemma1_oracle(mech: DiscreteMechanism, x, u_grid_size: int = 1000,
                  order: str = "msb") -> Lemma1Result:
    """Rebuild ``P(R = r | x)`` by integrating the threshold decoder over
    ``u ~ Uniform(0, 1)``.

    The exact route integrates piece by piece between the decoder's
    breakpoints (the decoder is constant on each piece); the grid route
    averages over ``u_grid_size`` midpoints and serves as a cross-check.
    """
    if u_grid_size < 1000:
        raise SpecError("u_grid_size must be >= 1000")
    if x not in mech.probs:
        raise DomainError(f"x={x!r} not in mechanism table")
    decoder, breaks = threshold_decoder(mech, x, order)
    lengths = np.diff(breaks)
    live = lengths > 0
    mids = 0.5 * (breaks[:-1] + breaks[1:])[live]
    f_mid = decoder(mids)
    grid = (np.arange(u_grid_size) + 0.5) / u_grid_size
    f_grid = decoder(grid)
    truth = {tuple(int(v) for v in r): float(pr) for r, pr in mech.probs[x].items()}
    exact, approx = {}, {}
    for r in truth:
        exact[r] = float(np.dot(lengths[live], _bernoulli_product(f_mid, r)))
        approx[r] = float(_bernoulli_product(f_grid, r).mean())
    err_exact = max(abs(exact[r] - truth[r]) for r in truth)
    err_grid = max(abs(approx[r] - truth[r]) for r in truth)
    return Lemma1Result(truth, exact, approx, err_exact, err_grid, int(u_grid_size))


def check_lemma1(n_tables=100, ps=(1, 2, 3), u_grid_size=1000, seed=0, order="msb") -> CheckReport:
    """Run the oracle on random mechanism tables."""
    rng = make_rng(seed, 0)
    worst_exact = worst_grid = 0.0
    passed = True
    for t in range(n_tables):
        p = ps[t % len(ps)]
        mech = DiscreteMechanism.random(p, 1, rng)
        res = lemma1_oracle(mech, 0, u_grid_size, order)
        worst_exact = max(worst_exact, res.max_error_exact)
        worst_grid = max(worst_grid, res.max_error_grid)
        passed &= res.passed
    return CheckReport("lemma1", bool(passed), {"tables": n_tables, "ps": list(ps), "order": order,
                                                "max_error_exact": worst_exact,
                                                "max_error_grid": worst_grid,
                                                "u_grid_size": u_grid_size, "seed": seed})


THEORY_CHECKS = ("lemma1", "monotone_bounds", "bias_variance", "convergence_probability")


def run_theory_check(name: str, seed: int = 0, **overrides) -> CheckReport:
    """Run one named check at its default settings on lognormal(0, 0.5)."""
    law = WeightLaw.lognormal(0.0, 0.5)
    if name == "lemma1":
        return check_lemma1(seed=seed, **overrides)
    if name == "monotone_bounds":
        return check_monotone_bounds(law, seed=seed, **overrides)
    if name == "bias_variance":
        return check_bias_variance(law, seed=seed, **overrides)
    if name == "convergence_probability":
        return check_convergence_probability(law, seed=seed, **overrides)
    raise SpecError(f"unknown theory check {name!r}; choose from {', '.join(THEORY_CHECKS)}")
