"""Initial-law tail families, their asymptotic inverses, and extreme-value limits.

Each family is specified by its upper tail.  The full law is obtained by
clamping the tail formula at 1 beyond the point where it stops being
monotone, which gives a valid distribution whose tail is exactly the formula.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize, special

from cdilab.errors import ConfigError, DomainError

_U_SHIFT = 2.0**-54


def _uniform_open(rng, size):
    # rng.random is on [0, 1); shift to the open interval (0, 1)
    return rng.random(size) + _U_SHIFT


class TailFamily:
    """Base class.  Subclasses define ``log_formula`` on (domain_lo, oo)."""

    domain_lo = 0.0

    # --- subclass hooks
    def log_formula(self, x):
        raise NotImplementedError

    @property
    def monotone_from(self) -> float:
        return self.domain_lo

    def fbar_inv_asymptotic(self, y):
        raise NotImplementedError

    # --- derived
    @functools.cached_property
    def x0(self) -> float:
        """Left end of the support."""
        m = self.monotone_from
        if m > self.domain_lo and self.log_formula(m) <= 0:
            # the clamped law has an atom at m
            return m
        lo = np.nextafter(max(m, self.domain_lo), math.inf)
        if self.log_formula(lo) <= 0:
            return float(lo) if m > self.domain_lo else max(m, self.domain_lo)
        hi = lo + 1.0
        while self.log_formula(hi) > 0:
            hi = lo + 2.0 * (hi - lo)
        return optimize.brentq(self.log_formula, lo, hi, xtol=1e-14, rtol=1e-15)

    def fbar(self, x):
        """P(X > x)."""
        xa = np.asarray(x, dtype=float)
        out = np.ones_like(xa)
        x0 = self.x0
        mask = xa >= x0
        if np.any(mask):
            xm = np.maximum(xa[mask], max(self.monotone_from, x0))
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                lf = np.where(np.isposinf(xm), -np.inf, self.log_formula(xm))
                out[mask] = np.minimum(1.0, np.exp(lf))
        return float(out) if out.ndim == 0 else out

    def cdf(self, x):
        return 1.0 - self.fbar(x)

    def fbar_inverse(self, u):
        """Smallest x with fbar(x) <= u: the upper-tail quantile."""
        ua = np.atleast_1d(np.asarray(u, dtype=float))
        x0 = self.x0
        top = float(self.fbar(x0))
        out = np.full(ua.shape, x0)
        need = ua < top
        if np.any(need):
            out[need] = self._solve_tail(ua[need], max(x0, self.monotone_from))
        return out if np.ndim(u) else float(out[0])

    def _solve_tail(self, u, start):
        # vectorised bisection of log_formula(x) = log u on [start, hi]
        target = np.log(u)
        lo = np.full(u.shape, start)
        width = max(1.0, abs(start))
        hi = lo + width
        with np.errstate(over="ignore"):
            for _ in range(2000):
                bad = self.log_formula(hi) > target
                if not bad.any():
                    break
                width *= 2.0
                hi = np.where(bad, start + width, hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            above = self.log_formula(mid) > target
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
            if np.all(hi - lo <= 1e-12 * np.maximum(1.0, np.abs(hi))):
                break
        return hi

    def sample(self, rng: np.random.Generator, size=None):
        u = _uniform_open(rng, size)
        return self.fbar_inverse(u)

    def fbar_at_asymptotic_inverse(self, y):
        return self.fbar(self.fbar_inv_asymptotic(y))

    @property
    def regime_params(self) -> dict:
        return {}


@dataclass(frozen=True)
class SlowPowerLog(TailFamily):
    """fbar(x) = r1 x^-r2 (log x)^r3 in the tail (r3 = 0 is Pareto)."""

    r1: float
    r2: float
    r3: float = 0.0

    def __post_init__(self):
        if not (self.r1 > 0 and self.r2 > 0):
            raise DomainError("slow family needs r1 > 0 and r2 > 0")

    @property
    def domain_lo(self):
        return 0.0 if self.r3 == 0 else 1.0

    def log_formula(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = math.log(self.r1) - self.r2 * np.log(x)
            if self.r3 != 0:
                out = out + self.r3 * np.log(np.log(x))
        return out

    @property
    def monotone_from(self):
        if self.r3 > 0:
            return math.exp(self.r3 / self.r2)
        return self.domain_lo

    def fbar_inverse(self, u):
        if self.r3 == 0:
            ua = np.asarray(u, dtype=float)
            out = np.maximum((self.r1 / ua) ** (1.0 / self.r2), self.x0)
            return float(out) if out.ndim == 0 else out
        return super().fbar_inverse(u)

    def fbar_inv_asymptotic(self, y):
        ya = _check_y(y)
        r1, r2, r3 = self.r1, self.r2, self.r3
        out = r1 ** (1 / r2) * r2 ** (-r3 / r2) * ya ** (-1 / r2) * np.log(1 / ya) ** (r3 / r2)
        return _ret(out)

    @property
    def regime_params(self):
        return {"r1": self.r1, "r2": self.r2, "r3": self.r3}


@dataclass(frozen=True)
class FastStretchedExp(TailFamily):
    """fbar(x) = r4 x^r3 exp(-r1 x^r2) in the tail."""

    r1: float
    r2: float
    r3: float = 0.0
    r4: float = 1.0

    def __post_init__(self):
        if not (self.r1 > 0 and self.r2 > 0 and self.r4 > 0):
            raise DomainError("fast family needs r1, r2, r4 > 0")

    def log_formula(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = math.log(self.r4) - self.r1 * x**self.r2
            if self.r3 != 0:
                out = out + self.r3 * np.log(x)
        return out

    @property
    def monotone_from(self):
        if self.r3 > 0:
            return (self.r3 / (self.r1 * self.r2)) ** (1.0 / self.r2)
        return 0.0

    def fbar_inverse(self, u):
        if self.r3 == 0:
            ua = np.asarray(u, dtype=float)
            arg = np.maximum(np.log(self.r4 / ua) / self.r1, 0.0)
            out = np.maximum(arg ** (1.0 / self.r2), self.x0)
            return float(out) if out.ndim == 0 else out
        return super().fbar_inverse(u)

    def fbar_inv_asymptotic(self, y):
        return _fast_inverse(_check_y(y), self.r1, self.r2, self.r3, self.r4)

    @property
    def regime_params(self):
        return {"r1": self.r1, "r2": self.r2, "r3": self.r3, "r4": self.r4}


@dataclass(frozen=True)
class LogHeavy(TailFamily):
    """fbar(x) = r1 (log x)^-r3 in the tail."""

    r1: float
    r3: float

    domain_lo = 1.0

    def __post_init__(self):
        if not (self.r1 > 0 and self.r3 > 0):
            raise DomainError("log-heavy family needs r1, r3 > 0")

    def log_formula(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return math.log(self.r1) - self.r3 * np.log(np.log(x))

    @property
    def x0(self):
        return math.exp(self.r1 ** (1.0 / self.r3))

    def fbar_inverse(self, u):
        # overflows to inf for u below r1 * 709.78^-r3
        ua = np.asarray(u, dtype=float)
        with np.errstate(over="ignore"):
            out = np.maximum(np.exp((ua / self.r1) ** (-1.0 / self.r3)), self.x0)
        return float(out) if out.ndim == 0 else out

    def fbar_inv_asymptotic(self, y):
        ya = _check_y(y)
        with np.errstate(over="ignore"):
            return _ret(np.exp((ya / self.r1) ** (-1.0 / self.r3)))

    def fbar_at_asymptotic_inverse(self, y):
        # work with log x so that tiny y does not overflow
        log_x = (_check_y(y) / self.r1) ** (-1.0 / self.r3)
        return _ret(np.minimum(1.0, self.r1 * log_x ** (-self.r3)))

    @property
    def regime_params(self):
        return {"r1": self.r1, "r3": self.r3}


NORMAL_PARAMS = {"r1": 0.5, "r2": 2.0, "r3": -1.0, "r4": 1.0 / math.sqrt(2.0 * math.pi)}


@dataclass(frozen=True)
class StdNormal(TailFamily):
    """Standard normal law; tail in the fast regime with NORMAL_PARAMS."""

    @property
    def x0(self):
        return -math.inf

    @property
    def monotone_from(self):
        return -math.inf

    def log_formula(self, x):
        return special.log_ndtr(-np.asarray(x, dtype=float))

    def fbar(self, x):
        out = special.ndtr(-np.asarray(x, dtype=float))
        return float(out) if np.ndim(out) == 0 else out

    def fbar_inverse(self, u):
        out = -special.ndtri(np.asarray(u, dtype=float))
        return float(out) if np.ndim(out) == 0 else out

    def fbar_inv_asymptotic(self, y):
        p = NORMAL_PARAMS
        return _fast_inverse(_check_y(y), p["r1"], p["r2"], p["r3"], p["r4"])

    @property
    def regime_params(self):
        return dict(NORMAL_PARAMS)


@dataclass(frozen=True)
class CustomQuantile(TailFamily):
    """Law given by a tabulated quantile function, linear between knots."""

    u: tuple
    x: tuple

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if u.ndim != 1 or u.shape != x.shape or u.size < 2:
            raise DomainError("quantile table needs matching 1-d grids")
        if u[0] != 0.0 or u[-1] != 1.0 or np.any(np.diff(u) <= 0):
            raise DomainError("quantile levels must increase strictly from 0 to 1")
        if np.any(np.diff(x) < 0):
            raise DomainError("quantile values must be nondecreasing")
        object.__setattr__(self, "u", tuple(u.tolist()))
        object.__setattr__(self, "x", tuple(x.tolist()))

    @classmethod
    def from_csv(cls, path):
        us, xs = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"u", "x"} <= set(reader.fieldnames):
                raise ConfigError(f"{path}: expected CSV columns u,x")
            for row in reader:
                us.append(float(row["u"]))
                xs.append(float(row["x"]))
        return cls(tuple(us), tuple(xs))

    @property
    def x0(self):
        return self.x[0]

    @property
    def monotone_from(self):
        return self.x[0]

    def cdf(self, x):
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        xs, us = np.asarray(self.x), np.asarray(self.u)
        idx = np.searchsorted(xs, xa, side="right")
        out = np.empty_like(xa)
        out[idx == 0] = 0.0
        out[idx == xs.size] = 1.0
        mid = (idx > 0) & (idx < xs.size)
        i = idx[mid]
        x_lo, x_hi = xs[i - 1], xs[i]
        frac = (xa[mid] - x_lo) / (x_hi - x_lo)
        out[mid] = us[i - 1] + frac * (us[i] - us[i - 1])
        return out if np.ndim(x) else float(out[0])

    def fbar(self, x):
        return 1.0 - self.cdf(x)

    def fbar_inverse(self, u):
        out = np.interp(1.0 - np.asarray(u, dtype=float), self.u, self.x)
        return float(out) if np.ndim(out) == 0 else out

    def fbar_inv_asymptotic(self, y):
        return self.fbar_inverse(_check_y(y))


def _check_y(y):
    ya = np.asarray(y, dtype=float)
    if np.any(~((ya > 0) & (ya < 1))):
        raise DomainError("asymptotic inverse needs y in (0, 1)")
    return ya


def _ret(a):
    return float(a) if np.ndim(a) == 0 else a


def _fast_inverse(y, r1, r2, r3, r4):
    big_l = np.log(1.0 / y)
    with np.errstate(invalid="ignore", divide="ignore"):
        inner = big_l + math.log(r4) + (r3 / r2) * np.log(big_l / r1)
    if np.any(~(inner > 0)):
        raise DomainError(
            "y too large for the fast-regime inverse: need "
            "log(1/y) + log r4 + (r3/r2) log(log(1/y)/r1) > 0"
        )
    return _ret((inner / r1) ** (1.0 / r2))


def parse_tail(spec: str) -> TailFamily:
    """``pareto:r1,r2 | slow:r1,r2,r3 | fast:r1,r2,r3,r4 | logheavy:r1,r3 |
    normal | quantile:<path.csv>``"""
    spec = spec.strip()
    head, _, rest = spec.partition(":")
    try:
        if head == "normal":
            return StdNormal()
        if head == "quantile":
            return CustomQuantile.from_csv(Path(rest))
        args = [float(a) for a in rest.split(",")] if rest else []
        if head == "pareto" and len(args) == 2:
            return SlowPowerLog(args[0], args[1], 0.0)
        if head == "slow" and len(args) == 3:
            return SlowPowerLog(*args)
        if head == "fast" and len(args) == 4:
            return FastStretchedExp(*args)
        if head == "logheavy" and len(args) == 2:
            return LogHeavy(*args)
    except ValueError as exc:
        if isinstance(exc, (ConfigError, DomainError)):
            raise
        raise ConfigError(f"malformed tail spec {spec!r}") from exc
    raise ConfigError(f"unknown tail spec {spec!r}")


def sample_initial(family: TailFamily, seed: int) -> float:
    return float(family.sample(np.random.default_rng(seed)))


# ------------------------------------------------------------ scaling functions


def scaling_a(x, r1, r2, r3=0.0):
    """a(x) = r1^(-1/r2) r2^(r3/r2) x^(-1/r2) (log x)^(-r3/r2), x > 1."""
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 1)):
        raise DomainError("a(x) needs x > 1")
    out = r1 ** (-1 / r2) * r2 ** (r3 / r2) * xa ** (-1 / r2) * np.log(xa) ** (-r3 / r2)
    return _ret(out)


def scaling_abar_bbar(x, r1, r2, r3=0.0, r4=1.0):
    """(abar, bbar) with abar(x) = r1 r2 (log x / r1)^(1 - 1/r2) and
    bbar(x) = r2 log x + log r4 + (r3/r2) log(log x / r1)."""
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 1)):
        raise DomainError("abar, bbar need x > 1")
    lx = np.log(xa)
    abar = r1 * r2 * (lx / r1) ** (1 - 1 / r2)
    bbar = r2 * lx + math.log(r4) + (r3 / r2) * np.log(lx / r1)
    return _ret(abar), _ret(bbar)


@dataclass(frozen=True)
class ScalingBundle:
    r1: float
    r2: float
    r3: float = 0.0
    r4: float = 1.0

    def a(self, x):
        return scaling_a(x, self.r1, self.r2, self.r3)

    def abar(self, x):
        return scaling_abar_bbar(x, self.r1, self.r2, self.r3, self.r4)[0]

    def bbar(self, x):
        return scaling_abar_bbar(x, self.r1, self.r2, self.r3, self.r4)[1]

    def gumbel_threshold(self, x, v):
        """M-hat level (abar(v))^-1 (x + bbar(v)) matching Gumbel quantile x."""
        abar, bbar = scaling_abar_bbar(v, self.r1, self.r2, self.r3, self.r4)
        return (x + bbar) / abar


def limit_cdf(kind: str, x, r2: float = None):
    """CDF of the limit laws: 'frechet' (index r2), 'gumbel', 'exp1'."""
    xa = np.asarray(x, dtype=float)
    if kind == "frechet":
        if r2 is None or r2 <= 0:
            raise DomainError("Frechet limit needs r2 > 0")
        pos = np.where(xa > 0, xa, 1.0)
        out = np.where(xa > 0, np.exp(-(pos ** (-r2))), 0.0)
    elif kind == "gumbel":
        out = np.exp(-np.exp(-xa))
    elif kind == "exp1":
        out = np.where(xa > 0, -np.expm1(-np.maximum(xa, 0.0)), 0.0)
    else:
        raise DomainError(f"unknown limit kind {kind!r}")
    return _ret(out)


def asymptotic_inverse_check(family: TailFamily, y_grid) -> np.ndarray:
    """|fbar(fbar_inv_asymptotic(y)) / y - 1| on the grid."""
    y = np.asarray(y_grid, dtype=float)
    return np.abs(np.asarray(family.fbar_at_asymptotic_inverse(y)) / y - 1.0)


def robustness_gap(family: TailFamily, t, v, x: float, c_delta: float, delta: float) -> np.ndarray:
    """v |fbar(fbar_inv(x/v) +- C t^delta) - x/v|, the larger of the two signs.

    Shows whether a displacement of size C t^delta is invisible on the scale
    of the extremes; the values should go to 0 as t -> 0.  Families without an
    asymptotic inverse use the exact quantile.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if t.shape != v.shape or np.any(t <= 0) or np.any(v <= x):
        raise DomainError("need matching t, v arrays with t > 0 and v > x")
    y = x / v
    try:
        q = np.asarray(family.fbar_inv_asymptotic(y), dtype=float)
    except NotImplementedError:
        q = np.asarray(family.fbar_inverse(y), dtype=float)
    if not np.all(np.isfinite(q)):
        raise DomainError("tail quantile overflows at these v; use larger t")
    shift = c_delta * t**delta
    up = np.abs(np.asarray(family.fbar(q + shift)) - y)
    down = np.abs(np.asarray(family.fbar(q - shift)) - y)
    return v * np.maximum(up, down)
