"""Speed of coming down from infinity.

v(t) solves Psi(v(t)) = t with Psi(u) = int_u^oo dq / psi(q).  Differentiating
gives v'(t) = -psi(v(t)), which is used to cross-check every tabulated node.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator

from cdilab.errors import ConsistencyError, DomainError, UnsupportedMeasureError
from cdilab.measure import LambdaMeasure, cdi_test, efold_increments, psi


class PostAbsorptionWarning(UserWarning):
    """v(t) < 1: the block count has (on average) already reached one block."""


@functools.lru_cache(maxsize=64)
def _cdi(measure: LambdaMeasure) -> bool:
    return cdi_test(measure)[0]


def _require_cdi(measure):
    if not _cdi(measure):
        raise UnsupportedMeasureError(
            "measure does not come down from infinity; Psi and v are undefined"
        )


TAIL_REL = 1e-8
LOG_Q_MAX = math.log(1e40)


def _local_exponent(measure, q):
    h = 0.05
    p1, p0 = psi(measure, np.array([q, q * math.exp(-h)]))
    return math.log(p1 / p0) / h


def big_psi(measure: LambdaMeasure, u: float) -> float:
    """Psi(u) = int_u^oo dq / psi(q).

    The integral is taken over e-folds of q with 16-point Gauss-Legendre in
    log q; once the remaining tail, estimated from the local growth exponent
    p of psi as Q / ((p - 1) psi(Q)), is below 1e-8 of the running total it is
    added and the loop stops.
    """
    if not u > 0:
        raise DomainError("Psi needs u > 0")
    _require_cdi(measure)
    if measure.is_kingman:
        return 2.0 / (measure.kingman_mass * u)
    total = 0.0
    s = 0
    batch = 8
    while True:
        inc = efold_increments(measure, u * math.exp(s), batch)
        total += math.fsum(inc)
        s += batch
        big_q = u * math.exp(s)
        p = _local_exponent(measure, big_q)
        if p > 1.0:
            tail = big_q / ((p - 1.0) * psi(measure, big_q))
            if tail < TAIL_REL * total:
                return total + tail
        if math.log(big_q) > LOG_Q_MAX:
            if p <= 1.0:
                raise UnsupportedMeasureError("psi grows too slowly to bound the tail of Psi")
            return total + tail


def speed_v(measure: LambdaMeasure, t: float, guess: Optional[float] = None) -> float:
    """Solve Psi(v) = t for v.

    Safeguarded Newton in log v (Psi' = -1/psi is known exactly) inside a
    bracket grown geometrically from ``guess``; relative accuracy ~1e-12.
    """
    if not t > 0:
        raise DomainError("speed_v needs t > 0")
    _require_cdi(measure)
    if measure.is_kingman:
        v = 2.0 / (measure.kingman_mass * t)
    else:
        v = _solve_speed(measure, t, guess)
    if v < 1.0:
        warnings.warn(f"v({t:g}) = {v:.4g} < 1: post-absorption regime", PostAbsorptionWarning)
    return v


def _psi_between(measure, u0, u1):
    """int_{u0}^{u1} dq / psi(q) by Gauss-Legendre in log q (unit panels)."""
    y0, y1 = math.log(u0), math.log(u1)
    n = max(1, int(math.ceil(abs(y1 - y0))))
    edges = np.linspace(y0, y1, n + 1)
    a, c = edges[:-1, None], edges[1:, None]
    s = 0.5 * (c - a) * _GL16_NODES + 0.5 * (c + a)
    q = np.exp(s)
    return float(((0.5 * (c - a) * _GL16_WEIGHTS) * (q / psi(measure, q))).sum())


_GL16_NODES, _GL16_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _solve_speed(measure, t, guess):
    # Newton in y = log v on f(y) = Psi(e^y) - t, f'(y) = -e^y / psi(e^y).
    # Psi is evaluated in full once at the starting point; later iterates add
    # the short integral between iterates to that anchor.
    y = math.log(guess) if guess else 0.0
    anchor_u = math.exp(y)
    anchor_psi = big_psi(measure, anchor_u)
    lo, hi = -math.inf, math.inf
    for _ in range(200):
        u = math.exp(y)
        big = anchor_psi + _psi_between(measure, u, anchor_u) if u != anchor_u else anchor_psi
        f = big - t
        if f > 0:
            lo = y
        else:
            hi = y
        y_new = y + f * psi(measure, u) / u
        # keep steps bounded and inside the current bracket
        y_new = min(max(y_new, y - 2.0), y + 2.0)
        if math.isfinite(lo) and math.isfinite(hi) and not lo < y_new < hi:
            y_new = 0.5 * (lo + hi)
        if abs(y_new - y) > 1.0:
            # far moves re-anchor to keep the short integral short
            anchor_u = math.exp(y_new)
            anchor_psi = big_psi(measure, anchor_u)
        if abs(y_new - y) < 1e-13 or hi - lo < 1e-13:
            return math.exp(y_new)
        y = y_new
    raise ConsistencyError(f"speed_v failed to converge at t={t}")


@dataclass(frozen=True)
class SpeedTable:
    """Tabulated v on a geometric t-grid, interpolated monotonically in log-log.

    ``extend`` (if given) evaluates v outside the tabulated range.
    """

    t_grid: np.ndarray
    v_values: np.ndarray
    measure_fingerprint: str = ""
    tol: float = 0.0
    extend: Optional[Callable[[float], float]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        v = np.asarray(self.v_values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise DomainError("speed table needs matching 1-d grids")
        if np.any(np.diff(t) <= 0) or t[0] <= 0:
            raise DomainError("t_grid must be positive and strictly increasing")
        if np.any(np.diff(v) >= 0) or np.any(v <= 0):
            raise DomainError("v_values must be positive and strictly decreasing")
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "v_values", v)
        object.__setattr__(self, "_interp", PchipInterpolator(np.log(t), np.log(v)))

    @classmethod
    def from_function(cls, func, t_min, t_max, n_nodes=64, fingerprint="synthetic"):
        t = np.geomspace(t_min, t_max, n_nodes)
        return cls(t, np.array([func(x) for x in t]), fingerprint, 0.0, func)

    @property
    def t_min(self) -> float:
        return float(self.t_grid[0])

    @property
    def t_max(self) -> float:
        return float(self.t_grid[-1])

    def log_v(self, t):
        ta = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty_like(ta)
        inside = (ta >= self.t_grid[0]) & (ta <= self.t_grid[-1])
        out[inside] = self._interp(np.log(ta[inside]))
        if not inside.all():
            if self.extend is None:
                raise DomainError("t outside the tabulated range and no extension available")
            out[~inside] = [math.log(self.extend(float(x))) for x in ta[~inside]]
        return out if np.ndim(t) else float(out[0])

    def __call__(self, t):
        out = np.exp(self.log_v(t))
        return out if np.ndim(t) else float(out)


def _ode_check(measure, t0, v0, t1):
    """Integrate d log v / d log t = -t psi(v) / v from (t0, v0) to t1."""

    def rhs(s, y):
        v = math.exp(y[0])
        return [-math.exp(s) * psi(measure, v) / v]

    sol = integrate.solve_ivp(
        rhs, (math.log(t0), math.log(t1)), [math.log(v0)], method="RK45", rtol=1e-9, atol=1e-12
    )
    return math.exp(sol.y[0, -1])


def build_speed_table(
    measure: LambdaMeasure, t_min: float, t_max: float, n_nodes: int = 64, check_ode: bool = True
) -> SpeedTable:
    """Solve v at each geometric node and validate adjacent nodes with the ODE.

    Raises ConsistencyError when the root-finder and the ODE disagree by more
    than 1e-4 relative; ``tol`` records the worst disagreement seen.
    """
    if not 0 < t_min < t_max:
        raise DomainError("need 0 < t_min < t_max")
    if n_nodes < 16:
        raise DomainError("need at least 16 nodes")
    _require_cdi(measure)
    t = np.geomspace(t_min, t_max, n_nodes)
    v = np.empty(n_nodes)
    guess = None
    for i, ti in enumerate(t):
        v[i] = speed_v(measure, ti, guess=guess)
        guess = v[i]
    worst = 0.0
    if check_ode:
        for i in range(n_nodes - 1):
            v_ode = _ode_check(measure, t[i], v[i], t[i + 1])
            worst = max(worst, abs(v_ode / v[i + 1] - 1.0))
        if worst > 1e-4:
            raise ConsistencyError(f"ODE cross-check disagrees with root-finder by {worst:.3g}")
        if worst > 1e-6:
            warnings.warn(f"ODE cross-check residual {worst:.3g} exceeds 1e-6")
    slope = math.log(v[1] / v[0]) / math.log(t[1] / t[0])

    def extend(x):
        anchor = 0 if x < t[0] else -1
        guess = v[anchor] * (x / t[anchor]) ** slope
        return speed_v(measure, x, guess=guess)

    return SpeedTable(t, v, measure.fingerprint, worst, extend=extend)


def round_trip_residual(measure: LambdaMeasure, table: SpeedTable) -> float:
    """max_i |Psi(v(t_i)) - t_i| / t_i over the grid."""
    return max(
        abs(big_psi(measure, v) / t - 1.0) for t, v in zip(table.t_grid, table.v_values)
    )


# ------------------------------------------------------- integral diagnostics


def _log_v1_integrand(table, t, delta_o, eps_o):
    return (1.0 + eps_o) * table.log_v(t) - t ** (-delta_o)


def _v1_piece(table, a, b, delta_o, eps_o):
    # integrate in log t; the integrand is exp(log-form) * t
    def f(s):
        t = math.exp(s)
        return math.exp(min(_log_v1_integrand(table, t, delta_o, eps_o), 700.0) + s)

    with warnings.catch_warnings():
        # roundoff warnings appear once the integrand underflows; the value is still fine
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return integrate.quad(f, math.log(a), math.log(b), epsabs=0.0, epsrel=1e-10, limit=200)[0]


def v1_condition(table: SpeedTable, delta_o: float, eps_o: float, upper: float = None):
    """Test int_{0+} v(t)^(1+eps_o) exp(-t^-delta_o) dt < oo numerically.

    The lower limit is halved until an increment drops below 1e-14 (finite) or
    the partial integral exceeds 1e12 (infinite).  Returns (finite, value), the
    value being the integral over (0, upper] with upper = min(1, t_max) unless
    given.
    """
    if not 0 < delta_o < 1 or not eps_o > 0:
        raise DomainError("need delta_o in (0, 1) and eps_o > 0")
    b = min(1.0, table.t_max) if upper is None else upper
    a = min(table.t_min, b)
    total = _v1_piece(table, a, b, delta_o, eps_o) if a < b else 0.0
    for _ in range(2000):
        if total > 1e12:
            return False, math.inf
        inc = _v1_piece(table, a / 2.0, a, delta_o, eps_o)
        total += inc
        a /= 2.0
        if inc < 1e-14 and total <= 1e12:
            return True, total
    return False, math.inf


def _ceil_index(x):
    # smallest integer >= log2(1/x), floored at 0 for x >= 1
    return max(0, math.ceil(math.log2(1.0 / x) - 1e-12))


def delta_tail_bound(table: SpeedTable, x: float, delta_o: float, eps_o: float, d_o: float):
    """h(x): upper bound on P(Delta <= x) for the modulus-of-continuity threshold.

    h(x) = int_0^{2^-m} v^(1+eps_o) e^(-t^-delta_o) dt
           + 2^(-m (d_o eps_o - 1)) / (1 - 2^-(d_o eps_o - 1)),  m = ceil(log2(1/x)).
    """
    if not x > 0:
        raise DomainError("need x > 0")
    if d_o * eps_o <= 1:
        raise DomainError("need d_o * eps_o > 1 for the geometric series to converge")
    m = _ceil_index(x)
    finite, integral = v1_condition(table, delta_o, eps_o, upper=2.0**-m)
    if not finite:
        return math.inf
    r = d_o * eps_o - 1.0
    return integral + 2.0 ** (-m * r) / (1.0 - 2.0**-r)


def assumption_v_check(table: SpeedTable, delta: float, r2: float, n_points: int = 32) -> bool:
    """Evidence that (log v(t))^max(0, 1 - 1/r2) * t^delta -> 0 as t -> 0+.

    Evaluated over the smallest tabulated decade: the expression must decrease
    strictly toward small t with a positive log-log slope.
    """
    expo = max(0.0, 1.0 - 1.0 / r2)
    t = np.geomspace(table.t_min, min(10.0 * table.t_min, table.t_max), n_points)
    log_v = table.log_v(t)
    if expo > 0 and np.any(log_v <= 0):
        return False
    g_log = delta * np.log(t) + (expo * np.log(log_v) if expo > 0 else 0.0)
    if not np.all(np.diff(g_log) > 0):
        return False
    slope = np.polyfit(np.log(t), g_log, 1)[0]
    return bool(slope > 0)
