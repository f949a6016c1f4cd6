"""The driving measure Lambda on [0, 1] and the rate functionals derived from it.

A :class:`LambdaMeasure` is a sum of a Kingman atom at 0, finitely many
interior atoms and density components.  Everything downstream (merge rates,
the jump-chain kernel, psi, the coming-down test) is computed from it.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from cdilab.errors import ConfigError, DomainError

# Log-space accumulation of binomial weights above this many blocks.
EXACT_BINOMIAL_MAX = 300

# Geometric panels [2^-(j+1), 2^-j], j = 1..N_PANELS, cover (0, 1/2]; the
# remaining sliver [0, 2^-(N_PANELS+1)] is integrated by a Taylor expansion.
N_PANELS = 160
GL_ORDER = 20
JACOBI_ORDER = 24

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(GL_ORDER)


@dataclass(frozen=True)
class BetaDensity:
    """Beta(2 - beta, beta) density scaled to total mass ``weight``."""

    beta: float
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 2.0:
            raise DomainError(f"beta must lie in (0, 2), got {self.beta}")
        if self.weight < 0:
            raise DomainError("density weight must be nonnegative")

    @property
    def mass(self) -> float:
        return float(self.weight)

    @property
    def log_norm(self) -> float:
        # log of weight / B(2 - beta, beta)
        return math.log(self.weight) - special.betaln(2.0 - self.beta, self.beta)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        b = self.beta
        return np.exp(self.log_norm + (1.0 - b) * np.log(x) + (b - 1.0) * np.log1p(-x))


@dataclass(frozen=True)
class TabulatedDensity:
    """Piecewise-linear density through the points (x_i, value_i), zero outside."""

    x: tuple
    values: tuple

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise DomainError("tabulated density needs matching 1-d grids of length >= 2")
        if x[0] <= 0.0 or x[-1] > 1.0 or np.any(np.diff(x) <= 0):
            raise DomainError("tabulated grid must be strictly increasing inside (0, 1]")
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise DomainError("tabulated density values must be finite and nonnegative")
        object.__setattr__(self, "x", tuple(float(v) for v in x))
        object.__setattr__(self, "values", tuple(float(v) for v in y))

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.values, self.x))

    def density(self, x):
        return np.interp(x, self.x, self.values, left=0.0, right=0.0)

    @classmethod
    def from_csv(cls, path) -> "TabulatedDensity":
        xs, ys = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"x", "density"} <= set(reader.fieldnames):
                raise ConfigError(f"{path}: expected CSV columns x,density")
            for row in reader:
                xs.append(float(row["x"]))
                ys.append(float(row["density"]))
        return cls(tuple(xs), tuple(ys))


@dataclass(frozen=True)
class LambdaMeasure:
    kingman_mass: float = 0.0
    atoms: tuple = ()
    densities: tuple = ()
    total_mass: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        atoms = tuple((float(x), float(w)) for x, w in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "densities", tuple(self.densities))
        if self.kingman_mass < 0:
            raise DomainError("Kingman mass must be nonnegative")
        for x, w in atoms:
            if x >= 1.0:
                raise DomainError("atoms at 1 (star-shaped coalescent) are not supported")
            if x <= 0.0:
                raise DomainError("interior atoms must lie in (0, 1); use kingman_mass for 0")
            if w < 0:
                raise DomainError("atom weights must be nonnegative")
        for d in self.densities:
            if not isinstance(d, (BetaDensity, TabulatedDensity)):
                raise DomainError(f"unknown density component {d!r}")
        mass = (
            float(self.kingman_mass)
            + math.fsum(w for _, w in atoms)
            + math.fsum(d.mass for d in self.densities)
        )
        if not mass > 0:
            raise DomainError("Lambda must have positive total mass")
        object.__setattr__(self, "total_mass", mass)

    @classmethod
    def kingman(cls, mass: float = 1.0) -> "LambdaMeasure":
        return cls(kingman_mass=mass)

    @classmethod
    def beta(cls, beta: float, weight: float = 1.0) -> "LambdaMeasure":
        return cls(densities=(BetaDensity(beta, weight),))

    @property
    def is_kingman(self) -> bool:
        return self.kingman_mass > 0 and not self.atoms and not any(
            d.mass > 0 for d in self.densities
        )

    @functools.cached_property
    def fingerprint(self) -> str:
        return hashlib.sha1(repr(self).encode()).hexdigest()[:16]

    def scaled(self, c: float) -> "LambdaMeasure":
        if not c > 0:
            raise DomainError("scale factor must be positive")
        dens = []
        for d in self.densities:
            if isinstance(d, BetaDensity):
                dens.append(BetaDensity(d.beta, d.weight * c))
            else:
                dens.append(TabulatedDensity(d.x, tuple(v * c for v in d.values)))
        return LambdaMeasure(
            self.kingman_mass * c, tuple((x, w * c) for x, w in self.atoms), tuple(dens)
        )

    def __add__(self, other: "LambdaMeasure") -> "LambdaMeasure":
        return LambdaMeasure(
            self.kingman_mass + other.kingman_mass,
            self.atoms + other.atoms,
            self.densities + other.densities,
        )


def parse_measure(spec: str) -> LambdaMeasure:
    """Parse ``kingman[:m] + beta:<b>[:w] + atom:<x>:<w> + table:<path>``."""
    kingman = 0.0
    atoms, dens = [], []
    for term in spec.replace(" ", "").split("+"):
        if not term:
            raise ConfigError(f"empty term in measure spec {spec!r}")
        head, *args = term.split(":", 1) if term.startswith("table:") else term.split(":")
        try:
            if head == "kingman":
                kingman += float(args[0]) if args else 1.0
            elif head == "beta":
                dens.append(BetaDensity(float(args[0]), float(args[1]) if len(args) > 1 else 1.0))
            elif head == "atom":
                atoms.append((float(args[0]), float(args[1])))
            elif head == "table":
                dens.append(TabulatedDensity.from_csv(Path(args[0])))
            else:
                raise ConfigError(f"unknown measure component {head!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, (ConfigError, DomainError)):
                raise
            raise ConfigError(f"malformed measure term {term!r}") from exc
    return LambdaMeasure(kingman, tuple(atoms), tuple(dens))


# ---------------------------------------------------------------- merge rates


def _check_bk(b, k):
    if int(b) != b or int(k) != k:
        raise DomainError("b and k must be integers")
    if b < 2 or not 2 <= k <= b:
        raise DomainError(f"need 2 <= k <= b, got b={b}, k={k}")


def _tab_row(d: TabulatedDensity, b: int, ks: np.ndarray) -> np.ndarray:
    # x^(k-2) (1-x)^(b-k) times a linear density is a polynomial of degree b-1
    # on every segment, so Gauss-Legendre with ceil(b/2)+1 nodes is exact.
    order = b // 2 + 1
    t, w = np.polynomial.legendre.leggauss(order)
    x = np.asarray(d.x)
    y = np.asarray(d.values)
    a, c = x[:-1, None], x[1:, None]
    nodes = 0.5 * (c - a) * t + 0.5 * (c + a)
    wts = (0.5 * (c - a) * w * np.interp(nodes, x, y)).ravel()
    nodes = nodes.ravel()
    keep = wts > 0
    nodes, wts = nodes[keep], wts[keep]
    with np.errstate(divide="ignore"):
        logpow = (ks[:, None] - 2) * np.log(nodes) + (b - ks[:, None]) * np.log1p(-nodes)
    return np.exp(logpow) @ wts


def lambda_bk(measure: LambdaMeasure, b: int, k: int) -> float:
    """Rate at which one given k-tuple among b blocks merges."""
    _check_bk(b, k)
    total = measure.kingman_mass if k == 2 else 0.0
    for x, w in measure.atoms:
        total += w * x ** (k - 2) * (1.0 - x) ** (b - k)
    for d in measure.densities:
        if isinstance(d, BetaDensity):
            if d.weight > 0:
                total += math.exp(
                    d.log_norm + special.betaln(k - d.beta, b - k + d.beta)
                )
        else:
            total += float(_tab_row(d, b, np.array([k]))[0])
    return float(total)


def log_weighted_rates(measure: LambdaMeasure, b: int) -> np.ndarray:
    """log(C(b, k) * lambda_{b,k}) for k = 2..b (entries may be -inf)."""
    _check_bk(b, 2)
    ks = np.arange(2, b + 1)
    logc = special.gammaln(b + 1.0) - special.gammaln(ks + 1.0) - special.gammaln(b - ks + 1.0)
    terms = []
    if measure.kingman_mass > 0:
        kt = np.full(ks.shape, -np.inf)
        kt[0] = math.log(measure.kingman_mass)
        terms.append(kt)
    for x, w in measure.atoms:
        if w > 0:
            terms.append(math.log(w) + (ks - 2) * math.log(x) + (b - ks) * math.log1p(-x))
    for d in measure.densities:
        if isinstance(d, BetaDensity):
            if d.weight > 0:
                terms.append(d.log_norm + special.betaln(ks - d.beta, b - ks + d.beta))
        else:
            with np.errstate(divide="ignore"):
                terms.append(np.log(_tab_row(d, b, ks)))
    if not terms:
        return np.full(ks.shape, -np.inf)
    return logc + np.logaddexp.reduce(np.vstack(terms), axis=0)


def total_rate(measure: LambdaMeasure, n: int) -> float:
    """lambda_n: total rate of any merger among n blocks."""
    if int(n) != n or n < 2:
        raise DomainError(f"total rate needs n >= 2, got {n}")
    n = int(n)
    if n <= EXACT_BINOMIAL_MAX:
        return math.fsum(math.comb(n, k) * lambda_bk(measure, n, k) for k in range(2, n + 1))
    return float(np.exp(special.logsumexp(log_weighted_rates(measure, n))))


@functools.lru_cache(maxsize=100_000)
def _merge_cdf(measure: LambdaMeasure, b: int) -> tuple[float, np.ndarray]:
    logw = log_weighted_rates(measure, b)
    log_total = special.logsumexp(logw)
    p = np.exp(logw - log_total)
    p /= p.sum()
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    cdf.setflags(write=False)
    return float(np.exp(log_total)), cdf


def merge_size_distribution(measure: LambdaMeasure, b: int) -> np.ndarray:
    """P(next merger joins k blocks | b blocks), indexed by k - 2."""
    if int(b) != b or b < 2:
        raise DomainError(f"need b >= 2, got {b}")
    _, cdf = _merge_cdf(measure, int(b))
    return np.diff(cdf, prepend=0.0)


def merge_cdf(measure: LambdaMeasure, b: int) -> tuple[float, np.ndarray]:
    """(lambda_b, cumulative merge-size distribution) with a shared cache."""
    return _merge_cdf(measure, int(b))


# ------------------------------------------------------------------------ psi


def _phi_scaled(z):
    """(e^-z - 1 + z) / z^2 evaluated without cancellation."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 0.05
    zs = z[small]
    # alternating series: sum_{m>=2} (-z)^(m-2) / m!
    acc = np.zeros_like(zs)
    for m in range(11, 1, -1):
        acc = 1.0 / math.factorial(m) - zs * acc
    out[small] = acc
    zl = z[~small]
    out[~small] = (np.expm1(-zl) + zl) / (zl * zl)
    return out


@functools.lru_cache(maxsize=256)
def _beta_rule(d: BetaDensity):
    """Per-panel Gauss nodes and density-weighted weights for a Beta component.

    Row j of the panel arrays covers [2^-(j+2), 2^-(j+1)]; the last panel
    [1/2, 1] uses Gauss-Jacobi nodes that absorb the (1-x)^(beta-1) factor.
    """
    edges = 2.0 ** -np.arange(1, N_PANELS + 2)
    c, a = edges[:-1, None], edges[1:, None]
    x = 0.5 * (c - a) * _GL_NODES + 0.5 * (c + a)
    w = 0.5 * (c - a) * _GL_WEIGHTS * d.density(x)
    tj, wj = special.roots_jacobi(JACOBI_ORDER, d.beta - 1.0, 0.0)
    xj = 0.75 + 0.25 * tj
    wj = wj * 4.0 ** (-d.beta) * np.exp(d.log_norm + (1.0 - d.beta) * np.log(xj))
    return x, w, xj, wj


@functools.lru_cache(maxsize=256)
def _tab_rule(d: TabulatedDensity):
    grid = np.asarray(d.x)
    geo = 2.0 ** -np.arange(1, N_PANELS + 1)
    edges = np.union1d(grid, geo[(geo > grid[0]) & (geo < grid[-1])])
    a, c = edges[:-1, None], edges[1:, None]
    x = (0.5 * (c - a) * _GL_NODES + 0.5 * (c + a)).ravel()
    w = (0.5 * (c - a) * _GL_WEIGHTS).ravel() * d.density(x)
    return x, w


def _beta_psi_part(d: BetaDensity, q: np.ndarray) -> np.ndarray:
    """int S(qx) Beta(dx) where S(z) = (e^-z - 1 + z)/z^2."""
    x, w, xj, wj = _beta_rule(d)
    # panels entirely below 1e-3/q_max are replaced by a Taylor expansion
    qmax = float(q.max())
    eps_target = min(1e-3 / qmax, 2.0**-40)
    n_keep = min(N_PANELS, max(1, int(math.ceil(-math.log2(eps_target))) - 1))
    eps = 2.0 ** -(n_keep + 1)
    nodes = np.concatenate([x[:n_keep].ravel(), xj])
    wts = np.concatenate([w[:n_keep].ravel(), wj])
    acc = _phi_scaled(q[:, None] * nodes[None, :]) @ wts
    c0 = math.exp(d.log_norm)
    b = d.beta
    # S(z) = 1/2 - z/6 + z^2/24 - ...; density ~ c0 x^(1-beta) near 0
    sliver = c0 * (
        eps ** (2 - b) / (2 - b) / 2.0
        - q * eps ** (3 - b) / (3 - b) / 6.0
        + q * q * eps ** (4 - b) / (4 - b) / 24.0
    )
    return acc + sliver


def psi(measure: LambdaMeasure, q):
    """psi(q) = Lambda({0}) q^2/2 + int (e^{-qx} - 1 + qx) x^{-2} Lambda_0(dx).

    Accepts a scalar or an array of positive q.
    """
    qa = np.asarray(q, dtype=float)
    if np.any(~(qa > 0)):
        raise DomainError("psi is defined for q > 0")
    flat = qa.ravel()
    out = 0.5 * measure.kingman_mass * flat**2
    for x, w in measure.atoms:
        out = out + w * flat**2 * _phi_scaled(flat * x)
    for d in measure.densities:
        if d.mass <= 0:
            continue
        acc = np.empty_like(flat)
        order = np.argsort(flat)
        for lo in range(0, flat.size, 32):
            idx = order[lo : lo + 32]
            chunk = flat[idx]
            if isinstance(d, BetaDensity):
                acc[idx] = _beta_psi_part(d, chunk)
            else:
                nodes, wts = _tab_rule(d)
                acc[idx] = _phi_scaled(chunk[:, None] * nodes[None, :]) @ wts
        out = out + flat**2 * acc
    out = out.reshape(qa.shape)
    return float(out) if out.ndim == 0 else out


# -------------------------------------------------------- coming down test

_SGL_NODES, _SGL_WEIGHTS = np.polynomial.legendre.leggauss(16)
LOG_Q_MAX = math.log(1e40)


def efold_increments(measure: LambdaMeasure, u: float, n_folds: int) -> np.ndarray:
    """I_j = int_{u e^j}^{u e^{j+1}} dq / psi(q) for j = 0..n_folds-1."""
    s = (np.arange(n_folds)[:, None] + 0.5 + 0.5 * _SGL_NODES[None, :])
    q = u * np.exp(s)
    vals = q / psi(measure, q)
    return 0.5 * (vals * _SGL_WEIGHTS).sum(axis=1)


def cdi_test(measure: LambdaMeasure, lower: float = 1.0) -> tuple[bool, float]:
    """Numerical evidence for int_a^oo dq/psi(q) < oo.

    Increments over e-folds of q are computed up to q = 1e40.  Power-law psi
    gives geometrically decaying increments; psi ~ q (log q)^c gives increments
    decaying like j^-c.  The integral is declared finite when the decay index
    fitted on the last half of the e-folds exceeds 1.1, and the diagnostic is the
    partial integral plus the fitted remainder.
    """
    if measure.is_kingman:
        return True, 2.0 / (measure.kingman_mass * lower)
    n_folds = int(math.floor(LOG_Q_MAX - math.log(lower)))
    inc = efold_increments(measure, lower, n_folds)
    j = np.arange(1, n_folds + 1, dtype=float)
    half = n_folds // 2
    tail = inc[half:]
    if tail[-1] <= 0 or tail[-1] < 1e-300:
        return True, float(math.fsum(inc))
    slope = -np.polyfit(np.log(j[half:]), np.log(tail), 1)[0]
    ratio = tail[-1] / tail[-2]
    if ratio < 0.9 and slope > 1.1:
        # at least geometric decay
        remainder = tail[-1] * ratio / (1.0 - ratio)
    elif slope > 1.1:
        remainder = tail[-1] * j[-1] / (slope - 1.0)
    else:
        return False, math.inf
    return True, float(math.fsum(inc) + remainder)
