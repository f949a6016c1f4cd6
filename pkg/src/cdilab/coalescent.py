"""Exact jump-chain simulation of the block-counting process N(s)."""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numba
import numpy as np

from cdilab.errors import DomainError
from cdilab.measure import LambdaMeasure, merge_cdf
from cdilab.speed import SpeedTable

# flattened merge-size tables are used below this many entries
FLAT_TABLE_MAX = 2**22


@dataclass(frozen=True)
class BlockCountPath:
    n0: int
    horizon: float
    jump_times: np.ndarray
    counts_after: np.ndarray
    merge_sizes: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("jump_times", "counts_after", "merge_sizes"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def validate(self) -> None:
        c = np.concatenate(([self.n0], self.counts_after))
        if np.any(np.diff(c) != -(self.merge_sizes - 1)) or np.any(self.merge_sizes < 2):
            raise DomainError("counts and merge sizes are inconsistent")
        if c[-1] < 1:
            raise DomainError("block count fell below 1")
        if self.jump_times.size:
            if np.any(np.diff(self.jump_times) <= 0) or self.jump_times[0] <= 0:
                raise DomainError("jump times must be positive and increasing")
            if self.jump_times[-1] > self.horizon:
                raise DomainError("jump after the horizon")

    def to_json(self) -> dict:
        return {
            "seed": int(self.seed),
            "jump_times": self.jump_times.tolist(),
            "counts_after": self.counts_after.tolist(),
            "merge_sizes": self.merge_sizes.tolist(),
        }


@functools.lru_cache(maxsize=32)
def _flat_table(measure: LambdaMeasure, n_max: int):
    """Rates and concatenated cumulative merge-size tables for b = 2..n_max."""
    rates = np.zeros(n_max + 1)
    offsets = np.zeros(n_max + 2, dtype=np.int64)
    chunks = []
    pos = 0
    for b in range(2, n_max + 1):
        lam, cdf = merge_cdf(measure, b)
        rates[b] = lam
        offsets[b] = pos
        chunks.append(cdf)
        pos += cdf.size
    offsets[n_max + 1] = pos
    return rates, offsets, np.concatenate(chunks)


@numba.njit(cache=True)
def _chain_kernel(n0, horizon, rates, offsets, flat, expo, unif):
    times = np.empty(n0 - 1)
    sizes = np.empty(n0 - 1, dtype=np.int64)
    b = n0
    s = 0.0
    j = 0
    while b > 1:
        s += expo[j] / rates[b]
        if s > horizon:
            break
        lo = offsets[b]
        idx = np.searchsorted(flat[lo:lo + b - 1], unif[j], side="right")
        k = min(idx, b - 2) + 2
        times[j] = s
        sizes[j] = k
        b -= k - 1
        j += 1
    return times[:j], sizes[:j]


def _chain_python(measure, n0, horizon, expo, unif):
    times, sizes = [], []
    b, s, j = n0, 0.0, 0
    while b > 1:
        lam, cdf = merge_cdf(measure, b)
        s += expo[j] / lam
        if s > horizon:
            break
        k = min(int(np.searchsorted(cdf, unif[j], side="right")), b - 2) + 2
        times.append(s)
        sizes.append(k)
        b -= k - 1
        j += 1
    return np.asarray(times, dtype=float), np.asarray(sizes, dtype=np.int64)


def _kingman_chain(mass, n0, horizon, rng):
    b = np.arange(n0, 1, -1, dtype=float)
    times = np.cumsum(rng.standard_exponential(n0 - 1) / (mass * b * (b - 1) / 2))
    j = int(np.searchsorted(times, horizon, side="right"))
    return times[:j], np.full(j, 2, dtype=np.int64)


def simulate_merge_sequence(measure: LambdaMeasure, n0: int, horizon: float, seed: int):
    """(jump_times, merge_sizes) of the block-counting chain started at n0."""
    if int(n0) != n0 or n0 < 1:
        raise DomainError(f"n0 must be a positive integer, got {n0}")
    if not horizon >= 0:
        raise DomainError(f"horizon must be >= 0, got {horizon}")
    n0 = int(n0)
    if n0 == 1 or horizon == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if measure.is_kingman:
        return _kingman_chain(measure.kingman_mass, n0, horizon, rng)
    expo = rng.standard_exponential(n0 - 1)
    unif = rng.random(n0 - 1)
    if n0 * (n0 + 1) // 2 <= FLAT_TABLE_MAX:
        rates, offsets, flat = _flat_table(measure, _table_size(n0))
        return _chain_kernel(n0, float(horizon), rates, offsets, flat, expo, unif)
    return _chain_python(measure, n0, horizon, expo, unif)


def _table_size(n0):
    # round up so that nearby n0 share one cached table
    return max(64, 1 << (n0 - 1).bit_length())


def simulate_block_count(measure: LambdaMeasure, n0: int, horizon: float, seed: int) -> BlockCountPath:
    """Gillespie simulation of N started from n0 blocks, up to ``horizon``."""
    if int(n0) != n0 or n0 < 2:
        raise DomainError(f"n0 must be >= 2, got {n0}")
    times, sizes = simulate_merge_sequence(measure, n0, horizon, seed)
    counts = int(n0) - np.cumsum(sizes - 1)
    return BlockCountPath(int(n0), float(horizon), times, counts, sizes, int(seed))


def block_count_at(path: BlockCountPath, s):
    """Right-continuous N(s); accepts a scalar or an array."""
    sa = np.asarray(s, dtype=float)
    if np.any((sa < 0) | (sa > path.horizon)):
        raise DomainError(f"s must lie in [0, {path.horizon}]")
    idx = np.searchsorted(path.jump_times, sa, side="right")
    counts = np.concatenate(([path.n0], path.counts_after))
    out = counts[idx]
    return int(out) if out.ndim == 0 else out


def sup_ratio_deviation(path: BlockCountPath, table: SpeedTable, s_min: float, t: float) -> float:
    """sup over [s_min, t] of |N(s)/v(s) - 1|, exact on the jump skeleton."""
    jt = path.jump_times
    inner = jt[(jt > s_min) & (jt < t)]
    edges = np.concatenate(([s_min], inner, [t]))
    counts = block_count_at(path, edges[:-1])
    v = table(edges)
    # N is constant on each piece and v is monotone: check both ends
    left = np.abs(counts / v[:-1] - 1.0)
    right = np.abs(counts / v[1:] - 1.0)
    return float(max(left.max(), right.max()))


@dataclass(frozen=True)
class NOverVSummary:
    t: float
    s_min: float
    replicates: int
    mean_ratio: float
    se_ratio: float
    moments: dict
    moment_se: dict

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "s_min": self.s_min,
            "replicates": self.replicates,
            "mean_ratio": self.mean_ratio,
            "se_ratio": self.se_ratio,
            "moments": {str(k): v for k, v in self.moments.items()},
            "moment_se": {str(k): v for k, v in self.moment_se.items()},
        }


def _check_start(n0, table, s_min):
    v_min = table(s_min)
    if n0 < v_min:
        raise DomainError(
            f"n0={n0} is below v(s_min)={v_min:.4g}; the chain cannot emulate a start from infinity"
        )
    if n0 < 10 * v_min:
        warnings.warn(f"n0={n0} < 10 v(s_min)={10 * v_min:.4g}; start-from-infinity bias likely")


def n_over_v_statistics(
    paths: Iterable[BlockCountPath],
    table: SpeedTable,
    t: float,
    s_min: float,
    moments=(1.0,),
) -> NOverVSummary:
    """Monte Carlo moments of sup_{[s_min, t]} |N/v - 1| and the mean of N(t)/v(t).

    ``paths`` may be a generator; each path is reduced as soon as it is drawn.
    """
    if not 0 < s_min <= t:
        raise DomainError("need 0 < s_min <= t")
    moments = tuple(float(d) for d in moments)
    if any(d < 1 for d in moments):
        raise DomainError("moment orders must be >= 1")
    v_t = table(t)
    ratios, sups = [], []
    checked = False
    for p in paths:
        if p.horizon < t:
            raise DomainError("path horizon shorter than t")
        if not checked:
            _check_start(p.n0, table, s_min)
            checked = True
        ratios.append(block_count_at(p, t) / v_t)
        sups.append(sup_ratio_deviation(p, table, s_min, t))
    if not ratios:
        raise DomainError("no paths given")
    r = np.asarray(ratios)
    sp = np.asarray(sups)
    n = r.size
    se = lambda a: float(a.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan  # noqa: E731
    mom = {d: float(np.mean(sp**d)) for d in moments}
    mom_se = {d: se(sp**d) for d in moments}
    return NOverVSummary(t, s_min, n, float(r.mean()), se(r), mom, mom_se)


@dataclass(frozen=True)
class EnvelopeResult:
    probability: float
    log_width: float
    replicates: int


def envelope_check(paths: Iterable[BlockCountPath], table: SpeedTable, s: float, alpha_star: float):
    """Fraction of paths with exp(-24 s^a) v(s) <= N(s) <= exp(24 s^a) v(s)."""
    if not 0 < alpha_star < 0.5:
        raise DomainError("alpha_star must lie in (0, 1/2)")
    width = 24.0 * s**alpha_star
    v = table(s)
    lo, hi = math.exp(-width) * v, math.exp(width) * v
    inside = [lo <= block_count_at(p, s) <= hi for p in paths]
    if not inside:
        raise DomainError("no paths given")
    return EnvelopeResult(float(np.mean(inside)), width, len(inside))
