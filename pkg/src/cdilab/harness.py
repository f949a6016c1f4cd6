"""Experiment orchestration: configs, seeds, statistics, KS distances, results."""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import optimize

import cdilab
from cdilab.coalescent import block_count_at, simulate_block_count, sup_ratio_deviation
from cdilab.errors import ConfigError, DomainError
from cdilab.evt import TailFamily, limit_cdf, parse_tail, scaling_a, scaling_abar_bbar
from cdilab.lookdown import (
    ancestor_max,
    attach_motion,
    dislocation,
    extremal_max,
    simulate_genealogy,
)
from cdilab.measure import LambdaMeasure, parse_measure
from cdilab.speed import SpeedTable, assumption_v_check, build_speed_table

MASK64 = (1 << 64) - 1

STATISTICS = (
    "M_scaled_lemma",
    "Mhat_frechet",
    "Mhat_exp1",
    "Mhat_gumbel",
    "Mhat_gumbel_r2eq1",
    "logM_over_logv",
    "phase_transition_a",
    "phase_transition_b",
    "N_over_v",
    "modulus",
)
GENEALOGY_STATS = set(STATISTICS) - {"M_scaled_lemma", "N_over_v"}
GUMBEL_STATS = {"Mhat_gumbel", "Mhat_gumbel_r2eq1"}
EPS_LIST = (0.05, 0.1, 0.2)


# ---------------------------------------------------------------- seeds


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _label_word(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def seed_stream(master_seed: int, replicate_index: int, stream_label: str) -> int:
    """64-bit seed from splitmix64 chained over (master, replicate, label)."""
    x = _splitmix64(master_seed & MASK64)
    x = _splitmix64(x ^ (replicate_index & MASK64))
    return _splitmix64(x ^ _label_word(stream_label))


# ------------------------------------------------------------ statistics


def ks_statistic(sorted_sample, cdf: Callable) -> float:
    """Kolmogorov-Smirnov distance between a sorted sample and a CDF."""
    x = np.asarray(sorted_sample, dtype=float)
    n = x.size
    if n == 0:
        raise DomainError("empty sample")
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(np.abs(i / n - f)), np.max(np.abs((i - 1) / n - f))))


def in_probability_report(samples_by_t: dict, center: float, eps_list=EPS_LIST) -> dict:
    """{t: {eps: P-hat(|Z_t - c| > eps)}}."""
    if len(samples_by_t) < 2:
        raise DomainError("need samples for at least two values of t")
    out = {}
    for t, z in samples_by_t.items():
        z = np.asarray(z, dtype=float)
        out[t] = {eps: float(np.mean(~(np.abs(z - center) <= eps))) for eps in eps_list}
    return out


def _exceedance(z, center, eps_list):
    z = np.asarray(z, dtype=float)
    return {str(eps): float(np.mean(~(np.abs(z - center) <= eps))) for eps in eps_list}


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    measure: str
    tail: str
    t_list: tuple
    statistic: str
    replicates: int = 1000
    master_seed: int = 0
    n: Optional[int] = None
    n_factor: float = 20.0
    n_cap: int = 200_000
    n0: Optional[int] = None
    n0_factor: float = 100.0
    dim: int = 1
    s_min_fraction: float = 0.2
    delta: float = 0.4
    modulus_grid: int = 12
    tail_params: tuple = ()
    n_doubling: bool = False
    output: Optional[str] = None

    def __post_init__(self):
        t = tuple(float(x) for x in self.t_list)
        object.__setattr__(self, "t_list", t)
        object.__setattr__(self, "tail_params", tuple(tuple(p) for p in self.tail_params))
        if not t or any(x <= 0 for x in t):
            raise ConfigError("t_list must hold positive values")
        if any(b >= a for a, b in zip(t, t[1:])):
            raise ConfigError("t_list must be strictly decreasing")
        if self.statistic not in STATISTICS:
            raise ConfigError(f"unknown statistic {self.statistic!r}; choose from {STATISTICS}")
        if self.replicates < 100:
            raise ConfigError("replicates must be >= 100")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if not 0 < self.s_min_fraction <= 1:
            raise ConfigError("s_min_fraction must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        try:
            parse_measure(self.measure)
            parse_tail(self.tail)
        except (ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["t_list"] = list(self.t_list)
        d["tail_params"] = {k: v for k, v in self.tail_params}
        return d

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        """Build from string values, as read from key=value files or flags."""
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for key, value in raw.items():
            if value is None:
                continue
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, value)
        missing = [k for k in ("measure", "tail", "t_list", "statistic") if k not in kw]
        if missing:
            raise ConfigError(f"missing config keys: {missing}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        raw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        return cls.from_mapping(raw)


def _coerce(key, value):
    if not isinstance(value, str):
        return value
    try:
        if key == "t_list":
            return tuple(float(x) for x in value.replace(",", " ").split())
        if key == "tail_params":
            pairs = [p.split(":") if ":" in p else p.split("=") for p in value.replace(",", " ").split()]
            return tuple((k, float(v)) for k, v in pairs)
        if key in ("replicates", "master_seed", "n", "n0", "n_cap", "dim", "modulus_grid"):
            return int(value)
        if key in ("n_factor", "n0_factor", "s_min_fraction", "delta"):
            return float(value)
        if key == "n_doubling":
            return value.lower() in ("1", "true", "yes")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


# ------------------------------------------------------------ experiment


@dataclass(frozen=True)
class _Plan:
    """Everything a replicate needs; picklable so it can go to worker processes."""

    measure: LambdaMeasure
    family: TailFamily
    statistic: str
    dim: int
    params: dict
    master_seed: int
    delta: float
    modulus_grid: int
    s_min_fraction: float
    v_grid: tuple = ()

    @functools.cached_property
    def table(self) -> SpeedTable:
        return SpeedTable(np.asarray(self.v_grid[0]), np.asarray(self.v_grid[1]))


def _regime_params(config: ExperimentConfig, family: TailFamily) -> dict:
    p = dict(family.regime_params)
    p.update(dict(config.tail_params))
    p.setdefault("r3", 0.0)
    p.setdefault("r4", 1.0)
    need = {
        "Mhat_frechet": ("r1", "r2"),
        "Mhat_exp1": ("r1", "r2"),
        "Mhat_gumbel": ("r1", "r2"),
        "Mhat_gumbel_r2eq1": ("r1",),
        "logM_over_logv": ("r2",),
        "phase_transition_a": ("r1", "r2"),
        "phase_transition_b": ("r1", "r2"),
    }.get(config.statistic, ())
    missing = [k for k in need if k not in p]
    if missing:
        raise ConfigError(f"statistic {config.statistic} needs tail parameters {missing}")
    return p


def _rescale(stat, p, v, m_hat):
    r1, r2, r3, r4 = p.get("r1"), p.get("r2"), p["r3"], p["r4"]
    lv = math.log(v)
    if stat == "Mhat_frechet":
        return scaling_a(v, r1, r2, r3) * m_hat
    if stat == "Mhat_exp1":
        return r1 * m_hat ** (-r2) * v if m_hat > 0 else math.inf
    if stat == "Mhat_gumbel":
        abar, bbar = scaling_abar_bbar(v, r1, r2, r3, r4)
        return abar * m_hat - bbar
    if stat == "Mhat_gumbel_r2eq1":
        return r1 * m_hat - lv - r3 * math.log(lv) - math.log(r4 * r1 ** (-r3))
    if stat == "logM_over_logv":
        return math.log(m_hat) / lv if m_hat > 0 else -math.inf
    if stat == "phase_transition_a":
        return m_hat - (lv / r1) ** (1.0 / r2)
    if stat == "phase_transition_b":
        return m_hat * (lv / r1) ** (-1.0 / r2)
    raise ConfigError(stat)


def _modulus_grid(t, size):
    # t - s = t 2^-j, j = 0..size-1
    return t - t * 2.0 ** -np.arange(size)


def _replicate(plan: _Plan, t: float, v: float, n: int, n0: int, rep: int) -> dict:
    stat = plan.statistic
    seed = lambda label: seed_stream(plan.master_seed, rep, label)  # noqa: E731
    if stat in ("M_scaled_lemma", "N_over_v"):
        s_min = plan.s_min_fraction * t if stat == "N_over_v" else t
        path = simulate_block_count(plan.measure, n0, t, seed("blocks"))
        n_t = block_count_at(path, t)
        if stat == "N_over_v":
            return {"z": n_t / v, "N": n_t, "sup": sup_ratio_deviation(path, plan.table, s_min, t)}
        draws = plan.family.sample(np.random.default_rng(seed("initial")), n_t)
        m = float(np.max(draws))
        return {"z": v * float(plan.family.fbar(m)), "N": n_t, "M": m}
    forest = simulate_genealogy(plan.measure, n, t, seed("genealogy"))
    sp = attach_motion(forest, plan.family, plan.dim, seed("motion"), initial_seed=seed("initial"))
    out = {"N": forest.root_count}
    if stat == "modulus":
        grid = _modulus_grid(t, plan.modulus_grid)
        out["z"] = max(dislocation(sp, s) / (t - s) ** plan.delta for s in grid)
        return out
    mode = "norm" if plan.dim > 1 else "coordinate-max"
    m_hat = extremal_max(sp, mode)
    m = ancestor_max(sp) if plan.dim == 1 else float(np.sqrt((sp.root_positions**2).sum(1)).max())
    out.update(z=_rescale(stat, plan.params, v, m_hat), M=m, M_hat=m_hat, gap=abs(m_hat - m))
    return out


def _run_chunk(args):
    plan, t, v, n, n0, reps = args
    return [_replicate(plan, t, v, n, n0, r) for r in reps]


TARGETS = {
    "M_scaled_lemma": "exp1",
    "Mhat_frechet": "frechet",
    "Mhat_exp1": "exp1",
    "Mhat_gumbel": "gumbel",
    "Mhat_gumbel_r2eq1": "gumbel",
}


def _centers(stat, p):
    return {
        "logM_over_logv": lambda: 1.0 / p["r2"],
        "phase_transition_a": lambda: 0.0,
        "phase_transition_b": lambda: 1.0,
        "N_over_v": lambda: 1.0,
    }.get(stat, lambda: None)()


def _smallest_feasible_t(table: SpeedTable, v_max: float) -> float:
    f = lambda lt: table.log_v(math.exp(lt)) - math.log(v_max)  # noqa: E731
    lo, hi = math.log(table.t_min), math.log(table.t_max)
    while f(lo) < 0:
        lo -= 1.0
    while f(hi) > 0:
        hi += 1.0
    return math.exp(optimize.brentq(f, lo, hi, xtol=1e-12))


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _clean_list(a):
    return [_clean(float(x)) for x in a]


@dataclass
class ExperimentResult:
    config: dict
    per_t: list
    meta: dict = field(default_factory=dict)

    def statistics_json(self) -> str:
        return json.dumps({"config": self.config, "per_t": self.per_t}, sort_keys=True)

    def to_json(self) -> str:
        return json.dumps(
            {"config": self.config, "per_t": self.per_t, "meta": self.meta}, sort_keys=True, indent=1
        )

    def to_csv(self) -> str:
        cols = ["t", "v", "n", "ks", "mean", "sd", "se"] + [f"exceed_{e}" for e in EPS_LIST]
        lines = [",".join(cols)]
        for row in self.per_t:
            mom = row["moments"]
            exc = row["exceedance"] or {}
            vals = [row["t"], row["v"], row["n"], row["ks"], mom["mean"], mom["sd"], mom["se"]]
            vals += [exc.get(str(e)) for e in EPS_LIST]
            lines.append(",".join("" if x is None else repr(x) for x in vals))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _summaries(records, target_cdf, center, eps_list, stat, oracle):
    z = np.array([r["z"] for r in records], dtype=float)
    zs = np.sort(z)
    finite = z[np.isfinite(z)]
    mom = {
        "mean": float(finite.mean()) if finite.size else None,
        "sd": float(finite.std(ddof=1)) if finite.size > 1 else None,
        "se": float(finite.std(ddof=1) / math.sqrt(finite.size)) if finite.size > 1 else None,
        "n_nonfinite": int(z.size - finite.size),
    }
    for key in ("N", "M", "M_hat", "gap", "sup"):
        if key in records[0]:
            a = np.array([r[key] for r in records], dtype=float)
            mom[key] = {
                "mean": float(a.mean()),
                "q25": float(np.quantile(a, 0.25)),
                "q50": float(np.quantile(a, 0.5)),
                "q75": float(np.quantile(a, 0.75)),
                "q99": float(np.quantile(a, 0.99)),
            }
    if stat == "modulus":
        mom["quantiles"] = {str(q): float(np.quantile(z, q / 100)) for q in (50, 90, 99)}
    if oracle is not None:
        mom["ks_mixture_oracle"] = ks_statistic(zs, oracle)
    ks = ks_statistic(zs, target_cdf) if target_cdf is not None else None
    exc = _exceedance(z, center, eps_list) if center is not None else None
    return zs, ks, mom, exc


def _lemma_oracle(records, v):
    # P(v fbar(M) <= x) = 1 - E[(1 - x/v)^N] for continuous laws
    counts = np.array([r["N"] for r in records], dtype=float)

    def cdf(x):
        u = np.clip(1.0 - np.asarray(x, dtype=float)[:, None] / v, 0.0, 1.0)
        return 1.0 - np.mean(u ** counts[None, :], axis=1)

    return cdf


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Simulate every t in the ladder and summarise the rescaled statistic."""
    start = time.time()
    measure = parse_measure(config.measure)
    family = parse_tail(config.tail)
    params = _regime_params(config, family)
    stat = config.statistic
    notes = ["KS tolerances are engineering choices; no convergence rates are known"]

    t_lo = min(config.t_list) * min(config.s_min_fraction, 1.0) / 2.0
    t_hi = max(config.t_list) * 2.0
    table = build_speed_table(measure, t_lo, t_hi, n_nodes=48)

    if stat in GUMBEL_STATS:
        if not assumption_v_check(table, config.delta, params["r2"] if "r2" in params else 1.0):
            warnings.warn("assumption on v failed; Gumbel statistic reported anyway")
            notes.append("assumption_v_check failed")

    plan = _Plan(
        measure, family, stat, config.dim, params, config.master_seed, config.delta,
        config.modulus_grid, config.s_min_fraction,
        (tuple(table.t_grid.tolist()), tuple(table.v_values.tolist())),
    )
    target_kind = TARGETS.get(stat)
    target_cdf = None
    if target_kind == "frechet":
        target_cdf = lambda x: limit_cdf("frechet", x, params["r2"])  # noqa: E731
    elif target_kind is not None:
        target_cdf = lambda x, k=target_kind: limit_cdf(k, x)  # noqa: E731
    center = _centers(stat, params)

    per_t = []
    reps = list(range(config.replicates))
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for t in config.t_list:
            v = float(table(t))
            n = config.n
            if n is None and stat in GENEALOGY_STATS:
                n = math.ceil(config.n_factor * v)
                if n > config.n_cap:
                    t_star = _smallest_feasible_t(table, config.n_cap / config.n_factor)
                    raise ConfigError(
                        f"n policy needs n={n} > cap {config.n_cap} at t={t}; "
                        f"smallest feasible t is {t_star:.6g}"
                    )
            n0 = config.n0
            if n0 is None and stat not in GENEALOGY_STATS:
                s_min = config.s_min_fraction * t if stat == "N_over_v" else t
                n0 = min(config.n_cap, math.ceil(config.n0_factor * float(table(s_min))))
            records = _collect(plan, t, v, n, n0, reps, pool, workers)
            oracle = _lemma_oracle(records, v) if stat == "M_scaled_lemma" else None
            zs, ks, mom, exc = _summaries(records, target_cdf, center, EPS_LIST, stat, oracle)
            row = {
                "t": t,
                "v": v,
                "n": n if n is not None else n0,
                "ks": ks,
                "ecdf_x": _clean_list(zs),
                "ecdf_y": ((np.arange(zs.size) + 1) / zs.size).tolist(),
                "moments": mom,
                "exceedance": exc,
            }
            if config.n_doubling and stat in GENEALOGY_STATS and n is not None:
                rec2 = _collect(plan, t, v, 2 * n, n0, reps, pool, workers)
                _, ks2, mom2, _ = _summaries(rec2, target_cdf, center, EPS_LIST, stat, None)
                row["n_doubling"] = {"n": 2 * n, "ks": ks2, "mean": mom2["mean"]}
            per_t.append(row)
    finally:
        if pool is not None:
            pool.shutdown()

    meta = {
        "version": cdilab.__version__,
        "wall_time": time.time() - start,
        "seed_rule": "splitmix64 over (master_seed, replicate, label); labels "
        "blocks, genealogy, motion, initial; seeds are shared across t",
        "speed_table_tol": table.tol,
        "notes": notes,
    }
    result = ExperimentResult(config.to_json(), per_t, meta)
    if config.output:
        result.save(config.output)
    return result


def _collect(plan, t, v, n, n0, reps, pool, workers):
    if pool is None:
        return _run_chunk((plan, t, v, n, n0, reps))
    size = math.ceil(len(reps) / (4 * workers))
    chunks = [(plan, t, v, n, n0, reps[i:i + size]) for i in range(0, len(reps), size)]
    out = []
    # map keeps chunk order, so the reduction order is fixed
    for part in pool.map(_run_chunk, chunks):
        out.extend(part)
    return out
