"""Backward lookdown genealogy on [0, t], Brownian decoration, and extremal statistics.

Node ids: leaves are 0..n-1, each merger creates the next id, so every parent
has a larger id than its children.  ``node_time`` is the backward time at which
a node is created (0 for leaves).  A node's edge runs from its own time to its
parent's time, or to the horizon t for roots, where the initial draw sits.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from cdilab.coalescent import simulate_merge_sequence
from cdilab.errors import DomainError
from cdilab.measure import LambdaMeasure


@dataclass(frozen=True)
class GenealogyForest:
    n_leaves: int
    t_horizon: float
    node_time: np.ndarray
    parent: np.ndarray
    merger_times: np.ndarray
    merger_sizes: np.ndarray
    roots: np.ndarray
    seed: int

    @property
    def n_nodes(self) -> int:
        return self.node_time.size

    @property
    def root_count(self) -> int:
        return self.roots.size

    @property
    def mergers(self):
        """List of (backward time, children ids, new id)."""
        out = []
        children = {}
        for child, p in enumerate(self.parent):
            if p >= 0:
                children.setdefault(int(p), []).append(child)
        for j, tau in enumerate(self.merger_times):
            new = self.n_leaves + j
            out.append((float(tau), frozenset(children[new]), new))
        return out

    def top_time(self) -> np.ndarray:
        """Backward time at the upper end of each node's edge."""
        top = np.full(self.n_nodes, self.t_horizon)
        has = self.parent >= 0
        top[has] = self.node_time[self.parent[has]]
        return top

    def leaf_roots(self) -> np.ndarray:
        """Root id above each leaf."""
        anc = np.arange(self.n_leaves)
        while True:
            p = self.parent[anc]
            up = p >= 0
            if not up.any():
                return anc
            anc = np.where(up, p, anc)

    def validate(self) -> None:
        if np.any(np.diff(self.merger_times) <= 0):
            raise DomainError("merger times must increase")
        if self.root_count + int(np.sum(self.merger_sizes - 1)) != self.n_leaves:
            raise DomainError("root count and merger sizes do not add up")
        if np.any(self.parent[self.parent >= 0] <= np.nonzero(self.parent >= 0)[0]):
            raise DomainError("parent ids must exceed child ids")
        if not np.array_equal(np.sort(np.unique(self.leaf_roots())), np.sort(self.roots)):
            raise DomainError("leaves do not reach the listed roots")


@numba.njit(cache=True)
def _assign_kernel(n, sizes, unif):
    n_nodes = n + sizes.size
    parent = np.full(n_nodes, -1, dtype=np.int64)
    active = np.arange(n_nodes, dtype=np.int64)
    nact = n
    p = 0
    for j in range(sizes.size):
        k = sizes[j]
        # partial Fisher-Yates: move a uniform k-subset to the end
        for r in range(k):
            top = nact - 1 - r
            idx = int(unif[p] * (top + 1))
            p += 1
            tmp = active[idx]
            active[idx] = active[top]
            active[top] = tmp
        new = n + j
        for r in range(k):
            parent[active[nact - 1 - r]] = new
        nact -= k
        active[nact] = new
        nact += 1
    return parent, np.sort(active[:nact])


def simulate_genealogy(measure: LambdaMeasure, n: int, t: float, seed: int) -> GenealogyForest:
    """[n]-restricted coalescent run backward for time t from n leaves."""
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    n = int(n)
    ss = np.random.SeedSequence(seed)
    chain_seed, pick_seed = ss.generate_state(2, dtype=np.uint64)
    times, sizes = simulate_merge_sequence(measure, n, t, int(chain_seed))
    unif = np.random.default_rng(int(pick_seed)).random(int(sizes.sum()))
    parent, roots = _assign_kernel(n, sizes.astype(np.int64), unif)
    node_time = np.concatenate((np.zeros(n), times))
    return GenealogyForest(n, float(t), node_time, parent, times, sizes, roots, int(seed))


@numba.njit(cache=True)
def _compose_kernel(parent, root_slot, root_pos, incr):
    n_nodes, dim = incr.shape
    pos = np.empty((n_nodes, dim))
    for i in range(n_nodes - 1, -1, -1):
        p = parent[i]
        for c in range(dim):
            base = root_pos[root_slot[i], c] if p < 0 else pos[p, c]
            pos[i, c] = base + incr[i, c]
    return pos


@dataclass
class SpatialForest:
    """Forest with positions.  ``node_pos[i]`` is the position at the bottom of
    node i's edge; ``root_positions`` are the initial draws at the top of the
    root edges.  Arrays always carry a trailing ``dim`` axis.  ``diffusion``
    scales the bridge noise used for interior times (0 for still synthetic
    forests)."""

    forest: GenealogyForest
    dim: int
    root_positions: np.ndarray
    edge_increments: np.ndarray
    node_pos: np.ndarray
    bridge_seed: int
    diffusion: float = 1.0
    _knots: dict = field(default_factory=dict, repr=False)
    _bridge_rng: np.random.Generator = field(default=None, repr=False)

    @property
    def leaf_positions(self) -> np.ndarray:
        return self.node_pos[: self.forest.n_leaves]

    def root_slot(self) -> np.ndarray:
        slot = np.full(self.forest.n_nodes, -1, dtype=np.int64)
        slot[self.forest.roots] = np.arange(self.forest.root_count)
        return slot

    def recompute_leaves(self) -> np.ndarray:
        """Leaf positions recomposed from roots and increments."""
        f = self.forest
        out = np.empty((f.n_leaves, self.dim))
        slot = self.root_slot()
        for leaf in range(f.n_leaves):
            i = leaf
            path = []
            while i >= 0:
                path.append(i)
                i = f.parent[i]
            # same summation order as the composition kernel
            acc = self.root_positions[slot[path[-1]]].copy()
            for node in reversed(path):
                acc = acc + self.edge_increments[node]
            out[leaf] = acc
        return out


def attach_motion(
    forest: GenealogyForest,
    initial_sampler,
    dim: int,
    seed: int,
    initial_seed: int = None,
) -> SpatialForest:
    """Give roots i.i.d. draws from the initial law and each edge a Gaussian increment.

    ``initial_sampler`` is a TailFamily or any object with ``sample(rng, size)``.
    With ``initial_seed`` the initial draws use their own stream.
    """
    if int(dim) != dim or dim < 1:
        raise DomainError("dim must be a positive integer")
    dim = int(dim)
    ss = np.random.SeedSequence(seed)
    motion_seed, init_seed, bridge_seed = ss.generate_state(3, dtype=np.uint64)
    if initial_seed is not None:
        init_seed = initial_seed
    draws = np.asarray(
        initial_sampler.sample(np.random.default_rng(int(init_seed)), (forest.root_count, dim)),
        dtype=float,
    ).reshape(forest.root_count, dim)
    dur = forest.top_time() - forest.node_time
    z = np.random.default_rng(int(motion_seed)).standard_normal((forest.n_nodes, dim))
    incr = z * np.sqrt(dur)[:, None]
    sf = SpatialForest(forest, dim, draws, incr, None, int(bridge_seed))
    sf.node_pos = _compose_kernel(forest.parent, sf.root_slot(), draws, incr)
    sf._bridge_rng = np.random.default_rng(int(bridge_seed))
    return sf


def ancestor_max(spatial: SpatialForest) -> float:
    """M(t): largest initial draw among the roots."""
    if spatial.dim != 1:
        raise DomainError("ancestor_max needs dim = 1; use extremal_max(mode='norm')")
    return float(spatial.root_positions[:, 0].max())


def extremal_max(spatial: SpatialForest, mode: str = "coordinate-max") -> float:
    """M-hat(t): largest leaf position (or leaf norm)."""
    leaves = spatial.leaf_positions
    if mode == "norm":
        return float(np.sqrt(np.sum(leaves**2, axis=1)).max())
    if mode != "coordinate-max":
        raise DomainError(f"unknown mode {mode!r}")
    if spatial.dim > 1:
        warnings.warn("coordinate-max with dim > 1 uses the first coordinate")
    return float(leaves[:, 0].max())


def ancestor_norm_max(spatial: SpatialForest) -> float:
    return float(np.sqrt(np.sum(spatial.root_positions**2, axis=1)).max())


def max_displacement(spatial: SpatialForest) -> float:
    """Largest leaf-to-initial-draw distance (the dislocation over [0, t])."""
    return dislocation(spatial, 0.0)


def _edge_position(spatial: SpatialForest, nodes: np.ndarray, tau: float) -> np.ndarray:
    """Position at backward time tau on each node's edge, via memoized bridges."""
    f = spatial.forest
    lo_t = f.node_time[nodes]
    hi_t = f.top_time()[nodes]
    lo_x = spatial.node_pos[nodes]
    slot = spatial.root_slot()
    hi_x = np.where(
        (f.parent[nodes] >= 0)[:, None],
        spatial.node_pos[np.maximum(f.parent[nodes], 0)],
        spatial.root_positions[np.maximum(slot[nodes], 0)],
    )
    out = np.empty((nodes.size, spatial.dim))
    rng = spatial._bridge_rng
    for r, node in enumerate(nodes):
        node = int(node)
        knots = spatial._knots.setdefault(node, {})
        if tau in knots:
            out[r] = knots[tau]
            continue
        a_t, a_x, b_t, b_x = lo_t[r], lo_x[r], hi_t[r], hi_x[r]
        for kt, kx in knots.items():
            if a_t < kt < tau:
                a_t, a_x = kt, kx
            elif tau < kt < b_t:
                b_t, b_x = kt, kx
        if tau <= a_t:
            x = a_x
        elif tau >= b_t:
            x = b_x
        else:
            w = (tau - a_t) / (b_t - a_t)
            sd = math.sqrt(spatial.diffusion * (tau - a_t) * (b_t - tau) / (b_t - a_t))
            x = a_x + w * (b_x - a_x) + sd * rng.standard_normal(spatial.dim)
        knots[tau] = np.array(x, dtype=float)
        out[r] = x
    return out


def ancestors_at(forest: GenealogyForest, tau: float) -> np.ndarray:
    """For each leaf, the node whose edge contains backward time tau."""
    anc = np.arange(forest.n_leaves)
    top = forest.top_time()
    while True:
        p = forest.parent[anc]
        up = (p >= 0) & (top[anc] <= tau)
        if not up.any():
            return anc
        anc = np.where(up, p, anc)


def dislocation(spatial: SpatialForest, s: float) -> float:
    """H^t(s, t): largest distance between a leaf and its ancestor at real time s."""
    f = spatial.forest
    if not 0 <= s <= f.t_horizon:
        raise DomainError(f"s must lie in [0, {f.t_horizon}]")
    tau = f.t_horizon - s
    if tau == 0:
        return 0.0
    anc = ancestors_at(f, tau)
    uniq, inv = np.unique(anc, return_inverse=True)
    at_tau = _edge_position(spatial, uniq, tau)
    diff = spatial.leaf_positions - at_tau[inv]
    return float(np.sqrt(np.sum(diff**2, axis=1)).max())


@dataclass(frozen=True)
class ModulusProfile:
    delta: float
    sups: np.ndarray
    quantiles: dict


def modulus_profile(spatials: Sequence[SpatialForest], delta: float, s_grid) -> ModulusProfile:
    """Per-replicate sup over s in s_grid of H^t(s,t) / (t - s)^delta."""
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    sups = []
    for sp in spatials:
        t = sp.forest.t_horizon
        best = 0.0
        for s in s_grid:
            if s < t:
                best = max(best, dislocation(sp, float(s)) / (t - s) ** delta)
        sups.append(best)
    sups = np.asarray(sups)
    q = {str(p): float(np.quantile(sups, p / 100)) for p in (50, 90, 99)}
    return ModulusProfile(delta, sups, q)
