import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cdilab.coalescent import block_count_at, simulate_block_count
from cdilab.errors import DomainError
from cdilab.evt import CustomQuantile, SlowPowerLog, StdNormal
from cdilab.lookdown import (
    GenealogyForest,
    SpatialForest,
    ancestor_max,
    ancestors_at,
    attach_motion,
    dislocation,
    extremal_max,
    max_displacement,
    modulus_profile,
    simulate_genealogy,
)
from cdilab.measure import LambdaMeasure

ZERO = CustomQuantile((0.0, 1.0), (0.0, 0.0))


def isolated(n, t):
    """Forest of n leaves with no mergers."""
    return GenealogyForest(n, t, np.zeros(n), np.full(n, -1), np.empty(0), np.empty(0, dtype=int),
                           np.arange(n), 0)


def cherry(tau, t):
    """Two leaves merged at backward time tau."""
    return GenealogyForest(2, t, np.array([0.0, 0.0, tau]), np.array([2, 2, -1]), np.array([tau]),
                           np.array([2]), np.array([2]), 0)


def fixed_positions(forest, roots, incr, diffusion=0.0):
    from cdilab.lookdown import _compose_kernel

    sp = SpatialForest(forest, 1, np.asarray(roots, float).reshape(-1, 1),
                       np.asarray(incr, float).reshape(-1, 1), None, 0, diffusion,
                       _bridge_rng=np.random.default_rng(0))
    sp.node_pos = _compose_kernel(forest.parent, sp.root_slot(), sp.root_positions, sp.edge_increments)
    return sp


class TestGenealogy:
    def test_single_leaf(self, kingman):
        f = simulate_genealogy(kingman, 1, 1.0, 0)
        assert f.root_count == 1 and f.mergers == []

    def test_kingman_pair(self, kingman):
        one = [simulate_genealogy(kingman, 2, 0.5, s).root_count == 1 for s in range(100_000)]
        assert np.mean(one) == pytest.approx(1 - math.exp(-0.5), abs=0.005)

    def test_root_count_vs_block_count(self, kingman):
        roots = [simulate_genealogy(kingman, 1000, 0.01, s).root_count for s in range(2000)]
        blocks = [block_count_at(simulate_block_count(kingman, 1000, 0.01, 10**6 + s), 0.01) for s in range(2000)]
        assert 1 <= min(roots) and max(roots) <= 1000
        assert stats.ks_2samp(roots, blocks).pvalue > 1e-3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 300), st.floats(1e-4, 3.0), st.integers(0, 2**63))
    def test_invariants(self, n, t, seed):
        m = LambdaMeasure.beta(1.5) if seed % 2 else LambdaMeasure.kingman()
        f = simulate_genealogy(m, n, t, seed)
        f.validate()
        mergers = f.mergers
        assert [x[0] for x in mergers] == sorted(x[0] for x in mergers)
        assert f.root_count + sum(len(c) - 1 for _, c, _ in mergers) == n
        # each leaf reaches exactly one root
        assert set(f.leaf_roots()) == set(f.roots.tolist())

    def test_deterministic(self, beta15):
        a, b = simulate_genealogy(beta15, 200, 0.1, 4), simulate_genealogy(beta15, 200, 0.1, 4)
        assert np.array_equal(a.parent, b.parent) and np.array_equal(a.node_time, b.node_time)


class TestMotion:
    def test_isolated_leaves(self):
        f = isolated(20_000, 1.0)
        sp = attach_motion(f, ZERO, 1, 3)
        assert stats.kstest(sp.leaf_positions[:, 0], "norm").pvalue > 1e-3

    def test_cherry_covariance(self):
        tau, t = 0.3, 1.0
        f = cherry(tau, t)
        pos = np.array([attach_motion(f, ZERO, 1, s).leaf_positions[:, 0] for s in range(100_000)])
        cov = np.cov(pos.T)[0, 1]
        prod = (pos[:, 0] - pos[:, 0].mean()) * (pos[:, 1] - pos[:, 1].mean())
        se = prod.std(ddof=1) / math.sqrt(len(prod))
        assert abs(cov - (t - tau)) < 3 * se

    def test_vanishing_time(self, kingman):
        f = simulate_genealogy(kingman, 50, 1e-12, 1)
        sp = attach_motion(f, StdNormal(), 1, 2)
        anc = f.leaf_roots()
        slot = sp.root_slot()
        assert np.allclose(sp.leaf_positions[:, 0], sp.root_positions[slot[anc], 0], atol=1e-5)

    def test_recompute_exact(self, beta15):
        f = simulate_genealogy(beta15, 300, 0.3, 9)
        for dim in (1, 3):
            sp = attach_motion(f, StdNormal(), dim, 10)
            assert np.array_equal(sp.recompute_leaves(), sp.leaf_positions)

    def test_children_share_parent_position(self, kingman):
        f = simulate_genealogy(kingman, 100, 0.5, 1)
        sp = attach_motion(f, StdNormal(), 2, 1)
        kids = np.nonzero(f.parent >= 0)[0]
        start = sp.node_pos[kids] - sp.edge_increments[kids]
        assert np.allclose(start, sp.node_pos[f.parent[kids]], atol=1e-12)

    def test_exchangeable_leaves(self, kingman):
        first, last = [], []
        for s in range(3000):
            sp = attach_motion(simulate_genealogy(kingman, 30, 0.2, s), StdNormal(), 1, s)
            first.append(sp.leaf_positions[0, 0])
            last.append(sp.leaf_positions[-1, 0])
        assert stats.ks_2samp(first, last).pvalue > 1e-3

    def test_relabel_invariance(self, kingman):
        # a permutation of leaf labels leaves the extracted statistics unchanged
        sp = attach_motion(simulate_genealogy(kingman, 60, 0.2, 8), StdNormal(), 1, 8)
        perm = np.random.default_rng(1).permutation(60)
        leaves = sp.leaf_positions[perm]
        assert leaves.max() == extremal_max(sp)


class TestExtremes:
    def test_ancestor_max(self):
        assert ancestor_max(fixed_positions(isolated(1, 1.0), [3.7], [0.0])) == 3.7
        assert ancestor_max(fixed_positions(isolated(3, 1.0), [-1, 0, 2], [0, 0, 0])) == 2

    def test_ancestor_max_law(self):
        fam = SlowPowerLog(1, 2, 0)
        f = isolated(100, 1e-9)
        ms = np.sort([ancestor_max(attach_motion(f, fam, 1, s)) for s in range(10_000)])
        cdf = lambda x: (1 - x**-2.0) ** 100
        assert stats.kstest(ms, cdf).statistic <= 0.02

    def test_extremal_max(self):
        sp = fixed_positions(isolated(3, 1.0), [0, 0, 0], [1.0, 1.5, -2.0])
        assert extremal_max(sp) == 1.5
        sp0 = fixed_positions(isolated(3, 1.0), [4, 1, 2], [0, 0, 0])
        assert extremal_max(sp0) == ancestor_max(sp0)

    def test_triangle(self, beta15):
        for s in range(50):
            sp = attach_motion(simulate_genealogy(beta15, 100, 0.05, s), SlowPowerLog(1, 2), 1, s)
            assert abs(extremal_max(sp) - ancestor_max(sp)) <= max_displacement(sp) + 1e-12

    def test_norm_mode(self, kingman):
        sp = attach_motion(simulate_genealogy(kingman, 40, 0.1, 2), StdNormal(), 3, 2)
        norms = np.linalg.norm(sp.leaf_positions, axis=1)
        assert extremal_max(sp, "norm") == norms.max()
        with pytest.warns(UserWarning):
            extremal_max(sp)
        with pytest.raises(DomainError):
            ancestor_max(sp)


class TestDislocation:
    def test_endpoints(self, kingman):
        f = simulate_genealogy(kingman, 80, 0.2, 3)
        sp = attach_motion(f, StdNormal(), 1, 3)
        assert dislocation(sp, 0.2) == 0.0
        slot = sp.root_slot()
        disp = np.abs(sp.leaf_positions[:, 0] - sp.root_positions[slot[f.leaf_roots()], 0])
        assert dislocation(sp, 0.0) == pytest.approx(disp.max(), abs=1e-12)
        with pytest.raises(DomainError):
            dislocation(sp, 0.3)

    def test_single_lineage_half_normal(self):
        f = isolated(1, 1.0)
        s = 0.4
        h = np.array([dislocation(attach_motion(f, ZERO, 1, k), s) for k in range(100_000)])
        se = h.std(ddof=1) / math.sqrt(h.size)
        assert abs(h.mean() - math.sqrt(2 * (1 - s) / math.pi)) < 3 * se

    def test_memoized(self, kingman):
        sp = attach_motion(simulate_genealogy(kingman, 50, 1.0, 4), StdNormal(), 1, 4)
        a = dislocation(sp, 0.3)
        dislocation(sp, 0.6)
        dislocation(sp, 0.1)
        assert dislocation(sp, 0.3) == a

    def test_bridge_consistency(self):
        # refining an edge twice: the middle knot lies between its neighbours in law
        f = isolated(1, 1.0)
        mids = []
        for k in range(20_000):
            sp = attach_motion(f, ZERO, 1, k)
            dislocation(sp, 0.25)
            dislocation(sp, 0.75)
            mids.append(dislocation(sp, 0.5))
        # |B(0.5) - B(1)| in real time: half-normal with variance 0.5
        assert np.mean(mids) == pytest.approx(math.sqrt(2 * 0.5 / math.pi), abs=0.01)

    def test_ancestors_at(self):
        f = cherry(0.3, 1.0)
        assert ancestors_at(f, 0.1).tolist() == [0, 1]
        assert ancestors_at(f, 0.3).tolist() == [2, 2]


class TestModulus:
    def test_zero_forest(self):
        sp = fixed_positions(isolated(3, 1.0), [0, 0, 0], [0, 0, 0])
        prof = modulus_profile([sp], 0.4, np.linspace(0, 1, 10, endpoint=False))
        assert prof.sups.tolist() == [0.0]

    def test_grid_refinement(self):
        t = 0.01
        f = isolated(1, t)
        sps = [attach_motion(f, ZERO, 1, k) for k in range(500)]
        coarse = modulus_profile(sps, 0.4, np.linspace(0, t, 25, endpoint=False))
        fine = modulus_profile(sps, 0.4, np.linspace(0, t, 100, endpoint=False))
        q_c, q_f = coarse.quantiles["99"], fine.quantiles["99"]
        assert math.isfinite(q_f) and abs(q_f / q_c - 1) < 0.1

    def test_monotone_in_delta(self, kingman):
        sp = attach_motion(simulate_genealogy(kingman, 30, 0.5, 1), StdNormal(), 1, 1)
        grid = np.linspace(0, 0.5, 12, endpoint=False)
        vals = [modulus_profile([sp], d, grid).sups[0] for d in (0.1, 0.3, 0.45, 0.49)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
