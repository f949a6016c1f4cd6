import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from cdilab.errors import DomainError, UnsupportedMeasureError
from cdilab.measure import LambdaMeasure, psi
from cdilab.speed import (
    PostAbsorptionWarning,
    SpeedTable,
    assumption_v_check,
    big_psi,
    build_speed_table,
    delta_tail_bound,
    round_trip_residual,
    speed_v,
    v1_condition,
)

BETA_CONST = (1.5 * special.gamma(1.5)) ** 2


class TestBigPsi:
    def test_kingman(self, kingman):
        assert big_psi(kingman, 4.0) == pytest.approx(0.5, rel=1e-12)
        for t in (1e-3, 0.1, 1.0):
            assert big_psi(kingman, 2 / t) == pytest.approx(t, rel=1e-12)

    def test_beta_simpson_oracle(self, beta15):
        # Simpson in log q on [100, 1e12]; the remainder beyond uses psi ~ C q^1.5
        s = np.linspace(math.log(100.0), math.log(1e12), 40001)
        q = np.exp(s)
        f = q / psi(beta15, q)
        h = s[1] - s[0]
        body = h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum())
        tail = 1e12 / (0.5 * psi(beta15, 1e12))
        assert big_psi(beta15, 100.0) == pytest.approx(body + tail, rel=1e-7)

    def test_decreasing(self, beta15):
        u = np.geomspace(2.0, 1e6, 12)
        vals = [big_psi(beta15, x) for x in u]
        assert np.all(np.diff(vals) < 0)

    def test_non_cdi(self):
        with pytest.raises(UnsupportedMeasureError):
            big_psi(LambdaMeasure.beta(0.5), 10.0)


class TestSpeedV:
    def test_kingman(self, kingman):
        assert speed_v(kingman, 0.01) == pytest.approx(200, rel=1e-12)
        assert speed_v(kingman, 2.0) == pytest.approx(1, rel=1e-12)

    def test_post_absorption_warning(self, kingman):
        with pytest.warns(PostAbsorptionWarning):
            speed_v(kingman, 4.0)

    def test_beta_constant(self, beta15):
        # v t^2 approaches (1.5 Gamma(1.5))^2 from one side as t -> 0
        r3, r4 = (speed_v(beta15, t) * t * t for t in (1e-3, 1e-4))
        assert abs(r4 / BETA_CONST - 1) < abs(r3 / BETA_CONST - 1)
        assert r4 == pytest.approx(BETA_CONST, rel=2e-3)

    def test_inverse_pair(self, beta15):
        for t in np.geomspace(1e-4, 1.0, 7):
            v = speed_v(beta15, t)
            assert abs(big_psi(beta15, v) - t) / t <= 1e-8

    def test_mass_scaling(self, beta15):
        double = beta15.scaled(2.0)
        for t in (1e-3, 0.02):
            assert speed_v(double, t) == pytest.approx(speed_v(beta15, 2 * t), rel=1e-8)

    def test_rejects_bad_t(self, kingman):
        with pytest.raises(DomainError):
            speed_v(kingman, 0.0)


class TestSpeedTable:
    def test_kingman_table(self, kingman_table):
        assert np.allclose(kingman_table.v_values, 2 / kingman_table.t_grid, rtol=1e-12)
        assert kingman_table.tol < 1e-8

    def test_beta_round_trip(self, beta15, beta15_table):
        assert round_trip_residual(beta15, beta15_table) <= 1e-8
        assert np.all(np.diff(beta15_table.v_values) < 0)

    def test_midpoints(self, beta15, beta15_table):
        t = np.sqrt(beta15_table.t_grid[:-1] * beta15_table.t_grid[1:])[::8]
        direct = np.array([speed_v(beta15, x) for x in t])
        assert np.allclose(beta15_table(t), direct, rtol=1e-4)

    def test_ode_consistency(self, beta15, beta15_table):
        # central difference of direct solves around every eighth interior node
        h = 1e-4
        for t in beta15_table.t_grid[4:-1:8]:
            v = speed_v(beta15, t)
            up = speed_v(beta15, t * (1 + h), guess=v)
            down = speed_v(beta15, t * (1 - h), guess=v)
            dv = (up - down) / (2 * t * h)
            assert dv == pytest.approx(-psi(beta15, v), rel=1e-4)

    def test_v_above_one(self, beta15_table):
        assert np.all(beta15_table.v_values > 1)

    def test_validation(self):
        with pytest.raises(DomainError):
            SpeedTable(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        with pytest.raises(DomainError):
            build_speed_table(LambdaMeasure.kingman(), 1e-3, 1.0, n_nodes=8)

    def test_extension(self, kingman_table):
        assert kingman_table(1e-6) == pytest.approx(2e6, rel=1e-10)


class TestV1Condition:
    def test_kingman(self, kingman_table):
        ok, value = v1_condition(kingman_table, 0.5, 1.0)
        assert ok and math.isfinite(value)

    def test_synthetic_blowup(self):
        table = SpeedTable.from_function(lambda t: math.exp(t**-0.9), 1e-2, 1.0, 32)
        assert v1_condition(table, 0.5, 1.0) == (False, math.inf)

    def test_beta(self, beta15_table):
        assert v1_condition(beta15_table, 0.5, 1.0)[0]


class TestDeltaTailBound:
    def test_kingman_value(self, kingman_table):
        h = delta_tail_bound(kingman_table, 2.0**-20, 0.5, 1.0, 2.0)
        assert h == pytest.approx(2 * 2.0**-20, rel=1e-9)
        assert h == pytest.approx(1.9073e-6, rel=1e-4)

    def test_boundary(self, kingman_table):
        full = v1_condition(kingman_table, 0.5, 1.0, upper=1.0)[1]
        assert delta_tail_bound(kingman_table, 3.0, 0.5, 1.0, 2.0) == pytest.approx(full + 2.0)

    def test_divergent_series(self, kingman_table):
        with pytest.raises(DomainError):
            delta_tail_bound(kingman_table, 0.1, 0.5, 1.0, 1.0)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(1e-6, 2.0))
    def test_monotone_in_x(self, kingman_table, x):
        a = delta_tail_bound(kingman_table, x, 0.5, 1.0, 2.0)
        b = delta_tail_bound(kingman_table, x / 2, 0.5, 1.0, 2.0)
        assert b <= a


class TestAssumptionV:
    def test_small_r2(self, kingman_table):
        assert assumption_v_check(kingman_table, 0.2, 0.5)

    def test_kingman(self, kingman_table):
        assert assumption_v_check(kingman_table, 0.2, 2.0)

    def test_synthetic_fails(self):
        table = SpeedTable.from_function(lambda t: math.exp(1 / t), 1e-2, 1.0, 32)
        assert not assumption_v_check(table, 0.2, 2.0)
