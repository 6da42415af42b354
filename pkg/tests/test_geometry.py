import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import simpson

from oatflow.geometry import (
    CubicPath,
    PhasePoint,
    accel_energy,
    bound_constant,
    cubic_minimizer,
    is_straight_pair,
    oat_cost,
    optimal_vt,
    pair_loss,
    split_acceleration,
)


def random_pair(rng, d, same_v=False):
    z0 = PhasePoint(rng.normal(size=d), rng.normal(size=d))
    v1 = z0.v.copy() if same_v else rng.normal(size=d)
    return z0, PhasePoint(rng.normal(size=d), v1)


vec2 = st.lists(st.floats(-10, 10), min_size=2, max_size=2).map(np.array)


class TestPhasePoint:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            PhasePoint([0.0, 1.0], [1.0])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            PhasePoint([np.nan], [0.0])


class TestOatCost:
    def test_constant_velocity_line(self):
        assert oat_cost(PhasePoint([0, 0], [1, 0]), PhasePoint([1, 0], [1, 0])) == 0.0

    def test_rest_to_rest(self):
        assert oat_cost(PhasePoint([0, 0], [0, 0]), PhasePoint([1, 0], [0, 0])) == pytest.approx(12.0)

    def test_horizon_must_be_positive(self):
        z = PhasePoint([0.0], [0.0])
        with pytest.raises(ValueError):
            oat_cost(z, z, T=0.0)

    def test_time_reversal_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            z0, z1 = random_pair(rng, 3)
            back = oat_cost(PhasePoint(-z1.x, z1.v), PhasePoint(-z0.x, z0.v))
            assert back == pytest.approx(oat_cost(z0, z1), rel=1e-12)

    @pytest.mark.parametrize("d", [1, 3])
    def test_equals_cubic_energy(self, d):
        rng = np.random.default_rng(d)
        for _ in range(500):
            z0, z1 = random_pair(rng, d)
            assert accel_energy(cubic_minimizer(z0, z1)) == pytest.approx(oat_cost(z0, z1), rel=1e-9)


class TestCubicMinimizer:
    def test_rest_to_rest_coefficients(self):
        p = cubic_minimizer(PhasePoint([0.0], [0.0]), PhasePoint([1.0], [0.0]))
        np.testing.assert_allclose(p.b, [3.0])
        np.testing.assert_allclose(p.c, [-2.0])

    def test_linear_data_gives_line(self):
        p = cubic_minimizer(PhasePoint([0.0], [1.0]), PhasePoint([1.0], [1.0]))
        np.testing.assert_allclose(p.b, 0.0, atol=1e-15)
        np.testing.assert_allclose(p.c, 0.0, atol=1e-15)

    def test_zero_acceleration_recovery(self):
        rng = np.random.default_rng(3)
        x0, x1 = rng.normal(size=4), rng.normal(size=4)
        u = x1 - x0
        p = cubic_minimizer(PhasePoint(x0, u), PhasePoint(x1, u))
        np.testing.assert_allclose(p.b, 0.0, atol=1e-12)
        np.testing.assert_allclose(p.c, 0.0, atol=1e-12)

    def test_endpoint_reproduction(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            z0, z1 = random_pair(rng, 2)
            p = cubic_minimizer(z0, z1)
            np.testing.assert_allclose(p.position(0.0), z0.x, atol=1e-12)
            np.testing.assert_allclose(p.velocity(0.0), z0.v, atol=1e-12)
            np.testing.assert_allclose(p.position(1.0), z1.x, atol=1e-12)
            np.testing.assert_allclose(p.velocity(1.0), z1.v, atol=1e-12)

    def test_beats_perturbed_paths(self):
        # adding t^2 (1-t)^2 q keeps the boundary data and can only raise the energy
        rng = np.random.default_rng(5)
        ts = np.linspace(0, 1, 2001)
        for _ in range(20):
            z0, z1 = random_pair(rng, 2)
            p = cubic_minimizer(z0, z1)
            base = np.trapezoid(np.sum(p.acceleration(ts) ** 2, axis=-1), ts)
            q = rng.normal(size=2)
            # second derivative of t^2 - 2 t^3 + t^4
            bump = (2 - 12 * ts + 12 * ts**2)[:, None] * q
            pert = np.trapezoid(np.sum((p.acceleration(ts) + bump) ** 2, axis=-1), ts)
            assert pert > base


class TestAccelEnergy:
    def test_hand_value(self):
        assert accel_energy(CubicPath(np.zeros(1), np.zeros(1), np.array([3.0]), np.array([-2.0]))) == pytest.approx(12.0)

    def test_zero(self):
        z = np.zeros(2)
        assert accel_energy(CubicPath(z, z, z, z)) == 0.0

    def test_matches_quadrature(self):
        rng = np.random.default_rng(6)
        ts = np.linspace(0, 1, 1001)
        for _ in range(50):
            p = CubicPath(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.normal(size=3))
            f = np.sum(p.acceleration(ts) ** 2, axis=-1)
            assert accel_energy(p) == pytest.approx(simpson(f, x=ts), rel=1e-12)
            # trapezoid error on this quadratic integrand is h^2/12 * f'' = 6 h^2 |c|^2
            trap = np.trapezoid(f, ts)
            assert abs(trap - accel_energy(p)) <= 6e-6 * np.sum(p.c**2) * (1 + 1e-6)
            assert accel_energy(p) == pytest.approx(trap, rel=1e-5)


class TestSplitAcceleration:
    def test_axis_aligned(self):
        s = split_acceleration(np.array([1.0, 0.0]), np.array([2.0, 3.0]))
        np.testing.assert_allclose(s.a_par, [2.0, 0.0])
        np.testing.assert_allclose(s.a_perp, [0.0, 3.0])

    def test_collinear(self):
        s = split_acceleration(np.array([1.0, 2.0]), np.array([-2.0, -4.0]))
        np.testing.assert_allclose(s.a_perp, 0.0, atol=1e-15)

    def test_zero_velocity(self):
        with pytest.raises(ValueError):
            split_acceleration(np.zeros(2), np.ones(2))

    @given(vec2, vec2)
    def test_reconstruction_and_orthogonality(self, v, a):
        if np.linalg.norm(v) < 1e-3:
            return
        s = split_acceleration(v, a)
        np.testing.assert_allclose(s.a_par + s.a_perp, a, atol=1e-10)
        assert abs(np.dot(s.a_perp, v)) < 1e-10 * max(1.0, np.linalg.norm(v) * np.linalg.norm(a))
        assert abs(s.a_par[0] * v[1] - s.a_par[1] * v[0]) < 1e-10 * max(1.0, np.linalg.norm(v) * np.linalg.norm(a))


def _max_orth_offset(z0, z1, n=101):
    p = cubic_minimizer(z0, z1)
    u = z1.x - z0.x
    e = u / np.linalg.norm(u)
    disp = p.position(np.linspace(0, 1, n)) - z0.x
    orth = disp - (disp @ e)[:, None] * e
    return np.max(np.linalg.norm(orth, axis=1))


class TestStraightness:
    def test_collinear(self):
        assert is_straight_pair(PhasePoint([0, 0], [1, 0]), PhasePoint([2, 0], [3, 0]))

    def test_orthogonal_v0(self):
        assert not is_straight_pair(PhasePoint([0, 0], [0, 1]), PhasePoint([2, 0], [2, 0]), tol=1e-9)

    def test_zero_displacement(self):
        assert is_straight_pair(PhasePoint([1, 1], [1, 1]), PhasePoint([1, 1], [-2, -2]))
        assert not is_straight_pair(PhasePoint([1, 1], [1, 0]), PhasePoint([1, 1], [0, 1]))

    def test_agrees_with_cubic_path(self):
        rng = np.random.default_rng(7)
        for k in range(400):
            x0, x1 = rng.normal(size=2), rng.normal(size=2)
            u = x1 - x0
            if k % 2:
                z0, z1 = PhasePoint(x0, rng.normal() * u), PhasePoint(x1, rng.normal() * u)
            else:
                z0, z1 = PhasePoint(x0, rng.normal(size=2)), PhasePoint(x1, rng.normal(size=2))
            straight = is_straight_pair(z0, z1)
            assert straight == (_max_orth_offset(z0, z1) <= 1e-8)
            assert straight == (k % 2 == 1)


class TestPairLoss:
    def test_aligned_is_zero(self):
        z0, z1 = PhasePoint([0, 0], [1, 0]), PhasePoint([1, 0], [1, 0])
        for alpha in (0.0, 0.3, 2 / 3, 1.0):
            assert pair_loss(z0, z1, [1.0, 0.0], alpha) == 0.0

    def test_pure_penalty(self):
        rng = np.random.default_rng(8)
        x1 = rng.normal(size=2)
        val = pair_loss(PhasePoint([0, 0], [0, 0]), PhasePoint(x1, [0, 0]), [1.0, 0.0], 0.0)
        assert val == pytest.approx(2.0)

    def test_alpha_range(self):
        z = PhasePoint([0.0], [0.0])
        with pytest.raises(ValueError):
            pair_loss(z, z, [0.0], 1.5)

    def test_half_interval_costs_at_twelve_thirteenths(self):
        rng = np.random.default_rng(9)
        for _ in range(500):
            z0, z1 = random_pair(rng, 3)
            vt = rng.normal(size=3)
            u = z1.x - z0.x
            # half-interval costs with the chord displacement substituted for both quotients
            c0 = oat_cost(PhasePoint(np.zeros(3), z0.v), PhasePoint(u, vt))
            c1 = oat_cost(PhasePoint(np.zeros(3), vt), PhasePoint(u, z1.v))
            assert pair_loss(z0, z1, vt, 12 / 13) == pytest.approx((c0 + c1) / 13, rel=1e-9)


class TestOptimalVt:
    def test_alpha_zero(self):
        np.testing.assert_allclose(optimal_vt([1.0, 2.0], [3.0, -1.0], 0.0), [3.0, -1.0])

    def test_two_thirds(self):
        u, vb = np.array([1.0, 2.0]), np.array([3.0, -1.0])
        np.testing.assert_allclose(optimal_vt(u, vb, 2 / 3), 2 / 3 * u + vb / 3)

    def test_perturbation(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            z0, z1 = random_pair(rng, 2)
            alpha = rng.uniform()
            vt = optimal_vt(z1.x - z0.x, (z0.v + z1.v) / 2, alpha)
            best = pair_loss(z0, z1, vt, alpha)
            for _ in range(100):
                assert best <= pair_loss(z0, z1, vt + rng.normal(size=2) * 0.1, alpha)

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            optimal_vt([0.0], [0.0], 4 / 3)


class TestBoundConstant:
    def test_two_thirds(self):
        assert bound_constant(2 / 3) == pytest.approx(2 / 27, abs=1e-15)

    def test_zero(self):
        assert bound_constant(0.0) == 0.0

    def test_argmax(self):
        grid = np.arange(0, 10001) * 1e-4
        assert abs(grid[np.argmax(bound_constant(grid))] - 2 / 3) <= 1e-4

    def test_bound_holds_for_many_alphas(self):
        rng = np.random.default_rng(11)
        for alpha in np.linspace(0.05, 0.95, 10):
            for _ in range(100):
                z0, z1 = random_pair(rng, 2)
                vt = optimal_vt(z1.x - z0.x, (z0.v + z1.v) / 2, alpha)
                assert pair_loss(z0, z1, vt, alpha) >= bound_constant(alpha) * oat_cost(z0, z1) - 1e-12
