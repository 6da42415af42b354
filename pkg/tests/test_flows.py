import numpy as np
import pytest

from oatflow import diffcore as dc
from oatflow.flows import (
    FM_T_MAX,
    PathSample,
    Phase1Config,
    cfm_loss,
    cfm_loss_traced,
    draw_path_sample,
    ot_pair_batch,
    sample_times,
    train_phase1,
)
from oatflow.model import init
from oatflow.otcore import cost_matrix, solve_exact


def gaussian(n, rng):
    return rng.standard_normal((n, 2))


class TestPaths:
    def test_icfm_at_zero(self):
        rng = np.random.default_rng(0)
        x0, x1 = rng.normal(size=2), rng.normal(size=2)
        s = draw_path_sample("icfm", x0, x1, 0.0, 0.0, rng)
        np.testing.assert_array_equal(s.x_t, x0)
        np.testing.assert_array_equal(s.u_t, x1 - x0)

    @pytest.mark.parametrize("method", ["icfm", "otcfm", "vpcfm"])
    def test_endpoints(self, method):
        rng = np.random.default_rng(1)
        x0, x1 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(draw_path_sample(method, x0, x1, 0.0, 0.0, rng).x_t, x0, atol=1e-12)
        np.testing.assert_allclose(draw_path_sample(method, x0, x1, 1.0, 0.0, rng).x_t, x1, atol=1e-12)

    def test_linear_path_formula(self):
        rng = np.random.default_rng(2)
        x0, x1, t = rng.normal(size=(50, 3)), rng.normal(size=(50, 3)), rng.uniform(size=50)
        s = draw_path_sample("icfm", x0, x1, t, 0.0, rng)
        np.testing.assert_allclose(s.x_t, (1 - t[:, None]) * x0 + t[:, None] * x1, atol=1e-12)

    def test_vp_at_one(self):
        s = draw_path_sample("vpcfm", np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0, 0.0, np.random.default_rng(0))
        np.testing.assert_allclose(s.x_t, [0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(s.u_t, [-np.pi / 2, 0.0], atol=1e-15)

    def test_vp_norm_identity(self):
        rng = np.random.default_rng(3)
        x0, x1, t = rng.normal(size=(100, 2)), rng.normal(size=(100, 2)), rng.uniform(size=100)
        s = draw_path_sample("vpcfm", x0, x1, t, 0.0, rng)
        c, si = np.cos(np.pi * t / 2), np.sin(np.pi * t / 2)
        expect = c**2 * (x0**2).sum(1) + si**2 * (x1**2).sum(1) + 2 * si * c * (x0 * x1).sum(1)
        np.testing.assert_allclose((s.x_t**2).sum(1), expect, rtol=1e-12)

    @pytest.mark.parametrize("method", ["icfm", "vpcfm"])
    def test_velocity_is_time_derivative(self, method):
        rng = np.random.default_rng(4)
        x0, x1 = rng.normal(size=2), rng.normal(size=2)
        h = 1e-6
        for t in np.linspace(h, 1 - h, 101):
            s = draw_path_sample(method, x0, x1, t, 0.0, rng)
            fd = (draw_path_sample(method, x0, x1, t + h, 0.0, rng).x_t - draw_path_sample(method, x0, x1, t - h, 0.0, rng).x_t) / (2 * h)
            np.testing.assert_allclose(s.u_t, fd, atol=1e-6)

    def test_fm_mean_and_spread(self):
        rng = np.random.default_rng(5)
        x1 = np.tile([[2.0, -1.0]], (200_000, 1))
        t, sigma = 0.6, 0.1
        s = draw_path_sample("fm", np.zeros_like(x1), x1, t, sigma, rng)
        sd = t * sigma - t + 1
        np.testing.assert_allclose(s.x_t.mean(0), t * x1[0], atol=4 * sd / np.sqrt(200_000))
        np.testing.assert_allclose(s.x_t.std(0), sd, rtol=1e-2)
        np.testing.assert_allclose(s.u_t, (x1 - (1 - sigma) * s.x_t) / (1 - (1 - sigma) * t), rtol=1e-12)

    def test_fm_singular(self):
        with pytest.raises(ValueError):
            draw_path_sample("fm", np.zeros(2), np.ones(2), 1.0, 0.0, np.random.default_rng(0))

    def test_fm_times_avoid_singularity(self):
        t = sample_times("fm", 100_000, np.random.default_rng(0))
        assert t.max() <= FM_T_MAX

    def test_sigma_jitter(self):
        rng = np.random.default_rng(6)
        x0 = np.zeros((100_000, 2))
        s = draw_path_sample("icfm", x0, x0, 0.5, 0.3, rng)
        assert s.x_t.std() == pytest.approx(0.3, rel=2e-2)

    def test_t_range(self):
        with pytest.raises(ValueError):
            draw_path_sample("icfm", np.zeros(2), np.ones(2), 1.5, 0.0, np.random.default_rng(0))


class TestLoss:
    def test_perfect_fit(self):
        f = init(2, 0, zero_head=True)
        x = np.random.default_rng(0).normal(size=(8, 2))
        s = PathSample(x, np.zeros((8, 2)), np.full(8, 0.5), x, x)
        assert cfm_loss(f, s) == 0.0

    def test_unit_error(self):
        f = init(2, 0, zero_head=True)
        x = np.random.default_rng(0).normal(size=(8, 2))
        s = PathSample(x, np.tile([1.0, 0.0], (8, 1)), np.full(8, 0.5), x, x)
        assert cfm_loss(f, s) == 1.0

    def test_traced_matches_plain(self):
        f = init(2, 3)
        rng = np.random.default_rng(1)
        s = draw_path_sample("icfm", rng.normal(size=(16, 2)), rng.normal(size=(16, 2)), rng.uniform(size=16), 0.0, rng)
        val = cfm_loss_traced(dc.Tensor(f.params.data), f.params.layout, 2, s)
        assert float(val.data) == pytest.approx(cfm_loss(f, s), rel=1e-13)

    def test_gradient_matches_finite_differences(self):
        f = init(2, 2, hidden=(6, 5, 4))
        rng = np.random.default_rng(2)
        s = draw_path_sample("vpcfm", rng.normal(size=(12, 2)), rng.normal(size=(12, 2)), rng.uniform(size=12), 0.0, rng)
        layout = f.params.layout
        theta = f.params.data
        g = dc.grad(lambda p: cfm_loss_traced(p, layout, 2, s), theta)
        h = 1e-5
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fd = (cfm_loss(f.with_params(theta + e), s) - cfm_loss(f.with_params(theta - e), s)) / (2 * h)
            assert abs(g[i] - fd) <= 1e-4 * max(1.0, abs(fd))


class TestConfig:
    def test_unknown_method(self):
        with pytest.raises(ValueError):
            Phase1Config(method="sbcfm")

    def test_otcfm_needs_batch(self):
        with pytest.raises(ValueError):
            Phase1Config(method="otcfm", batch_size=1)


class TestTraining:
    def test_zero_batches_returns_init(self):
        out = train_phase1(Phase1Config(n_batches=0, seed=5), gaussian, gaussian)
        assert out.params.data.tobytes() == init(2, 5).params.data.tobytes()

    def test_bit_reproducible(self):
        cfg = Phase1Config(n_batches=30, batch_size=32, seed=1, method="otcfm")
        a = train_phase1(cfg, gaussian, gaussian)
        b = train_phase1(cfg, gaussian, gaussian)
        assert a.params.data.tobytes() == b.params.data.tobytes()

    def test_learns_below_zero_field_loss(self):
        # for independent standard normals E|x1 - x0|^2 = 2d = 4
        cfg = Phase1Config(n_batches=300, batch_size=128, seed=0)
        f = train_phase1(cfg, gaussian, gaussian)
        rng = np.random.default_rng(99)
        x0, x1 = rng.normal(size=(4096, 2)), rng.normal(size=(4096, 2))
        s = draw_path_sample("icfm", x0, x1, rng.uniform(size=4096), 0.0, rng)
        zero = float(np.mean(np.sum(s.u_t**2, axis=1)))
        assert zero == pytest.approx(4.0, rel=0.05)
        loss = cfm_loss(f, s)
        assert np.isfinite(loss) and loss < zero

    def test_snapshots_and_callback(self):
        records = []
        cfg = Phase1Config(n_batches=6, batch_size=8, seed=0)
        final, snaps = train_phase1(cfg, gaussian, gaussian, snapshots=(0, 3, 6), callback=records.append)
        assert sorted(snaps) == [0, 3, 6]
        assert snaps[6].params.data.tobytes() == final.params.data.tobytes()
        assert [r["step"] for r in records] == list(range(1, 7))
        longer = train_phase1(Phase1Config(n_batches=3, batch_size=8, seed=0), gaussian, gaussian)
        assert snaps[3].params.data.tobytes() == longer.params.data.tobytes()


class TestOtPairing:
    def test_never_worse_than_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x0, x1 = rng.normal(size=(32, 2)), rng.normal(size=(32, 2))
            paired = ot_pair_batch(x0, x1)
            assert np.sum((x1 - paired) ** 2) <= np.sum((x1 - x0) ** 2) + 1e-12

    def test_order_equivariance(self):
        rng = np.random.default_rng(8)
        x0, x1 = rng.normal(size=(24, 2)), rng.normal(size=(24, 2))
        pairs = {(tuple(a), tuple(b)) for a, b in zip(ot_pair_batch(x0, x1), x1)}
        p0, p1 = rng.permutation(24), rng.permutation(24)
        y0, y1 = x0[p0], x1[p1]
        shuffled = {(tuple(a), tuple(b)) for a, b in zip(ot_pair_batch(y0, y1), y1)}
        assert pairs == shuffled
        C = cost_matrix(x0, x1).values
        assert solve_exact(C).cost(C) == pytest.approx(np.sum((x1 - ot_pair_batch(x0, x1)) ** 2), rel=1e-12)
