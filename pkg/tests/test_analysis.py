import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cocd.analysis import (
    UnstableConfigError,
    convergence_rate,
    error_bound,
    estimate_L_eps,
    grad_diff,
    loglinear_fit,
    max_stable_lr,
    moving_average,
    secant_L_eps,
    stability_constants,
    stability_report,
    staleness_factor,
    track_delta,
)
from cocd.objectives import ConfigError, Objective, OscillatoryQuadratic, Quadratic, Rosenbrock
from cocd.optimizer import CoCD, OptimizerConfig, measure_staleness_error
from cocd.params import ParameterStore


class Linear(Objective):
    def _loss(self, store, batch):
        return float(np.sum(np.arange(1.0, store.n + 1) * store.to_vector()))


def vec(x):
    return ParameterStore.from_arrays([np.asarray(x, dtype=np.float64)])


class TestErrorBound:
    def test_even_split(self):
        assert math.isclose(error_bound(4, 2, 1.0, 0.1), 0.2)

    def test_remainder(self):
        assert error_bound(5, 2, 1.0, 1.0) == 4.0

    def test_full_budget_zero(self):
        assert error_bound(17, 17, 3.0, 2.0) == 0.0

    @pytest.mark.parametrize("b", [0, 6])
    def test_budget_out_of_range(self, b):
        with pytest.raises(ConfigError):
            error_bound(5, b, 1.0, 1.0)

    def test_monotone_in_budget_exhaustive(self):
        for n in range(1, 65):
            values = [error_bound(n, b, 1.0, 1.0) for b in range(1, n + 1)]
            assert all(a >= b for a, b in zip(values, values[1:])), n

    def test_scaling(self):
        ns = [16, 64, 256, 1024]
        # normalized by n^2 at B=1 and n^1.5 at B=ceil(sqrt(n)), the bound settles to a constant
        one = [error_bound(n, 1, 1.0, 1.0) / n**2 for n in ns]
        root = [error_bound(n, math.ceil(math.sqrt(n)), 1.0, 1.0) / n**1.5 for n in ns]
        for seq in (one, root):
            for a, b in zip(seq, seq[1:]):
                assert 0.8 <= b / a <= 1.25
        assert math.isclose(one[-1], 0.5, rel_tol=1e-2)

    @given(st.integers(1, 200), st.data(), st.floats(0, 10), st.floats(0, 10))
    def test_matches_staleness_sum(self, n, data, L, delta):
        # the bound sums L*delta*(age) over coordinates, ages 0..K-1 per block
        budget = data.draw(st.integers(1, n))
        K, r = divmod(n, budget)
        total = sum(budget * age for age in range(K)) + r * K
        assert math.isclose(error_bound(n, budget, L, delta), L * delta * total, rel_tol=1e-12, abs_tol=1e-300)


class TestStability:
    def test_staleness_factor(self):
        assert staleness_factor(10, 5) == 1.0
        assert staleness_factor(10, 10) == 0.0
        assert staleness_factor(10, 1) == 9.0

    def test_staleness_factor_warns_on_remainder(self):
        with pytest.warns(UserWarning, match="does not divide"):
            assert staleness_factor(10, 3) == 3.0

    def test_constants(self):
        c1, c2 = stability_constants(0.1, 1.0, 10, 1.0)
        assert math.isclose(c1, 4.5) and math.isclose(c2, 225.0)

    def test_constants_full_budget(self):
        c1, c2 = stability_constants(0.2, 3.0, 10, 0.0)
        assert math.isclose(c1, 5.0 - 1.5) and math.isclose(c2, 25.0)

    def test_boundary(self):
        alpha = max_stable_lr(1.0, 10, 1.0)
        c1, _ = stability_constants(alpha, 1.0, 10, 1.0)
        assert abs(c1) < 1e-12

    def test_rate(self):
        assert math.isclose(convergence_rate(1.0, 4.5, 225.0), 0.96)

    @given(st.floats(0.01, 1.5), st.floats(0.1, 1.0))
    def test_full_budget_rate_is_pl_gd(self, alpha_scale, mu_frac):
        L = 1.0
        alpha = alpha_scale  # below 2/L
        mu = mu_frac * L
        c1, c2 = stability_constants(alpha, L, 16, 0.0)
        if c1 <= 0:
            return
        try:
            rate = convergence_rate(mu, c1, c2)
        except UnstableConfigError:
            return
        assert math.isclose(rate, 1 - 2 * mu * alpha * (1 - L * alpha / 2), rel_tol=1e-12, abs_tol=1e-12)

    def test_zero_c1_flagged(self):
        with pytest.warns(UserWarning):
            assert convergence_rate(1.0, 0.0, 1.0) == 1.0

    @pytest.mark.parametrize("c1, c2", [(-1.0, 1.0), (1.0, 0.0)])
    def test_unstable(self, c1, c2):
        with pytest.raises(UnstableConfigError):
            convergence_rate(1.0, c1, c2)

    def test_max_stable_lr(self):
        assert math.isclose(max_stable_lr(1.0, 64, 7.0), 2 / 449)
        assert max_stable_lr(1.0, 10, 0.0) == 2.0

    def test_max_stable_lr_increases_with_budget(self):
        n = 64
        values = []
        for b in (1, 2, 4, 8, 16, 32, 64):
            values.append(max_stable_lr(1.0, n, staleness_factor(n, b)))
        assert values == sorted(values)

    def test_report(self):
        r = stability_report(1e-3, 1.0, 0.5, 64, 8)
        assert r.stable and r.tau == 7.0
        assert math.isclose(r.rate, 1 - 2 * 0.5 * r.C1 / r.C2)
        assert not stability_report(1e-2, 1.0, 0.5, 64, 8).stable


class TestSmoothness:
    def test_quadratic_exact(self):
        f = Quadratic([1.0, 2.0])
        est = estimate_L_eps(f, vec([0.0, 0.0]), 1e-3, n_pairs=64)
        assert 0 < est.L_eps <= 2.0 + 1e-6
        assert est.L_eps > 1.99

    def test_linear_zero(self):
        est = estimate_L_eps(Linear(), vec(np.zeros(3)), 0.1, n_pairs=8)
        assert est.L_eps < 1e-9

    def test_oscillatory_matches_closed_form(self):
        f = OscillatoryQuadratic(0.5, 50.0, 4)
        for eps in (1e-3, 0.1, 1.0):
            est = estimate_L_eps(f, vec(np.zeros(4)), eps, n_pairs=64, pair_distance=1e-4)
            closed = f.smoothed_lipschitz(eps)
            assert closed / 2 <= est.L_eps <= closed * (1 + 1e-3)

    def test_monotone_in_samples(self):
        f = Rosenbrock(3)
        values = [estimate_L_eps(f, vec([0.5, 0.5, 0.5]), 0.01, n_pairs=k, seed=2).L_eps for k in (1, 4, 16)]
        assert values == sorted(values)

    @pytest.mark.parametrize("f", [Quadratic([0.5, 1.0, 3.0]), OscillatoryQuadratic(0.5, 50.0, 3), Rosenbrock(3)])
    def test_leps_below_l(self, f):
        for eps in (1e-3, 0.1):
            est = estimate_L_eps(f, vec([0.2, -0.1, 0.4]), eps, n_pairs=32, radius=0.5)
            assert est.L_eps <= est.L * (1 + 1e-6)

    def test_zero_pair_distance_rejected(self):
        with pytest.raises(ValueError):
            estimate_L_eps(Quadratic([1.0]), vec([0.0]), 0.1, pair_distance=0.0)

    def test_secant(self):
        assert secant_L_eps([1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 2.0]) == 0.5
        assert secant_L_eps([1.0], [0.0], [1.0], [1.0]) == 0.0


class TestDiagnostics:
    def test_grad_diff(self):
        assert grad_diff([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert grad_diff([1.0, 2.0], [1.0, -1.0]) == 3.0

    def test_grad_diff_length_mismatch(self):
        with pytest.raises(ValueError):
            grad_diff([1.0], [1.0, 2.0])

    def test_track_delta(self):
        assert track_delta([0.1, 0.3, 0.2], 3).delta == 0.3
        assert track_delta([0.1, 0.3, 0.2], 1).delta == 0.2
        assert track_delta([0.0, 0.0]).delta == 0.0
        assert track_delta([0.5, 0.1]).k == 2

    def test_track_delta_empty(self):
        with pytest.raises(ValueError):
            track_delta([])

    def test_moving_average(self):
        np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
        assert moving_average([1.0], 3).size == 0

    def test_loglinear_two_points_is_secant(self):
        fit = loglinear_fit([4, 16], [3.0, 1.0])
        assert math.isclose(fit.slope, (1.0 - 3.0) / (4 - 2))

    def test_staleness_zero_buffer(self):
        f = Quadratic([1.0, 2.0])
        opt = CoCD(vec([1.0, 1.0]), f, OptimizerConfig(budget=1, epsilon=1e-3))
        err = measure_staleness_error(opt.buffer, f, opt.store, 1e-3)
        assert math.isclose(err, math.hypot(1.0, 2.0), rel_tol=1e-9)

    def test_staleness_matches_reference(self):
        d = np.array([1.0, 2.0, 3.0, 4.0])
        x = np.array([1.0, -1.0, 0.5, 0.25])
        opt = CoCD(vec(x), Quadratic(d), OptimizerConfig(alpha=0.1, budget=1, epsilon=1e-3))
        g = np.zeros(4)
        for t in range(6):
            g[t % 4] = d[t % 4] * x[t % 4]
            expected = float(np.linalg.norm(g - d * x))
            tr = opt.step(verify=True)
            assert math.isclose(tr.staleness_error, expected, rel_tol=1e-8, abs_tol=1e-11)
            x = x - 0.1 * g

    def test_bound_holds_on_quadratic_run(self):
        n, budget = 32, 4
        d = np.linspace(0.5, 2.0, n)
        f = Quadratic(d)
        opt = CoCD(f.init_store(0), f, OptimizerConfig(alpha=0.05, budget=budget, epsilon=1e-3))
        norms = []
        for t in range(1, 60):
            tr = opt.step(verify=True)
            if t >= n // budget:
                delta = track_delta(norms, n // budget).delta
                assert tr.staleness_error <= error_bound(n, budget, 2 * d.max(), delta)
            norms.append(tr.step_norm)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert stability_report(0.05, d.max(), d.min(), n, budget).max_alpha > 0
