import numpy as np
import pytest
from scipy.special import logsumexp

from lvboost import mixture as mx
from lvboost import sparse_chol as sc
from lvboost.mixture import Component, MixtureApproximation
from lvboost.models import GaussianRandomEffects, PanelData
from lvboost.optimizer import (
    AdamState, ElboTrace, FreeMask, NonFiniteError, SGAConfig, SGADivergence, adam_step,
    controlvariate_grad_L, elbo_estimate, natgrad_mean_direction, natgrad_mean_update,
    natgrad_weight_direction, natgrad_weight_update, reparam_grad_L, run_sga, score_terms,
)
from lvboost.sparse_chol import HIERARCHICAL, MARKOV, BlockPattern, SparseCholeskyFactor
from oracles import random_factor, random_mean
from fixtures import (
    GaussianTarget, conjugate_d1, conjugate_d3, model_cases, perturbed_mixture,
)


class TestAdam:
    def test_first_step(self):
        g = np.array([0.5, -2.0, 1e-3])
        st, delta = adam_step(AdamState.zeros(3, alpha=0.01), g)
        np.testing.assert_allclose(delta, 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-14)
        assert st.t == 1

    def test_zero_gradient(self):
        st = AdamState.zeros(2, alpha=0.1)
        for _ in range(10):
            st, delta = adam_step(st, np.zeros(2))
            assert np.all(delta == 0)

    def test_transcription(self, rng):
        grads = rng.normal(size=(100, 4))
        st = AdamState.zeros(4, alpha=0.003)
        m = [0.0] * 4
        v = [0.0] * 4
        for t, g in enumerate(grads, start=1):
            st, delta = adam_step(st, g)
            for i in range(4):
                m[i] = 0.9 * m[i] + 0.1 * g[i]
                v[i] = 0.99 * v[i] + 0.01 * g[i] ** 2
                mh = m[i] / (1 - 0.9**t)
                vh = v[i] / (1 - 0.99**t)
                assert abs(delta[i] - 0.003 * mh / (vh**0.5 + 1e-8)) <= 1e-14

    def test_defaults(self):
        st = AdamState.zeros(1, alpha=0.01)
        assert (st.tau1, st.tau2, st.eps) == (0.9, 0.99, 1e-8)
        cfg = SGAConfig()
        assert (cfg.alpha_mu, cfg.alpha_ell, cfg.alpha_pi) == (0.01, 0.001, 0.001)
        assert (cfg.iterations, cfg.S) == (5000, 100)


class TestElbo:
    def test_exact_fit_zero(self, rng):
        target = GaussianTarget.random(rng, BlockPattern(HIERARCHICAL, (1, 1), 1))
        mix = MixtureApproximation.single(target.component)
        est = elbo_estimate(mix, target, None, 10_000, rng)
        assert abs(est.value) <= 3 * max(est.std_error, 1e-15)
        assert est.value == pytest.approx(0.0, abs=1e-10)

    def test_constant_offset(self, rng):
        target = GaussianTarget.random(rng, BlockPattern(HIERARCHICAL, (1,), 1), log_const=2.5)
        est = elbo_estimate(MixtureApproximation.single(target.component), target, None, 100, rng)
        assert est.value == pytest.approx(2.5, abs=1e-10)

    def test_two_component_quadrature(self, rng):
        p = BlockPattern(HIERARCHICAL, (1,), 0)
        comps = (Component.standard(p, [-1.0]), Component(sc.PartitionedMean(p, [1.5]), SparseCholeskyFactor(p, [0.4])))
        mix = MixtureApproximation.from_weights([0.3, 0.7], comps)
        target = GaussianTarget(Component(sc.PartitionedMean(p, [0.5]), SparseCholeskyFactor(p, [-0.3])))
        x = np.linspace(-15, 15, 200001)[:, None]
        lq = mx.logpdf(mix, x)
        ref = np.trapezoid(np.exp(lq) * (target.log_h(None, x) - lq), x[:, 0])
        est = elbo_estimate(mix, target, None, 20_000, rng)
        assert abs(est.value - ref) <= 3 * est.std_error

    def test_non_finite(self, rng):
        class Bad(GaussianTarget):
            def log_h_and_grad(self, data, theta):
                v, g = super().log_h_and_grad(data, theta)
                return np.full_like(v, -np.inf), g

        t = Bad.random(rng, BlockPattern(HIERARCHICAL, (1,), 1))
        with pytest.raises(NonFiniteError) as err:
            elbo_estimate(MixtureApproximation.single(t.component), t, None, 10, rng)
        assert err.value.theta.shape == (2,)


def split_pair(rng, pattern):
    c = Component(random_mean(rng, pattern), random_factor(rng, pattern))
    return mx.split_component(MixtureApproximation.single(c), 0.5)


class TestNaturalGradients:
    def test_weight_zero_for_perfect_fit(self, rng):
        mix = perturbed_mixture(rng, BlockPattern(HIERARCHICAL, (1, 1), 1), K=3)
        th, _, _ = mx.sample(mix, rng, 20)
        direction = natgrad_weight_direction(mix, th, mx.logpdf(mix, th))
        assert np.all(direction == 0)
        np.testing.assert_array_equal(natgrad_weight_update(mix, th, mx.logpdf(mix, th), 0.1), mix.log_ratios)

    def test_weight_zero_for_equal_split(self, rng):
        mix = split_pair(rng, BlockPattern(HIERARCHICAL, (1,), 1))
        th, _, _ = mx.sample(mix, rng, 1)
        assert natgrad_weight_direction(mix, th, np.array([3.7])) == pytest.approx(0.0, abs=1e-15)

    def test_weight_hand_computed(self):
        p = BlockPattern(HIERARCHICAL, (1,), 0)
        c1 = Component(sc.PartitionedMean(p, [0.0]), SparseCholeskyFactor(p, [0.0]))
        c2 = Component(sc.PartitionedMean(p, [1.0]), SparseCholeskyFactor(p, [np.log(2.0)]))
        mix = MixtureApproximation.from_weights([0.25, 0.75], (c1, c2))
        x, log_h = 0.4, -1.3
        n1 = np.exp(-0.5 * x**2) / np.sqrt(2 * np.pi)
        n2 = 2.0 * np.exp(-0.5 * 4.0 * (x - 1.0) ** 2) / np.sqrt(2 * np.pi)
        q = 0.25 * n1 + 0.75 * n2
        expected = (n1 / q - n2 / q) * (log_h - np.log(q))
        got = natgrad_weight_direction(mix, np.array([[x]]), np.array([log_h]))
        assert got[0] == pytest.approx(expected, abs=1e-14)
        new = natgrad_weight_update(mix, np.array([[x]]), np.array([log_h]), 0.1)
        assert new[0] == pytest.approx(np.log(0.25 / 0.75) + 0.1 * expected, abs=1e-14)

    def test_mean_zero_when_gradients_match(self, rng):
        mix = split_pair(rng, BlockPattern(MARKOV, (1, 1), 1))
        th, _, _ = mx.sample(mix, rng, 5)
        g = rng.normal(size=th.shape)
        assert np.all(natgrad_mean_direction(mix, th, g, g) == 0)

    def test_mean_identity_precision(self, rng):
        p = BlockPattern(HIERARCHICAL, (1, 1), 1)
        mix = MixtureApproximation.single(Component.standard(p))
        th = rng.normal(size=(1, 3))
        glh, glq = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        step = np.array([0.1, 0.2, 0.3])
        new = natgrad_mean_update(mix, th, glh, glq, step)
        # delta_{K+1} = N/q = 1 for a single component
        np.testing.assert_allclose(new, step * (glh - glq)[0], atol=1e-15)

    def test_mean_mask(self, rng):
        mix = split_pair(rng, BlockPattern(HIERARCHICAL, (1, 1), 1))
        th, _, _ = mx.sample(mix, rng, 4)
        mask = np.array([True, False, True])
        new = natgrad_mean_update(mix, th, rng.normal(size=(4, 3)) * 1e3, np.zeros((4, 3)), 0.5, mask)
        assert new[1] == mix.components[-1].mean.values[1]

    def test_mean_non_finite(self, rng):
        mix = split_pair(rng, BlockPattern(HIERARCHICAL, (1,), 1))
        with pytest.raises(FloatingPointError):
            natgrad_mean_direction(mix, np.zeros((1, 2)), np.array([[np.nan, 0]]), np.zeros((1, 2)))


def _integrand(mix, model, data, eps, packed, base_mix):
    """pi_{K+1} * mean(log h - log q) with q frozen at ``base_mix``, theta moved via ``packed``."""
    comp = mix.components[-1]
    th = sc.sample(comp.mean, comp.factor.with_packed(packed), eps)
    return mix.weights[-1] * np.mean(model.log_h(data, th) - mx.logpdf(base_mix, th))


class TestReparamGradient:
    @pytest.mark.parametrize("case", range(len(model_cases())))
    def test_finite_differences(self, rng, case):
        model, data, theta0 = model_cases()[case]
        for _ in range(4):
            mix = perturbed_mixture(rng, model.pattern, K=2, center=theta0, scale=0.05)
            eps = rng.normal(size=(2, model.pattern.d))
            g = reparam_grad_L(mix, eps, model, data)
            base = mix.components[-1].factor.packed
            h = 1e-6
            for j in range(base.size):
                e = np.zeros(base.size)
                e[j] = h
                fd = (_integrand(mix, model, data, eps, base + e, mix)
                      - _integrand(mix, model, data, eps, base - e, mix)) / (2 * h)
                assert abs(g[j] - fd) <= 1e-5 * max(1.0, abs(fd)), (j, g[j], fd)

    def test_stationary_for_exact_fit(self, rng):
        target = GaussianTarget.random(rng, BlockPattern(MARKOV, (1, 1), 1))
        mix = mx.split_component(MixtureApproximation.single(target.component), 0.4)
        target = GaussianTarget(target.component, 0.0, mix)
        eps = rng.normal(size=(10_000, 3))
        g = reparam_grad_L(mix, eps, target, None)
        assert np.all(g == 0)

    def test_mask(self, rng):
        model, data, theta0 = model_cases()[0]
        mix = perturbed_mixture(rng, model.pattern, K=2, center=theta0)
        mask = np.zeros(sc.layout(model.pattern).size, bool)
        mask[::2] = True
        g = reparam_grad_L(mix, rng.normal(size=(3, model.pattern.d)), model, data, mask)
        assert np.all(g[~mask] == 0)


class TestControlVariates:
    def test_perfect_control_variate(self, rng):
        target = GaussianTarget.random(rng, BlockPattern(HIERARCHICAL, (1,), 1))
        mix = split_pair(rng, target.component.pattern)
        target = GaussianTarget(target.component, log_const=1.7, mixture=mix)
        th, _, _ = mx.sample(mix, rng, 50)
        P = sc.layout(mix.pattern).size
        g, _ = controlvariate_grad_L(mix, th, target, None, np.full(P, 1.7))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_plain_score_function(self, rng):
        model, data, theta0 = model_cases()[0]
        mix = perturbed_mixture(rng, model.pattern, K=2, center=theta0)
        th, _, _ = mx.sample(mix, rng, 5)
        g, _ = controlvariate_grad_L(mix, th, model, data, None)
        # transcription: d/d ell log q via finite differences of the mixture density
        comp = mix.components[-1]
        f = model.log_h(data, th) - mx.logpdf(mix, th)
        ref = np.zeros_like(g)
        h = 1e-6
        for j in range(g.size):
            e = np.zeros(g.size)
            e[j] = h
            up = mix.with_component(1, comp.replace(packed=comp.factor.packed + e))
            dn = mix.with_component(1, comp.replace(packed=comp.factor.packed - e))
            score = (mx.logpdf(up, th) - mx.logpdf(dn, th)) / (2 * h)
            ref[j] = np.mean(f * score)
        np.testing.assert_allclose(g, ref, rtol=1e-5, atol=1e-6)

    def test_score_matches_finite_differences(self, rng):
        mix = perturbed_mixture(rng, BlockPattern(MARKOV, (1, 2), 1), K=2)
        th, _, _ = mx.sample(mix, rng, 3)
        s = score_terms(mix, th)
        comp = mix.components[-1]
        h = 1e-6
        for j in range(s.shape[1]):
            e = np.zeros(s.shape[1])
            e[j] = h
            up = mix.with_component(1, comp.replace(packed=comp.factor.packed + e))
            dn = mix.with_component(1, comp.replace(packed=comp.factor.packed - e))
            np.testing.assert_allclose(s[:, j], (mx.logpdf(up, th) - mx.logpdf(dn, th)) / (2 * h),
                                       rtol=1e-6, atol=1e-8)

    def test_zero_variance_coefficient(self, rng):
        target = GaussianTarget.random(rng, BlockPattern(HIERARCHICAL, (1,), 1))
        mix = MixtureApproximation.single(target.component)
        th = np.tile(mix.components[0].mean.values, (4, 1))
        _, coeffs = controlvariate_grad_L(mix, th, target, None)
        assert np.all(np.isfinite(coeffs))

    def test_needs_two_draws(self, rng):
        target = GaussianTarget.random(rng, BlockPattern(HIERARCHICAL, (1,), 1))
        with pytest.raises(ValueError):
            controlvariate_grad_L(MixtureApproximation.single(target.component), np.zeros((1, 2)), target, None)


class TestRunSGA:
    def test_weight_only(self, rng):
        model, data, theta0 = model_cases()[0]
        mix = perturbed_mixture(rng, model.pattern, K=2, center=theta0)
        p = model.pattern
        mask = FreeMask(np.zeros(p.d, bool), np.zeros(sc.layout(p).size, bool), True)
        out, _ = run_sga(mix, model, data, mask, SGAConfig(iterations=20, S=10), rng)
        for a, b in zip(mix.components, out.components):
            assert a.mean == b.mean and a.factor == b.factor
        assert not np.array_equal(out.log_ratios, mix.log_ratios)

    def test_masked_entries_bit_identical(self, rng):
        model, data, theta0 = model_cases()[1]
        mix = perturbed_mixture(rng, model.pattern, K=2, center=theta0)
        p = model.pattern
        mu = rng.random(p.d) < 0.5
        ell = rng.random(sc.layout(p).size) < 0.5
        out, _ = run_sga(mix, model, data, FreeMask(mu, ell), SGAConfig(iterations=30, S=5), rng)
        before, after = mix.components[-1], out.components[-1]
        assert np.array_equal(before.mean.values[~mu], after.mean.values[~mu])
        assert np.array_equal(before.factor.packed[~ell], after.factor.packed[~ell])
        assert out.components[0] is mix.components[0]

    def test_deterministic(self):
        model, data, theta0 = model_cases()[2]
        mix = perturbed_mixture(np.random.default_rng(1), model.pattern, K=2, center=theta0)
        runs = [run_sga(mix, model, data, FreeMask.full(model.pattern), SGAConfig(iterations=60, S=8),
                        np.random.default_rng(9)) for _ in range(2)]
        assert runs[0][1].rows == runs[1][1].rows
        assert np.array_equal(runs[0][0].components[-1].factor.packed, runs[1][0].components[-1].factor.packed)

    def test_all_weights_flag(self, rng):
        model, data, theta0 = model_cases()[0]
        mix = mx.split_component(perturbed_mixture(rng, model.pattern, K=2, center=theta0), 0.5)
        p = model.pattern
        none = FreeMask(np.zeros(p.d, bool), np.zeros(sc.layout(p).size, bool), True)
        pair, _ = run_sga(mix, model, data, none, SGAConfig(iterations=10, S=10), np.random.default_rng(0))
        assert np.isclose(np.sum(pair.weights[-2:]), np.sum(mix.weights[-2:]), atol=1e-12)
        assert pair.weights[0] == pytest.approx(mix.weights[0], abs=1e-14)
        every, _ = run_sga(mix, model, data, none, SGAConfig(iterations=10, S=10, optimize_all_weights=True),
                           np.random.default_rng(0))
        assert every.weights[0] != pytest.approx(mix.weights[0], abs=1e-9)

    def test_control_variate_estimator_runs(self, rng):
        model, data = conjugate_d1()
        mix = MixtureApproximation.single(Component.standard(model.pattern))
        out, tr = run_sga(mix, model, data, FreeMask.full(model.pattern),
                          SGAConfig(iterations=100, S=20, ell_estimator="control_variate"), rng)
        assert len(tr.rows) == 2

    def test_divergence_reports_iteration(self, rng):
        class Exploding(GaussianTarget):
            def log_h_and_grad(self, data, theta):
                v, g = super().log_h_and_grad(data, theta)
                return v, g * np.nan

        t = Exploding.random(rng, BlockPattern(HIERARCHICAL, (1,), 1))
        with pytest.raises(SGADivergence) as err:
            run_sga(MixtureApproximation.single(t.component), t, None, FreeMask.full(t.pattern),
                    SGAConfig(iterations=5, S=4), rng)
        assert err.value.iteration == 1 and err.value.parameter == "ell"

    def test_conjugate_d1(self, rng):
        model, data = conjugate_d1()
        mean, P = model.exact_posterior(data)
        sd = np.sqrt(np.diag(np.linalg.inv(P)))
        mix = MixtureApproximation.single(Component.standard(model.pattern))
        out, tr = run_sga(mix, model, data, FreeMask.full(model.pattern), SGAConfig(), rng)
        c = out.components[0]
        L = sc.to_dense(c.factor)
        fit_sd = np.sqrt(np.diag(np.linalg.inv(L @ L.T)))
        assert np.all(np.abs(c.mean.values - mean) <= 0.02 * np.abs(mean))
        assert np.all(np.abs(fit_sd - sd) <= 0.05 * sd)
        # smoothed trace is nondecreasing beyond the first 10% of iterations
        vals = tr.as_array()
        keep = vals[vals[:, 0] > 500, 1]
        smooth = np.convolve(keep, np.ones(20) / 20, mode="valid")
        assert np.all(np.diff(smooth) >= -3 * vals[-1, 2])

    def test_early_stop(self, rng):
        model, data = conjugate_d1()
        mix = MixtureApproximation.single(Component.standard(model.pattern))
        _, tr = run_sga(mix, model, data, FreeMask.full(model.pattern),
                        SGAConfig(iterations=5000, early_stop=True, early_tol=10.0, early_patience=2), rng)
        v = tr.as_array()[:, 1]
        assert tr.stopped_early and len(v) < 100
        assert v[-1] - v[-3] < 10.0
        assert all(v[j] - v[j - 2] >= 10.0 for j in range(2, len(v) - 1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SGAConfig(S=0)
        with pytest.raises(ValueError):
            SGAConfig(ell_estimator="nope")
        with pytest.raises(ValueError):
            FreeMask(np.zeros(2, bool), np.zeros(3, bool), False)
