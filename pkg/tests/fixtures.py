"""Shared targets and small problems for optimizer and boosting tests."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from lvboost import mixture as mx
from lvboost.mixture import Component, MixtureApproximation
from lvboost.models import (
    GaussianRandomEffects, HierarchicalModel, MixtureNormalPrior, ModelConfig, PanelData, simulate,
)
from lvboost.sparse_chol import PartitionedMean, SparseCholeskyFactor, to_dense
from oracles import random_factor, random_mean


@dataclass(frozen=True)
class GaussianTarget:
    """``log h = log_const + log q*`` for a Gaussian (or mixture) ``q*``."""

    component: Component
    log_const: float = 0.0
    mixture: MixtureApproximation | None = None

    @classmethod
    def random(cls, rng, pattern, log_const=0.0):
        return cls(Component(random_mean(rng, pattern), random_factor(rng, pattern)), log_const)

    @property
    def pattern(self):
        return self.component.pattern

    def _mix(self):
        return self.mixture if self.mixture is not None else MixtureApproximation.single(self.component)

    def log_h(self, data, theta):
        return self.log_h_and_grad(data, theta)[0]

    def log_h_and_grad(self, data, theta):
        lq, g, _ = mx.logpdf_and_grad(self._mix(), np.atleast_2d(theta))
        return lq + self.log_const, g


def perturbed_mixture(rng, pattern, K=2, center=None, scale=0.3):
    center = np.zeros(pattern.d) if center is None else np.asarray(center, float)
    comps = []
    for _ in range(K):
        mean = random_mean(rng, pattern, scale)
        comps.append(Component(mean.with_values(mean.values + center), random_factor(rng, pattern, 0.2, 0.2)))
    w = rng.dirichlet(np.full(K, 3.0))
    return MixtureApproximation.from_weights(w, tuple(comps))


def conjugate_d1():
    model = GaussianRandomEffects(1, noise_var=1.0, b_mean=0.0, b_var=4.0, with_global=False)
    y = np.array([[2.8, 3.1, 3.3, 2.6, 3.2]])
    return model, PanelData(y, np.ones(y.shape + (1,)))


def conjugate_d3():
    model = GaussianRandomEffects(2, noise_var=1.0, b_mean=2.0, b_var=1.0, g_var=1.0)
    y = np.array([[3.5, 4.1, 3.8, 4.4, 3.9], [2.9, 3.1, 3.4, 2.7, 3.0]])
    return model, PanelData(y, np.ones(y.shape + (1,)))


@lru_cache(maxsize=None)
def model_cases():
    """``(model, data, truth)`` for each model family on a small problem."""
    rng = np.random.default_rng(77)
    out = []
    for cfg in (ModelConfig("random_effects_logistic", n=3, T=5, p=3),
                ModelConfig("stochastic_volatility", n=4),
                ModelConfig("time_varying_logistic", n=4),
                ModelConfig("gaussian_random_effects", n=3, T=4),
                ModelConfig("linear_gaussian_state_space", n=4)):
        data, truth = simulate(cfg, rng)
        out.append((cfg.build(), data, truth))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class BimodalToy(HierarchicalModel):
    """Independent latents with a two-mode prior and no data; no global block."""

    n_latent: int = 1
    prior: MixtureNormalPrior = MixtureNormalPrior(0.5, -2.0, 0.25, 2.0, 0.25)
    global_dim = 0

    @property
    def n(self):
        return self.n_latent

    def local_log_factors(self, data, b, theta_g):
        return self.prior.logpdf(np.asarray(b, float))

    def log_h_and_grad(self, data, theta):
        theta = np.asarray(theta, float)
        return np.sum(self.prior.logpdf(theta), axis=-1), self.prior.grad(theta)


@dataclass(frozen=True, eq=False)
class Shifted:
    """Wraps a model and adds a constant to every local factor and to ``log h``."""

    model: object
    shift: float

    def __getattr__(self, name):
        return getattr(self.model, name)

    def local_log_factors(self, data, b, theta_g):
        return self.model.local_log_factors(data, b, theta_g) + self.shift

    def log_state(self, data, b_prev, b, theta_g):
        return self.model.log_state(data, b_prev, b, theta_g) + self.shift

    def log_h_and_grad(self, data, theta):
        v, g = self.model.log_h_and_grad(data, theta)
        return v + self.shift, g

    def log_h(self, data, theta):
        return self.log_h_and_grad(data, theta)[0]


def exact_component(model, data):
    """Single component equal to the exact Gaussian posterior of a conjugate toy."""
    mean, P = model.exact_posterior(data)
    L = np.linalg.cholesky(P)
    pattern = model.pattern
    factor = SparseCholeskyFactor.from_dense(pattern, L)
    assert np.allclose(to_dense(factor), L, atol=1e-12)
    return Component(PartitionedMean(pattern, mean), factor)
