"""Latent variable models: log-joints, gradients, local factors and simulators.

Parameters are laid out as ``theta = (b_1, ..., b_n, theta_G)`` with scalar
latents. Every density routine is batched over leading axes of ``theta``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import betaln, expit, gammaln, log_expit

from lvboost.sparse_chol import HIERARCHICAL, MARKOV, BlockPattern

LOG_2PI = float(np.log(2 * np.pi))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _bernoulli_logit_terms(y, eta, mask):
    """Summed Bernoulli log-likelihood over the last two axes and the residual ``y - expit(eta)``.

    Written with in-place operations; this is the inner loop of the panel model.
    """
    e = np.abs(eta)
    np.negative(e, out=e)
    np.exp(e, out=e)
    np.log1p(e, out=e)
    e += np.maximum(eta, 0.0)
    np.subtract(y * eta, e, out=e)
    resid = np.multiply(eta, 0.5)
    np.tanh(resid, out=resid)
    resid *= -0.5
    resid += y - 0.5
    if mask is not None:
        e *= mask
        resid *= mask
    return e.sum(axis=(-2, -1)), resid


# ---------------------------------------------------------------------------
# priors

@dataclass(frozen=True)
class NormalPrior:
    mean: float = 0.0
    var: float = 1.0
    kind = "normal"

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError("variance must be positive")

    def logpdf(self, x):
        return -0.5 * (LOG_2PI + np.log(self.var) + (x - self.mean) ** 2 / self.var)

    def grad(self, x):
        return -(x - self.mean) / self.var

    def sample(self, rng, size):
        return self.mean + np.sqrt(self.var) * rng.standard_normal(size)

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean, "var": self.var}


@dataclass(frozen=True)
class MixtureNormalPrior:
    """``w N(mu1, var1) + (1 - w) N(mu2, var2)``."""

    w: float = 0.5
    mu1: float = -2.0
    var1: float = 0.01
    mu2: float = 2.0
    var2: float = 0.01
    kind = "mixture_normal"

    def __post_init__(self):
        if not 0 < self.w < 1:
            raise ValueError("mixture weight must lie in (0, 1)")
        if not (self.var1 > 0 and self.var2 > 0):
            raise ValueError("variances must be positive")

    def _parts(self, x):
        a = np.log(self.w) - 0.5 * (LOG_2PI + np.log(self.var1) + (x - self.mu1) ** 2 / self.var1)
        b = np.log1p(-self.w) - 0.5 * (LOG_2PI + np.log(self.var2) + (x - self.mu2) ** 2 / self.var2)
        return a, b

    def logpdf(self, x):
        return np.logaddexp(*self._parts(x))

    def grad(self, x):
        a, b = self._parts(x)
        r1 = expit(a - b)
        return -r1 * (x - self.mu1) / self.var1 - (1 - r1) * (x - self.mu2) / self.var2

    def sample(self, rng, size):
        first = rng.random(size) < self.w
        z = rng.standard_normal(size)
        return np.where(first, self.mu1 + np.sqrt(self.var1) * z, self.mu2 + np.sqrt(self.var2) * z)

    def to_dict(self):
        return {"kind": self.kind, "w": self.w, "mu1": self.mu1, "var1": self.var1,
                "mu2": self.mu2, "var2": self.var2}


@dataclass(frozen=True)
class StudentTPrior:
    """Location-scale Student-t with scale ``sqrt(var)`` and ``df`` degrees of freedom."""

    mean: float = 0.0
    var: float = 0.01
    df: float = 3.0
    kind = "student_t"

    def __post_init__(self):
        if not (self.var > 0 and self.df > 0):
            raise ValueError("var and df must be positive")

    def logpdf(self, x):
        nu = self.df
        return (gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi * self.var)
                - 0.5 * (nu + 1) * np.log1p((x - self.mean) ** 2 / (nu * self.var)))

    def grad(self, x):
        r = x - self.mean
        return -(self.df + 1) * r / (self.df * self.var + r * r)

    def sample(self, rng, size):
        return self.mean + np.sqrt(self.var) * rng.standard_t(self.df, size)

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean, "var": self.var, "df": self.df}


PRIOR_KINDS = {"normal": NormalPrior, "mixture_normal": MixtureNormalPrior, "student_t": StudentTPrior}


def prior_from_dict(data: dict):
    data = dict(data)
    kind = data.pop("kind")
    if kind not in PRIOR_KINDS:
        raise ValueError(f"unknown prior kind {kind!r}")
    return PRIOR_KINDS[kind](**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class PriorSet:
    """One prior per latent position, evaluated elementwise over the last axis."""

    priors: tuple

    @cached_property
    def groups(self):
        out = {}
        for i, p in enumerate(self.priors):
            out.setdefault(p, []).append(i)
        return [(p, np.array(ix)) for p, ix in out.items()]

    def __len__(self):
        return len(self.priors)

    def _apply(self, name, x):
        x = np.asarray(x, dtype=float)
        if len(self.groups) == 1:
            return getattr(self.groups[0][0], name)(x)
        out = np.empty_like(x)
        for p, ix in self.groups:
            out[..., ix] = getattr(p, name)(x[..., ix])
        return out

    def logpdf(self, x):
        return self._apply("logpdf", x)

    def grad(self, x):
        return self._apply("grad", x)

    def sample(self, rng):
        out = np.empty(len(self.priors))
        for p, ix in self.groups:
            out[ix] = p.sample(rng, ix.size)
        return out


def planted_priors(n: int, planted, planted_prior, default_prior) -> PriorSet:
    planted = set(int(i) for i in planted)
    if any(not 0 <= i < n for i in planted):
        raise ValueError("planted index out of range")
    return PriorSet(tuple(planted_prior if i in planted else default_prior for i in range(n)))


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True, eq=False)
class PanelData:
    """Binary or real panel outcomes ``y[i, t]`` with covariates ``X[i, t, :]``."""

    y: np.ndarray
    X: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        mask = np.ones(y.shape, bool) if self.mask is None else np.asarray(self.mask, bool)
        if y.ndim != 2 or X.shape[:2] != y.shape or mask.shape != y.shape:
            raise ValueError("panel arrays have inconsistent shapes")
        object.__setattr__(self, "y", np.where(mask, y, 0.0))
        object.__setattr__(self, "X", np.where(mask[..., None], X, 0.0))
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @cached_property
    def complete(self) -> bool:
        return bool(self.mask.all())

    @property
    def p(self) -> int:
        return self.X.shape[2]


@dataclass(frozen=True, eq=False)
class SeriesData:
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size


# ---------------------------------------------------------------------------
# model base classes

def _check_theta(theta, d):
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != d:
        raise ValueError(f"theta has length {theta.shape[-1]}, expected {d}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return theta


class LatentModel:
    """Shared plumbing: ``log_h = log p(y | theta) + log p(theta)``."""

    n: int
    global_dim: int
    kind: str

    @property
    def pattern(self) -> BlockPattern:
        return BlockPattern(self.kind, (1,) * self.n, self.global_dim)

    def split(self, theta):
        return theta[..., : self.n], theta[..., self.n:]

    def log_h(self, data, theta):
        return self.log_h_and_grad(data, theta)[0]

    def grad_log_h(self, data, theta):
        return self.log_h_and_grad(data, theta)[1]

    def log_h_and_grad(self, data, theta):
        raise NotImplementedError

    def global_prior(self, theta_g):
        """Log prior of ``theta_G`` and its gradient."""
        raise NotImplementedError

    def initial_mean(self) -> np.ndarray:
        return np.zeros(self.n + self.global_dim)


class HierarchicalModel(LatentModel):
    kind = HIERARCHICAL

    def local_log_factors(self, data, b, theta_g):
        """``log p(b_i | theta_G) + log p(y_i | b_i, theta_G)`` for every ``i``, ``(..., n)``."""
        raise NotImplementedError


def _disturbance(b_prev, b, phi):
    """``b_i - phi b_{i-1}`` with the first position left as ``b_1``."""
    b = np.asarray(b, float)
    eta = b - phi * np.asarray(b_prev, float)
    eta[..., 0] = np.broadcast_to(b, eta.shape)[..., 0]
    return eta


class MarkovModel(LatentModel):
    kind = MARKOV

    def log_state(self, data, b_prev, b, theta_g):
        """``log p(b_i | b_{i-1}, theta_G)`` per position; position 0 ignores ``b_prev``."""
        raise NotImplementedError

    def log_emission(self, data, b, theta_g):
        """``log p(y_i | b_i, theta_G)`` per position."""
        raise NotImplementedError

    @staticmethod
    def lagged(b):
        return np.concatenate([np.zeros(b.shape[:-1] + (1,)), b[..., :-1]], axis=-1)


# ---------------------------------------------------------------------------
# random-effects logistic regression

@dataclass(frozen=True, eq=False)
class RandomEffectsLogistic(HierarchicalModel):
    """``y_it ~ Bernoulli(logistic(x_it' beta + b_i))`` with per-subject priors on ``b_i``."""

    priors: PriorSet
    p: int
    beta_var: float = 1.0

    @property
    def n(self):
        return len(self.priors)

    @property
    def global_dim(self):
        return self.p

    def _eta(self, data, b, beta):
        n, T, p = data.X.shape
        lin = beta @ data.X.reshape(n * T, p).T
        return lin.reshape(beta.shape[:-1] + (n, T)) + b[..., None]

    def local_log_factors(self, data, b, theta_g):
        eta = self._eta(data, np.asarray(b, float), np.asarray(theta_g, float))
        ll = np.sum(data.mask * (data.y * eta - _softplus(eta)), axis=-1)
        return self.priors.logpdf(b) + ll

    def global_prior(self, theta_g):
        lp = -0.5 * np.sum(LOG_2PI + np.log(self.beta_var) + theta_g**2 / self.beta_var, axis=-1)
        return lp, -theta_g / self.beta_var

    def log_h_and_grad(self, data, theta):
        theta = _check_theta(theta, self.n + self.p)
        b, beta = self.split(theta)
        eta = self._eta(data, b, beta)
        ll, resid = _bernoulli_logit_terms(data.y, eta, None if data.complete else data.mask)
        lg, gg = self.global_prior(beta)
        val = ll + np.sum(self.priors.logpdf(b), axis=-1) + lg
        gb = resid.sum(axis=-1) + self.priors.grad(b)
        n, T, p = data.X.shape
        gbeta = resid.reshape(resid.shape[:-2] + (n * T,)) @ data.X.reshape(n * T, p) + gg
        return val, np.concatenate([gb, gbeta], axis=-1)


# ---------------------------------------------------------------------------
# stochastic volatility

@dataclass(frozen=True, eq=False)
class StochasticVolatility(MarkovModel):
    """``y_i ~ N(0, exp(kappa + b_i))`` with ``b_i = phi b_{i-1} + eta_i``, ``phi = logistic(psi)``.

    ``kappa ~ N(0, kappa_var)`` and ``(phi + 1) / 2 ~ Beta(beta_a, beta_b)``; the
    density of ``psi`` carries the log-Jacobian of ``phi = logistic(psi)``.
    """

    priors: PriorSet
    kappa_var: float = 1.0
    beta_a: float = 20.0
    beta_b: float = 1.5
    global_dim = 2

    @property
    def n(self):
        return len(self.priors)

    @staticmethod
    def phi(psi):
        return expit(psi)

    def log_state(self, data, b_prev, b, theta_g):
        phi = self.phi(np.asarray(theta_g, float)[..., 1:2])
        return self.priors.logpdf(_disturbance(b_prev, b, phi))

    def log_emission(self, data, b, theta_g):
        s = np.asarray(theta_g, float)[..., 0:1] + b
        return -0.5 * (LOG_2PI + s + data.y**2 * np.exp(-s))

    def phi_prior_logpdf(self, phi):
        """Log density of ``phi`` implied by the Beta prior on ``(phi + 1) / 2``."""
        u = 0.5 * (1 + phi)
        return ((self.beta_a - 1) * np.log(u) + (self.beta_b - 1) * np.log1p(-u)
                - betaln(self.beta_a, self.beta_b) - np.log(2.0))

    def global_prior(self, theta_g):
        kappa, psi = theta_g[..., 0], theta_g[..., 1]
        phi = self.phi(psi)
        log_jac = log_expit(psi) + log_expit(-psi)
        lk = -0.5 * (LOG_2PI + np.log(self.kappa_var) + kappa**2 / self.kappa_var)
        lp = self.phi_prior_logpdf(phi) + log_jac
        dphi = phi * (1 - phi)
        gpsi = ((self.beta_a - 1) * dphi / (1 + phi) - (self.beta_b - 1) * phi + (1 - 2 * phi))
        return lk + lp, np.stack([-kappa / self.kappa_var, gpsi], axis=-1)

    def log_h_phi(self, data, b, kappa, phi):
        """Log-joint with ``phi`` itself as the parameter (no Jacobian term)."""
        theta_g = np.stack([np.asarray(kappa, float), np.log(phi) - np.log1p(-phi)], axis=-1)
        b = np.asarray(b, float)
        lk = -0.5 * (LOG_2PI + np.log(self.kappa_var) + np.asarray(kappa) ** 2 / self.kappa_var)
        return (np.sum(self.log_state(data, self.lagged(b), b, theta_g)
                       + self.log_emission(data, b, theta_g), axis=-1)
                + lk + self.phi_prior_logpdf(np.asarray(phi, float)))

    def log_h_and_grad(self, data, theta):
        theta = _check_theta(theta, self.n + 2)
        b, tg = self.split(theta)
        kappa, psi = tg[..., 0:1], tg[..., 1:2]
        phi = self.phi(psi)
        prev = self.lagged(b)
        eta = np.concatenate([b[..., :1], (b - phi * prev)[..., 1:]], axis=-1)
        s = kappa + b
        w = data.y**2 * np.exp(-s)
        emis = -0.5 * (LOG_2PI + s + w)
        lg, gg = self.global_prior(tg)
        val = np.sum(self.priors.logpdf(eta) + emis, axis=-1) + lg
        g = self.priors.grad(eta)
        demis = -0.5 + 0.5 * w
        gb = demis + g
        gb[..., :-1] -= phi * g[..., 1:]
        gk = demis.sum(axis=-1) + gg[..., 0]
        gpsi = -np.sum(g[..., 1:] * prev[..., 1:], axis=-1) * (phi * (1 - phi))[..., 0] + gg[..., 1]
        return val, np.concatenate([gb, gk[..., None], gpsi[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# time-varying logistic regression

@dataclass(frozen=True, eq=False)
class TimeVaryingLogistic(MarkovModel):
    """``y_i ~ Bernoulli(logistic(b_i))`` with ``b_i = phi b_{i-1} + eta_i``, ``b_0 = 0``.

    ``phi = logistic(psi)`` and ``psi ~ N(0, psi_var)``.
    """

    priors: PriorSet
    psi_var: float = 1.0
    global_dim = 1

    @property
    def n(self):
        return len(self.priors)

    def log_state(self, data, b_prev, b, theta_g):
        phi = expit(np.asarray(theta_g, float)[..., 0:1])
        return self.priors.logpdf(_disturbance(b_prev, b, phi))

    def log_emission(self, data, b, theta_g):
        return data.y * b - _softplus(b)

    def global_prior(self, theta_g):
        psi = theta_g[..., 0]
        lp = -0.5 * (LOG_2PI + np.log(self.psi_var) + psi**2 / self.psi_var)
        return lp, (-psi / self.psi_var)[..., None]

    def log_h_and_grad(self, data, theta):
        theta = _check_theta(theta, self.n + 1)
        b, tg = self.split(theta)
        phi = expit(tg[..., 0:1])
        prev = self.lagged(b)
        eta = b - phi * prev
        lg, gg = self.global_prior(tg)
        val = np.sum(self.priors.logpdf(eta) + data.y * b - _softplus(b), axis=-1) + lg
        g = self.priors.grad(eta)
        gb = data.y - expit(b) + g
        gb[..., :-1] -= phi * g[..., 1:]
        gpsi = -np.sum(g * prev, axis=-1) * (phi * (1 - phi))[..., 0] + gg[..., 0]
        return val, np.concatenate([gb, gpsi[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# conjugate Gaussian toys (exact posteriors available)

@dataclass(frozen=True, eq=False)
class GaussianRandomEffects(HierarchicalModel):
    """``y_ij ~ N(b_i + g, noise_var)``, ``b_i ~ N(b_mean, b_var)``, ``g ~ N(0, g_var)``.

    With ``with_global=False`` the shared effect ``g`` is dropped.
    """

    n_latent: int
    noise_var: float = 1.0
    b_mean: float = 0.0
    b_var: float = 1.0
    g_var: float = 1.0
    with_global: bool = True

    @property
    def n(self):
        return self.n_latent

    @property
    def global_dim(self):
        return int(self.with_global)

    def _g(self, theta_g):
        theta_g = np.asarray(theta_g, float)
        return theta_g[..., 0:1] if self.with_global else np.zeros(theta_g.shape[:-1] + (1,))

    def local_log_factors(self, data, b, theta_g):
        b = np.asarray(b, float)
        mu = (b + self._g(theta_g))[..., None]
        ll = -0.5 * np.sum(data.mask * (LOG_2PI + np.log(self.noise_var)
                                        + (data.y - mu) ** 2 / self.noise_var), axis=-1)
        lp = -0.5 * (LOG_2PI + np.log(self.b_var) + (b - self.b_mean) ** 2 / self.b_var)
        return lp + ll

    def global_prior(self, theta_g):
        if not self.with_global:
            return np.zeros(theta_g.shape[:-1]), np.zeros(theta_g.shape)
        g = theta_g[..., 0]
        return (-0.5 * (LOG_2PI + np.log(self.g_var) + g**2 / self.g_var),
                (-g / self.g_var)[..., None])

    def log_h_and_grad(self, data, theta):
        theta = _check_theta(theta, self.n + self.global_dim)
        b, tg = self.split(theta)
        lg, gg = self.global_prior(tg)
        val = np.sum(self.local_log_factors(data, b, tg), axis=-1) + lg
        resid = data.mask * (data.y - (b + self._g(tg))[..., None]) / self.noise_var
        gb = resid.sum(axis=-1) - (b - self.b_mean) / self.b_var
        grad = [gb]
        if self.with_global:
            grad.append(resid.sum(axis=(-2, -1))[..., None] + gg)
        return val, np.concatenate(grad, axis=-1)

    def exact_posterior(self, data):
        """Posterior mean and precision matrix."""
        n, d = self.n, self.n + self.global_dim
        T = data.mask.sum(axis=1)
        ysum = np.sum(data.mask * data.y, axis=1)
        P = np.zeros((d, d))
        h = np.zeros(d)
        P[np.arange(n), np.arange(n)] = 1 / self.b_var + T / self.noise_var
        h[:n] = self.b_mean / self.b_var + ysum / self.noise_var
        if self.with_global:
            P[n, :n] = P[:n, n] = T / self.noise_var
            P[n, n] = 1 / self.g_var + T.sum() / self.noise_var
            h[n] = ysum.sum() / self.noise_var
        return np.linalg.solve(P, h), P


@dataclass(frozen=True, eq=False)
class LinearGaussianStateSpace(MarkovModel):
    """``y_i ~ N(kappa + b_i, obs_var)``, ``b_i = phi b_{i-1} + eta_i`` with known ``phi``.

    ``b_1 ~ N(0, init_var)``, ``eta_i ~ N(0, state_var)``, ``kappa ~ N(0, kappa_var)``.
    """

    n_latent: int
    phi_value: float = 0.8
    state_var: float = 0.5
    init_var: float = 1.0
    obs_var: float = 0.5
    kappa_var: float = 1.0
    global_dim = 1

    @property
    def n(self):
        return self.n_latent

    def _state_var(self):
        v = np.full(self.n, self.state_var)
        v[0] = self.init_var
        return v

    def log_state(self, data, b_prev, b, theta_g):
        eta = _disturbance(b_prev, b, self.phi_value)
        v = self._state_var()
        return -0.5 * (LOG_2PI + np.log(v) + eta**2 / v)

    def log_emission(self, data, b, theta_g):
        mu = np.asarray(theta_g, float)[..., 0:1] + b
        return -0.5 * (LOG_2PI + np.log(self.obs_var) + (data.y - mu) ** 2 / self.obs_var)

    def global_prior(self, theta_g):
        k = theta_g[..., 0]
        return (-0.5 * (LOG_2PI + np.log(self.kappa_var) + k**2 / self.kappa_var),
                (-k / self.kappa_var)[..., None])

    def log_h_and_grad(self, data, theta):
        theta = _check_theta(theta, self.n + 1)
        b, tg = self.split(theta)
        prev = self.lagged(b)
        lg, gg = self.global_prior(tg)
        val = np.sum(self.log_state(data, prev, b, tg) + self.log_emission(data, b, tg), axis=-1) + lg
        eta = b - self.phi_value * prev
        eta[..., 0] = b[..., 0]
        g = -eta / self._state_var()
        r = (data.y - tg[..., 0:1] - b) / self.obs_var
        gb = r + g
        gb[..., :-1] -= self.phi_value * g[..., 1:]
        return val, np.concatenate([gb, (r.sum(axis=-1))[..., None] + gg], axis=-1)

    def exact_posterior(self, data):
        n = self.n
        v = self._state_var()
        # state prior precision via D = I - phi * shift, Q = D' V^{-1} D
        D = np.eye(n) - self.phi_value * np.eye(n, k=-1)
        P = np.zeros((n + 1, n + 1))
        P[:n, :n] = D.T @ np.diag(1 / v) @ D + np.eye(n) / self.obs_var
        P[:n, n] = P[n, :n] = 1 / self.obs_var
        P[n, n] = 1 / self.kappa_var + n / self.obs_var
        h = np.concatenate([data.y / self.obs_var, [data.y.sum() / self.obs_var]])
        return np.linalg.solve(P, h), P


# ---------------------------------------------------------------------------
# single-latent accessors

def local_factor_log_hier(model, data, i: int, b_i: float, theta_g) -> float:
    """``log p(b_i | theta_G) + log p(y_i | b_i, theta_G)`` for one latent."""
    if model.kind != HIERARCHICAL:
        raise ValueError("local factors need a hierarchical model")
    if not 0 <= i < model.n:
        raise IndexError(f"latent index {i} out of range")
    b = np.zeros(model.n)
    b[i] = b_i
    return float(model.local_log_factors(data, b, np.asarray(theta_g, float))[i])


def markov_factors_log(model, data, i: int, b_prev, b_i: float, theta_g):
    """``(log p(b_i | b_{i-1}, theta_G), log p(y_i | b_i, theta_G))`` for one position."""
    if model.kind != MARKOV:
        raise ValueError("markov factors need a markov model")
    if not 0 <= i < model.n:
        raise IndexError(f"latent index {i} out of range")
    b = np.zeros(model.n)
    prev = np.zeros(model.n)
    b[i] = b_i
    if i > 0:
        prev[i] = b_prev
    tg = np.asarray(theta_g, float)
    return (float(model.log_state(data, prev, b, tg)[i]),
            float(model.log_emission(data, b, tg)[i]))


# ---------------------------------------------------------------------------
# configuration and simulation

MODEL_KINDS = ("random_effects_logistic", "stochastic_volatility", "time_varying_logistic",
               "gaussian_random_effects", "linear_gaussian_state_space")


@dataclass(frozen=True)
class ModelConfig:
    """Model family, size, priors and the ground truth used when simulating."""

    kind: str
    n: int
    T: int = 7
    p: int = 8
    planted: tuple = ()
    planted_prior: object = field(default_factory=MixtureNormalPrior)
    default_prior: object = field(default_factory=NormalPrior)
    beta: tuple | None = None
    beta_scale: float = 0.5
    kappa: float = 0.0
    phi: float = 0.95
    fixed_latent: float | None = None
    noise_var: float = 1.0
    b_mean: float = 0.0
    b_var: float = 1.0
    g_var: float = 1.0
    with_global: bool = True
    g: float = 0.0
    state_var: float = 0.5
    obs_var: float = 0.5

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n < 0 or self.T < 0 or self.p < 1:
            raise ValueError("sizes must be non-negative (p positive)")
        object.__setattr__(self, "planted", tuple(int(i) for i in self.planted))

    def priors(self) -> PriorSet:
        return planted_priors(self.n, self.planted, self.planted_prior, self.default_prior)

    def build(self):
        if self.kind == "random_effects_logistic":
            return RandomEffectsLogistic(self.priors(), self.p)
        if self.kind == "stochastic_volatility":
            return StochasticVolatility(self.priors())
        if self.kind == "time_varying_logistic":
            return TimeVaryingLogistic(self.priors())
        if self.kind == "gaussian_random_effects":
            return GaussianRandomEffects(self.n, self.noise_var, self.b_mean, self.b_var,
                                         self.g_var, self.with_global)
        return LinearGaussianStateSpace(self.n, self.phi, self.state_var, 1.0, self.obs_var)


def _ar_path(priors: PriorSet, phi: float, rng) -> np.ndarray:
    eta = priors.sample(rng)
    b = np.empty_like(eta)
    prev = 0.0
    for i, e in enumerate(eta):
        prev = phi * prev + e
        b[i] = prev
    return b


def simulate(config: ModelConfig, rng: np.random.Generator):
    """Draw a synthetic dataset; returns ``(data, true_theta)``."""
    n = config.n
    if config.kind == "random_effects_logistic":
        p, T = config.p, config.T
        X = np.concatenate([np.ones((n, T, 1)), rng.standard_normal((n, T, p - 1))], axis=2)
        beta = (np.asarray(config.beta, float) if config.beta is not None
                else config.beta_scale * rng.standard_normal(p))
        b = config.priors().sample(rng) if config.fixed_latent is None else np.full(n, config.fixed_latent)
        eta = X @ beta + b[:, None]
        y = (rng.random((n, T)) < expit(eta)).astype(float)
        return PanelData(y, X), np.concatenate([b, beta])
    if config.kind == "stochastic_volatility":
        b = _ar_path(config.priors(), config.phi, rng)
        y = np.exp(0.5 * (config.kappa + b)) * rng.standard_normal(n)
        return SeriesData(y), np.concatenate([b, [config.kappa, np.log(config.phi / (1 - config.phi))]])
    if config.kind == "time_varying_logistic":
        b = _ar_path(config.priors(), config.phi, rng)
        y = (rng.random(n) < expit(b)).astype(float)
        return SeriesData(y), np.concatenate([b, [np.log(config.phi / (1 - config.phi))]])
    if config.kind == "gaussian_random_effects":
        b = config.b_mean + np.sqrt(config.b_var) * rng.standard_normal(n)
        g = config.g if config.with_global else 0.0
        y = (b + g)[:, None] + np.sqrt(config.noise_var) * rng.standard_normal((n, config.T))
        truth = np.concatenate([b, [g]]) if config.with_global else b
        return PanelData(y, np.ones((n, config.T, 1))), truth
    b = _ar_path(PriorSet((NormalPrior(0.0, 1.0),) + (NormalPrior(0.0, config.state_var),) * (n - 1))
                 if n else PriorSet(()), config.phi, rng)
    y = config.kappa + b + np.sqrt(config.obs_var) * rng.standard_normal(n)
    return SeriesData(y), np.concatenate([b, [config.kappa]])


# ---------------------------------------------------------------------------
# CSV input and output

def _fmt(x: float) -> str:
    return repr(float(x))


def write_panel_csv(path, data: PanelData) -> int:
    """Write long-format rows ``subject_id, time, y, x_1..x_p``; returns the row count."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "time", "y"] + [f"x_{j + 1}" for j in range(data.p)])
        for i in range(data.n):
            for t in range(data.y.shape[1]):
                if data.mask[i, t]:
                    w.writerow([i, t] + [_fmt(data.y[i, t])] + [_fmt(v) for v in data.X[i, t]])
                    rows += 1
    return rows


def read_panel_csv(path) -> PanelData:
    """Read long-format panel data; subjects keep their order of first appearance."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["subject_id", "time", "y"] or len(header) < 4:
            raise ValueError(f"{path}: row 1: header must be subject_id,time,y,x_1..x_p")
        p = len(header) - 3
        records: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 3:
                raise ValueError(f"{path}: row {lineno}: expected {p + 3} fields, got {len(row)}")
            try:
                t = float(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{path}: row {lineno}: non-finite value")
            records.setdefault(row[0], []).append((t, vals))
    n = len(records)
    T = max((len(v) for v in records.values()), default=0)
    y, X, mask = np.zeros((n, T)), np.zeros((n, T, p)), np.zeros((n, T), bool)
    for i, obs in enumerate(records.values()):
        obs.sort(key=lambda r: r[0])
        for t, (_, vals) in enumerate(obs):
            y[i, t], X[i, t], mask[i, t] = vals[0], vals[1:], True
    if n == 0:
        X = np.zeros((0, 0, p))
    return PanelData(y, X, mask)


def write_series_csv(path, data: SeriesData) -> int:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y"])
        for v in data.y:
            w.writerow([_fmt(v)])
    return data.n


def read_series_csv(path) -> SeriesData:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["y"]:
            raise ValueError(f"{path}: row 1: header must be the single column y")
        ys = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1:
                raise ValueError(f"{path}: row {lineno}: expected 1 field, got {len(row)}")
            try:
                v = float(row[0])
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
            if not np.isfinite(v):
                raise ValueError(f"{path}: row {lineno}: non-finite value")
            ys.append(v)
    return SeriesData(np.array(ys))


def log_sum_local(model, data, theta) -> np.ndarray:
    """Reassemble ``log_h`` from local factors (a factorization check)."""
    b, tg = model.split(np.asarray(theta, float))
    lg = model.global_prior(tg)[0]
    if model.kind == HIERARCHICAL:
        return np.sum(model.local_log_factors(data, b, tg), axis=-1) + lg
    return np.sum(model.log_state(data, model.lagged(b), b, tg)
                  + model.log_emission(data, b, tg), axis=-1) + lg

