"""Stochastic optimization of the newest mixture component.

Each iteration updates the packed factor of the last component with a
reparameterization gradient, then the split weight and the last mean with
natural-gradient directions. All three parameter groups go through ADAM.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_expit, logsumexp

from lvboost import mixture as mx
from lvboost import sparse_chol as sc
from lvboost.mixture import MixtureApproximation
from lvboost.sparse_chol import BlockPattern


# ---------------------------------------------------------------------------
# ADAM

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    tau1: float = 0.9
    tau2: float = 0.99
    alpha: float = 0.001
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.tau1 < 1 and 0 <= self.tau2 < 1):
            raise ValueError("decay rates must lie in [0, 1)")

    @classmethod
    def zeros(cls, size: int, alpha: float, tau1=0.9, tau2=0.99, eps=1e-8) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, tau1, tau2, alpha, eps)


def adam_step(state: AdamState, gradient) -> tuple[AdamState, np.ndarray]:
    """One ascent step; returns the new state and the step ``Delta`` to add."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != state.m.shape:
        raise ValueError("gradient length does not match the ADAM state")
    t = state.t + 1
    m = state.tau1 * state.m + (1 - state.tau1) * g
    v = state.tau2 * state.v + (1 - state.tau2) * g * g
    m_hat = m / (1 - state.tau1**t)
    v_hat = v / (1 - state.tau2**t)
    delta = state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), delta


# ---------------------------------------------------------------------------
# masks and estimates

@dataclass(frozen=True, eq=False)
class FreeMask:
    """Which entries of ``mu_{K+1}``, packed ``ell_{K+1}`` and the split weight move."""

    mu: np.ndarray
    ell: np.ndarray
    weight: bool = True

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=bool).copy()
        ell = np.asarray(self.ell, dtype=bool).copy()
        mu.setflags(write=False)
        ell.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "ell", ell)
        if not (mu.any() or ell.any() or self.weight):
            raise ValueError("mask leaves nothing free")

    @classmethod
    def full(cls, pattern: BlockPattern, weight: bool = True) -> "FreeMask":
        return cls(np.ones(pattern.d, bool), np.ones(sc.layout(pattern).size, bool), weight)

    def check(self, pattern: BlockPattern) -> None:
        if self.mu.shape != (pattern.d,) or self.ell.shape != (sc.layout(pattern).size,):
            raise ValueError("mask does not match the block pattern")


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    std_error: float
    S: int


class NonFiniteError(FloatingPointError):
    """Raised when a Monte Carlo summand is not finite; ``theta`` holds the offending draw."""

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class SGADivergence(FloatingPointError):
    def __init__(self, iteration: int, parameter: str):
        super().__init__(f"non-finite {parameter} at iteration {iteration}")
        self.iteration = iteration
        self.parameter = parameter


def _log_ratio_terms(mix, model, data, theta):
    logh = model.log_h(data, theta)
    logq = mx.logpdf(mix, theta)
    return logh - logq


def elbo_estimate(mix: MixtureApproximation, model, data, S: int, rng) -> ElboEstimate:
    """Monte Carlo mean and standard error of ``log h - log q`` under ``q``."""
    if S < 2:
        raise ValueError("S must be at least 2")
    theta, _, _ = mx.sample(mix, rng, S)
    f = _log_ratio_terms(mix, model, data, theta)
    bad = ~np.isfinite(f)
    if bad.any():
        raise NonFiniteError("non-finite ELBO summand", theta[np.argmax(bad)])
    return ElboEstimate(float(f.mean()), float(f.std(ddof=1) / np.sqrt(S)), S)


# ---------------------------------------------------------------------------
# natural-gradient directions

def natgrad_weight_direction(mix: MixtureApproximation, theta, log_h) -> np.ndarray:
    """Average of ``(delta_k - delta_{K+1}) (log h - log q)`` for ``k = 1..K``."""
    theta = np.atleast_2d(theta)
    logn = mx.component_logpdfs(mix, theta)
    logq = logsumexp(mix.log_weights + logn, axis=-1)
    delta = np.exp(logn - logq[:, None])
    f = np.asarray(log_h, float).reshape(-1) - logq
    return np.mean((delta[:, :-1] - delta[:, -1:]) * f[:, None], axis=0)


def natgrad_weight_update(mix: MixtureApproximation, theta, log_h, step) -> np.ndarray:
    """Updated log-ratios ``log(pi_k / pi_{K+1})`` (last entry stays 0)."""
    direction = natgrad_weight_direction(mix, theta, log_h)
    return np.concatenate([mix.log_ratios[:-1] + np.asarray(step) * direction, [0.0]])


def natgrad_mean_direction(mix: MixtureApproximation, theta, grad_log_h, grad_log_q) -> np.ndarray:
    """``Omega_{K+1}^{-1}`` times the average of ``delta_{K+1} (grad log h - grad log q)``."""
    glh, glq = np.atleast_2d(grad_log_h), np.atleast_2d(grad_log_q)
    if not (np.all(np.isfinite(glh)) and np.all(np.isfinite(glq))):
        raise FloatingPointError("non-finite gradient in the mean update")
    log_delta = mx.log_responsibilities(mix, np.atleast_2d(theta))[:, -1]
    v = np.mean(np.exp(log_delta)[:, None] * (glh - glq), axis=0)
    return sc.precision_solve(mix.components[-1].factor, v)


def natgrad_mean_update(mix, theta, grad_log_h, grad_log_q, step, mask=None) -> np.ndarray:
    """Updated ``mu_{K+1}``; entries outside ``mask`` are returned unchanged."""
    mu = mix.components[-1].mean.values
    delta = np.asarray(step) * natgrad_mean_direction(mix, theta, grad_log_h, grad_log_q)
    if mask is None:
        return mu + delta
    out = mu.copy()
    out[mask] = mu[mask] + delta[mask]
    return out


# ---------------------------------------------------------------------------
# gradients for the packed factor

def _pattern_outer(pattern, a, c, values):
    """Average of ``-a_j c_k`` over rows at the pattern entries, log-diagonal chain rule applied."""
    lay = sc.layout(pattern)
    outer = a.T @ c
    grad = outer[lay.rows, lay.cols] / -a.shape[0]
    grad[lay.is_diag] *= values[lay.is_diag]
    return grad


def reparam_terms(mix: MixtureApproximation, eps, model, data):
    """Per-draw ingredients of the reparameterization gradient for the last component."""
    comp = mix.components[-1]
    eps = np.atleast_2d(eps)
    a = sc.solve_upper(comp.factor, eps)
    theta = comp.mean.values + a
    _, glh = model.log_h_and_grad(data, theta)
    _, glq, _ = mx.logpdf_and_grad(mix, theta)
    if not (np.all(np.isfinite(glh)) and np.all(np.isfinite(glq))):
        raise FloatingPointError("non-finite gradient in the factor update")
    c = sc.solve_lower(comp.factor, glh - glq)
    return a, c


def reparam_grad_L(mix: MixtureApproximation, eps, model, data, mask=None) -> np.ndarray:
    """Reparameterization gradient of the ELBO with respect to packed ``ell_{K+1}``."""
    comp = mix.components[-1]
    a, c = reparam_terms(mix, eps, model, data)
    grad = mix.weights[-1] * _pattern_outer(comp.pattern, a, c, comp.factor.values)
    if mask is not None:
        grad = np.where(mask, grad, 0.0)
    return grad


def score_terms(mix: MixtureApproximation, theta):
    """Per-draw score of ``log q`` with respect to packed ``ell_{K+1}``, shape ``(S, P)``."""
    comp = mix.components[-1]
    lay = sc.layout(comp.pattern)
    theta = np.atleast_2d(theta)
    a = theta - comp.mean.values
    la = sc.lt_mul(comp.factor, a)
    log_delta = mx.log_responsibilities(mix, theta)[:, -1]
    scale = mix.weights[-1] * np.exp(log_delta)
    vals = comp.factor.values
    score = -a[:, lay.rows] * la[:, lay.cols]
    score[:, lay.is_diag] += 1.0 / vals[lay.is_diag]
    score[:, lay.is_diag] *= vals[lay.is_diag]
    return scale[:, None] * score


def controlvariate_grad_L(mix: MixtureApproximation, theta, model, data, coeffs=None):
    """Score-function gradient with per-coordinate control variates.

    Returns the gradient computed with ``coeffs`` (from the previous iteration)
    and the coefficients re-estimated from the current draws.
    """
    theta = np.atleast_2d(theta)
    if theta.shape[0] < 2:
        raise ValueError("at least two draws are needed")
    f = _log_ratio_terms(mix, model, data, theta)
    score = score_terms(mix, theta)
    coeffs = np.zeros(score.shape[1]) if coeffs is None else np.asarray(coeffs, float)
    grad = np.mean((f[:, None] - coeffs) * score, axis=0)
    fs = f[:, None] * score
    cov = np.mean((fs - fs.mean(0)) * (score - score.mean(0)), axis=0)
    var = score.var(axis=0)
    new = np.divide(cov, var, out=np.zeros_like(cov), where=var > 0)
    return grad, new


# ---------------------------------------------------------------------------
# SGA loop

@dataclass(frozen=True)
class SGAConfig:
    iterations: int = 5000
    S: int = 100
    alpha_mu: float = 0.01
    alpha_ell: float = 0.001
    alpha_pi: float = 0.001
    tau1: float = 0.9
    tau2: float = 0.99
    adam_eps: float = 1e-8
    clip: float = 100.0
    trace_every: int = 50
    early_stop: bool = False
    early_tol: float = 1e-4
    early_patience: int = 10
    optimize_all_weights: bool = False
    ell_estimator: str = "reparam"

    def __post_init__(self):
        if self.iterations < 0 or self.S < 1 or self.trace_every < 1:
            raise ValueError("iterations >= 0, S >= 1 and trace_every >= 1 required")
        if min(self.alpha_mu, self.alpha_ell, self.alpha_pi, self.clip) <= 0:
            raise ValueError("step sizes and clip must be positive")
        if self.ell_estimator not in ("reparam", "control_variate"):
            raise ValueError(f"unknown estimator {self.ell_estimator!r}")
        if self.ell_estimator == "control_variate" and self.S < 2:
            raise ValueError("control variates need S >= 2")


@dataclass
class ElboTrace:
    """Smoothed ELBO recordings ``(iteration, value, std_error)``."""

    rows: list = field(default_factory=list)
    stopped_early: bool = False

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, 3)


def _adam(size, alpha, cfg):
    return AdamState.zeros(size, alpha, cfg.tau1, cfg.tau2, cfg.adam_eps)


def run_sga(mix: MixtureApproximation, model, data, mask: FreeMask, config: SGAConfig, rng):
    """Optimize the last component (and split weight) of ``mix``; returns ``(mix, trace)``."""
    mask.check(mix.pattern)
    mu_free = np.flatnonzero(mask.mu)
    ell_free = np.flatnonzero(mask.ell)
    weight_free = mask.weight and mix.K > 1
    all_weights = config.optimize_all_weights
    st_ell = _adam(ell_free.size, config.alpha_ell, config)
    st_mu = _adam(mu_free.size, config.alpha_mu, config)
    st_pi = _adam(mix.K - 1 if all_weights else 1, config.alpha_pi, config)
    coeffs = None
    trace = ElboTrace()
    window = []
    clip = config.clip

    for it in range(1, config.iterations + 1):
        comp = mix.components[-1]
        # (a) factor entries
        if ell_free.size:
            try:
                if config.ell_estimator == "reparam":
                    eps = rng.standard_normal((config.S, mix.pattern.d))
                    g = reparam_grad_L(mix, eps, model, data)
                else:
                    draws, _, _ = mx.sample(mix, rng, config.S)
                    g, coeffs = controlvariate_grad_L(mix, draws, model, data, coeffs)
            except FloatingPointError as err:
                raise SGADivergence(it, "ell") from err
            if not np.all(np.isfinite(g)):
                raise SGADivergence(it, "ell")
            st_ell, step = adam_step(st_ell, np.clip(g[ell_free], -clip, clip))
            packed = comp.factor.packed.copy()
            packed[ell_free] += step
            if not np.all(np.isfinite(packed)) or np.any(packed[sc.layout(mix.pattern).is_diag] > 700):
                raise SGADivergence(it, "ell")
            comp = comp.replace(packed=packed)
            mix = mix.with_component(mix.K - 1, comp)

        # (b) weight and mean from fresh mixture draws
        theta, _, _ = mx.sample(mix, rng, config.S)
        logh, glh = model.log_h_and_grad(data, theta)
        logq, glq, logn = mx.logpdf_and_grad(mix, theta)
        f = logh - logq
        if not np.all(np.isfinite(f)):
            raise SGADivergence(it, "log h - log q")
        window.append(float(f.mean()))
        delta = np.exp(logn - logq[:, None])

        log_ratios = None
        if weight_free:
            lw = mix.log_weights.copy()
            if all_weights:
                direction = np.mean((delta[:, :-1] - delta[:, -1:]) * f[:, None], axis=0)
                st_pi, step = adam_step(st_pi, np.clip(direction, -clip, clip))
                log_ratios = np.concatenate([mix.log_ratios[:-1] + step, [0.0]])
            else:
                direction = np.mean((delta[:, -2] - delta[:, -1]) * f)
                st_pi, step = adam_step(st_pi, np.clip([direction], -clip, clip))
                pair = logsumexp(lw[-2:])
                logit = lw[-2] - lw[-1] + step[0]
                lw[-2], lw[-1] = pair + log_expit(logit), pair + log_expit(-logit)
                log_ratios = lw
            if not np.all(np.isfinite(log_ratios)):
                raise SGADivergence(it, "weights")

        if mu_free.size:
            v = np.mean(delta[:, -1:] * (glh - glq), axis=0)
            if not np.all(np.isfinite(v)):
                raise SGADivergence(it, "mean gradient")
            direction = sc.precision_solve(comp.factor, v)
            st_mu, step = adam_step(st_mu, np.clip(direction[mu_free], -clip, clip))
            mu = comp.mean.values.copy()
            mu[mu_free] += step
            if not np.all(np.isfinite(mu)):
                raise SGADivergence(it, "mu")
            comp = comp.replace(mean=mu)

        mix = MixtureApproximation(mix.log_ratios if log_ratios is None else log_ratios,
                                   mix.components[:-1] + (comp,))

        if it % config.trace_every == 0:
            w = np.asarray(window)
            se = float(w.std(ddof=1) / np.sqrt(w.size)) if w.size > 1 else 0.0
            trace.rows.append((it, float(w.mean()), se))
            window = []
            p = config.early_patience
            if (config.early_stop and len(trace.rows) > p
                    and trace.rows[-1][1] - trace.rows[-1 - p][1] < config.early_tol):
                trace.stopped_early = True
                break
    return mix, trace
