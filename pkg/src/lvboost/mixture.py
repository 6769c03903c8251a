"""Gaussian mixture approximations with block-sparse precision factors."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from lvboost import sparse_chol as sc
from lvboost.sparse_chol import MARKOV, BlockPattern, PartitionedMean, SparseCholeskyFactor


@dataclass(frozen=True, eq=False)
class Component:
    """One Gaussian component ``N(mean, (L L^T)^{-1})``."""

    mean: PartitionedMean
    factor: SparseCholeskyFactor

    def __post_init__(self):
        if self.mean.pattern != self.factor.pattern:
            raise ValueError("mean and factor patterns differ")

    @property
    def pattern(self) -> BlockPattern:
        return self.factor.pattern

    @classmethod
    def standard(cls, pattern: BlockPattern, mean=None) -> "Component":
        mean = np.zeros(pattern.d) if mean is None else mean
        return cls(PartitionedMean(pattern, mean), SparseCholeskyFactor.identity(pattern))

    def replace(self, mean=None, packed=None) -> "Component":
        m = self.mean if mean is None else self.mean.with_values(mean)
        f = self.factor if packed is None else self.factor.with_packed(packed)
        return Component(m, f)

    def logpdf(self, theta):
        return sc.gaussian_logpdf(self.mean, self.factor, theta)

    def global_logpdf(self, theta_g):
        return sc.marginal_global_logpdf(self.mean, self.factor, theta_g)

    @cached_property
    def chain_marginals(self):
        """Markov regressions of each block on ``theta_G`` (see ``markov_latent_given_global``)."""
        return sc.markov_latent_given_global(self.mean, self.factor)

    def to_dict(self) -> dict:
        return {"mean": self.mean.values.tolist(), "packed": self.factor.packed.tolist()}

    @classmethod
    def from_dict(cls, pattern: BlockPattern, data: dict) -> "Component":
        return cls(PartitionedMean(pattern, data["mean"]), SparseCholeskyFactor(pattern, data["packed"]))


@dataclass(frozen=True, eq=False)
class MixtureApproximation:
    """Mixture weights, stored as log-ratios ``log(pi_k / pi_K)``, plus components."""

    log_ratios: np.ndarray
    components: tuple[Component, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        if any(c.pattern != comps[0].pattern for c in comps):
            raise ValueError("components must share one block pattern")
        lr = np.array(self.log_ratios, dtype=float).reshape(-1)
        if lr.shape != (len(comps),):
            raise ValueError("one log-ratio per component required")
        if not np.all(np.isfinite(lr)):
            raise ValueError("log-ratios must be finite")
        lr = lr - lr[-1]
        lr.setflags(write=False)
        object.__setattr__(self, "log_ratios", lr)
        object.__setattr__(self, "components", comps)

    @classmethod
    def single(cls, component: Component) -> "MixtureApproximation":
        return cls(np.zeros(1), (component,))

    @classmethod
    def from_weights(cls, weights, components) -> "MixtureApproximation":
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        return cls(np.log(w), tuple(components))

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def pattern(self) -> BlockPattern:
        return self.components[0].pattern

    @cached_property
    def log_weights(self) -> np.ndarray:
        return self.log_ratios - logsumexp(self.log_ratios)

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.log_weights)
        return w / w.sum()

    def replace(self, log_ratios=None, components=None) -> "MixtureApproximation":
        return MixtureApproximation(self.log_ratios if log_ratios is None else log_ratios,
                                    self.components if components is None else components)

    def with_component(self, k: int, comp: Component) -> "MixtureApproximation":
        comps = list(self.components)
        comps[k] = comp
        return self.replace(components=tuple(comps))

    def to_dict(self) -> dict:
        return {"pattern": self.pattern.to_dict(), "weights": self.weights.tolist(),
                "log_ratios": self.log_ratios.tolist(),
                "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureApproximation":
        pattern = BlockPattern.from_dict(data["pattern"])
        comps = tuple(Component.from_dict(pattern, c) for c in data["components"])
        if "log_ratios" in data:
            return cls(np.asarray(data["log_ratios"], float), comps)
        return cls.from_weights(data["weights"], comps)


@dataclass(frozen=True)
class Responsibilities:
    """``delta_k = N_k / delta_tot`` with ``delta_tot = sum_k pi_k N_k``."""

    delta: np.ndarray
    delta_tot: np.ndarray


def component_logpdfs(mix: MixtureApproximation, theta) -> np.ndarray:
    """Log densities of every component, shape ``(..., K)``."""
    theta = np.asarray(theta, dtype=float)
    return np.stack([c.logpdf(theta) for c in mix.components], axis=-1)


def logpdf(mix: MixtureApproximation, theta) -> np.ndarray:
    return logsumexp(mix.log_weights + component_logpdfs(mix, theta), axis=-1)


def logpdf_and_grad(mix: MixtureApproximation, theta):
    """Return ``(log q, grad log q, component log densities)`` in one pass."""
    theta = np.asarray(theta, dtype=float)
    logn, grads = [], []
    for c in mix.components:
        diff = theta - c.mean.values
        z = sc.lt_mul(c.factor, diff)
        logn.append(-0.5 * c.pattern.d * sc.LOG_2PI + c.factor.log_det - 0.5 * np.sum(z * z, axis=-1))
        grads.append(-sc.l_mul(c.factor, z))
    logn = np.stack(logn, axis=-1)
    joint = mix.log_weights + logn
    logq = logsumexp(joint, axis=-1)
    r = np.exp(joint - logq[..., None])
    grad = sum(r[..., k, None] * grads[k] for k in range(mix.K))
    return logq, grad, logn


def sample(mix: MixtureApproximation, rng: np.random.Generator, S: int):
    """Draw ``S`` samples; returns ``(theta, labels, eps)``."""
    if S < 1:
        raise ValueError("S must be positive")
    labels = rng.choice(mix.K, size=S, p=mix.weights) if mix.K > 1 else np.zeros(S, dtype=int)
    eps = rng.standard_normal((S, mix.pattern.d))
    theta = np.empty_like(eps)
    for k, c in enumerate(mix.components):
        sel = labels == k
        if sel.any():
            theta[sel] = sc.sample(c.mean, c.factor, eps[sel])
    return theta, labels, eps


def log_responsibilities(mix: MixtureApproximation, theta) -> np.ndarray:
    """``log delta_k`` computed entirely in log space, shape ``(..., K)``."""
    logn = component_logpdfs(mix, theta)
    return logn - logsumexp(mix.log_weights + logn, axis=-1)[..., None]


def responsibilities(mix: MixtureApproximation, theta) -> Responsibilities:
    logn = component_logpdfs(mix, theta)
    logq = logsumexp(mix.log_weights + logn, axis=-1)
    tot = np.exp(logq)
    if np.any(tot == 0.0):
        raise FloatingPointError("every component density underflows at theta")
    return Responsibilities(np.exp(logn - logq[..., None]), tot)


def global_component_logpdfs(mix: MixtureApproximation, theta_g) -> np.ndarray:
    """``log q_k(theta_G)`` for every component; zeros when there is no global block."""
    theta_g = np.asarray(theta_g, dtype=float)
    if mix.pattern.global_dim == 0:
        return np.zeros(theta_g.shape[:-1] + (mix.K,))
    return np.stack([c.global_logpdf(theta_g) for c in mix.components], axis=-1)


def marginal_global_logpdf(mix: MixtureApproximation, theta_g) -> np.ndarray:
    return logsumexp(mix.log_weights + global_component_logpdfs(mix, theta_g), axis=-1)


def global_conditional_weights(mix: MixtureApproximation, theta_g) -> np.ndarray:
    """Log weights ``log w_k(theta_G)`` proportional to ``pi_k q_k(theta_G)``."""
    joint = mix.log_weights + global_component_logpdfs(mix, theta_g)
    return joint - logsumexp(joint, axis=-1)[..., None]


def _chain_logpdfs(comp: Component, b_cond, theta_g) -> np.ndarray:
    """``log q_k(b_{i+1} | theta_G)`` for each block ``i`` (zero for the last), ``(..., n)``."""
    gains, covs = comp.chain_marginals
    lay = sc.layout(comp.pattern)
    n = comp.pattern.n
    dg = np.asarray(theta_g, float) - comp.mean.global_part
    b_cond = np.asarray(b_cond, float)
    out = np.zeros(np.broadcast_shapes(b_cond.shape[:-1], dg.shape[:-1]) + (n,))
    if comp.pattern.scalar_latents:
        G = np.concatenate(gains[1:], axis=0)
        V = np.array([c[0, 0] for c in covs[1:]])
        m = comp.mean.latent[1:] + dg @ G.T
        x = b_cond[..., 1:]
        out[..., :-1] = -0.5 * (sc.LOG_2PI + np.log(V) + (x - m) ** 2 / V)
        return out
    for i in range(n - 1):
        s = slice(lay.offsets[i + 1], lay.offsets[i + 2])
        m = comp.mean.latent[s] + dg @ gains[i + 1].T
        chol = np.linalg.cholesky(covs[i + 1])
        z = np.linalg.solve(chol, (b_cond[..., s] - m)[..., None])[..., 0]
        out[..., i] = (-0.5 * z.shape[-1] * sc.LOG_2PI - np.log(np.diag(chol)).sum()
                       - 0.5 * np.sum(z * z, axis=-1))
    return out


def conditional_log_weights(mix: MixtureApproximation, theta_g, b_cond=None) -> np.ndarray:
    """Per-block mixture weights of the latent conditionals, shape ``(..., n, K)``.

    Hierarchical: proportional to ``pi_k q_k(theta_G)`` for every block.
    Markov: proportional to ``pi_k q_k(b_{i+1}, theta_G)`` (``pi_k q_k(theta_G)`` for the last).
    """
    theta_g = np.asarray(theta_g, dtype=float)
    base = mix.log_weights + global_component_logpdfs(mix, theta_g)
    n = mix.pattern.n
    joint = np.repeat(base[..., None, :], n, axis=-2)
    if mix.pattern.kind == MARKOV:
        if b_cond is None:
            raise ValueError("markov conditionals need b_cond")
        chain = np.stack([_chain_logpdfs(c, b_cond, theta_g) for c in mix.components], axis=-1)
        joint = joint + chain
    return joint - logsumexp(joint, axis=-1)[..., None]


def conditional_logpdfs(mix: MixtureApproximation, b, theta_g, b_cond=None, log_w=None):
    """Mixture conditional log densities of every latent block, shape ``(..., n)``.

    Block ``i`` of ``b`` is evaluated under ``q(b_i | theta_G)`` (hierarchical) or
    ``q(b_i | b_{i+1}, theta_G)`` with ``b_{i+1}`` taken from ``b_cond`` (Markov).
    """
    if log_w is None:
        log_w = conditional_log_weights(mix, theta_g, b_cond)
    comp = np.stack([sc.conditional_latent_logpdfs(c.mean, c.factor, b, theta_g, b_cond)
                     for c in mix.components], axis=-1)
    return logsumexp(log_w + comp, axis=-1)


def _embed(pattern: BlockPattern, i: int, value, base=None) -> np.ndarray:
    out = np.zeros(pattern.latent_size) if base is None else np.array(base, float)
    off = sc.layout(pattern).offsets
    out[off[i]:off[i + 1]] = value
    return out


def conditional_latent_logpdf(mix: MixtureApproximation, i: int, b_i, theta_g) -> float:
    """``log q(b_i | theta_G)`` for a hierarchical mixture."""
    if mix.pattern.kind == MARKOV:
        raise ValueError("use conditional_latent_logpdf_markov for markov patterns")
    if not 0 <= i < mix.pattern.n:
        raise IndexError(f"latent index {i} out of range")
    b = _embed(mix.pattern, i, b_i)
    return float(conditional_logpdfs(mix, b, theta_g)[i])


def conditional_latent_logpdf_markov(mix: MixtureApproximation, i: int, b_i, b_next, theta_g) -> float:
    """``log q(b_i | b_{i+1}, theta_G)``; ``b_next`` is ignored for the last block."""
    if mix.pattern.kind != MARKOV:
        raise ValueError("use conditional_latent_logpdf for hierarchical patterns")
    n = mix.pattern.n
    if not 0 <= i < n:
        raise IndexError(f"latent index {i} out of range")
    b = _embed(mix.pattern, i, b_i)
    cond = np.zeros(mix.pattern.latent_size)
    if i < n - 1:
        if b_next is None:
            raise ValueError("b_next is required below the last block")
        cond = _embed(mix.pattern, i + 1, b_next)
    return float(conditional_logpdfs(mix, b, theta_g, cond)[i])


def top_component(mix: MixtureApproximation) -> int:
    """Index of the highest-weight component (ties go to the lowest index)."""
    return int(np.argmax(mix.log_ratios))


def relabel_top_last(mix: MixtureApproximation) -> MixtureApproximation:
    """Move the highest-weight component to the last position."""
    k = top_component(mix)
    if k == mix.K - 1:
        return mix
    order = [j for j in range(mix.K) if j != k] + [k]
    return MixtureApproximation(mix.log_ratios[order], tuple(mix.components[j] for j in order))


def split_component(mix: MixtureApproximation, pi_split: float) -> MixtureApproximation:
    """Relabel the top component last, then split it into two identical copies.

    The copies receive weights ``pi_split * pi_K`` and ``(1 - pi_split) * pi_K``.
    """
    if not 0.0 < pi_split < 1.0:
        raise ValueError("pi_split must lie in (0, 1)")
    mix = relabel_top_last(mix)
    lw = mix.log_weights
    top = lw[-1]
    new = np.concatenate([lw[:-1], [top + np.log(pi_split), top + np.log1p(-pi_split)]])
    return MixtureApproximation(new, mix.components + (mix.components[-1],))
