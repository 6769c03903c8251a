"""Boosting controller: moves, latent diagnostics, initialization and the K -> K+1 loop.

Latent indices are 0-based throughout. The diagnostics operate on scalar latent
blocks, which covers every model shipped with the package.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from lvboost import mixture as mx
from lvboost import sparse_chol as sc
from lvboost.mixture import MixtureApproximation
from lvboost.optimizer import ElboEstimate, FreeMask, SGAConfig, elbo_estimate, run_sga
from lvboost.sparse_chol import HIERARCHICAL, MARKOV, BlockPattern

GLOBAL, LOCAL_I, LOCAL_II = "global", "local1", "local2"
MOVE_KINDS = (GLOBAL, LOCAL_I, LOCAL_II)
SCHEDULES = ("all_global", "local_mix", "both")


# ---------------------------------------------------------------------------
# moves

@dataclass(frozen=True)
class BoostMove:
    """A boosting move; ``indices`` is the latent subset for a type II local move."""

    kind: str
    indices: tuple = ()

    def __post_init__(self):
        if self.kind not in MOVE_KINDS:
            raise ValueError(f"unknown move kind {self.kind!r}")
        idx = tuple(sorted({int(i) for i in self.indices}))
        if self.kind == LOCAL_II and not idx:
            raise ValueError("a type II local move needs a nonempty index set")
        if self.kind != LOCAL_II and idx:
            raise ValueError("only type II local moves take indices")
        object.__setattr__(self, "indices", idx)

    def free_mask(self, pattern: BlockPattern) -> FreeMask:
        lay = sc.layout(pattern)
        if self.kind == GLOBAL:
            return FreeMask.full(pattern)
        mu = np.zeros(pattern.d, bool)
        ell = np.zeros(lay.size, bool)
        if self.kind == LOCAL_I:
            if pattern.global_dim == 0:
                raise ValueError("a type I local move needs global parameters")
            mu[pattern.latent_size:] = True
            ell[lay.global_entries.idx] = True
        else:
            if self.indices[-1] >= pattern.n or self.indices[0] < 0:
                raise IndexError("latent index out of range")
            for i in self.indices:
                mu[lay.offsets[i]:lay.offsets[i + 1]] = True
                ell[lay.latent_param_idx[i]] = True
                ell[lay.coupling_entries[i].idx] = True
        return FreeMask(mu, ell, True)


# ---------------------------------------------------------------------------
# latent diagnostics

@dataclass(frozen=True)
class DiagnosticsConfig:
    grid_lo: float = -5.0
    grid_hi: float = 5.0
    grid_size: int = 100
    S_inner: int = 100
    repeats: int = 1

    def __post_init__(self):
        if not self.grid_hi > self.grid_lo:
            raise ValueError("grid_hi must exceed grid_lo")
        if self.grid_size < 2 or self.S_inner < 1 or self.repeats < 1:
            raise ValueError("grid_size >= 2, S_inner >= 1 and repeats >= 1 required")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.grid_lo, self.grid_hi, self.grid_size)


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    """Per-latent grid variances ``s``, their mean and the descending ranking."""

    s: np.ndarray
    s_tilde: float
    ranking: np.ndarray
    theta_g_draw: np.ndarray
    khat: np.ndarray | None = None
    b_draw: np.ndarray | None = None

    @classmethod
    def from_scores(cls, s, theta_g, khat=None, b_draw=None) -> "DiagnosticsReport":
        s = np.maximum(np.asarray(s, float), 0.0)
        # stable sort on -s: descending, ties by index
        ranking = np.argsort(-s, kind="stable")
        return cls(s, float(s.mean()) if s.size else 0.0, ranking, np.asarray(theta_g, float),
                   None if khat is None else np.asarray(khat, float), b_draw)

    def with_khat(self, khat) -> "DiagnosticsReport":
        return DiagnosticsReport(self.s, self.s_tilde, self.ranking, self.theta_g_draw,
                                 np.asarray(khat, float), self.b_draw)


def _require_scalar(pattern: BlockPattern):
    if not pattern.scalar_latents:
        raise ValueError("latent diagnostics need scalar latent blocks")


@dataclass(frozen=True, eq=False)
class _Context:
    """Target log values on the grid and the per-component latent conditionals."""

    grid: np.ndarray
    target: np.ndarray      # (L, n)
    log_w: np.ndarray       # (n, K)
    means: np.ndarray       # (n, K)
    sds: np.ndarray         # (n, K)
    theta_g: np.ndarray
    b_draw: np.ndarray | None


def _norm_logpdf(x, m, sd):
    z = (x - m) / sd
    return -0.5 * (sc.LOG_2PI + z * z) - np.log(sd)


def _component_conditionals(mix, theta_g, b_cond):
    means = np.stack([sc.conditional_latent_means(c.mean, c.factor, theta_g, b_cond)
                      for c in mix.components], axis=-1)
    sds = np.stack([1.0 / c.factor.diag_band[0] for c in mix.components], axis=-1)
    log_w = mx.conditional_log_weights(mix, theta_g, b_cond)
    return log_w, means, sds


def _mixture_grid_logpdf(grid, log_w, means, sds):
    """``log q(b_i = grid_l | .)`` for all latents, shape ``(L, n)``."""
    return logsumexp(log_w + _norm_logpdf(grid[:, None, None], means, sds), axis=-1)


def _draw_top(mix, rng):
    """Full draw from the highest-weight component (which must be last)."""
    top = mix.components[-1]
    return sc.sample(top.mean, top.factor, rng.standard_normal(mix.pattern.d))


def _draw_mixture_latents(rng, log_w, means, sds, size):
    """``size`` draws per latent from per-latent Gaussian mixtures, shape ``(size, n)``."""
    n = log_w.shape[0]
    cum = np.cumsum(np.exp(log_w), axis=-1)
    u = rng.random((size, n)) * cum[:, -1]
    labels = np.minimum((u[..., None] > cum).sum(axis=-1), log_w.shape[1] - 1)
    z = rng.standard_normal((size, n))
    cols = np.arange(n)
    return means[cols, labels] + sds[cols, labels] * z


def _hier_context(mix, model, data, cfg, rng):
    _, theta_g = model.split(_draw_top(mix, rng))
    grid = cfg.grid
    G = np.repeat(grid[:, None], mix.pattern.n, axis=1)
    target = model.local_log_factors(data, G, theta_g)
    log_w, means, sds = _component_conditionals(mix, theta_g, None)
    return _Context(grid, target, log_w, means, sds, theta_g, None)


def _skip_moments(mix, means, sds, b_star):
    """Per-component moments of ``b_{i-1} | b_{i+1}, theta_G`` stored in column ``i``.

    ``means``/``sds`` are the one-step conditionals ``b_i | b_{i+1}, theta_G``
    evaluated at ``b_star``; ``b_i`` is integrated out of the ``b_{i-1}`` step.
    Column 0 is unused.
    """
    prev_means = np.zeros_like(means)
    prev_sds = np.ones_like(sds)
    for k, c in enumerate(mix.components):
        diag, sub = c.factor.diag_band[0], c.factor.sub_band[1]
        A = sub[:-1] / diag[:-1]
        prev_means[1:, k] = means[:-1, k] + A * (b_star[1:] - means[1:, k])
        prev_sds[1:, k] = np.sqrt(1.0 / diag[:-1] ** 2 + A**2 * sds[1:, k] ** 2)
    return prev_means, prev_sds


def _markov_context(mix, model, data, cfg, rng):
    n = mix.pattern.n
    b_star, theta_g = model.split(_draw_top(mix, rng))
    grid = cfg.grid
    G = np.repeat(grid[:, None], n, axis=1)
    log_w, means, sds = _component_conditionals(mix, theta_g, b_star)

    prev_means, prev_sds = _skip_moments(mix, means, sds, b_star)
    inner = _draw_mixture_latents(rng, log_w, prev_means, prev_sds, cfg.S_inner)
    inner[:, 0] = 0.0

    trans_in = model.log_state(data, inner[:, None, :], G[None], theta_g)
    trans_in = logsumexp(trans_in, axis=0) - np.log(cfg.S_inner)
    emission = model.log_emission(data, G, theta_g)
    trans_out = np.zeros_like(emission)
    if n > 1:
        trans_out[:, :-1] = model.log_state(data, G, np.broadcast_to(b_star, G.shape), theta_g)[:, 1:]
    target = trans_in + emission + trans_out
    return _Context(grid, target, log_w, means, sds, theta_g, b_star)


def _context(mix, model, data, cfg, rng):
    _require_scalar(mix.pattern)
    if model.pattern != mix.pattern:
        raise ValueError("model and mixture patterns differ")
    if mix.pattern.kind == HIERARCHICAL:
        return _hier_context(mix, model, data, cfg, rng)
    return _markov_context(mix, model, data, cfg, rng)


def _grid_variance(ctx: _Context) -> np.ndarray:
    r = ctx.target - _mixture_grid_logpdf(ctx.grid, ctx.log_w, ctx.means, ctx.sds)
    return np.var(r, axis=0, ddof=1)


def score_latents(mix: MixtureApproximation, model, data, config: DiagnosticsConfig, rng) -> DiagnosticsReport:
    """Grid variance of the log ratio between each target local factor and its conditional.

    The highest-weight component is relabelled last and supplies the conditioning
    draw. Hierarchical patterns use ``q(b_i | theta_G)``; Markov patterns use
    ``q(b_i | b_{i+1}, theta_G)`` with the transition into ``b_i`` averaged over
    draws of ``b_{i-1}``.
    """
    mix = mx.relabel_top_last(mix)
    total = np.zeros(mix.pattern.n)
    first = None
    for _ in range(config.repeats):
        ctx = _context(mix, model, data, config, rng)
        if first is None:
            first = ctx
        total += _grid_variance(ctx)
    return DiagnosticsReport.from_scores(total / config.repeats, first.theta_g, b_draw=first.b_draw)


def score_latents_hier(mix, model, data, config: DiagnosticsConfig, rng) -> DiagnosticsReport:
    if mix.pattern.kind != HIERARCHICAL:
        raise ValueError("hierarchical pattern required")
    return score_latents(mix, model, data, config, rng)


def score_latents_markov(mix, model, data, config: DiagnosticsConfig, rng) -> DiagnosticsReport:
    if mix.pattern.kind != MARKOV:
        raise ValueError("markov pattern required")
    return score_latents(mix, model, data, config, rng)


# ---------------------------------------------------------------------------
# subset selection

@dataclass(frozen=True)
class TopJ:
    j: int

    def __post_init__(self):
        if self.j < 1:
            raise ValueError("j must be positive")


@dataclass(frozen=True)
class Threshold:
    tau: float


@dataclass(frozen=True)
class SubsetSelection:
    indices: tuple
    fell_back: bool = False


def select_subset(report: DiagnosticsReport, policy) -> SubsetSelection:
    """Choose the latent subset for a type II local move."""
    if isinstance(policy, TopJ):
        return SubsetSelection(tuple(sorted(int(i) for i in report.ranking[: policy.j])))
    if isinstance(policy, Threshold):
        idx = tuple(int(i) for i in np.flatnonzero(report.s > policy.tau))
        if idx:
            return SubsetSelection(idx)
        warnings.warn("no latent exceeds the threshold; using the top-ranked latent", stacklevel=2)
        return SubsetSelection((int(report.ranking[0]),), fell_back=True)
    raise TypeError(f"unknown selection policy {policy!r}")


# ---------------------------------------------------------------------------
# initialization of the new component

@dataclass(frozen=True)
class InitConfig:
    R1: int = 21
    R2: int = 7
    log_diag_span: float = 2.0
    global_grid: int = 21
    global_span: float = 3.0
    global_diag: float = 100.0

    def __post_init__(self):
        if self.R1 < 1 or self.R2 < 1 or self.global_grid < 1:
            raise ValueError("grid sizes must be positive")
        if self.global_diag <= 0 or self.log_diag_span < 0 or self.global_span < 0:
            raise ValueError("spans must be non-negative and global_diag positive")


def _init_latents(mix, model, data, indices, dcfg, icfg, rng):
    """Per-latent grid search over conditional mean and log-diagonal of the last component.

    Candidates are scored by the grid variance of the log ratio against the
    mixture conditional with the candidate in place of the copied component;
    the copied values are kept unless a candidate is strictly better.
    """
    ctx = _context(mix, model, data, dcfg, rng)
    comp = mix.components[-1]
    lay = sc.layout(mix.pattern)
    idx = np.asarray(indices, int)
    src_ld = comp.factor.packed[[lay.diag_entries[i].idx[0] for i in idx]]
    src_mu = comp.mean.latent[idx]
    src_m = ctx.means[idx, -1]

    cand_m = np.concatenate([[0.0], np.linspace(dcfg.grid_lo, dcfg.grid_hi, icfg.R1)])
    offsets = np.linspace(-icfg.log_diag_span, icfg.log_diag_span, icfg.R2)
    offsets = np.concatenate([[0.0], offsets[offsets != 0.0]])

    # log q without the last component, per grid point and latent: (L, |I|)
    fixed = logsumexp(ctx.log_w[idx, :-1] + _norm_logpdf(ctx.grid[:, None, None], ctx.means[idx, :-1],
                                                         ctx.sds[idx, :-1]), axis=-1) \
        if mix.K > 1 else np.full((ctx.grid.size, idx.size), -np.inf)
    lw_last = ctx.log_w[idx, -1]
    target = ctx.target[:, idx]

    best = np.full(idx.size, np.inf)
    best_m, best_off = src_m.copy(), np.zeros(idx.size)
    for a, m0 in enumerate(cand_m):
        m = src_m if a == 0 else np.full(idx.size, m0)
        for b, off in enumerate(offsets):
            sd = np.exp(-(src_ld + off))
            lq = np.logaddexp(fixed, lw_last + _norm_logpdf(ctx.grid[:, None], m, sd))
            v = np.var(target - lq, axis=0, ddof=1)
            if a == 0 and b == 0:
                best = v
                continue
            better = v < best - 1e-12 * np.maximum(1.0, np.abs(best))
            best = np.where(better, v, best)
            best_m = np.where(better, m, best_m)
            best_off = np.where(better, off, best_off)

    new_ld = src_ld + best_off
    # conditional mean m = mu - exp(-ell) * c, with c fixed by the source values
    new_mu = best_m + np.exp(-new_ld) * (src_mu - src_m) * np.exp(src_ld)
    mu = comp.mean.values.copy()
    packed = comp.factor.packed.copy()
    mu[lay.offsets[idx]] = new_mu
    packed[[lay.diag_entries[i].idx[0] for i in idx]] = new_ld
    return mu, packed


def _init_globals(mix, model, data, mu, packed, icfg):
    """1-D grid search of each global mean, then the global diagonal pinned at ``global_diag``."""
    pattern = mix.pattern
    comp = mix.components[-1]
    m = pattern.global_dim
    lay = sc.layout(pattern)
    _, cov = sc.marginal_global_moments(comp.mean, comp.factor)
    base = comp.mean.values
    offsets = np.linspace(-icfg.global_span, icfg.global_span, icfg.global_grid)
    mu = mu.copy()
    for j in range(m):
        pts = np.repeat(base[None], offsets.size, axis=0)
        pts[:, pattern.latent_size + j] += offsets * np.sqrt(cov[j, j])
        r = model.log_h(data, pts) - mx.logpdf(mix, pts)
        r = np.where(np.isfinite(r), r, -np.inf)
        mu[pattern.latent_size + j] = pts[int(np.argmax(r)), pattern.latent_size + j]
    packed = packed.copy()
    g = lay.global_entries
    packed[g.idx[g.r == g.c]] = np.log(icfg.global_diag)
    return mu, packed


def init_new_component(mix: MixtureApproximation, model, data, move: BoostMove,
                       dcfg: DiagnosticsConfig, icfg: InitConfig, rng) -> MixtureApproximation:
    """Initialize the last component of a freshly split mixture according to ``move``."""
    comp = mix.components[-1]
    mu, packed = comp.mean.values, comp.factor.packed
    pattern = mix.pattern
    if move.kind in (GLOBAL, LOCAL_II) and pattern.n:
        _require_scalar(pattern)
        indices = range(pattern.n) if move.kind == GLOBAL else move.indices
        mu, packed = _init_latents(mix, model, data, tuple(indices), dcfg, icfg, rng)
    if move.kind in (GLOBAL, LOCAL_I) and pattern.global_dim:
        mu, packed = _init_globals(mix, model, data, mu, packed, icfg)
    return mix.with_component(mix.K - 1, comp.replace(mean=mu, packed=packed))


# ---------------------------------------------------------------------------
# PSIS diagnostic

def _pwm_shape(x: np.ndarray) -> float:
    """Probability-weighted-moment estimate of the GPD shape (positive = heavy tail)."""
    M = x.size
    a0 = x.mean()
    p = (np.arange(1, M + 1) - 0.35) / M
    a1 = np.mean((1.0 - p) * x)
    return float(2.0 - a0 / (a0 - 2.0 * a1))


def _zhang_stephens_shape(x: np.ndarray) -> float:
    """Profile-likelihood-weighted GPD shape estimate with a weak prior towards 0.5."""
    n = x.size
    m_est = 30 + int(np.sqrt(n))
    b = 1.0 - np.sqrt(m_est / (np.arange(1, m_est + 1) - 0.5))
    b /= 3.0 * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    len_scale = n * (np.log(-(b / k)) - k - 1.0)
    w = 1.0 / np.exp(len_scale - len_scale[:, None]).sum(axis=1)
    b_post = np.sum(b * w) / w.sum()
    k_post = np.log1p(-b_post * x).mean()
    return float((n * k_post + 10 * 0.5) / (n + 10))


GPD_METHODS = ("zhang_stephens", "pwm")


def gpd_tail_shape(log_ratios, M: int | None = None, method: str = "zhang_stephens") -> float:
    """Shape of a generalized Pareto fit to the ``M`` largest importance ratios.

    Returns ``-inf`` when the tail is degenerate (all ratios equal).
    """
    if method not in GPD_METHODS:
        raise ValueError(f"unknown GPD method {method!r}")
    r = np.sort(np.asarray(log_ratios, float).ravel())
    L = r.size
    if M is None:
        M = int(min(0.2 * L, 3.0 * np.sqrt(L)))
    if not 5 <= M < L:
        raise ValueError("need 5 <= M < number of ratios")
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite log ratio")
    w = np.exp(r - r[-1])
    x = w[L - M:] - w[L - M - 1]
    if x[-1] <= 1e-12 or np.ptp(r) <= 1e-9 * max(1.0, abs(r[-1])):
        return -np.inf
    x = x[x > 0]
    if x.size < 5:
        return -np.inf
    return _pwm_shape(x) if method == "pwm" else _zhang_stephens_shape(x)


def psis_khats(mix: MixtureApproximation, model, data, L_samples: int = 2000, M_tail: int | None = None,
               rng=None, method: str = "zhang_stephens") -> np.ndarray:
    """PSIS shape for every latent from draws of the mixture conditional ``q(b_i | theta_G)``."""
    if mix.pattern.kind != HIERARCHICAL:
        raise ValueError("PSIS diagnostic needs a hierarchical pattern")
    _require_scalar(mix.pattern)
    if L_samples < 50:
        raise ValueError("L_samples must be at least 50")
    if M_tail is not None and M_tail > L_samples:
        raise ValueError("M_tail cannot exceed L_samples")
    mix = mx.relabel_top_last(mix)
    _, theta_g = model.split(_draw_top(mix, rng))
    log_w, means, sds = _component_conditionals(mix, theta_g, None)
    B = _draw_mixture_latents(rng, log_w, means, sds, L_samples)
    r = model.local_log_factors(data, B, theta_g) - mx.conditional_logpdfs(mix, B, theta_g, log_w=log_w)
    return np.array([gpd_tail_shape(r[:, i], M_tail, method) for i in range(mix.pattern.n)])


def psis_khat(mix, model, data, i: int, L_samples: int = 2000, M_tail: int | None = None,
              rng=None, method: str = "zhang_stephens") -> float:
    if not 0 <= i < mix.pattern.n:
        raise IndexError(f"latent index {i} out of range")
    return float(psis_khats(mix, model, data, L_samples, M_tail, rng, method)[i])


# ---------------------------------------------------------------------------
# boost step and outer loop

@dataclass(frozen=True)
class BoostConfig:
    schedule: str = "local_mix"
    K_max: int = 6
    subset_size: int = 20
    threshold: float | None = None
    p_type1: float = 0.1
    pi_split: float = 0.5
    plateau: int = 3
    elbo_S: int = 1000
    psis: bool = False
    psis_L: int = 2000
    psis_method: str = "zhang_stephens"
    initialize: bool = True
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.K_max < 1 or self.subset_size < 1 or self.plateau < 1 or self.elbo_S < 2:
            raise ValueError("K_max, subset_size, plateau must be positive and elbo_S >= 2")
        if not 0.0 <= self.p_type1 <= 1.0 or not 0.0 < self.pi_split < 1.0:
            raise ValueError("p_type1 in [0, 1] and pi_split in (0, 1) required")
        if self.psis_method not in GPD_METHODS:
            raise ValueError(f"unknown GPD method {self.psis_method!r}")

    def policy(self):
        return TopJ(self.subset_size) if self.threshold is None else Threshold(self.threshold)


@dataclass(frozen=True, eq=False)
class BoostStepResult:
    mixture: MixtureApproximation
    trace: object
    report: DiagnosticsReport


def boost_step(mix: MixtureApproximation, model, data, move: BoostMove, sga: SGAConfig,
               config: BoostConfig, rng) -> BoostStepResult:
    """Split the top component, initialize and optimize the copy, then re-score."""
    if mix.K < 1:
        raise ValueError("mixture must have a component")
    split = mx.split_component(mix, config.pi_split)
    mask = move.free_mask(split.pattern)
    if config.initialize:
        split = init_new_component(split, model, data, move, config.diagnostics, config.init, rng)
    fitted, trace = run_sga(split, model, data, mask, sga, rng)
    report = score_latents(fitted, model, data, config.diagnostics, rng)
    return BoostStepResult(fitted, trace, report)


@dataclass(frozen=True)
class BoostRecord:
    K: int
    move: str
    indices: tuple
    s_tilde: float
    elbo_before: ElboEstimate | None
    elbo_after: ElboEstimate
    trace: tuple
    wall_time: float
    fell_back: bool = False


@dataclass(frozen=True, eq=False)
class BoostingResult:
    mixtures: tuple
    reports: tuple
    records: tuple

    @property
    def mixture(self) -> MixtureApproximation:
        return self.mixtures[-1]

    @property
    def s_tilde(self) -> np.ndarray:
        return np.array([r.s_tilde for r in self.reports])

    @property
    def optimal_K(self) -> int:
        return int(np.argmin(self.s_tilde)) + 1


def _maybe_khat(report, mix, model, data, config, rng):
    if not config.psis or mix.pattern.kind != HIERARCHICAL:
        return report
    return report.with_khat(psis_khats(mix, model, data, config.psis_L, None, rng, config.psis_method))


def _plan_moves(config: BoostConfig, rng, has_global: bool) -> list:
    if config.schedule == "all_global":
        return [GLOBAL]
    if config.schedule == "both":
        return [LOCAL_I, LOCAL_II] if has_global else [LOCAL_II]
    if has_global and rng.random() < config.p_type1:
        return [LOCAL_I]
    return [LOCAL_II]


def run_boosting(model, data, sga: SGAConfig, config: BoostConfig, rng, progress=None) -> BoostingResult:
    """Fit a single Gaussian, then add components until ``K_max`` or an ``s_tilde`` plateau."""
    pattern = model.pattern
    t0 = time.perf_counter()
    mix = MixtureApproximation.single(mx.Component.standard(pattern, model.initial_mean()))
    mix, trace = run_sga(mix, model, data, FreeMask.full(pattern), sga, rng)
    report = _maybe_khat(score_latents(mix, model, data, config.diagnostics, rng), mix, model, data, config, rng)
    elbo = elbo_estimate(mix, model, data, config.elbo_S, rng)
    mixtures, reports = [mix], [report]
    records = [BoostRecord(1, "initial", (), report.s_tilde, None, elbo, tuple(trace.rows),
                           time.perf_counter() - t0)]
    if progress:
        progress(records[-1])

    best, stale = report.s_tilde, 0
    while mix.K < config.K_max and stale < config.plateau:
        for kind in _plan_moves(config, rng, pattern.global_dim > 0):
            if mix.K >= config.K_max:
                break
            t0 = time.perf_counter()
            fell_back = False
            if kind == LOCAL_II:
                sel = select_subset(report, config.policy())
                move, fell_back = BoostMove(kind, sel.indices), sel.fell_back
            else:
                move = BoostMove(kind)
            step = boost_step(mix, model, data, move, sga, config, rng)
            before = elbo
            mix, report = step.mixture, _maybe_khat(step.report, step.mixture, model, data, config, rng)
            elbo = elbo_estimate(mix, model, data, config.elbo_S, rng)
            mixtures.append(mix)
            reports.append(report)
            records.append(BoostRecord(mix.K, kind, move.indices, report.s_tilde, before, elbo,
                                       tuple(step.trace.rows), time.perf_counter() - t0, fell_back))
            if progress:
                progress(records[-1])
            if report.s_tilde < best:
                best, stale = report.s_tilde, 0
            else:
                stale += 1
    return BoostingResult(tuple(mixtures), tuple(reports), tuple(records))
