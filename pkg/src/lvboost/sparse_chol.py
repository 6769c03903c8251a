"""Block-sparse Cholesky factors of Gaussian precision matrices.

The parameter vector is ``theta = (b_1, ..., b_n, theta_G)``. A factor ``L``
(precision ``Omega = L @ L.T``) has one of two zero patterns:

* hierarchical: block-diagonal latent part plus a dense global border row,
* markov: block lower-bidiagonal latent part plus a dense global border row.

Only structurally nonzero entries are stored, as a packed vector whose
diagonal entries are log-transformed so every parameter is unconstrained.
Every batched routine accepts a single vector of length ``d`` or an array of
shape ``(S, d)`` holding one vector per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dtbtrs

HIERARCHICAL = "hierarchical"
MARKOV = "markov"
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class BlockPattern:
    """Block structure of ``theta = (b_1, ..., b_n, theta_G)``."""

    kind: str
    latent_dims: tuple[int, ...]
    global_dim: int

    def __post_init__(self):
        if self.kind not in (HIERARCHICAL, MARKOV):
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        dims = tuple(int(v) for v in self.latent_dims)
        if any(v <= 0 for v in dims):
            raise ValueError("latent block sizes must be positive")
        if int(self.global_dim) < 0:
            raise ValueError("global_dim must be non-negative")
        if sum(dims) + int(self.global_dim) == 0:
            raise ValueError("pattern has zero total dimension")
        object.__setattr__(self, "latent_dims", dims)
        object.__setattr__(self, "global_dim", int(self.global_dim))

    @property
    def n(self) -> int:
        return len(self.latent_dims)

    @property
    def latent_size(self) -> int:
        return sum(self.latent_dims)

    @property
    def d(self) -> int:
        return self.latent_size + self.global_dim

    @property
    def scalar_latents(self) -> bool:
        return all(v == 1 for v in self.latent_dims)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "latent_dims": list(self.latent_dims),
                "global_dim": self.global_dim}

    @classmethod
    def from_dict(cls, data: dict) -> "BlockPattern":
        return cls(data["kind"], tuple(data["latent_dims"]), data["global_dim"])


def hierarchical(n: int, global_dim: int, block: int = 1) -> BlockPattern:
    return BlockPattern(HIERARCHICAL, (block,) * n, global_dim)


def markov(n: int, global_dim: int, block: int = 1) -> BlockPattern:
    return BlockPattern(MARKOV, (block,) * n, global_dim)


@dataclass(frozen=True)
class _Entries:
    """Packed positions of one block plus the local coordinates they fill."""

    idx: np.ndarray
    r: np.ndarray
    c: np.ndarray
    shape: tuple[int, int]


@dataclass(frozen=True)
class Layout:
    """Index bookkeeping that maps packed entries to the dense factor."""

    pattern: BlockPattern
    offsets: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    is_diag: np.ndarray
    region: np.ndarray  # 0 latent band, 1 coupling, 2 global block
    is_sub: np.ndarray  # entry belongs to a subdiagonal block
    bandwidth: int
    diag_entries: tuple[_Entries, ...]
    sub_entries: tuple[_Entries, ...]
    coupling_entries: tuple[_Entries, ...]
    global_entries: _Entries
    latent_param_idx: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def size(self) -> int:
        return self.rows.size


def _vech(m: int):
    c, r = [], []
    for j in range(m):
        for i in range(j, m):
            r.append(i)
            c.append(j)
    return np.array(r, dtype=np.intp), np.array(c, dtype=np.intp)


def _vec(nr: int, nc: int):
    c, r = np.divmod(np.arange(nr * nc, dtype=np.intp), nr)
    return r, c


@lru_cache(maxsize=None)
def layout(pattern: BlockPattern) -> Layout:
    dims = pattern.latent_dims
    n, m = pattern.n, pattern.global_dim
    offsets = np.concatenate([[0], np.cumsum(dims)]).astype(np.intp)
    d_b = int(offsets[-1])
    rows, cols, diag, region, sub = [], [], [], [], []
    pos = 0

    def add(r, c, ro, co, reg, is_sub):
        nonlocal pos
        idx = np.arange(pos, pos + r.size, dtype=np.intp)
        pos += r.size
        rows.append(r + ro)
        cols.append(c + co)
        diag.append((r + ro) == (c + co))
        region.append(np.full(r.size, reg, dtype=np.int8))
        sub.append(np.full(r.size, is_sub))
        return idx

    diag_entries, sub_entries, latent_param_idx = [], [], []
    for i in range(n):
        r, c = _vech(dims[i])
        idx = add(r, c, offsets[i], offsets[i], 0, False)
        diag_entries.append(_Entries(idx, r, c, (dims[i], dims[i])))
        own = [idx]
        if pattern.kind == MARKOV and i < n - 1:
            r, c = _vec(dims[i + 1], dims[i])
            idx = add(r, c, offsets[i + 1], offsets[i], 0, True)
            sub_entries.append(_Entries(idx, r, c, (dims[i + 1], dims[i])))
            own.append(idx)
        latent_param_idx.append(np.concatenate(own))
    coupling_entries = []
    for i in range(n):
        r, c = _vec(m, dims[i])
        idx = add(r, c, d_b, offsets[i], 1, False)
        coupling_entries.append(_Entries(idx, r, c, (m, dims[i])))
    r, c = _vech(m)
    idx = add(r, c, d_b, d_b, 2, False)
    global_entries = _Entries(idx, r, c, (m, m))

    cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)  # noqa: E731
    rows_a, cols_a = cat(rows, np.intp), cat(cols, np.intp)
    region_a = cat(region, np.int8)
    lat = region_a == 0
    bandwidth = int((rows_a[lat] - cols_a[lat]).max()) if lat.any() else 0
    out = Layout(pattern, offsets, rows_a, cols_a, cat(diag, bool), region_a,
                 cat(sub, bool), bandwidth, tuple(diag_entries), tuple(sub_entries),
                 tuple(coupling_entries), global_entries, tuple(latent_param_idx))
    for a in (out.offsets, out.rows, out.cols, out.is_diag, out.region, out.is_sub):
        a.setflags(write=False)
    return out


def _fill(values: np.ndarray, ent: _Entries) -> np.ndarray:
    out = np.zeros(ent.shape)
    out[ent.r, ent.c] = values[ent.idx]
    return out


@dataclass(frozen=True, eq=False)
class SparseCholeskyFactor:
    """Packed lower-triangular factor with log-transformed diagonal entries."""

    pattern: BlockPattern
    packed: np.ndarray

    def __post_init__(self):
        packed = np.array(self.packed, dtype=float)
        lay = layout(self.pattern)
        if packed.shape != (lay.size,):
            raise ValueError(f"packed length {packed.shape} != {lay.size}")
        if not np.all(np.isfinite(packed)):
            raise ValueError("factor entries must be finite")
        if np.any(packed[lay.is_diag] > 700.0):
            raise ValueError("log-diagonal entry overflows")
        packed.setflags(write=False)
        object.__setattr__(self, "packed", packed)

    def __eq__(self, other):
        if not isinstance(other, SparseCholeskyFactor):
            return NotImplemented
        return self.pattern == other.pattern and np.array_equal(self.packed, other.packed)

    __hash__ = None

    @classmethod
    def identity(cls, pattern: BlockPattern) -> "SparseCholeskyFactor":
        return cls(pattern, np.zeros(layout(pattern).size))

    @classmethod
    def from_dense(cls, pattern: BlockPattern, L: np.ndarray) -> "SparseCholeskyFactor":
        """Read the pattern entries of a dense lower-triangular factor."""
        lay = layout(pattern)
        L = np.asarray(L, dtype=float)
        if L.shape != (pattern.d, pattern.d):
            raise ValueError("dense factor has the wrong shape")
        vals = L[lay.rows, lay.cols].copy()
        if np.any(vals[lay.is_diag] <= 0):
            raise ValueError("diagonal entries must be positive")
        vals[lay.is_diag] = np.log(vals[lay.is_diag])
        return cls(pattern, vals)

    @classmethod
    def from_blocks(cls, pattern, diag_blocks, global_coupling, global_block,
                    subdiag_blocks=()) -> "SparseCholeskyFactor":
        """Assemble from stored-form blocks (diagonals already on the log scale)."""
        lay = layout(pattern)
        vals = np.zeros(lay.size)
        groups = [(diag_blocks, lay.diag_entries), (global_coupling, lay.coupling_entries),
                  (subdiag_blocks, lay.sub_entries), ([global_block], (lay.global_entries,))]
        for blocks, ents in groups:
            if len(blocks) != len(ents):
                raise ValueError("wrong number of blocks for the pattern")
            for blk, ent in zip(blocks, ents):
                vals[ent.idx] = np.asarray(blk, dtype=float).reshape(ent.shape)[ent.r, ent.c]
        return cls(pattern, vals)

    # stored-form views
    @property
    def diag_blocks(self) -> list[np.ndarray]:
        return [_fill(self.packed, e) for e in layout(self.pattern).diag_entries]

    @property
    def subdiag_blocks(self) -> list[np.ndarray]:
        return [_fill(self.packed, e) for e in layout(self.pattern).sub_entries]

    @property
    def global_coupling(self) -> list[np.ndarray]:
        return [_fill(self.packed, e) for e in layout(self.pattern).coupling_entries]

    @property
    def global_block(self) -> np.ndarray:
        return _fill(self.packed, layout(self.pattern).global_entries)

    # exponentiated forms used by the numerics
    @cached_property
    def values(self) -> np.ndarray:
        """Packed entries with the diagonal exponentiated."""
        lay = layout(self.pattern)
        vals = self.packed.copy()
        vals[lay.is_diag] = np.exp(vals[lay.is_diag])
        vals.setflags(write=False)
        return vals

    @cached_property
    def log_det(self) -> float:
        """Sum of log diagonal entries, i.e. half the log-determinant of the precision."""
        return float(self.packed[layout(self.pattern).is_diag].sum())

    def _band_from(self, keep: np.ndarray) -> np.ndarray:
        lay = layout(self.pattern)
        band = np.zeros((lay.bandwidth + 1, self.pattern.latent_size))
        sel = keep & (lay.region == 0)
        band[lay.rows[sel] - lay.cols[sel], lay.cols[sel]] = self.values[sel]
        band.setflags(write=False)
        return band

    @cached_property
    def band(self) -> np.ndarray:
        """Latent part in LAPACK lower band storage, ``band[k, j] = L[j + k, j]``."""
        return self._band_from(np.ones(layout(self.pattern).size, bool))

    @cached_property
    def diag_band(self) -> np.ndarray:
        """Band storage of the diagonal blocks only."""
        return self._band_from(~layout(self.pattern).is_sub)

    @cached_property
    def sub_band(self) -> np.ndarray:
        """Band storage of the subdiagonal blocks only (zero for hierarchical)."""
        return self._band_from(layout(self.pattern).is_sub)

    @cached_property
    def coupling(self) -> np.ndarray:
        """Global border rows ``C`` of shape ``(m_G, d_b)``."""
        lay = layout(self.pattern)
        out = np.zeros((self.pattern.global_dim, self.pattern.latent_size))
        sel = lay.region == 1
        out[lay.rows[sel] - self.pattern.latent_size, lay.cols[sel]] = self.values[sel]
        out.setflags(write=False)
        return out

    @cached_property
    def gblock(self) -> np.ndarray:
        """Exponentiated global diagonal block ``L_G``."""
        out = _fill(self.values, layout(self.pattern).global_entries)
        out.setflags(write=False)
        return out

    def block(self, i: int) -> np.ndarray:
        """Exponentiated diagonal block ``L_i``."""
        return _fill(self.values, layout(self.pattern).diag_entries[i])

    def subblock(self, i: int) -> np.ndarray:
        """Subdiagonal block at block row ``i + 1``, block column ``i``."""
        return _fill(self.values, layout(self.pattern).sub_entries[i])

    def coupling_block(self, i: int) -> np.ndarray:
        return _fill(self.values, layout(self.pattern).coupling_entries[i])

    def with_packed(self, packed: np.ndarray) -> "SparseCholeskyFactor":
        return SparseCholeskyFactor(self.pattern, packed)


def pack(factor: SparseCholeskyFactor) -> np.ndarray:
    return factor.packed.copy()


def unpack(pattern: BlockPattern, packed: np.ndarray) -> SparseCholeskyFactor:
    return SparseCholeskyFactor(pattern, packed)


def to_dense(factor: SparseCholeskyFactor) -> np.ndarray:
    lay = layout(factor.pattern)
    L = np.zeros((factor.pattern.d, factor.pattern.d))
    L[lay.rows, lay.cols] = factor.values
    return L


@dataclass(frozen=True, eq=False)
class PartitionedMean:
    """Mean vector ``(mu_1, ..., mu_n, mu_G)`` stored contiguously."""

    pattern: BlockPattern
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.pattern.d,):
            raise ValueError(f"mean length {vals.shape} != {self.pattern.d}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("mean entries must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __eq__(self, other):
        if not isinstance(other, PartitionedMean):
            return NotImplemented
        return self.pattern == other.pattern and np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def from_parts(cls, pattern, latent_parts, global_part) -> "PartitionedMean":
        parts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in latent_parts]
        return cls(pattern, np.concatenate(parts + [np.atleast_1d(np.asarray(global_part, float))]))

    @property
    def latent(self) -> np.ndarray:
        return self.values[: self.pattern.latent_size]

    @property
    def global_part(self) -> np.ndarray:
        return self.values[self.pattern.latent_size:]

    @property
    def latent_parts(self) -> list[np.ndarray]:
        off = layout(self.pattern).offsets
        return [self.values[off[i]:off[i + 1]] for i in range(self.pattern.n)]

    def part(self, i: int) -> np.ndarray:
        off = layout(self.pattern).offsets
        return self.values[off[i]:off[i + 1]]

    def with_values(self, values: np.ndarray) -> "PartitionedMean":
        return PartitionedMean(self.pattern, values)


# ---------------------------------------------------------------------------
# banded kernels (row-batched: arrays of shape (..., d_b))

def band_lt_mul(band: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``L^T v`` for a lower band matrix."""
    out = band[0] * v
    for k in range(1, band.shape[0]):
        out[..., :-k] += band[k, :-k] * v[..., k:]
    return out


def band_l_mul(band: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``L v`` for a lower band matrix."""
    out = band[0] * v
    for k in range(1, band.shape[0]):
        out[..., k:] += band[k, :-k] * v[..., :-k]
    return out


def band_solve(band: np.ndarray, rhs: np.ndarray, trans: bool) -> np.ndarray:
    """Solve ``L x = rhs`` (or ``L^T x = rhs`` when ``trans``) for row-batched rhs."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[-1] == 0:
        return rhs.copy()
    flat = _rows(rhs)
    x, info = dtbtrs(band, flat.T, uplo="L", trans="T" if trans else "N")
    if info != 0:
        raise np.linalg.LinAlgError(f"banded triangular solve failed (info={info})")
    return np.ascontiguousarray(x.T).reshape(rhs.shape)


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(int(np.prod(x.shape[:-1])), x.shape[-1])


def lt_mul(factor: SparseCholeskyFactor, v: np.ndarray) -> np.ndarray:
    """``L^T v`` exploiting the pattern."""
    v = np.asarray(v, dtype=float)
    d_b = factor.pattern.latent_size
    vb, vg = v[..., :d_b], v[..., d_b:]
    out_b = band_lt_mul(factor.band, vb) + vg @ factor.coupling
    out_g = vg @ factor.gblock
    return np.concatenate([out_b, out_g], axis=-1)


def l_mul(factor: SparseCholeskyFactor, v: np.ndarray) -> np.ndarray:
    """``L v`` exploiting the pattern."""
    v = np.asarray(v, dtype=float)
    d_b = factor.pattern.latent_size
    vb, vg = v[..., :d_b], v[..., d_b:]
    out_b = band_l_mul(factor.band, vb)
    out_g = vb @ factor.coupling.T + vg @ factor.gblock.T
    return np.concatenate([out_b, out_g], axis=-1)


def _check_rhs(factor, rhs):
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[-1] != factor.pattern.d:
        raise ValueError(f"rhs length {rhs.shape[-1]} != {factor.pattern.d}")
    if not np.all(np.isfinite(rhs)):
        raise ValueError("non-finite right-hand side")
    return rhs


def solve_upper(factor: SparseCholeskyFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``L^T x = rhs`` by back substitution, global block first."""
    rhs = _check_rhs(factor, rhs)
    d_b = factor.pattern.latent_size
    rb, rg = _rows(rhs[..., :d_b]), _rows(rhs[..., d_b:])
    if factor.pattern.global_dim:
        xg = solve_triangular(factor.gblock, rg.T, lower=True, trans="T").T
        rb = rb - xg @ factor.coupling
    else:
        xg = rg
    xb = band_solve(factor.band, rb, trans=True)
    return np.concatenate([xb, xg], axis=-1).reshape(rhs.shape)


def solve_lower(factor: SparseCholeskyFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``L x = rhs`` by forward substitution, latent blocks first."""
    rhs = _check_rhs(factor, rhs)
    d_b = factor.pattern.latent_size
    rb, rg = _rows(rhs[..., :d_b]), _rows(rhs[..., d_b:])
    xb = band_solve(factor.band, rb, trans=False)
    if factor.pattern.global_dim:
        xg = solve_triangular(factor.gblock, (rg - xb @ factor.coupling.T).T, lower=True).T
    else:
        xg = rg
    return np.concatenate([xb, xg], axis=-1).reshape(rhs.shape)


def precision_solve(factor: SparseCholeskyFactor, v: np.ndarray) -> np.ndarray:
    """``Omega^{-1} v = L^{-T} L^{-1} v``."""
    return solve_upper(factor, solve_lower(factor, v))


def gaussian_logpdf(mean: PartitionedMean, factor: SparseCholeskyFactor, theta) -> np.ndarray:
    """Log density of ``N(mean, (L L^T)^{-1})``."""
    theta = np.asarray(theta, dtype=float)
    z = lt_mul(factor, theta - mean.values)
    return -0.5 * factor.pattern.d * LOG_2PI + factor.log_det - 0.5 * np.sum(z * z, axis=-1)


def sample(mean: PartitionedMean, factor: SparseCholeskyFactor, eps) -> np.ndarray:
    """Map standard-normal ``eps`` to ``mean + L^{-T} eps``."""
    return mean.values + solve_upper(factor, eps)


# ---------------------------------------------------------------------------
# marginals and conditionals

def _require_global(factor):
    if factor.pattern.global_dim == 0:
        raise ValueError("pattern has no global block")


def marginal_global_moments(mean: PartitionedMean, factor: SparseCholeskyFactor):
    """Mean and covariance of ``theta_G``: ``mu_G`` and ``L_G^{-T} L_G^{-1}``."""
    _require_global(factor)
    inv = solve_triangular(factor.gblock, np.eye(factor.pattern.global_dim), lower=True)
    cov = inv.T @ inv
    return mean.global_part.copy(), 0.5 * (cov + cov.T)


def marginal_global_logpdf(mean: PartitionedMean, factor: SparseCholeskyFactor, theta_g):
    """Log density of the ``theta_G`` marginal, whose precision is ``L_G L_G^T``."""
    _require_global(factor)
    theta_g = np.asarray(theta_g, dtype=float)
    z = (theta_g - mean.global_part) @ factor.gblock
    m = factor.pattern.global_dim
    logdet = float(np.log(np.diag(factor.gblock)).sum())
    return -0.5 * m * LOG_2PI + logdet - 0.5 * np.sum(z * z, axis=-1)


def _block_cov(Li: np.ndarray) -> np.ndarray:
    inv = solve_triangular(Li, np.eye(Li.shape[0]), lower=True)
    cov = inv.T @ inv
    return 0.5 * (cov + cov.T)


def _check_index(factor, i):
    if not 0 <= i < factor.pattern.n:
        raise IndexError(f"latent index {i} out of range")


def conditional_latent_moments_hier(mean, factor, i: int, theta_g):
    """Moments of ``b_i | theta_G`` for one hierarchical component."""
    if factor.pattern.kind != HIERARCHICAL:
        raise ValueError("use conditional_latent_moments_markov for markov patterns")
    _check_index(factor, i)
    Li = factor.block(i)
    t = factor.coupling_block(i).T @ (np.asarray(theta_g, float) - mean.global_part)
    e = mean.part(i) - solve_triangular(Li, t, lower=True, trans="T")
    return e, _block_cov(Li)


def conditional_latent_moments_markov(mean, factor, i: int, b_next, theta_g):
    """Moments of ``b_i | b_{i+1}, theta_G`` (``b_next`` ignored for the last block)."""
    if factor.pattern.kind != MARKOV:
        raise ValueError("use conditional_latent_moments_hier for hierarchical patterns")
    _check_index(factor, i)
    Li = factor.block(i)
    t = factor.coupling_block(i).T @ (np.asarray(theta_g, float) - mean.global_part)
    if i < factor.pattern.n - 1:
        if b_next is None:
            raise ValueError("b_next is required below the last block")
        t = t + factor.subblock(i).T @ (np.asarray(b_next, float) - mean.part(i + 1))
    e = mean.part(i) - solve_triangular(Li, t, lower=True, trans="T")
    return e, _block_cov(Li)


def conditional_latent_means(mean, factor, theta_g, b_cond=None) -> np.ndarray:
    """Conditional means of every latent block at once, shape ``(..., d_b)``.

    Hierarchical: ``E(b_i | theta_G)``. Markov: ``E(b_i | b_{i+1}, theta_G)`` with
    ``b_{i+1}`` read from the matching block of ``b_cond``.
    """
    theta_g = np.asarray(theta_g, dtype=float)
    t = (theta_g - mean.global_part) @ factor.coupling
    if factor.pattern.kind == MARKOV:
        if b_cond is None:
            raise ValueError("markov conditionals need b_cond")
        t = t + band_lt_mul(factor.sub_band, np.asarray(b_cond, float) - mean.latent)
    return mean.latent - band_solve(factor.diag_band, t, trans=True)


def conditional_latent_logpdfs(mean, factor, b, theta_g, b_cond=None) -> np.ndarray:
    """Per-block conditional log densities, shape ``(..., n)``.

    Block ``i`` of ``b`` is evaluated under the component conditional of
    ``b_i`` given ``theta_G`` (and ``b_{i+1}`` from ``b_cond`` for Markov).
    """
    lay = layout(factor.pattern)
    e = conditional_latent_means(mean, factor, theta_g, b_cond)
    z = band_lt_mul(factor.diag_band, np.asarray(b, float) - e)
    sq = np.add.reduceat(z * z, lay.offsets[:-1], axis=-1)
    logdiag = np.add.reduceat(np.log(factor.diag_band[0]), lay.offsets[:-1])
    dims = np.asarray(factor.pattern.latent_dims)
    return -0.5 * dims * LOG_2PI + logdiag - 0.5 * sq


def markov_latent_given_global(mean, factor):
    """Marginal regressions ``b_j | theta_G ~ N(mu_j + G_j (theta_G - mu_G), V_j)``.

    Computed by a backward recursion over the chain. Returns lists ``G`` and ``V``.
    """
    if factor.pattern.kind != MARKOV:
        raise ValueError("markov pattern required")
    n = factor.pattern.n
    gains, covs = [None] * n, [None] * n
    for j in range(n - 1, -1, -1):
        Lj = factor.block(j)
        B = solve_triangular(Lj, factor.coupling_block(j).T, lower=True, trans="T")
        P = _block_cov(Lj)
        if j == n - 1:
            gains[j], covs[j] = -B, P
        else:
            A = solve_triangular(Lj, factor.subblock(j).T, lower=True, trans="T")
            gains[j] = -A @ gains[j + 1] - B
            covs[j] = A @ covs[j + 1] @ A.T + P
            covs[j] = 0.5 * (covs[j] + covs[j].T)
    return gains, covs
