"""Group-connected reciprocal BD-RIS algebra.

Half-vector convention: the unique entries of a symmetric ``m x m`` block are
listed column-major over pairs ``(i, j)`` with ``i <= j``::

    (0,0), (0,1), (1,1), (0,2), (1,2), (2,2), ...

so the half index of ``(i, j)`` is ``j*(j+1)/2 + i``.  The full-vector side
uses column-major ``vec``: entry ``(i, j)`` sits at ``i + m*j``.  Any other
consistent ordering only permutes the columns of the cascaded channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad

Z0_OHMS = 50.0


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


def half_size(group_size: int) -> int:
    return group_size * (group_size + 1) // 2


@dataclass(frozen=True)
class SystemConfig:
    """Protocol and system dimensions.  Powers are linear watts."""

    N: int
    M: int
    group_size: int
    K: int
    U: int
    tau1: int = 1
    tau2: int = 8
    pu: float = dbm_to_watts(20.0)
    noise_power: float = dbm_to_watts(15.0)
    z0: float = Z0_OHMS

    def __post_init__(self):
        for name in ("N", "M", "group_size", "K", "U", "tau1", "tau2"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.M % self.group_size:
            raise ValueError(f"M={self.M} is not a multiple of group size {self.group_size}")
        if not self.pu > 0 or not self.noise_power > 0:
            raise ValueError("transmit and noise power must be positive")
        if not self.z0 > 0:
            raise ValueError("z0 must be positive")

    @property
    def G(self) -> int:
        return self.M // self.group_size

    @property
    def half_group(self) -> int:
        return half_size(self.group_size)

    @property
    def half_total(self) -> int:
        """M(M̄+1)/2, the length of the half-vectorised scattering vector."""
        return self.G * self.half_group

    @property
    def NU(self) -> int:
        return self.N * self.U

    @property
    def KU(self) -> int:
        return self.K * self.U

    @property
    def pu_dbm(self) -> float:
        return watts_to_dbm(self.pu)

    @property
    def noise_dbm(self) -> float:
        return watts_to_dbm(self.noise_power)

    @property
    def n_real_coefficients(self) -> int:
        return self.NU * self.K * self.M * (self.group_size + 1)

    def with_pu_dbm(self, dbm: float) -> "SystemConfig":
        return replace(self, pu=dbm_to_watts(dbm))


# -------------------------------------------------------------- mapping P


@dataclass(frozen=True)
class MappingP:
    """Sparse encoding of the binary duplication matrix ``P``.

    ``rows[r]`` is the (0-based) half index that column-major vec entry ``r``
    copies.
    """

    group_size: int
    rows: np.ndarray = field(repr=False)

    @property
    def n_half(self) -> int:
        return half_size(self.group_size)

    def matrix(self) -> np.ndarray:
        m2 = self.group_size**2
        p = np.zeros((m2, self.n_half))
        p[np.arange(m2), self.rows] = 1.0
        return p

    def column_multiplicity(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_half)

    def full_index(self) -> np.ndarray:
        """Half index of every entry of the ``m x m`` matrix, row-major."""
        m = self.group_size
        return self.rows.reshape(m, m).T.copy()

    def half_positions(self) -> np.ndarray:
        """Row-major flat positions of the ``(i, j), i <= j`` entries, in half order."""
        m = self.group_size
        pos = np.empty(self.n_half, dtype=np.intp)
        for j in range(m):
            for i in range(j + 1):
                pos[half_index(i, j)] = i * m + j
        return pos


def half_index(i: int, j: int) -> int:
    i, j = min(i, j), max(i, j)
    return j * (j + 1) // 2 + i


@lru_cache(maxsize=None)
def build_mapping(group_size: int) -> MappingP:
    if group_size < 1:
        raise ValueError("group size must be >= 1")
    m = group_size
    rows = np.empty(m * m, dtype=np.intp)
    for j in range(m):
        for i in range(m):
            rows[i + m * j] = half_index(i, j)
    rows.setflags(write=False)
    return MappingP(m, rows)


def expand_half(phi_bar: np.ndarray, mapping: MappingP) -> np.ndarray:
    """Symmetric ``m x m`` matrix (last two axes) whose vec equals ``P @ phi_bar``."""
    phi_bar = np.asarray(phi_bar)
    if phi_bar.shape[-1] != mapping.n_half:
        raise ValueError(f"half-vector length {phi_bar.shape[-1]} != {mapping.n_half}")
    return phi_bar[..., mapping.full_index()]


def extract_half(matrix: np.ndarray, mapping: MappingP) -> np.ndarray:
    m = mapping.group_size
    matrix = np.asarray(matrix)
    if matrix.shape[-2:] != (m, m):
        raise ValueError(f"expected trailing shape {(m, m)}, got {matrix.shape[-2:]}")
    flat = matrix.reshape(*matrix.shape[:-2], m * m)
    return flat[..., mapping.half_positions()]


# ------------------------------------------------------- susceptance -> Φ


def susceptance_to_scattering(b, z0: float = Z0_OHMS) -> ad.ComplexPair:
    """Differentiable map ``(I + j z0 B)^-1 (I - j z0 B)`` for real symmetric ``B``.

    ``b`` is a node or array with trailing shape ``(m, m)``; leading axes are
    batch axes.  Built from :func:`cinverse` and :func:`cmatmul`.
    """
    b = ad.as_node(b)
    m = b.shape[-1]
    if b.ndim < 2 or b.shape[-2] != m:
        raise ad.ShapeError(f"susceptance blocks must be square, got {b.shape}")
    return normalized_to_scattering(ad.scale(b, z0))


def normalized_to_scattering(a) -> ad.ComplexPair:
    """Cayley map for the dimensionless argument ``a = z0 * B``."""
    a = ad.as_node(a)
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    left = ad.cinverse(ad.ComplexPair(ad.constant(eye), a))
    right = ad.ComplexPair(ad.constant(eye), ad.neg(a))
    return ad.cmatmul(left, right)


def scattering_from_half(half_norm, mapping: MappingP) -> ad.ComplexPair:
    """Half-vectorised normalised susceptances ``(..., n_half)`` to half-vectorised Φ.

    Differentiable end to end: expand with ``P``, apply the Cayley map, keep
    the diagonal and upper-triangular entries.
    """
    half_norm = ad.as_node(half_norm)
    m = mapping.group_size
    full = ad.take(half_norm, mapping.full_index().ravel(), axis=-1)
    full = ad.reshape(full, half_norm.shape[:-1] + (m, m))
    phi = normalized_to_scattering(full)
    pos = mapping.half_positions()
    flat_shape = half_norm.shape[:-1] + (m * m,)
    re = ad.take(ad.reshape(phi.re, flat_shape), pos, axis=-1)
    im = ad.take(ad.reshape(phi.im, flat_shape), pos, axis=-1)
    return ad.ComplexPair(re, im)


@dataclass
class ScatteringMatrix:
    """Block-diagonal scattering matrix stored as ``(G, m, m)`` complex blocks."""

    blocks: np.ndarray

    @property
    def G(self) -> int:
        return self.blocks.shape[0]

    @property
    def group_size(self) -> int:
        return self.blocks.shape[-1]

    def full(self) -> np.ndarray:
        m = self.group_size
        out = np.zeros((self.G * m, self.G * m), dtype=np.complex128)
        for g in range(self.G):
            out[g * m : (g + 1) * m, g * m : (g + 1) * m] = self.blocks[g]
        return out

    def half(self) -> np.ndarray:
        """The stacked half-vector φ̄ of length ``G * m(m+1)/2``."""
        return extract_half(self.blocks, build_mapping(self.group_size)).reshape(-1)

    def errors(self) -> tuple[float, float]:
        return feasibility_errors(self.blocks)

    def validate(self, unitary_tol: float = 1e-9, symmetric_tol: float = 1e-12) -> None:
        u, s = self.errors()
        if u >= unitary_tol or s >= symmetric_tol:
            raise ValueError(f"infeasible scattering: unitarity {u:.3e}, symmetry {s:.3e}")


def feasibility_errors(blocks: np.ndarray) -> tuple[float, float]:
    """Worst-case ``||ΦᴴΦ - I||_F`` and ``||Φ - Φᵀ||_F`` over all blocks."""
    blocks = np.asarray(blocks)
    m = blocks.shape[-1]
    gram = np.swapaxes(blocks.conj(), -1, -2) @ blocks
    unit = np.linalg.norm(gram - np.eye(m), axis=(-2, -1))
    sym = np.linalg.norm(blocks - np.swapaxes(blocks, -1, -2), axis=(-2, -1))
    return float(np.max(unit)), float(np.max(sym))


def scattering_from_susceptance(b_blocks: np.ndarray, z0: float = Z0_OHMS) -> ScatteringMatrix:
    return ScatteringMatrix(susceptance_to_scattering(b_blocks, z0).numpy())


def random_susceptance(cfg: SystemConfig, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Half-vectorised susceptances with i.i.d. N(0, 1/z0²) entries.

    Shape ``(half_total,)`` or ``(half_total, count)``.
    """
    shape = (cfg.half_total,) if count is None else (cfg.half_total, count)
    return rng.standard_normal(shape) / cfg.z0


def susceptance_blocks(b_half: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """``(half_total,)`` susceptance vector to ``(G, m, m)`` symmetric blocks."""
    mapping = build_mapping(cfg.group_size)
    return expand_half(np.asarray(b_half).reshape(cfg.G, cfg.half_group), mapping)


def random_feasible_scattering(cfg: SystemConfig, seed) -> ScatteringMatrix:
    rng = np.random.default_rng(seed)
    blocks = susceptance_blocks(random_susceptance(cfg, rng), cfg)
    return scattering_from_susceptance(blocks, cfg.z0)


def training_matrix_from_susceptance(b_tilde: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Susceptance matrix ``(half_total, tau)`` in siemens to the complex Φ̃ ``(half_total, tau)``."""
    b_tilde = np.asarray(b_tilde, dtype=np.float64)
    if b_tilde.ndim != 2 or b_tilde.shape[0] != cfg.half_total:
        raise ValueError(f"susceptance matrix must be ({cfg.half_total}, tau), got {b_tilde.shape}")
    tau = b_tilde.shape[1]
    half = (b_tilde.T * cfg.z0).reshape(tau, cfg.G, cfg.half_group)
    phi = scattering_from_half(half, build_mapping(cfg.group_size)).numpy()
    return phi.reshape(tau, cfg.half_total).T


def scattering_list_from_susceptance(b_tilde: np.ndarray, cfg: SystemConfig) -> list[ScatteringMatrix]:
    return [
        scattering_from_susceptance(susceptance_blocks(b_tilde[:, t], cfg), cfg.z0)
        for t in range(b_tilde.shape[1])
    ]


# ---------------------------------------------------------- cascaded channel


@dataclass
class ChannelPair:
    """RIS-BS channel ``h_it`` (N x M) and user-RIS channels ``h_ri`` (M x KU)."""

    h_it: np.ndarray
    h_ri: np.ndarray

    def user(self, k: int, U: int) -> np.ndarray:
        return self.h_ri[:, k * U : (k + 1) * U]

    def check(self, cfg: SystemConfig) -> None:
        if self.h_it.shape != (cfg.N, cfg.M) or self.h_ri.shape != (cfg.M, cfg.KU):
            raise ValueError(
                f"channel shapes {self.h_it.shape}, {self.h_ri.shape} do not match "
                f"({cfg.N}, {cfg.M}) and ({cfg.M}, {cfg.KU})"
            )


def assemble_cascaded(ch: ChannelPair, mapping: MappingP, cfg: SystemConfig) -> np.ndarray:
    """Reduced-coefficient cascaded channel, shape ``(NU, K, half_total)``."""
    ch.check(cfg)
    if mapping.group_size != cfg.group_size:
        raise ValueError("mapping group size does not match config")
    return assemble_cascaded_batch(ch.h_it[None], ch.h_ri[None], cfg)[0]


def assemble_cascaded_batch(h_it: np.ndarray, h_ri: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Batched :func:`assemble_cascaded` over a leading sample axis."""
    S = h_it.shape[0]
    if h_it.shape[1:] != (cfg.N, cfg.M) or h_ri.shape[1:] != (cfg.M, cfg.KU) or h_ri.shape[0] != S:
        raise ValueError(f"channel shapes {h_it.shape}, {h_ri.shape} do not match config")
    m, G = cfg.group_size, cfg.G
    # hit[s, n, g, i], hri[s, g, j, k, u]
    hit = h_it.reshape(S, cfg.N, G, m)
    hri = h_ri.reshape(S, G, m, cfg.K, cfg.U)
    # Kronecker entry for vec index i + m*j is H_RI[j, u] * H_IT[n, i]
    kron = np.einsum("sgjku,sngi->skungji", hri, hit)
    kron = kron.reshape(S, cfg.K, cfg.NU, G, m * m)
    qbar = np.zeros((S, cfg.K, cfg.NU, G, cfg.half_group), dtype=np.complex128)
    rows = build_mapping(m).rows
    for r, h in enumerate(rows):
        qbar[..., h] += kron[..., r]
    return qbar.reshape(S, cfg.K, cfg.NU, cfg.half_total).transpose(0, 2, 1, 3).copy()


def effective_channel(qbar_k: np.ndarray, phi_bar: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """``vec⁻¹(Q̄_k φ̄)`` as an ``N x U`` matrix."""
    return (qbar_k @ phi_bar).reshape(cfg.U, cfg.N).T
