"""Synthetic clustered channel model, dataset splits and normalisation statistics.

All arrays are uniform linear arrays with half-wavelength spacing.  The
RIS-BS channel is Rician with a fixed LoS outer product and ``clusters_it``
scattering clusters whose mean angles are large-scale parameters drawn once
from ``scenario_seed``.  Every user-RIS channel is LoS or NLoS with
probability ``p_los``; its NLoS part mixes ``shared_clusters`` clusters, whose
RIS-side angles are common to all users of a sample, and
``private_clusters`` clusters per user.  Users live in a common angular
sector around a scenario-fixed direction.

Dataset files (little endian)::

    magic        4 bytes  b"BDRS"
    version      u32
    role         u32      0 train, 1 validation, 2 test
    seed_base    u64
    system       u32 x 7  N, M, group_size, K, U, tau1, tau2
                 f64 x 3  pu, noise_power, z0
    channel      u32 x 3  clusters_it, shared_clusters, private_clusters
                 u64      scenario_seed
                 f64 x 6  rician_k_los, rician_k_nlos, angle_spread, p_los,
                          user_sector, wavelength
    count        u64
    per sample   f64      h_it.re, h_it.im  (N x M, row-major)
                 f64      h_ri.re, h_ri.im  (M x KU)
                 f64      qbar.re, qbar.im  (NU x K x half_total)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .physics import ChannelPair, SystemConfig, assemble_cascaded_batch

FORMAT_VERSION = 1
MAGIC = b"BDRS"
ROLES = ("train", "validation", "test")
ROLE_ALIASES = {"val": "validation", "valid": "validation"}
_SPACING = 0.5

_IT_TAG, _RI_SHARED_TAG, _RI_USER_TAG, _SCENARIO_TAG = 11, 12, 13, 14


@dataclass(frozen=True)
class ChannelModelConfig:
    clusters_it: int = 3
    shared_clusters: int = 2
    private_clusters: int = 1
    rician_k_los: float = 10.0
    rician_k_nlos: float = 0.0
    angle_spread: float = 0.05
    p_los: float = 0.5
    user_sector: float = 0.35
    scenario_seed: int = 2024
    wavelength: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p_los <= 1.0:
            raise ValueError("p_los must lie in [0, 1]")
        if self.clusters_it < 1 or self.shared_clusters < 0 or self.private_clusters < 0:
            raise ValueError("cluster counts must be non-negative (clusters_it >= 1)")
        if self.shared_clusters + self.private_clusters < 1:
            raise ValueError("user channels need at least one cluster")
        if self.rician_k_los < 0 or self.rician_k_nlos < 0:
            raise ValueError("Rician factors must be >= 0")
        if self.angle_spread < 0 or self.user_sector < 0:
            raise ValueError("angular widths must be >= 0")

    @classmethod
    def preset(cls, name: str) -> "ChannelModelConfig":
        presets = {
            "preset-A": cls(),
            # sparser, more LoS-dominated geometry
            "preset-B": cls(clusters_it=2, shared_clusters=1, private_clusters=1,
                            rician_k_los=20.0, rician_k_nlos=1.0, angle_spread=0.02),
        }
        try:
            return presets[name]
        except KeyError:
            raise ValueError(f"unknown channel preset {name!r}") from None


def steering(n: int, angle) -> np.ndarray:
    """ULA response ``exp(j 2π d k sin θ)`` for ``k = 0..n-1``; broadcasts over ``angle``."""
    angle = np.asarray(angle, dtype=np.float64)
    k = np.arange(n)
    return np.exp(2j * np.pi * _SPACING * np.multiply.outer(np.sin(angle), k))


def _crandn(rng: np.random.Generator, size=None):
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


@dataclass(frozen=True)
class _Scenario:
    bs_angle: float
    ris_angle: float
    cluster_bs: np.ndarray
    cluster_ris: np.ndarray
    sector_center: float


_scenario_cache: dict[tuple, _Scenario] = {}


def scenario(model_cfg: ChannelModelConfig) -> _Scenario:
    """Large-scale geometry shared by every sample of a scenario."""
    key = (model_cfg.scenario_seed, model_cfg.clusters_it)
    if key not in _scenario_cache:
        rng = np.random.default_rng([model_cfg.scenario_seed, _SCENARIO_TAG])
        _scenario_cache[key] = _Scenario(
            bs_angle=float(rng.uniform(-np.pi / 3, np.pi / 3)),
            ris_angle=float(rng.uniform(-np.pi / 3, np.pi / 3)),
            cluster_bs=rng.uniform(-np.pi / 2, np.pi / 2, model_cfg.clusters_it),
            cluster_ris=rng.uniform(-np.pi / 2, np.pi / 2, model_cfg.clusters_it),
            sector_center=float(rng.uniform(-np.pi / 4, np.pi / 4)),
        )
    return _scenario_cache[key]


def sample_h_it(cfg: SystemConfig, model_cfg: ChannelModelConfig, seed: int) -> np.ndarray:
    """RIS-BS channel, ``N x M``, with ``E||H||_F^2 = N M``."""
    sc = scenario(model_cfg)
    los = np.outer(steering(cfg.N, sc.bs_angle), steering(cfg.M, sc.ris_angle))
    kf = model_cfg.rician_k_los
    if np.isinf(kf):
        return los
    rng = np.random.default_rng([model_cfg.scenario_seed, _IT_TAG, seed])
    L = model_cfg.clusters_it
    gains = _crandn(rng, L)
    bs = steering(cfg.N, sc.cluster_bs + model_cfg.angle_spread * rng.standard_normal(L))
    ris = steering(cfg.M, sc.cluster_ris + model_cfg.angle_spread * rng.standard_normal(L))
    nlos = np.einsum("l,ln,lm->nm", gains, bs, ris) / np.sqrt(L)
    return np.sqrt(kf / (kf + 1.0)) * los + np.sqrt(1.0 / (kf + 1.0)) * nlos


def sample_h_ri(cfg: SystemConfig, model_cfg: ChannelModelConfig, k: int, seed: int) -> np.ndarray:
    """User ``k`` to RIS channel, ``M x U``, with ``E||H||_F^2 = M U``."""
    sc = scenario(model_cfg)
    lo, hi = sc.sector_center - model_cfg.user_sector, sc.sector_center + model_cfg.user_sector
    shared = np.random.default_rng([model_cfg.scenario_seed, _RI_SHARED_TAG, seed])
    rng = np.random.default_rng([model_cfg.scenario_seed, _RI_USER_TAG, seed, k])
    c_sh, c_pr = model_cfg.shared_clusters, model_cfg.private_clusters
    shared_ris = shared.uniform(lo, hi, c_sh)

    is_los = rng.random() < model_cfg.p_los
    ris = np.concatenate([shared_ris, rng.uniform(lo, hi, c_pr)])
    ris = ris + model_cfg.angle_spread * rng.standard_normal(c_sh + c_pr)
    ue = rng.uniform(-np.pi / 2, np.pi / 2, c_sh + c_pr)
    gains = _crandn(rng, c_sh + c_pr)
    nlos = np.einsum("c,cm,cu->mu", gains, steering(cfg.M, ris), steering(cfg.U, ue))
    nlos /= np.sqrt(c_sh + c_pr)

    kf = model_cfg.rician_k_los if is_los else model_cfg.rician_k_nlos
    los_ris, los_ue, phase = rng.uniform(lo, hi), rng.uniform(-np.pi / 2, np.pi / 2), rng.uniform(0, 2 * np.pi)
    if kf == 0.0:
        return nlos
    los = np.exp(1j * phase) * np.outer(steering(cfg.M, los_ris), steering(cfg.U, los_ue))
    if np.isinf(kf):
        return los
    return np.sqrt(kf / (kf + 1.0)) * los + np.sqrt(1.0 / (kf + 1.0)) * nlos


def sample_channels(cfg: SystemConfig, model_cfg: ChannelModelConfig, seed: int) -> ChannelPair:
    h_ri = np.concatenate([sample_h_ri(cfg, model_cfg, k, seed) for k in range(cfg.K)], axis=1)
    return ChannelPair(sample_h_it(cfg, model_cfg, seed), h_ri)


# ------------------------------------------------------------------ datasets


def _role(role: str) -> str:
    role = ROLE_ALIASES.get(role, role)
    if role not in ROLES:
        raise ValueError(f"unknown split role {role!r}")
    return role


@dataclass
class DatasetSplit:
    cfg: SystemConfig
    model_cfg: ChannelModelConfig
    role: str
    seed_base: int
    h_it: np.ndarray = field(repr=False)
    h_ri: np.ndarray = field(repr=False)
    qbar: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.h_it.shape[0]

    def __getitem__(self, i: int) -> tuple[ChannelPair, np.ndarray]:
        return ChannelPair(self.h_it[i], self.h_ri[i]), self.qbar[i]

    def subset(self, index) -> "DatasetSplit":
        return replace(self, h_it=self.h_it[index], h_ri=self.h_ri[index], qbar=self.qbar[index])

    def verify(self, rtol: float = 1e-12) -> None:
        """Recompute Q̄ from the stored channels and compare."""
        ref = assemble_cascaded_batch(self.h_it, self.h_ri, self.cfg)
        err = np.linalg.norm((ref - self.qbar).reshape(len(self), -1), axis=1)
        scale = np.linalg.norm(ref.reshape(len(self), -1), axis=1)
        if np.any(err > rtol * np.maximum(scale, 1e-300)):
            raise ValueError("stored cascaded channels do not match their channel pairs")


def sample_seed(role: str, seed_base: int, index: int) -> int:
    """Per-sample seed; roles are mixed in so splits never collide."""
    return (ROLES.index(_role(role)) << 40) + seed_base + index


def build_dataset(cfg: SystemConfig, model_cfg: ChannelModelConfig, count: int, role: str,
                  seed: int) -> DatasetSplit:
    if count < 1:
        raise ValueError("dataset count must be >= 1")
    role = _role(role)
    h_it = np.empty((count, cfg.N, cfg.M), dtype=np.complex128)
    h_ri = np.empty((count, cfg.M, cfg.KU), dtype=np.complex128)
    for i in range(count):
        ch = sample_channels(cfg, model_cfg, sample_seed(role, seed, i))
        h_it[i], h_ri[i] = ch.h_it, ch.h_ri
    qbar = assemble_cascaded_batch(h_it, h_ri, cfg)
    return DatasetSplit(cfg, model_cfg, role, seed, h_it, h_ri, qbar)


def mix_datasets(a: DatasetSplit, b: DatasetSplit, ratio: float, seed: int) -> DatasetSplit:
    """Replace a ``ratio`` fraction of ``b``'s samples (chosen by ``seed``) with samples of ``a``."""
    if len(a) != len(b):
        raise ValueError("mixed splits must have equal length")
    pick = np.random.default_rng(seed).permutation(len(b))[: int(round(ratio * len(b)))]
    out = b.subset(slice(None))
    out.h_it, out.h_ri, out.qbar = b.h_it.copy(), b.h_ri.copy(), b.qbar.copy()
    out.h_it[pick], out.h_ri[pick], out.qbar[pick] = a.h_it[pick], a.h_ri[pick], a.qbar[pick]
    return out


_SYS_U32 = ("N", "M", "group_size", "K", "U", "tau1", "tau2")
_SYS_F64 = ("pu", "noise_power", "z0")
_CH_U32 = ("clusters_it", "shared_clusters", "private_clusters")
_CH_F64 = ("rician_k_los", "rician_k_nlos", "angle_spread", "p_los", "user_sector", "wavelength")


def pack_configs(cfg: SystemConfig, model_cfg: ChannelModelConfig) -> bytes:
    return (
        struct.pack("<7I", *(getattr(cfg, f) for f in _SYS_U32))
        + struct.pack("<3d", *(getattr(cfg, f) for f in _SYS_F64))
        + struct.pack("<3I", *(getattr(model_cfg, f) for f in _CH_U32))
        + struct.pack("<Q", model_cfg.scenario_seed)
        + struct.pack("<6d", *(getattr(model_cfg, f) for f in _CH_F64))
    )


def unpack_configs(buf: bytes, offset: int) -> tuple[SystemConfig, ChannelModelConfig, int]:
    u = struct.unpack_from("<7I", buf, offset)
    offset += 28
    d = struct.unpack_from("<3d", buf, offset)
    offset += 24
    cu = struct.unpack_from("<3I", buf, offset)
    offset += 12
    (scenario_seed,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    cd = struct.unpack_from("<6d", buf, offset)
    offset += 48
    cfg = SystemConfig(**dict(zip(_SYS_U32, u)), **dict(zip(_SYS_F64, d)))
    model_cfg = ChannelModelConfig(**dict(zip(_CH_U32, cu)), scenario_seed=scenario_seed,
                                   **dict(zip(_CH_F64, cd)))
    return cfg, model_cfg, offset


def _complex_block(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=1).reshape(z.shape[0], -1)


def write_dataset(split: DatasetSplit, path) -> None:
    header = (
        MAGIC
        + struct.pack("<II", FORMAT_VERSION, ROLES.index(split.role))
        + struct.pack("<Q", split.seed_base)
        + pack_configs(split.cfg, split.model_cfg)
        + struct.pack("<Q", len(split))
    )
    body = np.concatenate(
        [_complex_block(split.h_it), _complex_block(split.h_ri), _complex_block(split.qbar)], axis=1
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.astype("<f8").tobytes())


def read_dataset(path, verify: bool = True) -> DatasetSplit:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, role_code = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    (seed_base,) = struct.unpack_from("<Q", buf, 12)
    cfg, model_cfg, offset = unpack_configs(buf, 20)
    (count,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    shapes = [(cfg.N, cfg.M), (cfg.M, cfg.KU), (cfg.NU, cfg.K, cfg.half_total)]
    sizes = [2 * int(np.prod(s)) for s in shapes]
    data = np.frombuffer(buf, dtype="<f8", offset=offset).reshape(count, sum(sizes))
    arrays = []
    start = 0
    for shape, size in zip(shapes, sizes):
        chunk = data[:, start : start + size].reshape(count, 2, *shape)
        arrays.append(chunk[:, 0] + 1j * chunk[:, 1])
        start += size
    split = DatasetSplit(cfg, model_cfg, ROLES[role_code], seed_base, *arrays)
    if verify:
        split.verify()
    return split


# ------------------------------------------------------------ normalisation


@dataclass(frozen=True)
class NormStats:
    pilot_mean: float
    pilot_std: float
    label_gain: float

    def __post_init__(self):
        if not self.pilot_std > 0:
            raise ValueError("pilot standard deviation must be positive")
        if not self.label_gain > 0:
            raise ValueError("label gain must be positive")


def label_gain(qbar: np.ndarray, cfg: SystemConfig) -> float:
    """Average ``||Q̄||_F^2 / N_tot`` over samples (leading axis)."""
    energy = np.sum(np.abs(qbar.reshape(qbar.shape[0], -1)) ** 2, axis=1)
    return float(np.mean(energy) / cfg.n_real_coefficients)


def compute_norm_stats(train: DatasetSplit, observations: np.ndarray) -> NormStats:
    """Statistics over all real and imaginary entries of the training observations."""
    if len(train) == 0:
        raise ValueError("empty training split")
    obs = np.asarray(observations)
    if obs.size == 0:
        raise ValueError("no observations")
    parts = np.concatenate([obs.real.ravel(), obs.imag.ravel()])
    std = float(parts.std())
    if not std > 0:
        raise ValueError("degenerate pilot observations: zero standard deviation")
    return NormStats(float(parts.mean()), std, label_gain(train.qbar, train.cfg))
