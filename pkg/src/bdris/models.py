"""TSMO and DACE networks on top of :mod:`bdris.autodiff`.

Batch conventions inside the networks:

* TSMO input ``(B, 2*NU*K*tau1 + 1)``; output ``(B, H, tau2)`` raw values,
  read as dimensionless ``z0 * B`` susceptances.
* DACE input ``(B, 2, NU, K, tau2)``; output ``(B, 2, NU, K, H)`` holding the
  gain-normalised real and imaginary parts of Q̄.

Checkpoint files (little endian)::

    magic      4 bytes  b"BDMC"
    version    u32
    system     SystemConfig block (see bdris.channels.pack_configs, system part)
    norm       f64 x 3  pilot_mean, pilot_std, label_gain
    model      u32 x 8  d_model, d_ff, n_heads, n_attn_intra, n_attn_inter,
                        d_group, use_tsmo, n_widths
               u32 x n_widths  TSMO widths
               f64      pe_base
    pu range   f64 x 2  lo_dbm, hi_dbm
    phase I    u64 seed, u32 tau1, f64 x (H*tau1) susceptances (siemens)
    phase II   u32 tau (0 unless TSMO is disabled), f64 x (H*tau) fixed susceptances
    params     u32 count, then per record: u32 name length, name (utf-8),
               u32 ndim, u32 x ndim shape, f64 data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .channels import NormStats
from .physics import SystemConfig, build_mapping, random_susceptance, scattering_from_half

CKPT_MAGIC = b"BDMC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 2
    n_attn_intra: int = 2
    n_attn_inter: int = 2
    tsmo_widths: tuple[int, ...] = (128, 128, 128)
    d_group: int = 128
    pe_base: float = 1000.0
    use_tsmo: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal encodings")
        if not self.tsmo_widths:
            raise ValueError("TSMO needs at least one FC layer")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(d_model=256, d_ff=512, n_heads=2, n_attn_intra=3, n_attn_inter=3,
                   tsmo_widths=(400, 400, 400), d_group=400)


# -------------------------------------------------------------- layers


class Module:
    """Parameter container with dotted names."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, ad.Node) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, ad.Node]:
        return dict(self.named_parameters())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = ad.parameter(glorot(rng, fan_in, fan_out))
        self.bias = ad.parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x):
        return self.fc2(ad.relu(self.fc1(x)))


def sinusoidal_pe(positions: int, d_model: int, base: float = 1000.0) -> np.ndarray:
    if d_model % 2:
        raise ValueError("d_model must be even")
    p = np.arange(positions)[:, None]
    j = np.arange(d_model // 2)[None, :]
    angle = p / base ** (2 * j / d_model)
    pe = np.empty((positions, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        d_k = d_model // n_heads
        self.n_heads = n_heads
        shape = (n_heads, d_model, d_k)
        self.wq = ad.parameter(glorot(rng, d_model, d_k, shape))
        self.wk = ad.parameter(glorot(rng, d_model, d_k, shape))
        self.wv = ad.parameter(glorot(rng, d_model, d_k, shape))
        self.wo = ad.parameter(glorot(rng, d_model, d_model))

    def __call__(self, x, return_weights: bool = False):
        """``x`` is ``(..., E, d_model)``."""
        h, d_model, d_k = self.wq.shape
        # one 2-D projection for all heads of Q, K and V: (d_model, 3 h d_k)
        packed = ad.concat([ad.transpose(w, (1, 0, 2)) for w in (self.wq, self.wk, self.wv)], axis=1)
        qkv = ad.matmul(x, ad.reshape(packed, (d_model, 3 * h * d_k)))
        lead = x.shape[:-1]
        qkv = ad.reshape(qkv, lead + (3 * h, d_k))
        nd = len(lead) + 2
        qkv = ad.transpose(qkv, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))  # (..., 3h, E, d_k)
        q, k, v = (ad.getitem(qkv, (Ellipsis, slice(i * h, (i + 1) * h), slice(None), slice(None)))
                   for i in range(3))
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(d_k))
        weights = ad.softmax_rows(scores)
        heads = ad.matmul(weights, v)  # (..., h, E, d_k)
        nd = heads.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        cat = ad.reshape(ad.transpose(heads, axes), x.shape)
        out = ad.matmul(cat, self.wo)
        return (out, weights) if return_weights else out


class AttentionBlock(Module):
    """Pre-LN attention, residual, LN, ReLU feed-forward, residual."""

    def __init__(self, d_model: int, d_ff: int, n_heads: int, rng):
        self.ln1 = LayerNorm(d_model)
        self.mhsa = MultiHeadSelfAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, d_model, rng)

    def __call__(self, x):
        rc1 = ad.add(self.mhsa(self.ln1(x)), x)
        return ad.add(self.ff(self.ln2(rc1)), rc1)


class AttentionBranch(Module):
    """LN, down-projection, positional encoding, stacked blocks, up-projection."""

    def __init__(self, positions: int, width: int, mcfg: ModelConfig, n_layers: int, rng):
        d = mcfg.d_model
        self.ln = LayerNorm(width)
        self.down = Linear(width, d, rng)
        self.blocks = [AttentionBlock(d, mcfg.d_ff, mcfg.n_heads, rng) for _ in range(n_layers)]
        self.up = Linear(d, width, rng)
        self._pe = sinusoidal_pe(positions, d, mcfg.pe_base)
        self.use_pe = True

    def __call__(self, x):
        h = self.down(self.ln(x))
        if self.use_pe:
            h = ad.add(h, self._pe)
        for block in self.blocks:
            h = block(h)
        return self.up(h)


# ------------------------------------------------------------------ TSMO


class Tsmo(Module):
    def __init__(self, cfg: SystemConfig, mcfg: ModelConfig, rng):
        widths = mcfg.tsmo_widths
        if widths[-1] % cfg.G:
            raise ValueError(f"last TSMO width {widths[-1]} must be divisible by G={cfg.G}")
        self.cfg = cfg
        dims = (2 * cfg.NU * cfg.K * cfg.tau1 + 1,) + tuple(widths)
        self.fc = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.head = FeedForward(widths[-1] // cfg.G, mcfg.d_group, cfg.half_group * cfg.tau2, rng)

    def __call__(self, x):
        cfg = self.cfg
        for layer in self.fc:
            x = ad.relu(layer(x))
        B = x.shape[0]
        groups = ad.reshape(x, (B, cfg.G, -1))
        out = self.head(groups)  # (B, G, half_group * tau2)
        return ad.reshape(out, (B, cfg.half_total, cfg.tau2))


# ------------------------------------------------------------------ DACE


class Dace(Module):
    def __init__(self, cfg: SystemConfig, mcfg: ModelConfig, rng):
        d = mcfg.d_model
        self.cfg = cfg
        self.embed = FeedForward(cfg.tau2, d, d, rng)
        self.intra = AttentionBranch(2 * cfg.NU, cfg.K * d, mcfg, mcfg.n_attn_intra, rng)
        self.inter = AttentionBranch(2 * cfg.K, cfg.NU * d, mcfg, mcfg.n_attn_inter, rng)
        self.fuse = FeedForward(2 * d, d, d, rng)
        self.head = Linear(d, cfg.half_total, rng)

    def branches(self, x):
        cfg = self.cfg
        B = x.shape[0]
        emb = self.embed(x)  # (B, 2, NU, K, d)
        d = emb.shape[-1]
        intra = self.intra(ad.reshape(emb, (B, 2 * cfg.NU, cfg.K * d)))
        intra = ad.reshape(intra, (B, 2, cfg.NU, cfg.K, d))
        swapped = ad.transpose(emb, (0, 1, 3, 2, 4))
        inter = self.inter(ad.reshape(swapped, (B, 2 * cfg.K, cfg.NU * d)))
        inter = ad.transpose(ad.reshape(inter, (B, 2, cfg.K, cfg.NU, d)), (0, 1, 3, 2, 4))
        return intra, inter

    def __call__(self, x):
        intra, inter = self.branches(x)
        fused = self.fuse(ad.concat([intra, inter], axis=-1))
        return self.head(fused)


# ----------------------------------------------------------- the bundle


@dataclass
class ModelBundle:
    cfg: SystemConfig
    mcfg: ModelConfig
    norm: NormStats
    phase1_seed: int
    phase1_susceptance: np.ndarray
    pu_range_dbm: tuple[float, float]
    dace: Dace
    tsmo: Tsmo | None = None
    fixed_susceptance: np.ndarray | None = None
    _phi1: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def create(cls, cfg: SystemConfig, mcfg: ModelConfig, norm: NormStats, pu_range_dbm, seed: int,
               phase1_seed: int | None = None) -> "ModelBundle":
        """Fresh weights from ``seed``; Phase-I (and, without TSMO, Phase-II) scattering from ``phase1_seed``."""
        phase1_seed = seed if phase1_seed is None else phase1_seed
        rng = np.random.default_rng([seed, 7])
        dace = Dace(cfg, mcfg, rng)
        tsmo = Tsmo(cfg, mcfg, rng) if mcfg.use_tsmo else None
        srng = np.random.default_rng([phase1_seed, 3])
        b1 = random_susceptance(cfg, srng, cfg.tau1)
        fixed = None if mcfg.use_tsmo else random_susceptance(cfg, srng, cfg.tau2)
        return cls(cfg, mcfg, norm, phase1_seed, b1, tuple(pu_range_dbm), dace, tsmo, fixed)

    def parameters(self) -> dict[str, ad.Node]:
        params = {f"dace.{k}": v for k, v in self.dace.named_parameters()}
        if self.tsmo is not None:
            params.update({f"tsmo.{k}": v for k, v in self.tsmo.named_parameters()})
        return params

    @property
    def phase1_matrix(self) -> np.ndarray:
        if self._phi1 is None:
            self._phi1 = _training_matrix(self.phase1_susceptance, self.cfg)
        return self._phi1

    def standardize_pu(self, pu_dbm) -> np.ndarray:
        lo, hi = self.pu_range_dbm
        spread = (hi - lo) / np.sqrt(12.0) if hi > lo else 1.0
        return (np.asarray(pu_dbm, dtype=np.float64) - 0.5 * (lo + hi)) / spread

    def standardize(self, y: np.ndarray) -> np.ndarray:
        return (y - self.norm.pilot_mean) / self.norm.pilot_std

    def tsmo_input(self, y1: np.ndarray, pu_dbm) -> np.ndarray:
        """``y1`` is ``(B, NU, K, tau1)`` complex; returns ``(B, 2*NU*K*tau1 + 1)``."""
        B = y1.shape[0]
        parts = np.stack([y1.real, y1.imag], axis=1)
        flat = (parts - self.norm.pilot_mean) / self.norm.pilot_std
        pu = self.standardize_pu(np.broadcast_to(pu_dbm, (B,)))
        return np.concatenate([flat.reshape(B, -1), pu[:, None]], axis=1)

    def phase2_raw(self, y1: np.ndarray, pu_dbm) -> ad.Node:
        """Dimensionless ``z0*B`` for Phase II, ``(B, H, tau2)``."""
        if self.tsmo is None:
            B = y1.shape[0]
            fixed = self.fixed_susceptance * self.cfg.z0
            return ad.constant(np.broadcast_to(fixed, (B,) + fixed.shape))
        return self.tsmo(ad.constant(self.tsmo_input(y1, pu_dbm)))

    def tsmo_forward(self, obs, pu_dbm: float) -> np.ndarray:
        """Phase-II susceptance matrix in siemens for one Phase-I observation."""
        raw = self.phase2_raw(obs.y[None], pu_dbm)
        return raw.value[0] / self.cfg.z0

    def training_pair(self, raw: ad.Node) -> ad.ComplexPair:
        """Φ̃ for Phase II as a pair of ``(B, H, tau2)`` nodes."""
        cfg = self.cfg
        B = raw.shape[0]
        half = ad.reshape(ad.transpose(raw, (0, 2, 1)), (B, cfg.tau2, cfg.G, cfg.half_group))
        phi = scattering_from_half(half, build_mapping(cfg.group_size))
        shape = (B, cfg.tau2, cfg.half_total)
        return ad.ComplexPair(ad.transpose(ad.reshape(phi.re, shape), (0, 2, 1)),
                              ad.transpose(ad.reshape(phi.im, shape), (0, 2, 1)))

    def dace_input(self, y2: ad.ComplexPair) -> ad.Node:
        """Stacked ``(B, K, NU, tau2)`` pair to standardised ``(B, 2, NU, K, tau2)``."""
        B, K, NU, tau = y2.shape
        re = ad.reshape(y2.re, (B, 1, K, NU, tau))
        im = ad.reshape(y2.im, (B, 1, K, NU, tau))
        x = ad.transpose(ad.concat([re, im], axis=1), (0, 1, 3, 2, 4))
        return ad.scale(ad.sub(x, self.norm.pilot_mean), 1.0 / self.norm.pilot_std)

    def forward(self, qbar: np.ndarray, pu_dbm, noise1: np.ndarray | None, noise2: np.ndarray | None):
        """Whole pipeline on a batch of channels.

        ``qbar`` is ``(B, NU, K, H)`` complex, ``pu_dbm`` scalar or ``(B,)``, noises are
        ``(B, NU, K, tau1)`` and ``(B, NU, K, tau2)`` (or ``None`` for noiseless).
        Returns the ``(B, 2, NU, K, H)`` normalised estimate and the Phase-II pair.
        """
        B = qbar.shape[0]
        pu_dbm = np.broadcast_to(np.asarray(pu_dbm, dtype=np.float64), (B,))
        amp = np.sqrt(10.0 ** ((pu_dbm - 30.0) / 10.0))
        y1 = amp[:, None, None, None] * np.einsum("bnkh,ht->bnkt", qbar, self.phase1_matrix)
        if noise1 is not None:
            y1 = y1 + noise1
        phi2 = self.training_pair(self.phase2_raw(y1, pu_dbm))

        q = np.transpose(qbar, (0, 2, 1, 3)) * amp[:, None, None, None]
        sig = ad.cmatmul(ad.ComplexPair(q.real, q.imag),
                         ad.ComplexPair(ad.reshape(phi2.re, (B, 1) + phi2.shape[1:]),
                                        ad.reshape(phi2.im, (B, 1) + phi2.shape[1:])))
        if noise2 is not None:
            n2 = np.transpose(noise2, (0, 2, 1, 3))
            sig = ad.ComplexPair(ad.add(sig.re, n2.real), ad.add(sig.im, n2.imag))
        return self.dace(self.dace_input(sig)), phi2

    def estimate(self, qhat_norm: ad.Node) -> np.ndarray:
        """Normalised network output to complex Q̄̂ ``(B, NU, K, H)``."""
        v = qhat_norm.value * np.sqrt(self.norm.label_gain)
        return v[:, 0] + 1j * v[:, 1]

    def normalized_label(self, qbar: np.ndarray) -> np.ndarray:
        return np.stack([qbar.real, qbar.imag], axis=1) / np.sqrt(self.norm.label_gain)


def _training_matrix(b: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    from .physics import training_matrix_from_susceptance

    return training_matrix_from_susceptance(b, cfg)


# ------------------------------------------------------------ checkpoints


def _pack_system(cfg: SystemConfig) -> bytes:
    return struct.pack("<7I3d", cfg.N, cfg.M, cfg.group_size, cfg.K, cfg.U, cfg.tau1, cfg.tau2,
                       cfg.pu, cfg.noise_power, cfg.z0)


def _array_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(bundle: ModelBundle, path) -> None:
    m = bundle.mcfg
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _pack_system(bundle.cfg)]
    parts.append(struct.pack("<3d", bundle.norm.pilot_mean, bundle.norm.pilot_std, bundle.norm.label_gain))
    parts.append(struct.pack("<8I", m.d_model, m.d_ff, m.n_heads, m.n_attn_intra, m.n_attn_inter,
                             m.d_group, int(m.use_tsmo), len(m.tsmo_widths)))
    parts.append(struct.pack(f"<{len(m.tsmo_widths)}I", *m.tsmo_widths))
    parts.append(struct.pack("<d", m.pe_base))
    parts.append(struct.pack("<2d", *bundle.pu_range_dbm))
    parts.append(struct.pack("<QI", bundle.phase1_seed, bundle.phase1_susceptance.shape[1]))
    parts.append(_array_bytes(bundle.phase1_susceptance))
    fixed = bundle.fixed_susceptance
    parts.append(struct.pack("<I", 0 if fixed is None else fixed.shape[1]))
    if fixed is not None:
        parts.append(_array_bytes(fixed))
    params = bundle.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, node in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{node.ndim}I", node.ndim, *node.shape))
        parts.append(_array_bytes(node.value))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        out = struct.unpack_from("<" + fmt, self.buf, self.pos)
        self.pos += struct.calcsize("<" + fmt)
        return out

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        a = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.pos).reshape(shape)
        self.pos += 8 * n
        return a.astype(np.float64)


def load_checkpoint(path) -> ModelBundle:
    r = _Reader(Path(path).read_bytes())
    if r.buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    r.pos = 4
    (version,) = r.take("I")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    s = r.take("7I3d")
    cfg = SystemConfig(*s[:7], pu=s[7], noise_power=s[8], z0=s[9])
    norm = NormStats(*r.take("3d"))
    d_model, d_ff, n_heads, n_a1, n_a2, d_group, use_tsmo, n_w = r.take("8I")
    widths = r.take(f"{n_w}I")
    (pe_base,) = r.take("d")
    mcfg = ModelConfig(d_model, d_ff, n_heads, n_a1, n_a2, tuple(widths), d_group, pe_base, bool(use_tsmo))
    pu_range = r.take("2d")
    phase1_seed, tau1 = r.take("QI")
    b1 = r.array((cfg.half_total, tau1))
    (tau_fixed,) = r.take("I")
    fixed = r.array((cfg.half_total, tau_fixed)) if tau_fixed else None
    bundle = ModelBundle.create(cfg, mcfg, norm, pu_range, seed=0, phase1_seed=phase1_seed)
    bundle.phase1_susceptance = b1
    bundle.fixed_susceptance = fixed
    params = bundle.parameters()
    (count,) = r.take("I")
    if count != len(params):
        raise ValueError(f"{path}: parameter count {count} does not match architecture ({len(params)})")
    for _ in range(count):
        (n,) = r.take("I")
        name = r.buf[r.pos : r.pos + n].decode("utf-8")
        r.pos += n
        (ndim,) = r.take("I")
        shape = r.take(f"{ndim}I")
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError(f"{path}: unexpected parameter {name} {shape}")
        params[name].value[...] = r.array(shape)
    return bundle
