"""Uplink pilot transmission under the two-phase protocol.

Per subframe ``t`` the BS receives ``Y^t = sqrt(P_u) H_IT Φ^t H_RI X + N^t``.
Decorrelating with user ``k``'s pilot rows isolates
``sqrt(P_u) H_IT Φ^t H_RI,k`` plus noise of variance ``σ²/KU`` per entry, and
stacking ``vec(Y_k^t)`` over subframes yields ``sqrt(P_u) Q̄_k Φ̃ + Ñ``.

:func:`run_phase` simulates subframe by subframe;
:func:`observe_stacked` draws the stacked linear model directly and is what
the batched training and evaluation loops use.  The tests hold the two to
agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .physics import (
    ChannelPair,
    ScatteringMatrix,
    SystemConfig,
    feasibility_errors,
    scattering_list_from_susceptance,
)


@dataclass(frozen=True)
class PilotBook:
    """DFT pilot matrix ``X`` (KU x KU); user ``k`` owns rows ``kU .. (k+1)U - 1``."""

    X: np.ndarray
    K: int
    U: int

    @property
    def KU(self) -> int:
        return self.K * self.U

    def user(self, k: int) -> np.ndarray:
        return self.X[k * self.U : (k + 1) * self.U]


def build_pilot_book(K: int, U: int) -> PilotBook:
    ku = K * U
    if ku < 1:
        raise ValueError("need at least one user antenna")
    m = np.arange(ku)
    X = np.exp(-2j * np.pi * np.outer(m, m) / ku)
    return PilotBook(X, K, U)


def complex_noise(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with the given per-entry variance."""
    s = np.sqrt(variance / 2.0)
    return s * rng.standard_normal(shape) + 1j * s * rng.standard_normal(shape)


def transmit_subframe(ch: ChannelPair, phi: ScatteringMatrix, book: PilotBook, pu: float,
                      noise_power: float, rng: np.random.Generator | None) -> np.ndarray:
    """Received ``N x KU`` block for one subframe; ``rng=None`` means noiseless."""
    y = np.sqrt(pu) * ch.h_it @ phi.full() @ ch.h_ri @ book.X
    if rng is not None:
        y = y + complex_noise(rng, y.shape, noise_power)
    return y


def decorrelate(y: np.ndarray, x_k: np.ndarray, ku: int) -> np.ndarray:
    return y @ x_k.conj().T / ku


@dataclass
class PhaseObservation:
    """Stacked observations ``(NU, K, tau)`` plus the configuration that produced them."""

    y: np.ndarray
    phase: str
    susceptance: np.ndarray | None = None
    scattering: list[ScatteringMatrix] = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def tau(self) -> int:
        return self.y.shape[-1]

    def training_matrix(self) -> np.ndarray:
        """Φ̃, shape ``(half_total, tau)``."""
        return np.stack([s.half() for s in self.scattering], axis=1)


def run_phase(ch: ChannelPair, scattering: list[ScatteringMatrix], book: PilotBook, cfg: SystemConfig,
              rng: np.random.Generator | None, phase: str = "I") -> PhaseObservation:
    if len(scattering) < 1:
        raise ValueError("a phase needs at least one subframe")
    y = np.empty((cfg.NU, cfg.K, len(scattering)), dtype=np.complex128)
    for t, phi in enumerate(scattering):
        yt = transmit_subframe(ch, phi, book, cfg.pu, cfg.noise_power, rng)
        for k in range(cfg.K):
            # column-major vec: entry (n, u) -> u*N + n
            y[:, k, t] = decorrelate(yt, book.user(k), book.KU).T.ravel()
    return PhaseObservation(y, phase, scattering=list(scattering))


TsmoCallback = Callable[[PhaseObservation, float], np.ndarray]


def two_phase_session(ch: ChannelPair, phase1_susceptance: np.ndarray, tsmo_callback: TsmoCallback,
                      cfg: SystemConfig, seed=None) -> tuple[PhaseObservation, PhaseObservation]:
    """Phase I with the frozen susceptances, then the callback's Phase-II design.

    ``tsmo_callback(obs_I, pu_dbm)`` returns a ``(half_total, tau2)`` susceptance
    matrix in siemens.  ``seed=None`` runs noiseless.
    """
    book = build_pilot_book(cfg.K, cfg.U)
    rng1 = None if seed is None else np.random.default_rng([seed, 1])
    rng2 = None if seed is None else np.random.default_rng([seed, 2])
    phase1_susceptance = np.asarray(phase1_susceptance, dtype=np.float64).reshape(cfg.half_total, -1)
    first = run_phase(ch, scattering_list_from_susceptance(phase1_susceptance, cfg), book, cfg, rng1, "I")
    first.susceptance = phase1_susceptance

    b2 = np.asarray(tsmo_callback(first, cfg.pu_dbm), dtype=np.float64)
    if b2.shape != (cfg.half_total, cfg.tau2):
        raise ValueError(f"Phase-II susceptance must have shape {(cfg.half_total, cfg.tau2)}, got {b2.shape}")
    scattering = scattering_list_from_susceptance(b2, cfg)
    second = run_phase(ch, scattering, book, cfg, rng2, "II")
    second.susceptance = b2
    # control latency is bookkeeping only
    second.meta["t_ctrl"] = 0
    second.meta["pilot_slots"] = cfg.KU * (first.tau + second.tau)
    return first, second


def check_scattering_list(scattering: list[ScatteringMatrix], unitary_tol=1e-9, symmetric_tol=1e-12) -> bool:
    return all(
        u < unitary_tol and s < symmetric_tol
        for u, s in (feasibility_errors(phi.blocks) for phi in scattering)
    )


def observe_stacked(qbar: np.ndarray, phi_tilde: np.ndarray, pu, noise_power: float, KU: int,
                    rng: np.random.Generator | None) -> np.ndarray:
    """Batched ``sqrt(P_u) Q̄_k Φ̃ + Ñ`` for every user.

    ``qbar`` is ``(S, NU, K, H)``; ``phi_tilde`` is ``(H, tau)`` or ``(S, H, tau)``;
    ``pu`` is a scalar or ``(S,)``.  Returns ``(S, NU, K, tau)``.
    """
    phi_tilde = np.asarray(phi_tilde)
    if phi_tilde.ndim == 2:
        y = np.einsum("snkh,ht->snkt", qbar, phi_tilde)
    else:
        y = np.einsum("snkh,sht->snkt", qbar, phi_tilde)
    amp = np.sqrt(np.asarray(pu, dtype=np.float64)).reshape(-1, 1, 1, 1)
    y = amp * y
    if rng is not None:
        y = y + complex_noise(rng, y.shape, noise_power / KU)
    return y
