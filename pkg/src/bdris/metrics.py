"""Loss, NMSE and SNR reporting."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .physics import ChannelPair, ScatteringMatrix, SystemConfig


def mse_loss(qhat_norm, qbar: np.ndarray, label_gain: float) -> ad.Node:
    """Batch mean of ``||[Re, Im](Q̄)/sqrt(gain) - Q̂||² / N_tot``.

    ``qhat_norm`` is the ``(B, 2, NU, K, H)`` network output (node or array) and
    ``qbar`` the complex ``(B, NU, K, H)`` labels.
    """
    qhat_norm = ad.as_node(qhat_norm)
    label = np.stack([qbar.real, qbar.imag], axis=1) / np.sqrt(label_gain)
    if label.shape != qhat_norm.shape:
        raise ValueError(f"estimate shape {qhat_norm.shape} does not match labels {label.shape}")
    # every sample carries N_tot real coefficients, so the per-sample mean is a plain mean
    return ad.mean(ad.square(ad.sub(qhat_norm, label)))


def nmse(qbar_hat: np.ndarray, qbar: np.ndarray) -> float:
    """Sample mean of ``||Q̄ - Q̄̂||² / ||Q̄||²``; leading axis indexes samples."""
    qbar = np.asarray(qbar)
    if qbar.shape[0] < 1:
        raise ValueError("need at least one sample")
    if np.asarray(qbar_hat).shape != qbar.shape:
        raise ValueError("estimate and label shapes differ")
    S = qbar.shape[0]
    ref = np.sum(np.abs(qbar.reshape(S, -1)) ** 2, axis=1)
    if np.any(ref == 0):
        raise ValueError("zero-norm label")
    err = np.sum(np.abs((qbar - qbar_hat).reshape(S, -1)) ** 2, axis=1)
    return float(np.mean(err / ref))


def snr_report(ch: ChannelPair, phi: ScatteringMatrix, pu: float, noise_power: float,
               cfg: SystemConfig) -> tuple[np.ndarray, float]:
    """Per-user ``P_u ||H_IT Φ H_RI,k||² / (NU σ²)`` in dB and their average in dB."""
    eff = ch.h_it @ phi.full() @ ch.h_ri
    per_user = np.array([
        pu * np.linalg.norm(eff[:, k * cfg.U : (k + 1) * cfg.U]) ** 2 / (cfg.NU * noise_power)
        for k in range(cfg.K)
    ])
    return 10 * np.log10(per_user), float(10 * np.log10(per_user.mean()))


def average_snr_db(qbar: np.ndarray, phi_half: np.ndarray, pu, noise_power: float, cfg: SystemConfig) -> float:
    """Batched SNR over samples using the reduced model ``||Q̄_k φ̄||² = ||H_IT Φ H_RI,k||²``.

    ``qbar`` is ``(S, NU, K, H)``; ``phi_half`` is ``(H,)`` or ``(S, H)``.
    """
    phi_half = np.broadcast_to(phi_half, (qbar.shape[0], qbar.shape[-1]))
    eff = np.einsum("snkh,sh->snk", qbar, phi_half)
    power = np.asarray(pu, dtype=np.float64).reshape(-1, 1)
    snr = power * np.sum(np.abs(eff) ** 2, axis=1) / (cfg.NU * noise_power)
    return float(10 * np.log10(snr.mean()))
