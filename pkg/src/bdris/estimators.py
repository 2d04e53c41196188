"""LS and LMMSE estimators of the reduced-coefficient cascaded channel.

Both act on the stacked per-user model ``Y_k = sqrt(P_u) Q̄_k Φ̃ + Ñ`` with
``Y_k`` of shape ``(NU, tau)`` and ``Φ̃`` of shape ``(H, tau)``,
``H = M(M̄+1)/2``.  Leading axes of ``Y`` are batch axes.

The LMMSE estimator works row by row (one row of ``Q̄_k`` per BS-side receive
dimension) with a single column covariance per user estimated from training
data.  It is a generic stand-in, not the sequential per-group scheme of the
published low-overhead baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RANK_RTOL = 1e-10
COV_REG = 1e-10


class UnderdeterminedError(ValueError):
    """The training matrix has fewer subframes than unknowns or is rank deficient."""


def ls_estimate(y: np.ndarray, phi_tilde: np.ndarray, pu: float) -> np.ndarray:
    """``Q̄̂ = Y Φ̃ᴴ (Φ̃ Φ̃ᴴ)⁻¹ / sqrt(P_u)``."""
    phi_tilde = np.asarray(phi_tilde)
    H, tau = phi_tilde.shape
    if tau < H:
        raise UnderdeterminedError(f"LS needs tau >= {H} subframes, got {tau}")
    sv = np.linalg.svd(phi_tilde, compute_uv=False)
    if sv[-1] <= RANK_RTOL * sv[0]:
        raise UnderdeterminedError("training scattering matrix is rank deficient")
    gram = phi_tilde @ phi_tilde.conj().T
    right = np.linalg.solve(gram.T, phi_tilde.conj()).T  # Φ̃ᴴ (Φ̃Φ̃ᴴ)⁻¹, tau x H
    return y @ right / np.sqrt(pu)


def ls_mse_per_entry(phi_tilde: np.ndarray, pu: float, noise_var: float) -> float:
    """Closed-form LS error variance per coefficient, ``σ² tr((Φ̃Φ̃ᴴ)⁻¹) / (P_u H)``."""
    gram = phi_tilde @ phi_tilde.conj().T
    return float(noise_var * np.trace(np.linalg.inv(gram)).real / (pu * phi_tilde.shape[0]))


def column_covariance(qbar: np.ndarray) -> np.ndarray:
    """Per-user ``C = E[qᴴ q]`` over rows ``q`` of ``Q̄_k``; input ``(S, NU, K, H)``, output ``(K, H, H)``."""
    S, NU = qbar.shape[:2]
    return np.einsum("srka,srkb->kab", qbar.conj(), qbar) / (S * NU)


def lmmse_gain(phi_tilde: np.ndarray, pu: float, noise_var: float, cov: np.ndarray) -> np.ndarray:
    """Right-multiplier ``G`` with ``Q̄̂_k = Y_k G``; ``cov`` is one user's ``(H, H)`` covariance."""
    tau = phi_tilde.shape[1]
    inner = pu * phi_tilde.conj().T @ cov @ phi_tilde + (noise_var + COV_REG) * np.eye(tau)
    inner = 0.5 * (inner + inner.conj().T)
    return np.sqrt(pu) * np.linalg.solve(inner, phi_tilde.conj().T @ cov)


def lmmse_estimate(y: np.ndarray, phi_tilde: np.ndarray, pu: float, noise_var: float,
                   cov: np.ndarray) -> np.ndarray:
    """Row-wise LMMSE; ``noise_var`` is the decorrelated per-entry variance ``σ²/KU``."""
    cov = np.asarray(cov)
    if cov.shape != (phi_tilde.shape[0],) * 2:
        raise ValueError(f"covariance must be {(phi_tilde.shape[0],) * 2}, got {cov.shape}")
    return y @ lmmse_gain(phi_tilde, pu, noise_var, cov)


@dataclass
class EstimatorReport:
    qbar_hat: np.ndarray
    nmse_per_user: np.ndarray
    pilot_slots: int

    @property
    def nmse(self) -> float:
        return float(np.mean(self.nmse_per_user))


def per_user_nmse(qbar_hat: np.ndarray, qbar: np.ndarray) -> np.ndarray:
    """Sample-averaged ``||Q̄_k - Q̄̂_k||² / ||Q̄_k||²`` per user; arrays ``(S, NU, K, H)``."""
    err = np.sum(np.abs(qbar - qbar_hat) ** 2, axis=(1, 3))
    ref = np.sum(np.abs(qbar) ** 2, axis=(1, 3))
    return np.mean(err / ref, axis=0)


def estimate_split(method: str, y: np.ndarray, qbar: np.ndarray, phi_tilde: np.ndarray, pu: float,
                   noise_power: float, KU: int, cov: np.ndarray | None = None) -> EstimatorReport:
    """Run LS or LMMSE on stacked observations ``y`` ``(S, NU, K, tau)`` for all users."""
    tau = phi_tilde.shape[1]
    noise_var = noise_power / KU
    est = np.empty(qbar.shape, dtype=np.complex128)
    for k in range(qbar.shape[2]):
        yk = y[:, :, k, :]
        if method == "ls":
            est[:, :, k, :] = ls_estimate(yk, phi_tilde, pu)
        elif method == "lmmse":
            if cov is None:
                raise ValueError("LMMSE needs a column covariance")
            est[:, :, k, :] = lmmse_estimate(yk, phi_tilde, pu, noise_var, cov[k])
        else:
            raise ValueError(f"unknown classical method {method!r}")
    return EstimatorReport(est, per_user_nmse(est, qbar), KU * tau)
