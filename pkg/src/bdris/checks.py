"""Property suites shared by the ``check`` subcommand and the acceptance tests.

Each ``run_*`` function returns ``(passed, summary)``; the ``*_stats``
functions return the raw numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channels import NormStats
from .metrics import mse_loss
from .models import ModelBundle, ModelConfig
from .physics import (
    SystemConfig,
    ChannelPair,
    assemble_cascaded,
    build_mapping,
    effective_channel,
    feasibility_errors,
    normalized_to_scattering,
    random_feasible_scattering,
    training_matrix_from_susceptance,
    random_susceptance,
    scattering_list_from_susceptance,
)
from .protocol import build_pilot_book, complex_noise, decorrelate, observe_stacked, run_phase

UNITARY_TOL = 1e-9
SYMMETRIC_TOL = 1e-12
IDENTITY_TOL = 1e-12
GRAD_TOL = 1e-5
GRAD_STEP = 1e-6


# ---------------------------------------------------------------- physics


def physics_stats(draws: int = 10_000, group_sizes=(2, 4, 8), z0: float = 50.0, seed: int = 0):
    """Worst unitarity and symmetry errors over random susceptance draws."""
    rng = np.random.default_rng(seed)
    worst_u = worst_s = 0.0
    per_size = np.full(len(group_sizes), draws // len(group_sizes))
    per_size[: draws % len(group_sizes)] += 1
    for m, count in zip(group_sizes, per_size):
        b = rng.standard_normal((count, m, m)) / z0
        b = 0.5 * (b + np.swapaxes(b, -1, -2))
        blocks = normalized_to_scattering(z0 * b).numpy()
        u, s = feasibility_errors(blocks)
        worst_u, worst_s = max(worst_u, u), max(worst_s, s)
    return worst_u, worst_s


def identity_stats(pairs: int = 100, cfg: SystemConfig | None = None, seed: int = 0) -> float:
    """Worst relative error of ``vec⁻¹(Q̄_k φ̄)`` against ``H_IT Φ H_RI,k``."""
    cfg = cfg or SystemConfig(N=4, M=8, group_size=4, K=2, U=2)
    rng = np.random.default_rng(seed)
    mapping = build_mapping(cfg.group_size)
    worst = 0.0
    for i in range(pairs):
        ch = ChannelPair(
            (rng.standard_normal((cfg.N, cfg.M)) + 1j * rng.standard_normal((cfg.N, cfg.M))) / np.sqrt(2),
            (rng.standard_normal((cfg.M, cfg.KU)) + 1j * rng.standard_normal((cfg.M, cfg.KU))) / np.sqrt(2),
        )
        phi = random_feasible_scattering(cfg, [seed, i])
        qbar = assemble_cascaded(ch, mapping, cfg)
        for k in range(cfg.K):
            ref = ch.h_it @ phi.full() @ ch.user(k, cfg.U)
            got = effective_channel(qbar[:, k], phi.half(), cfg)
            worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    return worst


def run_physics() -> tuple[bool, str]:
    u, s = physics_stats()
    ident = identity_stats()
    ok = u < UNITARY_TOL and s < SYMMETRIC_TOL and ident < IDENTITY_TOL
    return ok, f"unitarity {u:.2e}, symmetry {s:.2e}, cascaded identity {ident:.2e}"


# --------------------------------------------------------------- protocol


def protocol_stats(samples: int = 20, noise_entries: int = 1_000_000, seed: int = 0):
    """(worst noiseless mismatch, empirical/nominal decorrelated noise variance)."""
    cfg = SystemConfig(N=4, M=8, group_size=4, K=2, U=2, tau2=8)
    rng = np.random.default_rng(seed)
    book = build_pilot_book(cfg.K, cfg.U)
    mapping = build_mapping(cfg.group_size)
    worst = 0.0
    for _ in range(samples):
        ch = ChannelPair(
            complex_noise(rng, (cfg.N, cfg.M), 1.0), complex_noise(rng, (cfg.M, cfg.KU), 1.0)
        )
        b = random_susceptance(cfg, rng, cfg.tau2)
        obs = run_phase(ch, scattering_list_from_susceptance(b, cfg), book, cfg, None)
        qbar = assemble_cascaded(ch, mapping, cfg)
        stacked = observe_stacked(qbar[None], training_matrix_from_susceptance(b, cfg), cfg.pu,
                                  cfg.noise_power, cfg.KU, None)[0]
        worst = max(worst, np.linalg.norm(stacked - obs.y) / np.linalg.norm(obs.y))

    frames = -(-noise_entries // (cfg.N * cfg.KU))
    noise = complex_noise(rng, (frames, cfg.N, cfg.KU), cfg.noise_power)
    dec = np.concatenate([decorrelate(noise, book.user(k), cfg.KU) for k in range(cfg.K)], axis=-1)
    ratio = float(np.mean(np.abs(dec) ** 2) / (cfg.noise_power / cfg.KU))
    return worst, ratio, dec.size


def run_protocol() -> tuple[bool, str]:
    worst, ratio, n = protocol_stats()
    ok = worst < IDENTITY_TOL and abs(ratio - 1.0) < 0.02
    return ok, f"stacked mismatch {worst:.2e}, noise variance ratio {ratio:.4f} over {n} entries"


# --------------------------------------------------------------- gradcheck


MICRO_SYSTEM = SystemConfig(N=2, M=4, group_size=2, K=2, U=1, tau1=1, tau2=2)
MICRO_MODEL = ModelConfig(d_model=8, d_ff=16, n_heads=2, n_attn_intra=1, n_attn_inter=1,
                          tsmo_widths=(16, 16), d_group=8)


@dataclass
class GradcheckReport:
    errors: np.ndarray
    names: list[str]

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(self.errors < GRAD_TOL))


def micro_pipeline(seed: int = 0, batch: int = 3):
    """Bundle plus a frozen-noise scalar loss closure for the micro instance."""
    cfg = MICRO_SYSTEM
    rng = np.random.default_rng([seed, 31])
    qbar = complex_noise(rng, (batch, cfg.NU, cfg.K, cfg.half_total), 1.0)
    bundle = ModelBundle.create(cfg, MICRO_MODEL, NormStats(0.0, 0.05, 1.0), (17.5, 22.5), seed=seed)
    pu = rng.uniform(17.5, 22.5, batch)
    n1 = complex_noise(rng, (batch, cfg.NU, cfg.K, cfg.tau1), cfg.noise_power / cfg.KU)
    n2 = complex_noise(rng, (batch, cfg.NU, cfg.K, cfg.tau2), cfg.noise_power / cfg.KU)

    def loss() -> ad.Node:
        out, _ = bundle.forward(qbar, pu, n1, n2)
        return mse_loss(out, qbar, bundle.norm.label_gain)

    return bundle, loss


def gradcheck_pipeline(samples: int = 200, seed: int = 0, step: float = GRAD_STEP) -> GradcheckReport:
    bundle, loss = micro_pipeline(seed)
    params = bundle.parameters()
    for p in params.values():
        p.zero_grad()
    loss().backward()
    names = list(params)
    sizes = np.array([params[n].value.size for n in names])
    rng = np.random.default_rng([seed, 32])
    flat = rng.choice(sizes.sum(), size=samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors, picked = [], []
    for f in flat:
        t = int(np.searchsorted(offsets, f, side="right") - 1)
        node = params[names[t]]
        index = np.unravel_index(int(f - offsets[t]), node.shape)
        analytic = float(node.grad[index])
        numeric = ad.numerical_grad(lambda: float(loss().value), node.value, index, step)
        errors.append(ad.relative_error(analytic, numeric))
        picked.append(f"{names[t]}{tuple(int(i) for i in index)}")
    return GradcheckReport(np.array(errors), picked)


def run_gradcheck() -> tuple[bool, str]:
    rep = gradcheck_pipeline()
    ok = rep.pass_fraction >= 0.99
    return ok, f"{rep.pass_fraction:.1%} of {rep.errors.size} parameters within {GRAD_TOL:g}"
