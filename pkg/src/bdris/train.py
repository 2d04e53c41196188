"""Joint TSMO + DACE training, evaluation and the optimiser."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .channels import DatasetSplit, NormStats, compute_norm_stats, label_gain
from .metrics import average_snr_db, mse_loss, nmse
from .models import ModelBundle, ModelConfig
from .physics import dbm_to_watts
from .protocol import complex_noise, observe_stacked

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    pu_range_dbm: tuple[float, float] = (17.5, 22.5)
    eval_batch: int = 512

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        lo, hi = self.pu_range_dbm
        if hi < lo:
            raise ValueError("P_u interval must satisfy lo <= hi")


class Adam:
    def __init__(self, params: dict[str, ad.Node], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def draw_pu_dbm(rng: np.random.Generator, pu_range, size: int) -> np.ndarray:
    lo, hi = pu_range
    return rng.uniform(lo, hi, size) if hi > lo else np.full(size, float(lo))


def phase_noise(rng: np.random.Generator, B: int, tau: int, cfg) -> np.ndarray:
    return complex_noise(rng, (B, cfg.NU, cfg.K, tau), cfg.noise_power / cfg.KU)


def norm_stats_for(train: DatasetSplit, phase1_susceptance: np.ndarray, pu_range, seed: int) -> NormStats:
    """Pilot statistics from simulated noisy Phase-I observations of the training split."""
    from .physics import training_matrix_from_susceptance

    cfg = train.cfg
    rng = np.random.default_rng([seed, 5])
    pu = dbm_to_watts(draw_pu_dbm(rng, pu_range, len(train)))
    phi = training_matrix_from_susceptance(phase1_susceptance, cfg)
    y = observe_stacked(train.qbar, phi, pu, cfg.noise_power, cfg.KU, rng)
    return compute_norm_stats(train, y)


def init_bundle(train: DatasetSplit, mcfg: ModelConfig, tcfg: TrainConfig) -> ModelBundle:
    cfg = train.cfg
    probe = ModelBundle.create(cfg, mcfg, NormStats(0.0, 1.0, label_gain(train.qbar, cfg)),
                               tcfg.pu_range_dbm, seed=tcfg.seed)
    probe.norm = norm_stats_for(train, probe.phase1_susceptance, tcfg.pu_range_dbm, tcfg.seed)
    return probe


def train_step(bundle: ModelBundle, opt: Adam, qbar: np.ndarray, rng: np.random.Generator, pu_range) -> float:
    cfg = bundle.cfg
    B = qbar.shape[0]
    pu_dbm = draw_pu_dbm(rng, pu_range, B)
    n1 = phase_noise(rng, B, cfg.tau1, cfg)
    n2 = phase_noise(rng, B, cfg.tau2, cfg)
    opt.zero_grad()
    out, _ = bundle.forward(qbar, pu_dbm, n1, n2)
    loss = mse_loss(out, qbar, bundle.norm.label_gain)
    if not np.isfinite(loss.value):
        raise TrainingDiverged(f"non-finite loss at step {opt.t}")
    loss.backward()
    opt.step()
    return float(loss.value)


@dataclass
class EvalResult:
    nmse: float
    avg_snr_db: float
    pilot_slots: int
    qbar_hat: np.ndarray = field(repr=False)


def evaluate(bundle: ModelBundle, split: DatasetSplit, pu_dbm: float, seed: int, batch: int = 512) -> EvalResult:
    """Test NMSE at a fixed transmit power with noise drawn from ``seed``."""
    cfg = bundle.cfg
    if split.cfg.half_total != cfg.half_total or split.cfg.NU != cfg.NU or split.cfg.K != cfg.K:
        raise ValueError("dataset system configuration does not match the model")
    rng = np.random.default_rng([seed, 9])
    est = np.empty_like(split.qbar)
    snr = []
    for start in range(0, len(split), batch):
        q = split.qbar[start : start + batch]
        B = q.shape[0]
        n1 = phase_noise(rng, B, cfg.tau1, cfg)
        n2 = phase_noise(rng, B, cfg.tau2, cfg)
        out, phi2 = bundle.forward(q, pu_dbm, n1, n2)
        est[start : start + B] = bundle.estimate(out)
        # SNR of the first Phase-II subframe configuration
        snr.append(average_snr_db(q, phi2.numpy()[:, :, 0], dbm_to_watts(pu_dbm), cfg.noise_power, cfg))
    slots = cfg.KU * (cfg.tau1 + cfg.tau2)
    return EvalResult(nmse(est, split.qbar), float(np.mean(snr)), slots, est)


def train_joint(train: DatasetSplit, val: DatasetSplit, mcfg: ModelConfig, tcfg: TrainConfig,
                bundle: ModelBundle | None = None) -> TrainResult:
    """Adam over all TSMO and DACE parameters with early stopping on validation NMSE."""
    bundle = bundle or init_bundle(train, mcfg, tcfg)
    params = bundle.parameters()
    opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    mid = 0.5 * sum(tcfg.pu_range_dbm)
    best, best_epoch, wait = np.inf, 0, 0
    best_values = {k: p.value.copy() for k, p in params.items()}
    history = []
    for epoch in range(tcfg.epochs):
        rng = np.random.default_rng([tcfg.seed, 1, epoch])
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            idx = np.sort(order[start : start + tcfg.batch_size])
            losses.append(train_step(bundle, opt, train.qbar[idx], rng, tcfg.pu_range_dbm))
        val_nmse = evaluate(bundle, val, mid, seed=tcfg.seed, batch=tcfg.eval_batch).nmse
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_nmse": val_nmse, "lr": opt.lr})
        log.info("epoch %d loss %.5f val nmse %.5f", epoch, history[-1]["loss"], val_nmse)
        if val_nmse < best - tcfg.min_delta:
            best, best_epoch, wait = val_nmse, epoch, 0
            best_values = {k: p.value.copy() for k, p in params.items()}
        else:
            wait += 1
            if wait >= tcfg.patience:
                break
        opt.lr *= tcfg.lr_decay
    for k, p in params.items():
        p.value[...] = best_values[k]
    return TrainResult(bundle, history, best_epoch)
