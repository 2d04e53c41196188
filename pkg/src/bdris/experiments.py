"""Desk-scale trend study: learned vs classical estimators, TSMO ablation, tau and SNR trends.

Run as ``python -m bdris.experiments --csv trend.csv`` (about an hour on one core, plus 15 minutes for the tau1 study).
"""

from __future__ import annotations

import argparse
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .channels import ChannelModelConfig, DatasetSplit, build_dataset
from .models import ModelBundle, ModelConfig
from .physics import SystemConfig
from .sweep import classical_row, rows_to_csv
from .train import TrainConfig, evaluate, train_joint

log = logging.getLogger(__name__)

DESK_SYSTEM = SystemConfig(N=4, M=8, group_size=4, K=2, U=2, tau1=1, tau2=8)


@dataclass(frozen=True)
class TrendSettings:
    system: SystemConfig = DESK_SYSTEM
    channel: ChannelModelConfig = ChannelModelConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(batch_size=128, lr=2e-3, epochs=20)
    train_count: int = 20000
    val_count: int = 1000
    test_count: int = 2000
    data_seed: int = 1
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_pu_dbm: float = 20.0
    tau2_grid: tuple[int, ...] = (4, 8, 16)
    snr_grid_dbm: tuple[float, ...] = (10.0, 14.0, 18.0, 22.0, 26.0, 30.0)
    # each model serves every grid point inside its +/-2.5 dB training interval
    snr_centers_dbm: tuple[float, ...] = (12.0, 20.0, 28.0)
    pu_half_width_db: float = 2.5

    def center_for(self, pu_dbm: float) -> float:
        for c in self.snr_centers_dbm:
            if abs(pu_dbm - c) <= self.pu_half_width_db:
                return c
        raise ValueError(f"no training interval covers {pu_dbm} dBm")


@dataclass
class Splits:
    train: DatasetSplit
    val: DatasetSplit
    test: DatasetSplit

    def with_taus(self, tau1: int, tau2: int) -> "Splits":
        def fix(s: DatasetSplit) -> DatasetSplit:
            return replace(s, cfg=replace(s.cfg, tau1=tau1, tau2=tau2))

        return Splits(fix(self.train), fix(self.val), fix(self.test))


def build_splits(s: TrendSettings) -> Splits:
    return Splits(
        build_dataset(s.system, s.channel, s.train_count, "train", s.data_seed),
        build_dataset(s.system, s.channel, s.val_count, "validation", s.data_seed),
        build_dataset(s.system, s.channel, s.test_count, "test", s.data_seed),
    )


@dataclass
class TrendResult:
    rows: list[tuple] = field(default_factory=list)
    nmse: dict[tuple, float] = field(default_factory=dict)
    elapsed: float = 0.0

    def record(self, axis: str, value, method: str, seed: int, nmse, snr, slots) -> None:
        self.rows.append((axis, f"{value:g}", method, seed,
                          nmse if isinstance(nmse, str) else f"{nmse:.10g}", f"{float(snr):.6f}", slots))
        if not isinstance(nmse, str):
            self.nmse[(axis, float(value), method, seed)] = float(nmse)

    def values(self, axis: str, value: float, method: str) -> list[float]:
        return [v for (a, x, m, _), v in self.nmse.items() if (a, x, m) == (axis, float(value), method)]

    def mean(self, axis: str, value: float, method: str) -> float:
        vals = self.values(axis, value, method)
        if not vals:
            raise KeyError((axis, value, method))
        return float(np.mean(vals))

    def csv(self) -> str:
        return rows_to_csv(self.rows)


def train_bundle(splits: Splits, s: TrendSettings, seed: int, use_tsmo: bool = True,
                 pu_range=None) -> ModelBundle:
    tcfg = replace(s.train, seed=seed, pu_range_dbm=tuple(pu_range or _pu_range(s)))
    t0 = time.time()
    res = train_joint(splits.train, splits.val, replace(s.model, use_tsmo=use_tsmo), tcfg)
    log.info("trained tsmo=%s tau=(%d,%d) seed %d in %.0fs, %d epochs", use_tsmo, splits.train.cfg.tau1,
             splits.train.cfg.tau2, seed, time.time() - t0, len(res.history))
    return res.bundle


def _pu_range(s: TrendSettings, center: float | None = None) -> tuple[float, float]:
    c = s.eval_pu_dbm if center is None else center
    return (c - s.pu_half_width_db, c + s.pu_half_width_db)


def _record_learned(result: TrendResult, axis: str, value, method: str, seed: int, bundle, test, pu_dbm) -> float:
    ev = evaluate(bundle, test, pu_dbm, seed)
    result.record(axis, value, method, seed, ev.nmse, ev.avg_snr_db, ev.pilot_slots)
    return ev.nmse


def run_trend_study(s: TrendSettings = TrendSettings(), splits: Splits | None = None) -> TrendResult:
    """Everything the trend criteria need, written as sweep-style rows.

    * ``pu`` rows at the evaluation power: JTSMLCEF and DACEN for every seed,
      LMMSE at the learned pilot budget and LS at its minimum budget.
    * ``tau2`` rows: JTSMLCEF for the first seed over ``tau2_grid``.
    * ``snr`` rows: JTSMLCEF for the first seed over ``snr_grid_dbm``; each
      point uses the model whose training interval contains it, reusing the
      main model for the interval around ``eval_pu_dbm``.
    """
    t0 = time.time()
    splits = splits or build_splits(s)
    cfg = s.system
    result = TrendResult()
    first = s.seeds[0]
    by_center = {}
    for seed in s.seeds:
        for method, use_tsmo in (("jtsmlcef", True), ("dacen", False)):
            bundle = train_bundle(splits, s, seed, use_tsmo)
            if method == "jtsmlcef" and seed == first:
                by_center[s.eval_pu_dbm] = bundle
            nm = _record_learned(result, "pu", s.eval_pu_dbm, method, seed, bundle, splits.test, s.eval_pu_dbm)
            if method == "jtsmlcef" and seed == first:
                result.record("tau2", cfg.tau2, method, seed, nm, result.rows[-1][5], result.rows[-1][6])
        for method, tau in (("lmmse", cfg.tau1 + cfg.tau2), ("ls", cfg.half_total)):
            nm, snr, slots = classical_row(method, cfg, splits.train, splits.test, tau, s.eval_pu_dbm, seed)
            result.record("pu", s.eval_pu_dbm, method, seed, float(nm), snr, slots)

    for tau2 in s.tau2_grid:
        if tau2 == cfg.tau2:
            continue
        sub = splits.with_taus(cfg.tau1, tau2)
        bundle = train_bundle(sub, s, first)
        _record_learned(result, "tau2", tau2, "jtsmlcef", first, bundle, sub.test, s.eval_pu_dbm)

    for pu_dbm in s.snr_grid_dbm:
        c = s.center_for(pu_dbm)
        if c not in by_center:
            by_center[c] = train_bundle(splits, s, first, pu_range=_pu_range(s, c))
        _record_learned(result, "snr", pu_dbm, "jtsmlcef", first, by_center[c], splits.test, pu_dbm)
    result.elapsed = time.time() - t0
    return result


def run_tau1_study(s: TrendSettings, splits: Splits, tau1: int = 2) -> TrendResult:
    """JTSMLCEF with ``tau1`` Phase-I subframes at the same total budget, every seed."""
    t0 = time.time()
    total = s.system.tau1 + s.system.tau2
    sub = splits.with_taus(tau1, total - tau1)
    result = TrendResult()
    for seed in s.seeds:
        bundle = train_bundle(sub, s, seed)
        _record_learned(result, "tau1", tau1, "jtsmlcef", seed, bundle, sub.test, s.eval_pu_dbm)
    result.elapsed = time.time() - t0
    return result


def violation_fraction(values) -> float:
    """Fraction of adjacent pairs where the sequence increases."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(np.mean(np.diff(v) > 0))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="desk-scale trend study")
    p.add_argument("--csv", required=True)
    p.add_argument("--tau1-csv", default=None, help="also run the tau1=2 study and write it here")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    s = TrendSettings()
    splits = build_splits(s)
    res = run_trend_study(s, splits)
    with open(args.csv, "w", encoding="utf-8") as fh:
        fh.write(res.csv())
    if args.tau1_csv:
        with open(args.tau1_csv, "w", encoding="utf-8") as fh:
            fh.write(run_tau1_study(s, splits).csv())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
