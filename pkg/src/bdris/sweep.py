"""Experiment sweeps over P_u, tau2, M or the data-mix ratio, written as CSV rows.

Spec files use the ``key = value`` syntax of :mod:`bdris.config` with keys

``axis``
    ``pu`` | ``tau2`` | ``M`` | ``mix_ratio``
``values``
    comma-separated grid
``methods``
    comma-separated subset of ``jtsmlcef, dacen, ls, lmmse``
``seeds``
    comma-separated seeds
``classical_tau``
    ``equal`` (tau1 + tau2, the learned pilot budget), ``min`` (the LS minimum
    M(M̄+1)/2) or an integer
``config``, ``data_dir``, ``ckpt_dir``
    paths, relative to the spec file

Checkpoints are looked up as ``{method}_{axis}{value}_seed{seed}.bdmc`` and
then ``{method}_seed{seed}.bdmc``; datasets as ``{axis}{value}/train.bdrs``
and then ``train.bdrs`` (likewise ``test.bdrs``).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .channels import DatasetSplit
from .config import parse_lines
from .estimators import UnderdeterminedError, column_covariance, estimate_split
from .metrics import average_snr_db
from .models import ModelBundle
from .physics import SystemConfig, dbm_to_watts, random_susceptance, training_matrix_from_susceptance
from .protocol import observe_stacked

CSV_HEADER = ("axis", "value", "method", "seed", "nmse", "avg_snr_db", "pilot_slots")
AXES = ("pu", "tau2", "M", "mix_ratio")
METHODS = ("jtsmlcef", "dacen", "ls", "lmmse")
LEARNED = ("jtsmlcef", "dacen")


class MissingBundleError(KeyError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


SPEC_KEYS = {"axis": str, "values": _floats, "methods": _names, "seeds": lambda t: tuple(int(v) for v in _names(t)),
             "classical_tau": str, "config": str, "data_dir": str, "ckpt_dir": str, "eval_pu_dbm": float}


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0,)
    classical_tau: str = "equal"
    eval_pu_dbm: float | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise ValueError("sweep grid is empty")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if not self.seeds:
            raise ValueError("need at least one seed")


def format_value(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def classical_tau(spec: SweepSpec, cfg: SystemConfig) -> int:
    if spec.classical_tau == "equal":
        return cfg.tau1 + cfg.tau2
    if spec.classical_tau == "min":
        return cfg.half_total
    return int(spec.classical_tau)


def _grid_config(spec: SweepSpec, cfg: SystemConfig, value: float) -> tuple[SystemConfig, float]:
    """System config and evaluation P_u (dBm) at one grid point."""
    pu_dbm = spec.eval_pu_dbm if spec.eval_pu_dbm is not None else cfg.pu_dbm
    if spec.axis == "pu":
        return cfg.with_pu_dbm(value), value
    if spec.axis == "tau2":
        return replace(cfg, tau2=int(value)), pu_dbm
    if spec.axis == "M":
        return replace(cfg, M=int(value)), pu_dbm
    return cfg, pu_dbm


def classical_row(method: str, cfg: SystemConfig, train: DatasetSplit, test: DatasetSplit, tau: int,
                  pu_dbm: float, seed: int) -> tuple[str, str, int]:
    """(nmse, avg_snr_db, slots) with random feasible training scattering."""
    rng = np.random.default_rng([seed, 21, tau])
    phi = training_matrix_from_susceptance(random_susceptance(cfg, rng, tau), cfg)
    pu = dbm_to_watts(pu_dbm)
    snr = average_snr_db(test.qbar, phi[:, 0], pu, cfg.noise_power, cfg)
    slots = cfg.KU * tau
    if method == "ls" and tau < cfg.half_total:
        return "underdetermined", f"{snr:.6f}", slots
    y = observe_stacked(test.qbar, phi, pu, cfg.noise_power, cfg.KU, rng)
    cov = column_covariance(train.qbar) if method == "lmmse" else None
    try:
        report = estimate_split(method, y, test.qbar, phi, pu, cfg.noise_power, cfg.KU, cov)
    except UnderdeterminedError:
        return "underdetermined", f"{snr:.6f}", slots
    return f"{report.nmse:.10g}", f"{snr:.6f}", slots


def run_sweep(spec: SweepSpec, base: SystemConfig, bundles, datasets) -> list[tuple]:
    """Evaluate every (grid value, method, seed).

    ``bundles(method, value, seed)`` returns a :class:`ModelBundle` or raises
    :class:`MissingBundleError`; ``datasets(value)`` returns ``(train, test)``.
    """
    from .train import evaluate

    rows = []
    for value in spec.values:
        cfg, pu_dbm = _grid_config(spec, base, value)
        train, test = datasets(value)
        for method in spec.methods:
            for seed in spec.seeds:
                if method in LEARNED:
                    bundle = bundles(method, value, seed)
                    if method == "dacen" and bundle.tsmo is not None:
                        raise ValueError("DACEN rows need a bundle trained without TSMO")
                    res = evaluate(bundle, test, pu_dbm, seed)
                    cells = (f"{res.nmse:.10g}", f"{res.avg_snr_db:.6f}", res.pilot_slots)
                else:
                    cells = classical_row(method, cfg, train, test, classical_tau(spec, cfg), pu_dbm, seed)
                rows.append((spec.axis, format_value(value), method, seed) + cells)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def load_spec(path) -> tuple[SweepSpec, dict]:
    path = Path(path)
    values = parse_lines(path.read_text(encoding="utf-8"), SPEC_KEYS, str(path))
    for key in ("axis", "values"):
        if key not in values:
            raise ValueError(f"{path}: missing {key!r}")
    paths = {k: path.parent / values.pop(k) for k in ("config", "data_dir", "ckpt_dir") if k in values}
    return SweepSpec(**values), paths


def file_bundles(ckpt_dir: Path, axis: str):
    from .models import load_checkpoint

    cache: dict[Path, ModelBundle] = {}

    def lookup(method: str, value: float, seed: int) -> ModelBundle:
        for name in (f"{method}_{axis}{format_value(value)}_seed{seed}.bdmc", f"{method}_seed{seed}.bdmc"):
            p = Path(ckpt_dir) / name
            if p.exists():
                if p not in cache:
                    cache[p] = load_checkpoint(p)
                return cache[p]
        raise MissingBundleError(f"no checkpoint for {method} at {axis}={format_value(value)} seed {seed} in {ckpt_dir}")

    return lookup


def file_datasets(data_dir: Path, axis: str):
    from .channels import read_dataset

    def lookup(value: float):
        sub = Path(data_dir) / f"{axis}{format_value(value)}"
        root = sub if (sub / "test.bdrs").exists() else Path(data_dir)
        return read_dataset(root / "train.bdrs"), read_dataset(root / "test.bdrs")

    return lookup
