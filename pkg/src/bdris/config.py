"""``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored.  Unknown keys are an
error.  Recognised keys:

system
    N, M, group_size, K, U, tau1, tau2, pu_dbm, noise_dbm, z0
channel
    preset, clusters_it, shared_clusters, private_clusters, rician_k_los,
    rician_k_nlos, angle_spread, p_los, user_sector, scenario_seed
model
    d_model, d_ff, n_heads, n_attn_intra, n_attn_inter, tsmo_widths
    (comma separated), d_group, pe_base, scale (``desk`` or ``full``)
training
    batch_size, lr, lr_decay, epochs, patience, min_delta, seed,
    pu_lo_dbm, pu_hi_dbm (default ``pu_dbm -/+ 2.5``)
data
    train_count, val_count, test_count, data_seed
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .channels import ChannelModelConfig
from .models import ModelConfig
from .physics import SystemConfig, dbm_to_watts
from .train import TrainConfig

PU_HALF_WIDTH_DB = 2.5

_INT = int
_FLOAT = float


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


SYSTEM_KEYS = {"N": _INT, "M": _INT, "group_size": _INT, "K": _INT, "U": _INT, "tau1": _INT, "tau2": _INT,
               "pu_dbm": _FLOAT, "noise_dbm": _FLOAT, "z0": _FLOAT}
CHANNEL_KEYS = {"preset": str, "clusters_it": _INT, "shared_clusters": _INT, "private_clusters": _INT,
                "rician_k_los": _FLOAT, "rician_k_nlos": _FLOAT, "angle_spread": _FLOAT, "p_los": _FLOAT,
                "user_sector": _FLOAT, "scenario_seed": _INT}
MODEL_KEYS = {"d_model": _INT, "d_ff": _INT, "n_heads": _INT, "n_attn_intra": _INT, "n_attn_inter": _INT,
              "tsmo_widths": _ints, "d_group": _INT, "pe_base": _FLOAT, "scale": str}
TRAIN_KEYS = {"batch_size": _INT, "lr": _FLOAT, "lr_decay": _FLOAT, "epochs": _INT, "patience": _INT,
              "min_delta": _FLOAT, "seed": _INT, "pu_lo_dbm": _FLOAT, "pu_hi_dbm": _FLOAT}
DATA_KEYS = {"train_count": _INT, "val_count": _INT, "test_count": _INT, "data_seed": _INT}
ALL_KEYS = {**SYSTEM_KEYS, **CHANNEL_KEYS, **MODEL_KEYS, **TRAIN_KEYS, **DATA_KEYS}


def parse_lines(text: str, allowed: dict, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = allowed[key](value)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig
    channel: ChannelModelConfig
    model: ModelConfig
    train: TrainConfig
    train_count: int = 20000
    val_count: int = 1000
    test_count: int = 2000
    data_seed: int = 1


def build_config(values: dict) -> RunConfig:
    sys_vals = {k: v for k, v in values.items() if k in SYSTEM_KEYS and k not in ("pu_dbm", "noise_dbm")}
    system = SystemConfig(**{"N": 4, "M": 8, "group_size": 4, "K": 2, "U": 2, **sys_vals})
    if "pu_dbm" in values:
        system = system.with_pu_dbm(values["pu_dbm"])
    if "noise_dbm" in values:
        system = replace(system, noise_power=dbm_to_watts(values["noise_dbm"]))

    channel = ChannelModelConfig.preset(values.get("preset", "preset-A"))
    ch_vals = {k: v for k, v in values.items() if k in CHANNEL_KEYS and k != "preset"}
    channel = replace(channel, **ch_vals)

    base = ModelConfig.full_scale() if values.get("scale", "desk") == "full" else ModelConfig()
    if values.get("scale", "desk") not in ("desk", "full"):
        raise ValueError("scale must be 'desk' or 'full'")
    model = replace(base, **{k: v for k, v in values.items() if k in MODEL_KEYS and k != "scale"})

    lo = values.get("pu_lo_dbm", system.pu_dbm - PU_HALF_WIDTH_DB)
    hi = values.get("pu_hi_dbm", system.pu_dbm + PU_HALF_WIDTH_DB)
    tr_vals = {k: v for k, v in values.items() if k in TRAIN_KEYS and not k.startswith("pu_")}
    train = TrainConfig(**tr_vals, pu_range_dbm=(lo, hi))
    data = {k: v for k, v in values.items() if k in DATA_KEYS}
    return RunConfig(system, channel, model, train, **data)


def load_config(path) -> RunConfig:
    path = Path(path)
    return build_config(parse_lines(path.read_text(encoding="utf-8"), ALL_KEYS, str(path)))


def documented_keys() -> list[str]:
    return sorted(ALL_KEYS)

