"""Command-line entry point: ``bdris gen|train|eval|sweep|check``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .channels import build_dataset, read_dataset, write_dataset
from .config import load_config
from .models import load_checkpoint, save_checkpoint
from .sweep import file_bundles, file_datasets, load_spec, rows_to_csv, run_sweep, CSV_HEADER


def cmd_gen(args) -> int:
    rc = load_config(args.config)
    split = build_dataset(rc.system, rc.channel, args.count, args.role, args.seed)
    write_dataset(split, args.out)
    print(f"wrote {len(split)} {split.role} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import train_joint

    rc = load_config(args.config)
    mcfg = replace(rc.model, use_tsmo=not args.no_tsmo)
    data = Path(args.data_dir)
    train = read_dataset(data / "train.bdrs")
    val = read_dataset(data / "val.bdrs")
    if train.cfg.half_total != rc.system.half_total:
        raise SystemExit("training data does not match the configured system")
    train.cfg = val.cfg = replace(train.cfg, tau1=rc.system.tau1, tau2=rc.system.tau2)
    result = train_joint(train, val, mcfg, rc.train)
    save_checkpoint(result.bundle, args.out)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs, best epoch {result.best_epoch}, "
          f"last val nmse {last['val_nmse']:.6g}; saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    bundle = load_checkpoint(args.ckpt)
    split = read_dataset(args.data)
    pu_dbm = args.pu_dbm if args.pu_dbm is not None else 0.5 * sum(bundle.pu_range_dbm)
    res = evaluate(bundle, split, pu_dbm, args.seed)
    method = "jtsmlcef" if bundle.tsmo is not None else "dacen"
    row = ("pu", f"{pu_dbm:g}", method, args.seed, f"{res.nmse:.10g}", f"{res.avg_snr_db:.6f}", res.pilot_slots)
    Path(args.csv).write_text(rows_to_csv([row]), encoding="utf-8")
    print(f"nmse {res.nmse:.6g} ({len(split)} samples) -> {args.csv}")
    return 0


def cmd_sweep(args) -> int:
    spec, paths = load_spec(args.spec)
    for key in ("config", "data_dir"):
        if key not in paths:
            raise SystemExit(f"sweep spec needs {key!r}")
    rc = load_config(paths["config"])
    bundles = file_bundles(paths.get("ckpt_dir", Path(".")), spec.axis)
    rows = run_sweep(spec, rc.system, bundles, file_datasets(paths["data_dir"], spec.axis))
    Path(args.csv).write_text(rows_to_csv(rows), encoding="utf-8")
    print(f"{len(rows)} rows ({','.join(CSV_HEADER)}) -> {args.csv}")
    return 0


def cmd_check(args) -> int:
    from . import checks

    suites = [name for name in ("gradcheck", "physics", "protocol") if getattr(args, name)]
    if not suites:
        suites = ["gradcheck", "physics", "protocol"]
    ok = True
    for name in suites:
        passed, summary = getattr(checks, f"run_{name}")()
        print(f"{name}: {'PASS' if passed else 'FAIL'} {summary}")
        ok &= passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdris", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset split")
    g.add_argument("--config", required=True)
    g.add_argument("--role", required=True, choices=["train", "val", "test"])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train TSMO and DACE jointly")
    t.add_argument("--config", required=True)
    t.add_argument("--data-dir", required=True, help="directory holding train.bdrs and val.bdrs")
    t.add_argument("--out", required=True)
    t.add_argument("--no-tsmo", action="store_true", help="fixed random Phase-II scattering (DACEN)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--csv", required=True)
    e.add_argument("--pu-dbm", type=float, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run an experiment sweep")
    s.add_argument("--spec", required=True)
    s.add_argument("--csv", required=True)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("check", help="run property suites")
    c.add_argument("--gradcheck", action="store_true")
    c.add_argument("--physics", action="store_true")
    c.add_argument("--protocol", action="store_true")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
