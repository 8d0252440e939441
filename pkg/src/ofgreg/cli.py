"""Command-line entry point: ``ofgreg {gen-data,train,register,eval,gradcheck}``.

Exit codes: 0 ok, 2 configuration error, 3 data/format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ofgreg.data import FormatError, PhantomSpec, make_dataset, read_dataset, read_field, read_volume, \
    write_dataset, write_field
from ofgreg.energy import EnergyConfig, energy_array
from ofgreg.gradcheck import run_all
from ofgreg.metrics import REPORT_COLUMNS, evaluate
from ofgreg.optimizer import DivergenceError, OptimConfig, refine
from ofgreg.predictor import Architecture, load_params, predict
from ofgreg.training import Dataset, Mode, TrainConfig, train
from ofgreg.volume import DisplacementField
from ofgreg.warp import identity_field

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


# every recognised key with its parser and default
CONFIG_KEYS = {
    # training
    "mode": (str, "ofg"),
    "epochs": (int, 40),
    "lr": (float, 1e-4),
    "weight_decay": (float, 0.02),
    "every_n_epochs": (int, 2),
    "alpha": (float, 1.0),
    "beta": (float, 1.0),
    "prob": (float, 0.5),
    "stage_len": (int, 10),
    "label_opt_steps": (int, 0),
    "seed": (int, 0),
    "n_val": (int, 8),
    # predictor
    "levels": (int, 2),
    "channels": (_ints, (8, 16)),
    "slope": (float, 0.2),
    # optimizer
    "optim_method": (str, "adam"),
    "optim_lr": (float, 0.1),
    "optim_steps": (int, 10),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "downsample": (_bool, False),
    # energy
    "similarity": (str, "ncc"),
    "ncc_window": (int, 5),
    "ncc_epsilon": (float, 1e-5),
    "reg_weight": (float, 1.0),
    # data generation
    "pairs": (int, 32),
    "dims": (_ints, (32, 32, 32)),
    "noise": (float, 0.01),
    "amplitude": (float, 3.0),
    "sigma": (float, 4.0),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(file_values: dict, overrides: dict) -> dict:
    """Merge file values and flag overrides over the defaults, parsing every value."""
    merged = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    for layer in (file_values, overrides):
        for key, value in layer.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            parse = CONFIG_KEYS[key][0]
            try:
                merged[key] = parse(value) if isinstance(value, str) else value
            except ValueError as err:
                raise ConfigError(f"bad value for {key!r}: {err}") from None
    return merged


def format_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())


def _dims(value) -> tuple[int, int, int]:
    value = tuple(value)
    if len(value) == 1:
        value = value * 3
    if len(value) != 3:
        raise ConfigError(f"dims needs 1 or 3 integers, got {value}")
    return value


def build_configs(cfg: dict):
    """(TrainConfig, PhantomSpec) from a resolved flat config."""
    try:
        energy = EnergyConfig(cfg["similarity"], cfg["ncc_window"], cfg["reg_weight"], cfg["ncc_epsilon"])
        optim = OptimConfig(cfg["optim_method"], cfg["optim_lr"], cfg["optim_steps"], cfg["beta1"],
                            cfg["beta2"], cfg["adam_eps"], energy, cfg["downsample"])
        arch = Architecture(cfg["levels"], cfg["channels"], cfg["slope"])
        train_cfg = TrainConfig(
            mode=cfg["mode"], epochs=cfg["epochs"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
            optim=optim, arch=arch, every_n_epochs=cfg["every_n_epochs"], alpha=cfg["alpha"],
            beta=cfg["beta"], prob=cfg["prob"], stage_len=cfg["stage_len"],
            label_opt_steps=cfg["label_opt_steps"], seed=cfg["seed"],
        )
        phantom = PhantomSpec(dims=_dims(cfg["dims"]), noise=cfg["noise"])
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return train_cfg, phantom


def _load_config(args, overrides: dict) -> dict:
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(), str(path))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides.setdefault(key.strip(), value.strip())
    return resolve_config(file_values, {k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args, {"pairs": args.pairs, "seed": args.seed, "dims": args.dims,
                              "amplitude": args.amplitude, "sigma": args.sigma})
    _, phantom = build_configs(cfg)
    pairs = make_dataset(cfg["pairs"], cfg["seed"], phantom, cfg["amplitude"], cfg["sigma"])
    meta = {k: cfg[k] for k in ("pairs", "seed", "dims", "noise", "amplitude", "sigma")}
    meta["dims"] = "x".join(str(d) for d in phantom.dims)
    write_dataset(args.out, pairs, meta)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args, {"mode": args.mode, "epochs": args.epochs, "seed": args.seed, "lr": args.lr})
    train_cfg, _ = build_configs(cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"output directory {out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    pairs = read_dataset(args.data)
    try:
        dataset = Dataset.split(pairs, cfg["n_val"])
    except ValueError as err:
        raise ConfigError(str(err)) from None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    result = train(dataset, train_cfg, out_dir=out)
    final = result.final
    print(f"final validation dice {final.dice:.4f}  nondiffeo {final.jac_pct:.4f}%  "
          f"(best epoch {result.best_epoch}, refine flag rate {result.flag_rate:.4f})")
    return EXIT_OK


def cmd_register(args) -> int:
    fixed, moving = read_volume(args.fixed), read_volume(args.moving)
    if fixed.grid.dims != moving.grid.dims:
        raise FormatError("fixed and moving volumes have different grids", args.moving)
    cfg = _load_config(args, {"optim_lr": args.lr})
    train_cfg, _ = build_configs(cfg)
    steps = args.steps if args.steps is not None else (0 if args.ckpt else train_cfg.optim.steps)
    if steps < 0:
        raise ConfigError("--steps must be >= 0")
    if args.ckpt:
        u, _ = predict(load_params(args.ckpt), fixed, moving)
        u = DisplacementField(u.grid, u.data.astype(np.float64))
    else:
        u = identity_field(fixed.grid)
    if steps > 0:
        u, trace = refine(fixed, moving, u, replace(train_cfg.optim, steps=steps))
        energies = trace.energies
    else:
        energies = [energy_array(fixed.data, moving.data, u.data, train_cfg.optim.energy, with_grad=False)[0]]
    for i, e in enumerate(energies):
        print(f"step {i:3d}  energy {e:.6f}")
    write_field(args.out, u)
    return EXIT_OK


def cmd_eval(args) -> int:
    pairs = read_dataset(args.data)
    params = load_params(args.ckpt) if args.ckpt else None
    shared = read_field(args.field) if args.field else None
    rows = []
    for pair in pairs:
        if params is not None:
            u, _ = predict(params, pair.fixed, pair.moving)
        elif shared is not None:
            if shared.grid.dims != pair.grid.dims:
                raise FormatError(f"field grid {shared.grid.dims} does not match pair {pair.name}", args.field)
            u = shared
        else:
            u = identity_field(pair.grid)
        rows.append((pair.name, evaluate(pair, u).row()))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("pair",) + REPORT_COLUMNS)
        for name, row in rows:
            w.writerow([name] + [row[c] for c in REPORT_COLUMNS])
        means = []
        for c in REPORT_COLUMNS:
            vals = [row[c] for _, row in rows if row[c] != ""]
            means.append(float(np.mean(vals)) if vals else "")
        w.writerow(["mean"] + means)
    mean = dict(zip(REPORT_COLUMNS, means))
    print(f"{len(rows)} pairs  dice {mean['dice']:.4f}  nondiffeo {mean['jac_pct']:.4f}%  epe {mean['epe']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ofgreg", description="Deformable registration with on-the-fly guidance.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat 'key = value' file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--dims", type=_ints)
    g.add_argument("--amplitude", type=float)
    g.add_argument("--sigma", type=float)
    with_config(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a predictor")
    t.add_argument("--mode", choices=[m.value for m in Mode])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    with_config(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one pair by instance optimization")
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--ckpt")
    r.add_argument("--steps", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--out", required=True)
    with_config(r)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a field on a dataset")
    e.add_argument("--data", required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--field")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as err:
        where = f" (byte offset {err.offset})" if err.offset is not None else ""
        print(f"data error: {err}{where}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
