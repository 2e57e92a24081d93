"""Command-line entry point: ``sharpness-lab {toy,train,grid,measure,correlate}``.

Exit codes: 0 success, 1 validation/format error, 2 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, NumericError
from .experiments import default_measures, run_correlate, run_grid, run_measure, run_toy, run_train
from .normops import PerturbationConfig
from .persistence import parse_value

log = logging.getLogger("sharpness_lab")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


def _add_perturbation_flags(p, optimizer_choices=("sgd", "adam", "sam", "asam")):
    p.add_argument("--optimizer", choices=optimizer_choices)
    p.add_argument("--rho", type=float)
    p.add_argument("--p", choices=["2", "inf"])
    p.add_argument("--norm", choices=["none", "elementwise", "filterwise"])
    p.add_argument("--eta", type=float)
    p.add_argument("--bias-norm", choices=["on", "off"])


def _add_run_flags(p):
    _add_perturbation_flags(p)
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--base", choices=["sgd", "adam"], help="base optimizer under sam/asam")
    p.add_argument("--model", help='e.g. "in=2 dense=16 dense=2"')
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--schedule", choices=["constant", "cosine"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--m", type=int, help="m-sharpness chunk size")
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)


_RUN_FLAG_KEYS = {
    "optimizer": "optimizer.name",
    "base": "optimizer.base",
    "rho": "optimizer.rho",
    "p": "optimizer.p",
    "norm": "optimizer.norm",
    "eta": "optimizer.eta",
    "bias_norm": "optimizer.bias_norm",
    "lr": "optimizer.lr",
    "momentum": "optimizer.momentum",
    "weight_decay": "optimizer.weight_decay",
    "schedule": "optimizer.schedule",
    "m": "optimizer.m",
    "model": "model",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "noise_rate": "data.noise_rate",
    "seed": "seed",
    "out": "out",
}


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for attr, key in _RUN_FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value) if isinstance(value, Path) else value
    return cfg.with_overrides(overrides).validate()


def _measure_cfgs(args):
    """One cfg from flags, ``--cfg`` specs, or the default four."""
    cfgs = []
    for spec in args.cfg or []:
        parts = spec.split(":")
        if len(parts) not in (3, 4):
            raise ConfigError(f"--cfg expects SCHEME:P:RHO[:ETA], got {spec!r}")
        eta = float(parts[3]) if len(parts) == 4 else 0.0
        cfgs.append(
            PerturbationConfig(
                rho=float(parts[2]), p=parts[1], scheme=parts[0], eta=eta,
                bias_normalized=args.bias_norm != "off",
            )
        )
    if args.norm is not None or args.rho is not None:
        cfgs.append(
            PerturbationConfig(
                rho=args.rho if args.rho is not None else 0.05,
                p=args.p or "2",
                scheme=args.norm or "elementwise",
                eta=args.eta if args.eta is not None else 0.0,
                bias_normalized=args.bias_norm != "off",
            )
        )
    return cfgs or default_measures()


def cmd_toy(args) -> int:
    default_rho = {"sam": 0.05, "asam": 0.5}.get(args.optimizer, 0.0)
    rho = args.rho if args.rho is not None else default_rho
    res = run_toy(
        args.optimizer,
        rho,
        init=tuple(args.init),
        lr=args.lr,
        steps=args.steps,
        out=args.out,
        p=args.p or "2",
        scheme=args.norm or "elementwise",
        eta=args.eta if args.eta is not None else 0.0,
    )
    s = res.summary
    print(
        f"{s['optimizer']} rho={s['rho']:g}: final w=({s['final_w1']:.6f}, {s['final_w2']:.6f}) "
        f"loss={s['final_loss']:.3e} valley distance={s['valley_distance']:.3e}"
    )
    if s["diverged"]:
        print(f"diverged: {s['error']}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _, metrics = run_train(cfg)
    last = metrics[-1]
    print(
        f"epoch {last['epoch']}: train loss {last['train_loss']:.4f} acc {last['train_acc']:.4f} | "
        f"test loss {last['test_loss']:.4f} acc {last['test_acc']:.4f}"
    )
    if cfg.out:
        print(f"wrote {Path(cfg.out) / 'checkpoint.ckpt'} and metrics.csv")
    return EXIT_OK


def _parse_axis(text):
    key, sep, values = text.partition("=")
    if not sep or not values:
        raise ConfigError(f"--axis expects KEY=v1,v2,..., got {text!r}")
    return key.strip(), [parse_value(v.strip()) for v in values.split(",")]


def cmd_grid(args) -> int:
    cfg = _run_config(args)
    if cfg.out is None:
        raise ConfigError("grid needs --out DIR")
    axes = [_parse_axis(a) for a in args.axis]
    if not axes:
        raise ConfigError("grid needs at least one --axis")
    records = run_grid(
        cfg.with_overrides({"out": ""}),
        axes,
        out=cfg.out,
        workers=args.workers,
        measures=_measure_cfgs(args),
        m=args.measure_m,
        steps=args.steps,
        min_train_acc=args.min_train_acc,
    )
    failed = sum(r["status"] != "ok" for r in records)
    print(f"{len(records)} runs ({failed} failed) -> {Path(cfg.out) / 'records.csv'}")
    return EXIT_OK


def cmd_measure(args) -> int:
    out = args.out
    if out is not None and (out.is_dir() or out.suffix != ".csv"):
        out = out / "measure.csv"
    rows = run_measure(args.checkpoint, _measure_cfgs(args), m=args.m, steps=args.steps, out=out)
    for r in rows:
        print(f"{r['label']:<32} sharpness={r['sharpness']:.6e} (base {r['base_loss']:.6f})")
    return EXIT_OK


def cmd_correlate(args) -> int:
    rows = run_correlate(args.out, min_train_acc=args.min_train_acc)
    for r in rows:
        psis = " ".join(f"{k}={v:.3f}" for k, v in r.items() if k.startswith("psi["))
        print(f"{r['measure']:<32} tau={r['tau']:.3f} {psis} Psi={r['Psi']:.3f} (n={r['n']})")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sharpness-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="SAM/ASAM trajectories on |w1 relu(w2) - 0.04|")
    _add_perturbation_flags(p, ("sgd", "sam", "asam"))
    p.set_defaults(optimizer="asam")
    p.add_argument("--init", type=float, nargs=2, default=[0.2, 0.05], metavar=("W1", "W2"))
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, help="accepted for uniformity; the toy run is deterministic")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="train and measure over a hyperparameter grid")
    _add_run_flags(p)
    p.add_argument("--axis", action="append", default=[], help="KEY=v1,v2,... (repeatable)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--cfg", action="append", help="measurement SCHEME:P:RHO[:ETA] (repeatable)")
    p.add_argument("--measure-m", type=int, default=8)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--min-train-acc", type=float, default=0.99)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("measure", help="sharpness of a saved checkpoint")
    _add_perturbation_flags(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--cfg", action="append", help="SCHEME:P:RHO[:ETA] (repeatable)")
    p.add_argument("--m", type=int)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="CSV file or directory to append rows to")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("correlate", help="rank correlation of a finished grid")
    p.add_argument("--out", type=Path, required=True, help="grid output directory")
    p.add_argument("--min-train-acc", type=float)
    p.set_defaults(func=cmd_correlate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        # non-finite values are detected and reported, so numpy's own warnings are noise
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, ValueError, ZeroDivisionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
