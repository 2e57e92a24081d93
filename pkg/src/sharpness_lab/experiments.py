"""Experiment drivers behind the CLI: toy trajectories, training, grids,
sharpness measurement and correlation."""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .analysis import HyperGrid, MeasureGapPair, generalization_gap, granulated_coefficients, kendall_tau
from .autodiff import Graph
from .config import RunConfig
from .data import Dataset, corrupt_labels, load_idx, make_blobs
from .errors import DivergenceError, LabError, NumericError
from .models import ModelSpec, ParameterLayout, ParameterVector, build_model, evaluate, model_objective
from .normops import PerturbationConfig
from .optim import base_step, init_state, m_sharpness_grad, plain_update, two_step_update
from .persistence import Checkpoint, load_checkpoint, read_csv, save_checkpoint, write_csv
from .sharpness import model_sharpness

__all__ = [
    "TrajectoryRecord",
    "ToyResult",
    "toy_loss_and_grad",
    "valley_distance",
    "run_toy",
    "build_dataset",
    "run_train",
    "default_measures",
    "run_grid",
    "run_measure",
    "correlate",
    "run_correlate",
    "worker_count",
]

logger = logging.getLogger(__name__)

TOY_TARGET = 0.04
WORKERS_ENV = "SHARPNESS_LAB_WORKERS"


# toy example


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    w1: float
    w2: float
    loss: float


@dataclass
class ToyResult:
    trajectory: list
    summary: dict

    @property
    def final(self) -> TrajectoryRecord:
        return self.trajectory[-1]


def toy_loss_and_grad(values):
    """``|w1 * relu(w2) - 0.04|`` and its gradient."""
    values = np.asarray(values, dtype=np.float64)
    g = Graph()
    w1 = g.param(values[0:1])
    w2 = g.param(values[1:2])
    loss = g.sum(g.abs(w1 * g.relu(w2) - TOY_TARGET))
    grads = g.backward(loss)
    return loss.value.item(), np.concatenate([grads[w1], grads[w2]])


def valley_distance(w1: float, w2: float) -> float:
    """Euclidean distance from (w1, w2) to ``{w1 * w2 = 0.04, w2 > 0}``."""

    def dist(t):
        return math.hypot(w1 - TOY_TARGET / t, w2 - t)

    grid = np.geomspace(1e-4, 1e4, 4001)
    i = int(np.argmin([dist(t) for t in grid]))
    lo, hi = math.log(grid[max(i - 1, 0)]), math.log(grid[min(i + 1, len(grid) - 1)])
    for _ in range(200):
        a, b = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if dist(math.exp(a)) < dist(math.exp(b)):
            hi = b
        else:
            lo = a
    return dist(math.exp(0.5 * (lo + hi)))


def run_toy(
    optimizer: str,
    rho: float,
    init=(0.2, 0.05),
    lr: float = 0.01,
    steps: int = 1000,
    out=None,
    p=2,
    scheme: str = "elementwise",
    eta: float = 0.0,
) -> ToyResult:
    """Full-batch descent on the toy loss with SAM, ASAM or plain SGD."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if optimizer not in ("sam", "asam", "sgd"):
        raise ValueError(f"toy optimizer must be sam, asam or sgd, got {optimizer!r}")
    cfg = PerturbationConfig(rho=rho, p=p, scheme=scheme if optimizer == "asam" else "identity", eta=eta)
    w = ParameterVector(np.array(init, dtype=np.float64), ParameterLayout.flat(2))
    state = init_state("sgd", 2, lr)
    loss0, _ = toy_loss_and_grad(w.values)
    traj = [TrajectoryRecord(0, float(w.values[0]), float(w.values[1]), loss0)]
    diverged = None
    try:
        for _ in range(steps):
            if optimizer == "sgd":
                w, state = plain_update(w, state, toy_loss_and_grad)
            else:
                w, state = two_step_update(w, state, toy_loss_and_grad, cfg, use_asam=optimizer == "asam")
            loss, _ = toy_loss_and_grad(w.values)
            traj.append(TrajectoryRecord(state.t, float(w.values[0]), float(w.values[1]), loss))
    except NumericError as exc:
        diverged = str(exc)
    last = traj[-1]
    summary = {
        "optimizer": optimizer,
        "rho": rho,
        "p": "inf" if math.isinf(cfg.p) else "2",
        "scheme": cfg.scheme,
        "eta": eta,
        "lr": lr,
        "steps": last.step,
        "init_w1": float(init[0]),
        "init_w2": float(init[1]),
        "final_w1": last.w1,
        "final_w2": last.w2,
        "final_loss": last.loss,
        "valley_distance": valley_distance(last.w1, last.w2),
        "diverged": diverged is not None,
        "error": diverged or "",
    }
    if out is not None:
        out = Path(out)
        write_csv(out / "trajectory.csv", [asdict(r) for r in traj], ["step", "w1", "w2", "loss"])
        write_csv(out / "summary.csv", [summary], list(summary))
    return ToyResult(traj, summary)


# training


def _seeds(seed: int, n: int) -> list:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.kind == "blobs":
        ds = make_blobs(d.classes, d.dim, d.n, d.separation, d.seed, n_test=d.n_test)
    else:
        x_tr, y_tr = load_idx(d.train_images, d.train_labels)
        x_te, y_te = load_idx(d.test_images, d.test_labels)
        if d.subset:
            x_tr, y_tr = x_tr[: d.subset], y_tr[: d.subset]
        classes = cfg.spec.num_classes
        ds = Dataset(x_tr, y_tr, x_te, y_te, classes)
    if d.noise_rate > 0:
        ds = corrupt_labels(ds, d.noise_rate, seed=_seeds(cfg.seed, 3)[2])
    return ds


def run_train(cfg: RunConfig, dataset: Dataset = None) -> tuple:
    """Train per ``cfg``; returns ``(Checkpoint, per-epoch metric rows)``.

    Writes ``checkpoint.ckpt`` and ``metrics.csv`` into ``cfg.out`` when set.
    """
    cfg.validate()
    spec = cfg.spec
    ds = dataset if dataset is not None else build_dataset(cfg)
    init_seed, shuffle_seed, _ = _seeds(cfg.seed, 3)
    w = build_model(spec, init_seed)
    o = cfg.optim
    n = ds.y_train.shape[0]
    per_epoch = math.ceil(n / cfg.batch_size)
    state = init_state(
        o.base_kind,
        w.layout.k,
        o.lr,
        momentum=o.momentum,
        weight_decay=o.weight_decay,
        schedule=o.schedule,
        total_steps=cfg.epochs * per_epoch,
    )
    pcfg = o.perturbation()
    rng = np.random.default_rng(shuffle_seed)
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        try:
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                batch = (ds.x_train[idx], ds.y_train[idx])
                objective = model_objective(spec, w.layout, batch)
                if not o.sharpness_aware:
                    w, state = plain_update(w, state, objective)
                elif o.m is not None and o.m < len(idx):
                    loss, grad = m_sharpness_grad(w, spec, batch, o.m, pcfg, o.name == "asam", step=state.t)
                    new, state = base_step(w.values, grad, state)
                    w, state = w.with_values(new), replace(state, last_loss=loss)
                else:
                    w, state = two_step_update(w, state, objective, pcfg, use_asam=o.name == "asam")
        except DivergenceError as exc:
            raise DivergenceError("training diverged", step=exc.step, epoch=epoch) from None
        except NumericError as exc:
            raise DivergenceError(f"training diverged ({exc})", step=state.t, epoch=epoch) from None
        train_loss, train_acc = evaluate(w, spec, ds.x_train, ds.y_train)
        test_loss, test_acc = evaluate(w, spec, ds.x_test, ds.y_test)
        metrics.append(
            {
                "epoch": epoch,
                "step": state.t,
                "train_loss": train_loss,
                "train_acc": train_acc,
                "test_loss": test_loss,
                "test_acc": test_acc,
            }
        )
    final = metrics[-1]
    meta = {
        "config": {k: v for k, v in cfg.to_mapping().items() if k != "out"},
        "seed": cfg.seed,
        "steps": state.t,
        "final": {k: v for k, v in final.items() if k not in ("epoch", "step")},
    }
    ckpt = Checkpoint(spec, w, meta)
    if cfg.out:
        out = Path(cfg.out)
        save_checkpoint(out / "checkpoint.ckpt", ckpt)
        write_csv(out / "metrics.csv", metrics, list(metrics[0]))
    return ckpt, metrics


# measurement


def default_measures() -> list:
    """Plain and adaptive (element-wise) sharpness for p = 2 and p = inf.

    Radii are fixed defaults; pass explicit configs to change them.
    Adaptive rows use eta = 0 with bias normalization so that node-wise
    rescalings leave them unchanged.
    """
    return [
        PerturbationConfig(rho=1e-5, p=2, scheme="identity", eta=0.0),
        PerturbationConfig(rho=5e-4, p="inf", scheme="identity", eta=0.0),
        PerturbationConfig(rho=0.5, p=2, scheme="elementwise", eta=0.0, bias_normalized=True),
        PerturbationConfig(rho=5e-3, p="inf", scheme="elementwise", eta=0.0, bias_normalized=True),
    ]


def _cfg_row(cfg: PerturbationConfig) -> dict:
    return {
        "label": cfg.label,
        "scheme": cfg.scheme,
        "p": "inf" if math.isinf(cfg.p) else "2",
        "rho": cfg.rho,
        "eta": cfg.eta,
        "bias_norm": int(cfg.bias_normalized),
    }


def _cfg_from_row(row: dict) -> PerturbationConfig:
    return PerturbationConfig(
        rho=float(row["rho"]), p=str(row["p"]), scheme=row["scheme"], eta=float(row["eta"]),
        bias_normalized=bool(row["bias_norm"]),
    )


MEASURE_FIELDS = [
    "checkpoint", "label", "scheme", "p", "rho", "eta", "bias_norm", "method", "m",
    "base_loss", "perturbed_loss", "sharpness",
]


def measure_params(w: ParameterVector, spec: ModelSpec, data, cfgs, m=None, steps=1) -> list:
    rows = []
    for cfg in cfgs:
        rep = model_sharpness(w, spec, data, cfg, steps=steps, m=m)
        row = _cfg_row(cfg)
        row.update(
            method=rep.method,
            m="full" if m is None else int(m),
            base_loss=rep.base_loss,
            perturbed_loss=rep.perturbed_loss,
            sharpness=rep.sharpness,
        )
        rows.append(row)
    return rows


def run_measure(checkpoint, cfgs=None, m=None, steps=1, out=None, data=None) -> list:
    """Measure every cfg on a checkpoint's training split; append rows to ``out``."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfgs = default_measures() if cfgs is None else list(cfgs)
    if data is None:
        run_cfg = RunConfig.from_mapping(ckpt.metadata.get("config", {}))
        data = build_dataset(run_cfg).train
    rows = measure_params(ckpt.params, ckpt.spec, data, cfgs, m=m, steps=steps)
    name = str(checkpoint) if not isinstance(checkpoint, Checkpoint) else ""
    for row in rows:
        row["checkpoint"] = name
    if out is not None:
        write_csv(out, rows, MEASURE_FIELDS, append=True)
    return rows


# grids


def worker_count(requested: int = 1) -> int:
    n = max(1, int(requested))
    cap = os.environ.get(WORKERS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", WORKERS_ENV, cap)
    return n


def _grid_cell(task):
    index, mapping, measure_rows, m, steps, run_dir, axis_keys = task
    cfg = RunConfig.from_mapping(mapping)
    record = {"index": index, "seed": cfg.seed}
    for key in axis_keys:
        record[key] = mapping[key]
    try:
        ds = build_dataset(cfg)
        ckpt, metrics = run_train(replace(cfg, out=run_dir), dataset=ds)
        final = metrics[-1]
        record.update(status="ok", error="")
        record.update({k: final[k] for k in ("train_loss", "train_acc", "test_loss", "test_acc")})
        record["gap"] = generalization_gap(final["train_loss"], final["test_loss"], "loss")
        cfgs = [_cfg_from_row(r) for r in measure_rows]
        for row in measure_params(ckpt.params, ckpt.spec, ds.train, cfgs, m=m, steps=steps):
            record[row["label"]] = row["sharpness"]
    except (LabError, ValueError, ArithmeticError) as exc:
        record.update(status="failed", error=str(exc))
        for key in ("train_loss", "train_acc", "test_loss", "test_acc", "gap"):
            record[key] = math.nan
        for r in measure_rows:
            record[r["label"]] = math.nan
    if run_dir is not None:
        write_csv(Path(run_dir) / "record.csv", [record], list(record))
    return record


def run_grid(
    base: RunConfig,
    axes,
    out=None,
    workers: int = 1,
    measures=None,
    m=8,
    steps: int = 1,
    min_train_acc: float = 0.99,
) -> list:
    """Train and measure one model per point of the Cartesian grid.

    Run ``i`` (in row-major tuple order) uses seed ``base.seed + i``, so the
    result does not depend on ``workers``. Failed runs are recorded with
    ``status = failed`` and the grid carries on.
    """
    axes = [(key, list(values)) for key, values in axes]
    if not axes or any(not values for _, values in axes):
        raise ValueError("grid needs at least one non-empty axis")
    base.validate()
    measures = default_measures() if measures is None else list(measures)
    measure_rows = [_cfg_row(c) for c in measures]
    keys = [k for k, _ in axes]
    tasks = []
    base_map = base.to_mapping()
    base_map.pop("out", None)
    for i, combo in enumerate(itertools.product(*(v for _, v in axes))):
        mapping = dict(base_map)
        mapping.update(zip(keys, combo))
        mapping["seed"] = base.seed + i
        run_dir = str(Path(out) / f"run_{i:03d}") if out is not None else None
        tasks.append((i, mapping, measure_rows, m, steps, run_dir, keys))
    n_workers = min(worker_count(workers), len(tasks))
    if n_workers == 1:
        records = [_grid_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            records = list(pool.map(_grid_cell, tasks))
    records.sort(key=lambda r: r["index"])
    if out is not None:
        out = Path(out)
        fields = ["index", "seed", *keys, "status", "error", "train_loss", "train_acc", "test_loss", "test_acc", "gap"]
        fields += [r["label"] for r in measure_rows]
        write_csv(out / "records.csv", records, fields)
        manifest = {
            "axes": axes,
            "measures": measure_rows,
            "m": m,
            "steps": steps,
            "min_train_acc": min_train_acc,
            "base": base_map,
        }
        (out / "grid.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return records


# correlation


def correlate(records, axes, measures, min_train_acc: float = 0.99, gap_key: str = "gap") -> list:
    """Kendall tau, per-axis psi and Psi for each measure column.

    Only successful runs with training accuracy >= ``min_train_acc`` count.
    """
    axes = [(key, list(values)) for key, values in axes]
    kept = [
        r
        for r in records
        if r.get("status") == "ok"
        and r.get("train_acc") is not None
        and r["train_acc"] >= min_train_acc
        and math.isfinite(r[gap_key])
    ]
    if len(kept) < 2:
        raise ValueError(
            f"only {len(kept)} run(s) pass the training-accuracy filter ({min_train_acc}); need 2"
        )
    rows = []
    for label in measures:
        usable = [r for r in kept if r.get(label) is not None and math.isfinite(r[label])]
        pairs = [MeasureGapPair(r[label], r[gap_key]) for r in usable]
        grid = HyperGrid(axes)
        for r, pair in zip(usable, pairs):
            grid.add(tuple(r[k] for k, _ in axes), pair)
        psi, big_psi = granulated_coefficients(grid)
        row = {"measure": label, "n": len(pairs), "tau": kendall_tau(pairs)}
        row.update({f"psi[{k}]": psi[k] for k, _ in axes})
        row["Psi"] = big_psi
        rows.append(row)
    return rows


def run_correlate(grid_dir, min_train_acc=None, out=None) -> list:
    grid_dir = Path(grid_dir)
    manifest = json.loads((grid_dir / "grid.json").read_text(encoding="utf-8"))
    records = read_csv(grid_dir / "records.csv")
    thr = manifest.get("min_train_acc", 0.99) if min_train_acc is None else min_train_acc
    labels = [m["label"] for m in manifest["measures"]]
    rows = correlate(records, manifest["axes"], labels, thr)
    write_csv(Path(out) if out else grid_dir / "correlation.csv", rows, list(rows[0]))
    return rows
