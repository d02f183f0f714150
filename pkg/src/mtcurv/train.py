"""AdamW training with per-task metrics and scheduled curvature snapshots."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import curvature as cv
from .autodiff import ParamSet
from .data import PreparedData, TargetStats
from .graphs import Multigraph, batch_graphs
from .model import GnConfig, all_losses_fn, forward, init_params, param_shapes, task_loss_fn

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "RunArtifacts",
    "NumericalError",
    "lr_at",
    "adamw_step",
    "standardized_mae",
    "evaluate_mae",
    "zero_predictor_mae",
    "default_snapshot_epochs",
    "build_model_config",
    "curvature_snapshot",
    "curvature_eval_set",
    "snapshot_from_losses",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_trace_csv",
    "read_trace_csv",
    "write_density_json",
    "read_density_json",
    "CHECKPOINT_FORMAT",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mtcurv-checkpoint/1"
TRACE_COLUMNS = ("epoch", "task_label", "trace_mean", "trace_stderr", "n_samples")
METRIC_COLUMNS = ("epoch", "split", "task_label", "standardized_mae", "loss")


class NumericalError(FloatingPointError):
    """Training or curvature evaluation produced a non-finite number."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization, snapshot and curvature settings for one run.

    ``model`` holds GN width overrides; input widths and task count come from
    the data. ``snapshot_epochs=None`` means 0, every power of two below
    ``epochs``, and ``epochs`` itself.
    """

    epochs: int = 512
    batch_size: int = 32
    lr0: float = 1e-3
    decay_rate: float = 0.997
    decay_after: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    snapshot_epochs: tuple[int, ...] | None = None
    init_seed: int = 0
    shuffle_seed: int = 1
    probe_seed: int = 2
    split_seed: int = 0
    train_fraction: float = 0.70
    trace_probes: int = 500
    lanczos_iters: int = 100
    slq_runs: int = 10
    kernel_sigma: float | None = None
    grid_points: int = 1024
    curvature_eval_size: int | None = None
    probe_chunk: int = 8
    model: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.snapshot_epochs is not None:
            object.__setattr__(self, "snapshot_epochs", tuple(int(e) for e in self.snapshot_epochs))
        object.__setattr__(self, "model", dict(self.model))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        rates = {"lr0": self.lr0, "decay_rate": self.decay_rate, "eps": self.eps}
        for name, value in rates.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.snapshot_epochs is not None and any(not 0 <= e <= self.epochs for e in self.snapshot_epochs):
            raise ValueError(f"snapshot epochs must lie in [0, {self.epochs}]")
        for name in ("trace_probes", "lanczos_iters", "slq_runs", "probe_chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")
        unknown = set(self.model) - {f.name for f in fields(GnConfig)} - {"node_dim", "edge_dim", "num_tasks"}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")

    def snapshots(self) -> list[int]:
        if self.snapshot_epochs is None:
            return default_snapshot_epochs(self.epochs)
        return sorted(set(self.snapshot_epochs))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["snapshot_epochs"] is not None:
            d["snapshot_epochs"] = list(d["snapshot_epochs"])
        d["model"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.model.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_snapshot_epochs(epochs: int) -> list[int]:
    out = {0, epochs}
    p = 1
    while p < epochs:
        out.add(p)
        p *= 2
    return sorted(out)


def build_model_config(config: TrainConfig, node_dim: int, edge_dim: int, num_tasks: int) -> GnConfig:
    overrides = {k: v for k, v in config.model.items() if k not in ("node_dim", "edge_dim", "num_tasks")}
    return GnConfig(node_dim=node_dim, edge_dim=edge_dim, num_tasks=num_tasks, **overrides)


# --------------------------------------------------------------------------
# optimizer


def lr_at(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    """Constant rate through ``decay_after``, then geometric decay per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch <= config.decay_after:
        return config.lr0
    return config.lr0 * config.decay_rate ** (epoch - config.decay_after)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> OptimizerState:
        return cls(
            {n: np.zeros_like(a) for n, a in params.items()},
            {n: np.zeros_like(a) for n, a in params.items()},
        )


def adamw_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float,
               config: TrainConfig = TrainConfig()) -> tuple[ParamSet, OptimizerState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Returns new parameter and state objects; the inputs are not modified.
    """
    b1, b2 = config.beta1, config.beta2
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new, m_new, v_new = {}, {}, {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        new[name] = theta - lr * update - lr * config.weight_decay * theta
        m_new[name], v_new[name] = m, v
    return params.replace(new), OptimizerState(m_new, v_new, step)


# --------------------------------------------------------------------------
# metrics


def standardized_mae(pred, targets) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if pred.shape != targets.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {targets.shape}")
    return np.mean(np.abs(pred - targets), axis=0)


def _predict_all(graphs: Sequence[Multigraph], params: ParamSet, config: GnConfig, chunk: int = 128):
    preds = []
    with ad.no_grad():
        for i in range(0, len(graphs), chunk):
            preds.append(forward(batch_graphs(graphs[i:i + chunk]), params, config).value)
    return np.concatenate(preds, axis=0)


def evaluate_mae(graphs: Sequence[Multigraph], params: ParamSet, config: GnConfig,
                 stats: TargetStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-task MAE and mean squared error on already standardized targets.

    ``stats`` is accepted for symmetry with destandardizing callers and is not
    needed here because split targets are stored standardized.
    """
    if not graphs:
        raise ValueError("cannot evaluate on an empty split")
    pred = _predict_all(graphs, params, config)
    targets = np.stack([g.targets for g in graphs])
    return standardized_mae(pred, targets), np.mean((pred - targets) ** 2, axis=0)


def zero_predictor_mae(graphs: Sequence[Multigraph]) -> np.ndarray:
    """MAE of always predicting zero (the training mean) on standardized targets."""
    targets = np.stack([g.targets for g in graphs])
    return standardized_mae(np.zeros_like(targets), targets)


# --------------------------------------------------------------------------
# artifacts


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def write_trace_csv(rows: Sequence[Mapping], path) -> None:
    _atomic_write_text(Path(path), _csv_text(TRACE_COLUMNS, ([r[c] for c in TRACE_COLUMNS] for r in rows)))


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace columns {reader.fieldnames}")
        return [
            {
                "epoch": int(r["epoch"]),
                "task_label": r["task_label"],
                "trace_mean": float(r["trace_mean"]),
                "trace_stderr": float(r["trace_stderr"]),
                "n_samples": int(r["n_samples"]),
            }
            for r in reader
        ]


def density_document(epoch: int, label: str, density: cv.SpectralDensity) -> dict:
    return {
        "epoch": int(epoch),
        "task_label": label,
        "sigma": density.sigma,
        "grid": density.grid.tolist(),
        "density": density.density.tolist(),
        "ritz": density.ritz_points(),
    }


def write_density_json(doc: Mapping, path) -> None:
    """Atomically write a JSON document (rejects NaN and infinities)."""
    _atomic_write_text(Path(path), json.dumps(doc, allow_nan=False))


def read_density_json(path) -> dict:
    """Load a density snapshot and check its schema."""
    with open(path) as fh:
        doc = json.load(fh)
    expected = {"epoch", "task_label", "sigma", "grid", "density", "ritz"}
    if set(doc) != expected:
        raise ValueError(f"{path}: density keys {sorted(doc)} != {sorted(expected)}")
    grid = np.asarray(doc["grid"], dtype=np.float64)
    dens = np.asarray(doc["density"], dtype=np.float64)
    if grid.ndim != 1 or grid.shape != dens.shape or grid.size < 2:
        raise ValueError(f"{path}: grid and density must be equal-length 1-D arrays")
    if np.any(np.diff(grid) <= 0):
        raise ValueError(f"{path}: grid is not ascending")
    if np.any(dens < 0) or not doc["sigma"] > 0:
        raise ValueError(f"{path}: negative density or non-positive sigma")
    for point in doc["ritz"]:
        if set(point) != {"value", "weight"} or point["weight"] < 0:
            raise ValueError(f"{path}: malformed ritz entry {point}")
    return doc


def save_checkpoint(path, params: ParamSet, train_config: TrainConfig, model_config: GnConfig,
                    stats: TargetStats, epoch: int) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "epoch": int(epoch),
        "train_config": train_config.to_dict(),
        "model_config": model_config.to_dict(),
        "stats": stats.to_dict(),
        "params": params.to_document(),
    }
    _atomic_write_text(Path(path), json.dumps(doc, allow_nan=False))


def load_checkpoint(path) -> tuple[ParamSet, TrainConfig, GnConfig, TargetStats, int]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format_version')!r}")
    model_config = GnConfig.from_dict(doc["model_config"])
    params = ad.ParamSet.from_document(doc["params"])
    expected = [(n, tuple(s)) for n, s in param_shapes(model_config)]
    if [(n, params[n].shape) for n in params] != expected:
        raise ValueError(f"{path}: parameters do not match the model configuration")
    return (params, TrainConfig.from_dict(doc["train_config"]), model_config,
            TargetStats.from_dict(doc["stats"]), int(doc["epoch"]))


@dataclass
class RunArtifacts:
    metrics_csv: Path
    trace_csv: Path | None = None
    density_paths: list[Path] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)


# --------------------------------------------------------------------------
# curvature snapshots


def task_label(t: int) -> str:
    return f"task{t}"


def snapshot_from_losses(losses_fn: Callable, params: ParamSet, labels: Sequence[str], epoch: int,
                         config: TrainConfig, density_fns: Mapping[str, Callable] | None = None,
                         block="shared") -> tuple[list[dict], list[dict]]:
    """Trace rows for every loss in ``losses_fn`` plus densities for ``density_fns``.

    ``losses_fn`` maps parameters to a list of scalar losses, one per label;
    all operators are probed with the same Rademacher vectors. ``density_fns``
    maps a label to a single loss function whose spectrum is estimated.
    """
    dim = params.size(block)
    probes = cv.rademacher_probes(config.trace_probes, dim, cv.derive_seed(config.probe_seed, "hutchinson"))
    quad = np.zeros((len(labels), config.trace_probes))
    for i in range(0, config.trace_probes, config.probe_chunk):
        chunk = probes[i:i + config.probe_chunk]
        images = ad.hvp_many(losses_fn, params, block, chunk)
        if len(images) != len(labels):
            raise ValueError(f"loss function returned {len(images)} losses for {len(labels)} labels")
        for k, hv in enumerate(images):
            if not np.all(np.isfinite(hv)):
                raise NumericalError(f"epoch {epoch}: non-finite Hessian product for {labels[k]}")
            quad[k, i:i + chunk.shape[0]] = np.einsum("ij,ij->i", chunk, hv)
    rows = []
    for k, label in enumerate(labels):
        est = cv.hutchinson_from_samples(quad[k])
        rows.append({"epoch": int(epoch), "task_label": label, "trace_mean": est.mean,
                     "trace_stderr": est.stderr, "n_samples": est.n_samples})

    docs = []
    for label, fn in (density_fns or {}).items():
        op = cv.hessian_operator(fn, params, block, label=label, chunk_size=config.slq_runs)
        iters = min(config.lanczos_iters, op.dim)
        try:
            dens = cv.slq_density(op, iters, config.slq_runs, config.kernel_sigma, config.grid_points,
                                  seed=cv.derive_seed(config.probe_seed, f"lanczos/{label}"))
        except FloatingPointError as exc:
            raise NumericalError(f"epoch {epoch}: {exc}") from exc
        docs.append(density_document(epoch, label, dens))
    return rows, docs


def curvature_eval_set(train: Sequence[Multigraph], config: TrainConfig) -> list[Multigraph]:
    """The fixed graphs used for curvature: a prefix of the training split."""
    if config.curvature_eval_size is None:
        return list(train)
    return list(train[: config.curvature_eval_size])


def curvature_snapshot(params: ParamSet, graphs: Sequence[Multigraph], epoch: int, config: TrainConfig,
                       model_config: GnConfig, tasks: Sequence[int] | None = None):
    """Shared-block traces for every task and the total loss, and per-task densities.

    Head parameters are held fixed. Returns ``(trace_rows, density_docs)``
    with ``T + 1`` rows (tasks then ``total``) and one document per task in
    ``tasks`` (default: all).
    """
    batch = batch_graphs(graphs)
    labels = [task_label(t) for t in range(model_config.num_tasks)] + ["total"]
    if tasks is None:
        tasks = range(model_config.num_tasks)
    density_fns = {task_label(t): task_loss_fn(batch, model_config, t) for t in tasks}
    return snapshot_from_losses(all_losses_fn(batch, model_config), params, labels, epoch, config,
                                density_fns)


# --------------------------------------------------------------------------
# training loop


def _metric_rows(epoch: int, splits: Mapping[str, Sequence[Multigraph]], params, model_config):
    rows = []
    for split_name, graphs in splits.items():
        if not graphs:
            continue
        mae, mse = evaluate_mae(graphs, params, model_config)
        for t in range(model_config.num_tasks):
            rows.append((epoch, split_name, task_label(t), float(mae[t]), float(mse[t])))
    return rows


def train(config: TrainConfig, data: PreparedData, outdir, progress: Callable[[str], None] | None = None
          ) -> RunArtifacts:
    """Train from scratch on ``data`` and write metrics, traces, densities and checkpoints.

    Epoch 0 rows describe the initial model. Artifacts are rewritten
    atomically after every epoch that logs metrics or takes a snapshot.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    first = data.train[0]
    model_config = build_model_config(config, first.node_dim, first.edge_dim, first.num_targets)
    params = init_params(model_config, config.init_seed)
    state = OptimizerState.zeros_like(params)
    shuffle_rng = np.random.default_rng(config.shuffle_seed)
    snapshots = set(config.snapshots())
    eval_graphs = curvature_eval_set(data.train, config)
    splits = {"train": data.train, "test": data.test}

    artifacts = RunArtifacts(metrics_csv=outdir / "metrics.csv")
    if snapshots:
        artifacts.trace_csv = outdir / "traces.csv"
    metric_rows: list = []
    trace_rows: list[dict] = []

    def record(epoch: int):
        metric_rows.extend(_metric_rows(epoch, splits, params, model_config))
        _atomic_write_text(artifacts.metrics_csv, _csv_text(METRIC_COLUMNS, metric_rows))
        if epoch in snapshots:
            rows, docs = curvature_snapshot(params, eval_graphs, epoch, config, model_config)
            trace_rows.extend(rows)
            write_trace_csv(trace_rows, artifacts.trace_csv)
            for doc in docs:
                path = outdir / f"density_e{epoch:04d}_{doc['task_label']}.json"
                write_density_json(doc, path)
                artifacts.density_paths.append(path)
            ckpt = outdir / f"checkpoint_e{epoch:04d}.json"
            save_checkpoint(ckpt, params, config, model_config, data.stats, epoch)
            artifacts.checkpoint_paths.append(ckpt)
        if progress is not None:
            latest = [r for r in metric_rows if r[0] == epoch and r[1] == "train"]
            progress(f"epoch {epoch}: train mae " + " ".join(f"{r[3]:.4f}" for r in latest))

    record(0)
    n = len(data.train)
    for epoch in range(1, config.epochs + 1):
        lr = lr_at(epoch, config)
        order = shuffle_rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = batch_graphs([data.train[i] for i in order[start:start + config.batch_size]])
            loss_fn = all_losses_fn(batch, model_config)
            loss, g = ad.value_and_grad(lambda p: loss_fn(p)[-1], params, "all")
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            grads = ad.unflatten(g, params)
            params, state = adamw_step(params, dict(grads.items()), state, lr, config)
        record(epoch)
    return artifacts
