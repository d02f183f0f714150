"""Dataset I/O, target preprocessing, featurization, splitting and a synthetic generator."""

from __future__ import annotations

import json
import os
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphs import Multigraph, graph_from_record, graph_to_record, symmetrize_edges, validate_graph

__all__ = [
    "DatasetError",
    "load_dataset",
    "write_dataset",
    "percentile_filter",
    "filter_targets",
    "log_transform",
    "TargetStats",
    "fit_stats",
    "standardize",
    "destandardize",
    "one_hot",
    "decile_bins",
    "apply_bins",
    "write_sidecar",
    "read_sidecar",
    "SplitSpec",
    "split",
    "poisson_ratio",
    "synth_generate",
    "PreparedData",
    "prepare",
]


class DatasetError(ValueError):
    """A dataset file or record that cannot be used."""


def load_dataset(path) -> list[Multigraph]:
    """Parse and validate a JSONL dataset, one graph per line, in file order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    graphs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                g = graph_from_record(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record: {exc}") from exc
            problems = validate_graph(g)
            if problems:
                raise DatasetError(f"{path}:{lineno}: graph {g.id!r} invalid: {'; '.join(problems)}")
            graphs.append(g)
    return graphs


def write_dataset(graphs: Sequence[Multigraph], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g), allow_nan=False))
            fh.write("\n")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# target preprocessing


def percentile_filter(values, lo_pct: float = 5, hi_pct: float = 95) -> np.ndarray:
    """Indices whose value lies within the [lo, hi] percentile band (inclusive).

    Percentiles use linear interpolation on the sorted values.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("percentile_filter needs at least one value")
    if not (0 <= lo_pct < hi_pct <= 100):
        raise ValueError(f"need 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}")
    lo, hi = np.percentile(values, [lo_pct, hi_pct], method="linear")
    return np.flatnonzero((values >= lo) & (values <= hi))


def filter_targets(graphs: Sequence[Multigraph], lo_pct: float = 5, hi_pct: float = 95) -> list[Multigraph]:
    """Filter every target column independently and keep graphs that pass all."""
    y = np.stack([g.targets for g in graphs])
    keep = np.ones(len(graphs), dtype=bool)
    for t in range(y.shape[1]):
        col = np.zeros(len(graphs), dtype=bool)
        col[percentile_filter(y[:, t], lo_pct, hi_pct)] = True
        keep &= col
    return [g for g, k in zip(graphs, keep) if k]


def log_transform(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    bad = np.flatnonzero(~(values > 0))
    if bad.size:
        raise ValueError(f"log_transform needs positive values; index {int(bad[0])} is {values.flat[bad[0]]}")
    return np.log(values)


@dataclass(frozen=True)
class TargetStats:
    """Per-task mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"per_task": [{"mean": float(m), "std": float(s)} for m, s in zip(self.mean, self.std)]}

    @classmethod
    def from_dict(cls, d) -> TargetStats:
        rows = d["per_task"]
        return cls(np.array([r["mean"] for r in rows]), np.array([r["std"] for r in rows]))


def fit_stats(train_values) -> TargetStats:
    """Fit on training targets, shape ``(n,)`` or ``(n, T)``."""
    y = np.asarray(train_values, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] == 0:
        raise ValueError("cannot fit statistics on an empty set")
    mean = y.mean(axis=0)
    std = y.std(axis=0)
    zero = np.flatnonzero(~(std > 0))
    if zero.size:
        raise ValueError(f"degenerate target: task {int(zero[0])} has zero standard deviation")
    return TargetStats(mean, std)


def standardize(values, stats: TargetStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def destandardize(z, stats: TargetStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


# --------------------------------------------------------------------------
# featurization


def one_hot(category, vocabulary: Sequence) -> np.ndarray:
    vocabulary = list(vocabulary)
    try:
        idx = vocabulary.index(category)
    except ValueError:
        raise ValueError(f"unknown category {category!r}") from None
    out = np.zeros(len(vocabulary))
    out[idx] = 1.0
    return out


def decile_bins(train_values) -> np.ndarray:
    """The nine interior decile edges (10th..90th percentiles) of the training values."""
    values = np.asarray(train_values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("decile_bins needs training values")
    return np.percentile(values, np.arange(10, 100, 10), method="linear")


def apply_bins(value, edges) -> np.ndarray:
    """One-hot bin indicator; bins are left-closed and the end bins absorb overflow."""
    edges = np.asarray(edges, dtype=np.float64)
    idx = int(np.searchsorted(edges, value, side="right"))
    out = np.zeros(edges.size + 1)
    out[idx] = 1.0
    return out


def write_sidecar(path, stats: TargetStats, edge_bins: Sequence = ()) -> None:
    """Store target statistics and per-raw-feature decile edges as JSON."""
    doc = {**stats.to_dict(), "edge_bins": [np.asarray(e, dtype=np.float64).tolist() for e in edge_bins]}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, allow_nan=False))
    os.replace(tmp, path)


def read_sidecar(path) -> tuple[TargetStats, list[np.ndarray]]:
    with open(path) as fh:
        doc = json.load(fh)
    return TargetStats.from_dict(doc), [np.asarray(e, dtype=np.float64) for e in doc.get("edge_bins", [])]


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.train_fraction < 1):
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def split(dataset: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list]:
    """Shuffle deterministically by seed; the first floor(fraction * n) items train."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(np.floor(spec.train_fraction * n))
    return [dataset[i] for i in order[:n_train]], [dataset[i] for i in order[n_train:]]


# --------------------------------------------------------------------------
# synthetic coupled-target data

MAX_SYNTH_NODES = 16


def poisson_ratio(bulk, shear):
    """Isotropic Poisson ratio from bulk and shear moduli."""
    bulk = np.asarray(bulk, dtype=np.float64)
    shear = np.asarray(shear, dtype=np.float64)
    return (3.0 * bulk - 2.0 * shear) / (2.0 * (3.0 * bulk + shear))


def _synth_graph(rng: np.random.Generator, index: int, vocab: int, edge_dim: int, num_targets: int):
    n = int(rng.integers(4, MAX_SYNTH_NODES + 1))
    types = rng.integers(0, vocab, size=n)
    nodes = np.eye(vocab)[types]

    # every ordered-pair draw becomes one bond with its own key on that node pair
    next_key: dict[tuple[int, int], int] = {}
    src, dst, key = [], [], []

    def bond(a, b):
        pair = (min(a, b), max(a, b))
        k = next_key.get(pair, 0)
        next_key[pair] = k + 1
        src.append(a)
        dst.append(b)
        key.append(k)

    draws = rng.random((n, n)) < 0.3
    for a in range(n):
        for b in range(n):
            if a != b and draws[a, b]:
                bond(a, b)
    for a in range(n - 1):
        if (a, a + 1) not in next_key:
            bond(a, a + 1)
    for i in range(len(src)):
        if rng.random() < 0.05:
            bond(src[i], dst[i])
    feats = rng.random((len(src), edge_dim))

    g = symmetrize_edges(Multigraph(nodes, src, dst, key, feats, np.zeros(num_targets), f"synth-{index}"))
    shear = g.num_edges / n + float(g.edge_features[:, 0].mean())
    bulk = shear + 1.0 + n / MAX_SYNTH_NODES
    targets = [shear, bulk, float(poisson_ratio(bulk, shear))]
    if num_targets > 3:
        # extra tasks: smooth node-type statistics
        frac = nodes.mean(axis=0)
        targets += [float(frac[t % vocab]) + 0.1 * t for t in range(num_targets - 3)]
    return g.with_targets(targets[:num_targets])


def synth_generate(n: int, seed: int, node_vocab_size: int = 8, edge_feat_dim: int = 4,
                   T: int = 3) -> list[Multigraph]:
    """Random edge-symmetrized multigraphs with physically coupled targets.

    Targets are a shear-like modulus (mean degree plus the mean of the first
    edge feature), a bulk-like modulus (shear + 1 + nodes / 16) and the
    Poisson ratio of the two. Each graph draws from its own child seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if T < 1:
        raise ValueError("T must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n)
    return [
        _synth_graph(np.random.default_rng(child), i, node_vocab_size, edge_feat_dim, T)
        for i, child in enumerate(children)
    ]


# --------------------------------------------------------------------------
# full preparation


@dataclass(frozen=True)
class PreparedData:
    """Standardized train/test splits and the statistics used to standardize them."""

    train: list[Multigraph]
    test: list[Multigraph]
    stats: TargetStats


def prepare(dataset: Sequence[Multigraph], spec: SplitSpec = SplitSpec()) -> PreparedData:
    """Symmetrize edges, split, and standardize targets with training statistics."""
    graphs = [symmetrize_edges(g) for g in dataset]
    train, test = split(graphs, spec)
    if not train:
        raise ValueError("training split is empty")
    stats = fit_stats(np.stack([g.targets for g in train]))
    return PreparedData(
        train=[g.with_targets(standardize(g.targets, stats)) for g in train],
        test=[g.with_targets(standardize(g.targets, stats)) for g in test],
        stats=stats,
    )
