"""Directed multigraphs, validation, edge symmetrization and batching."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Multigraph",
    "GraphBatch",
    "validate_graph",
    "symmetrize_edges",
    "batch_graphs",
    "unbatch",
    "permute_nodes",
    "graph_to_record",
    "graph_from_record",
]


def _frozen(arr, dtype, ndim: int, name: str) -> np.ndarray:
    arr = np.array(arr, dtype=dtype)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class Multigraph:
    """A directed multigraph with node/edge features and T scalar targets.

    Edges are stored column-wise: ``src[i] -> dst[i]`` with multi-edge index
    ``key[i]`` and feature row ``edge_features[i]``. Construction only fixes
    dtypes and shapes; use :func:`validate_graph` to check the invariants.
    """

    __slots__ = ("id", "node_features", "src", "dst", "key", "edge_features", "targets")

    def __init__(self, node_features, src, dst, key, edge_features, targets, id: str = ""):
        node_features = np.asarray(node_features, dtype=np.float64)
        if node_features.ndim == 1 and node_features.size == 0:
            node_features = node_features.reshape(0, 0)
        self.node_features = _frozen(node_features, np.float64, 2, "node_features")
        self.src = _frozen(src, np.int64, 1, "src")
        self.dst = _frozen(dst, np.int64, 1, "dst")
        self.key = _frozen(key, np.int64, 1, "key")
        edge_features = np.asarray(edge_features, dtype=np.float64)
        if edge_features.ndim == 1 and edge_features.size == 0:
            edge_features = edge_features.reshape(0, 0)
        self.edge_features = _frozen(edge_features, np.float64, 2, "edge_features")
        m = self.src.shape[0]
        if not (self.dst.shape[0] == self.key.shape[0] == self.edge_features.shape[0] == m):
            raise ValueError("edge arrays must all have the same length")
        self.id = str(id)
        # assigned last: its presence marks the instance as frozen
        self.targets = _frozen(targets, np.float64, 1, "targets")

    def __setattr__(self, name, value):
        if hasattr(self, "targets"):
            raise AttributeError("Multigraph is immutable")
        object.__setattr__(self, name, value)

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.src.shape[0]

    @property
    def node_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.edge_features.shape[1]

    @property
    def num_targets(self) -> int:
        return self.targets.shape[0]

    def with_targets(self, targets) -> Multigraph:
        return Multigraph(
            self.node_features, self.src, self.dst, self.key, self.edge_features, targets, self.id
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Multigraph):
            return NotImplemented
        # without edges the edge-feature width is undefined (JSONL cannot carry it)
        if self.num_edges == other.num_edges == 0:
            mine, theirs = self.edge_features.ravel(), other.edge_features.ravel()
        else:
            mine, theirs = self.edge_features, other.edge_features
        return self.id == other.id and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(
                (self.node_features, self.src, self.dst, self.key, mine, self.targets),
                (other.node_features, other.src, other.dst, other.key, theirs, other.targets),
            )
        )

    __hash__ = None

    def __repr__(self) -> str:
        return (
            f"Multigraph(id={self.id!r}, nodes={self.num_nodes}, edges={self.num_edges}, "
            f"targets={self.num_targets})"
        )


def validate_graph(g: Multigraph) -> list[str]:
    """Return a list of invariant violations; an empty list means valid."""
    problems = []
    n = g.num_nodes
    for i, (s, d) in enumerate(zip(g.src.tolist(), g.dst.tolist())):
        if not (0 <= s < n and 0 <= d < n):
            problems.append(f"edge {i}: index out of range ({s}->{d} with {n} nodes)")
    seen = {}
    for i, triple in enumerate(zip(g.src.tolist(), g.dst.tolist(), g.key.tolist())):
        if triple in seen:
            problems.append(f"edge {i}: duplicate multi-edge key {triple} (first at edge {seen[triple]})")
        else:
            seen[triple] = i
    if np.any(g.key < 0):
        problems.append("negative multi-edge key")
    if not np.all(np.isfinite(g.targets)):
        problems.append("non-finite target")
    if not np.all(np.isfinite(g.node_features)):
        problems.append("non-finite node feature")
    if not np.all(np.isfinite(g.edge_features)):
        problems.append("non-finite edge feature")
    return problems


def symmetrize_edges(g: Multigraph) -> Multigraph:
    """Add the reverse ``(dst, src, key)`` of every edge that lacks one.

    Raises ValueError when a reverse edge exists with a different feature.
    """
    index = {t: i for i, t in enumerate(zip(g.src.tolist(), g.dst.tolist(), g.key.tolist()))}
    add_src, add_dst, add_key, add_feat = [], [], [], []
    for (s, d, k), i in index.items():
        j = index.get((d, s, k))
        if j is None:
            add_src.append(d)
            add_dst.append(s)
            add_key.append(k)
            add_feat.append(g.edge_features[i])
        elif not np.array_equal(g.edge_features[i], g.edge_features[j]):
            raise ValueError(f"asymmetric duplicate: edge {(s, d, k)} and its reverse differ")
    if not add_src:
        return g
    feats = np.concatenate([g.edge_features, np.stack(add_feat)], axis=0)
    return Multigraph(
        g.node_features,
        np.concatenate([g.src, add_src]),
        np.concatenate([g.dst, add_dst]),
        np.concatenate([g.key, add_key]),
        feats,
        g.targets,
        g.id,
    )


def permute_nodes(g: Multigraph, perm: Sequence[int]) -> Multigraph:
    """Relabel nodes so old node ``i`` becomes node ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.num_nodes)):
        raise ValueError("perm must be a permutation of the node indices")
    nodes = np.empty_like(g.node_features)
    nodes[perm] = g.node_features
    return Multigraph(nodes, perm[g.src], perm[g.dst], g.key, g.edge_features, g.targets, g.id)


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Several graphs concatenated with index offsets (no padding)."""

    node_features: np.ndarray  # (N_total, V)
    edge_features: np.ndarray  # (E_total, E)
    src: np.ndarray  # global node indices
    dst: np.ndarray
    key: np.ndarray
    node_graph: np.ndarray  # graph index of every node
    edge_graph: np.ndarray  # graph index of every edge
    node_offsets: np.ndarray  # (B + 1,)
    edge_offsets: np.ndarray  # (B + 1,)
    targets: np.ndarray  # (B, T)
    ids: tuple[str, ...]

    @property
    def num_graphs(self) -> int:
        return len(self.ids)

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_features.shape[0]


def batch_graphs(graphs: Sequence[Multigraph]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot batch an empty list of graphs")
    v, t = graphs[0].node_dim, graphs[0].num_targets
    # graphs without edges may report edge width 0
    e = next((g.edge_dim for g in graphs if g.num_edges), graphs[0].edge_dim)
    for g in graphs:
        if g.node_dim != v or g.num_targets != t:
            raise ValueError(f"graph {g.id!r}: heterogeneous node width or target count")
        if g.num_edges and g.edge_dim != e:
            raise ValueError(f"graph {g.id!r}: edge feature width {g.edge_dim} != {e}")
    n_counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    e_counts = np.array([g.num_edges for g in graphs], dtype=np.int64)
    node_offsets = np.concatenate([[0], np.cumsum(n_counts)])
    edge_offsets = np.concatenate([[0], np.cumsum(e_counts)])
    shift = np.repeat(node_offsets[:-1], e_counts)
    edge_feats = [g.edge_features if g.num_edges else np.zeros((0, e)) for g in graphs]
    return GraphBatch(
        node_features=np.concatenate([g.node_features for g in graphs], axis=0),
        edge_features=np.concatenate(edge_feats, axis=0).reshape(-1, e),
        src=np.concatenate([g.src for g in graphs]) + shift,
        dst=np.concatenate([g.dst for g in graphs]) + shift,
        key=np.concatenate([g.key for g in graphs]),
        node_graph=np.repeat(np.arange(len(graphs)), n_counts),
        edge_graph=np.repeat(np.arange(len(graphs)), e_counts),
        node_offsets=node_offsets,
        edge_offsets=edge_offsets,
        targets=np.stack([g.targets for g in graphs]),
        ids=tuple(g.id for g in graphs),
    )


def unbatch(batch: GraphBatch) -> list[Multigraph]:
    out = []
    for b in range(batch.num_graphs):
        n0, n1 = batch.node_offsets[b], batch.node_offsets[b + 1]
        e0, e1 = batch.edge_offsets[b], batch.edge_offsets[b + 1]
        out.append(
            Multigraph(
                batch.node_features[n0:n1],
                batch.src[e0:e1] - n0,
                batch.dst[e0:e1] - n0,
                batch.key[e0:e1],
                batch.edge_features[e0:e1],
                batch.targets[b],
                batch.ids[b],
            )
        )
    return out


# --------------------------------------------------------------------------
# JSONL records


def graph_to_record(g: Multigraph) -> dict:
    return {
        "id": g.id,
        "nodes": g.node_features.tolist(),
        "edges": [
            {"src": int(s), "dst": int(d), "key": int(k), "feat": f}
            for s, d, k, f in zip(g.src, g.dst, g.key, g.edge_features.tolist())
        ],
        "targets": g.targets.tolist(),
    }


def _reject_constant(name):
    raise ValueError(f"non-finite number {name} not allowed")


def _finite_list(values, what: str) -> list[float]:
    out = [float(x) for x in values]
    if not all(math.isfinite(x) for x in out):
        raise ValueError(f"non-finite value in {what}")
    return out


def graph_from_record(record: dict | str) -> Multigraph:
    """Build a graph from a parsed JSON object (or its text). Rejects NaN/Inf."""
    if isinstance(record, str):
        record = json.loads(record, parse_constant=_reject_constant)
    missing = {"id", "nodes", "edges", "targets"} - set(record)
    if missing:
        raise ValueError(f"record missing keys {sorted(missing)}")
    nodes = [_finite_list(row, "nodes") for row in record["nodes"]]
    widths = {len(row) for row in nodes}
    if len(widths) > 1:
        raise ValueError("node feature rows have different lengths")
    edges = record["edges"]
    feats = [_finite_list(e["feat"], "edge features") for e in edges]
    if len({len(f) for f in feats}) > 1:
        raise ValueError("edge feature vectors have different lengths")
    width = len(feats[0]) if feats else 0
    return Multigraph(
        np.array(nodes, dtype=np.float64).reshape(len(nodes), widths.pop() if widths else 0),
        [int(e["src"]) for e in edges],
        [int(e["dst"]) for e in edges],
        [int(e["key"]) for e in edges],
        np.array(feats, dtype=np.float64).reshape(len(feats), width),
        _finite_list(record["targets"], "targets"),
        record["id"],
    )

