"""Shared graph-network encoder with per-task feedforward heads.

The encoder projects node and edge features into a latent space, seeds a
global state of ones, and runs residual message-passing steps that update
edges, then nodes, then the global state, each followed by layer
normalization. Task heads read the final global state.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .graphs import GraphBatch

__all__ = [
    "GnConfig",
    "init_params",
    "param_shapes",
    "message_pass_step",
    "encode",
    "forward",
    "predict",
    "per_task_loss",
    "total_loss",
    "task_loss_fn",
    "total_loss_fn",
    "all_losses_fn",
]


@dataclass(frozen=True)
class GnConfig:
    node_dim: int
    edge_dim: int
    num_tasks: int
    latent_dim: int = 64
    steps: int = 5
    edge_hidden: int = 256
    node_hidden: int = 256
    global_hidden: int = 192
    head_hidden: tuple[int, ...] = (64,)
    share_step_params: bool = False
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        widths = [self.node_dim, self.edge_dim, self.latent_dim, self.edge_hidden,
                  self.node_hidden, self.global_hidden, *self.head_hidden]
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1: {self}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> GnConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _mlp_shapes(prefix: str, d_in: int, hidden: int, d_out: int):
    return [
        (f"{prefix}/hidden1/w", (d_in, hidden)),
        (f"{prefix}/hidden1/b", (hidden,)),
        (f"{prefix}/hidden2/w", (hidden, hidden)),
        (f"{prefix}/hidden2/b", (hidden,)),
        (f"{prefix}/out/w", (hidden, d_out)),
        (f"{prefix}/out/b", (d_out,)),
    ]


def _step_prefixes(config: GnConfig) -> list[str]:
    if config.share_step_params:
        return ["shared/step"] * config.steps
    return [f"shared/step{m}" for m in range(config.steps)]


def param_shapes(config: GnConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; this order is the flattening order."""
    d = config.latent_dim
    shapes = [
        ("shared/proj/node", (config.node_dim, d)),
        ("shared/proj/edge", (config.edge_dim, d)),
    ]
    for prefix in dict.fromkeys(_step_prefixes(config)):
        shapes += _mlp_shapes(f"{prefix}/edge_net", 4 * d, config.edge_hidden, d)
        shapes += _mlp_shapes(f"{prefix}/node_net", 4 * d, config.node_hidden, d)
        shapes += _mlp_shapes(f"{prefix}/global_net", 3 * d, config.global_hidden, d)
        for stream in ("edge", "node", "global"):
            shapes += [(f"{prefix}/norm_{stream}/scale", (d,)), (f"{prefix}/norm_{stream}/offset", (d,))]
    for t in range(config.num_tasks):
        width = d
        for i, h in enumerate(config.head_hidden):
            shapes += [(f"task{t}/hidden{i + 1}/w", (width, h)), (f"task{t}/hidden{i + 1}/b", (h,))]
            width = h
        shapes += [(f"task{t}/out/w", (width, 1)), (f"task{t}/out/b", (1,))]
    return shapes


def init_params(config: GnConfig, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases, unit scale / zero offset norms."""
    rng = np.random.default_rng(seed)
    items = []
    for name, shape in param_shapes(config):
        leaf = name.rsplit("/", 1)[1]
        if leaf == "scale":
            arr = np.ones(shape)
        elif leaf in ("b", "offset"):
            arr = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-a, a, size=shape)
        items.append((name, arr))
    return ParamSet(items)


def _mlp(x, p: Mapping, prefix: str) -> Tensor:
    """Two tanh layers with a skip around the second, then a tanh output layer."""
    h1 = ad.tanh(ad.matmul(x, p[f"{prefix}/hidden1/w"]) + p[f"{prefix}/hidden1/b"])
    h2 = ad.tanh(ad.matmul(h1, p[f"{prefix}/hidden2/w"]) + p[f"{prefix}/hidden2/b"]) + h1
    return ad.tanh(ad.matmul(h2, p[f"{prefix}/out/w"]) + p[f"{prefix}/out/b"])


def message_pass_step(state, p: Mapping, prefix: str, batch: GraphBatch, eps: float = 1e-6,
                      normalize: bool = True):
    """One residual edge -> node -> global update.

    ``state`` is ``(x, e, u)`` with shapes ``(N, D)``, ``(E, D)``, ``(B, D)``.
    With ``normalize=False`` the pre-normalization state is returned.
    """
    x, e, u = (ad.as_tensor(s) for s in state)
    d = x.shape[-1]
    if e.shape[-1] != d or u.shape[-1] != d:
        raise ValueError(f"state widths differ: {x.shape}, {e.shape}, {u.shape}")
    n_nodes, n_graphs = x.shape[0], u.shape[0]

    edge_in = ad.concat([e, ad.take(x, batch.src), ad.take(x, batch.dst), ad.take(u, batch.edge_graph)])
    e_new = _mlp(edge_in, p, f"{prefix}/edge_net") + e

    h_out = ad.segment_sum(e_new, batch.src, n_nodes)
    h_in = ad.segment_sum(e_new, batch.dst, n_nodes)
    node_in = ad.concat([h_out, h_in, x, ad.take(u, batch.node_graph)])
    x_new = _mlp(node_in, p, f"{prefix}/node_net") + x

    global_in = ad.concat([
        ad.segment_sum(e_new, batch.edge_graph, n_graphs),
        ad.segment_sum(x_new, batch.node_graph, n_graphs),
        u,
    ])
    u_new = _mlp(global_in, p, f"{prefix}/global_net") + u

    if not normalize:
        return x_new, e_new, u_new
    return (
        ad.layer_norm(x_new, p[f"{prefix}/norm_node/scale"], p[f"{prefix}/norm_node/offset"], eps),
        ad.layer_norm(e_new, p[f"{prefix}/norm_edge/scale"], p[f"{prefix}/norm_edge/offset"], eps),
        ad.layer_norm(u_new, p[f"{prefix}/norm_global/scale"], p[f"{prefix}/norm_global/offset"], eps),
    )


def _check_widths(batch: GraphBatch, config: GnConfig):
    if batch.node_features.shape[1] != config.node_dim:
        raise ValueError(f"node feature width {batch.node_features.shape[1]} != {config.node_dim}")
    if batch.num_edges and batch.edge_features.shape[1] != config.edge_dim:
        raise ValueError(f"edge feature width {batch.edge_features.shape[1]} != {config.edge_dim}")


def encode(batch: GraphBatch, params: Mapping, config: GnConfig) -> Tensor:
    """Graph-level representation ``u^M`` for every graph in the batch, ``(B, D)``."""
    _check_widths(batch, config)
    edges = batch.edge_features.reshape(batch.num_edges, config.edge_dim)
    x = ad.matmul(batch.node_features, params["shared/proj/node"])
    e = ad.matmul(edges, params["shared/proj/edge"])
    u = ad.as_tensor(np.ones((batch.num_graphs, config.latent_dim)))
    state = (x, e, u)
    for prefix in _step_prefixes(config):
        state = message_pass_step(state, params, prefix, batch, config.ln_eps)
    return state[2]


def _head(u: Tensor, params: Mapping, config: GnConfig, t: int) -> Tensor:
    h = u
    for i in range(len(config.head_hidden)):
        h = ad.tanh(ad.matmul(h, params[f"task{t}/hidden{i + 1}/w"]) + params[f"task{t}/hidden{i + 1}/b"])
    return ad.matmul(h, params[f"task{t}/out/w"]) + params[f"task{t}/out/b"]


def forward(batch: GraphBatch, params: Mapping, config: GnConfig) -> Tensor:
    """Predictions for every graph and task, shape ``(B, T)``."""
    u = encode(batch, params, config)
    return ad.concat([_head(u, params, config, t) for t in range(config.num_tasks)])


def predict(batch: GraphBatch, params: ParamSet, config: GnConfig) -> np.ndarray:
    """Forward pass without graph recording, as a numpy array."""
    with ad.no_grad():
        return forward(batch, params, config).value


def _check_task(t: int, config: GnConfig):
    if not (isinstance(t, (int, np.integer)) and 0 <= t < config.num_tasks):
        raise ValueError(f"task index {t!r} outside [0, {config.num_tasks})")


def _squared_error(pred: Tensor, batch: GraphBatch, t: int) -> Tensor:
    target = batch.targets[:, t:t + 1]
    return ad.mean(ad.square(pred - target))


def per_task_loss(batch: GraphBatch, params: Mapping, t: int, config: GnConfig) -> Tensor:
    """Batch-mean squared error on task ``t``."""
    _check_task(t, config)
    u = encode(batch, params, config)
    return _squared_error(_head(u, params, config, t), batch, t)


def _task_losses(batch: GraphBatch, params: Mapping, config: GnConfig, tasks: Sequence[int]):
    u = encode(batch, params, config)
    return [_squared_error(_head(u, params, config, t), batch, t) for t in tasks]


def total_loss(batch: GraphBatch, params: Mapping, config: GnConfig) -> Tensor:
    """Unit-weighted sum of the per-task losses."""
    losses = _task_losses(batch, params, config, range(config.num_tasks))
    out = losses[0]
    for loss in losses[1:]:
        out = out + loss
    return out


def task_loss_fn(batch: GraphBatch, config: GnConfig, t: int):
    """``params -> per_task_loss`` closure for the autodiff transformations."""
    _check_task(t, config)
    return lambda p: per_task_loss(batch, p, t, config)


def total_loss_fn(batch: GraphBatch, config: GnConfig):
    return lambda p: total_loss(batch, p, config)


def all_losses_fn(batch: GraphBatch, config: GnConfig):
    """``params -> [L_0, ..., L_{T-1}, L_total]`` sharing one encoder pass."""

    def fn(p):
        losses = _task_losses(batch, p, config, range(config.num_tasks))
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        return losses + [total]

    return fn

