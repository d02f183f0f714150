"""Minimal dense-tensor autodiff: reverse-mode gradients, forward-mode tangents.

Every primitive carries two rules:

* a JVP rule written directly in numpy, used whenever an input carries a
  tangent, and
* a VJP rule written in terms of other primitives.

Because the VJP rules are built from primitives, running the backward pass on
tensors that carry tangents differentiates the gradient map itself. That is
how :func:`hvp` gets an exact Hessian-vector product (forward-over-reverse).

Tangents may carry leading batch axes: a tensor of shape ``s`` can hold a
tangent of shape ``(K,) + s``. All JVP rules address value axes from the right
so a batch of ``K`` directions propagates in one pass.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from contextlib import contextmanager

import numpy as np
from scipy import sparse

__all__ = [
    "NonDifferentiableError",
    "Tensor",
    "ParamSet",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "tanh",
    "square",
    "sum",
    "mean",
    "reshape",
    "broadcast_to",
    "sum_to",
    "concat",
    "slice_last",
    "pad_last",
    "take",
    "segment_sum",
    "layer_norm",
    "no_grad",
    "evaluate",
    "grad",
    "value_and_grad",
    "jvp",
    "hvp",
    "hvp_many",
    "flatten",
    "unflatten",
    "finite_diff_grad",
    "max_relative_error",
]


class NonDifferentiableError(TypeError):
    """Raised when a loss uses an operation outside the supported primitive set."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on this thread. Tangents still propagate."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array with an optional tangent and a backward-graph node."""

    __slots__ = ("value", "tangent", "requires_grad", "_parents", "_vjp", "__weakref__")

    def __init__(self, value, tangent=None, requires_grad: bool = False, check: bool = True):
        value = np.asarray(value, dtype=np.float64)
        if check and not np.all(np.isfinite(value)):
            raise ValueError("tensor values must be finite")
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=np.float64)
            if tangent.shape[tangent.ndim - value.ndim:] != value.shape:
                raise ValueError(
                    f"tangent shape {tangent.shape} incompatible with value shape {value.shape}"
                )
        self.value = value
        self.tangent = tangent
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __array__(self, dtype=None, copy=None):
        raise NonDifferentiableError(
            "non-differentiable op: Tensor cannot be converted to a numpy array; use .value"
        )

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        # ndarray (op) Tensor lands here; route the supported binary ops back to primitives
        binary = {np.add: add, np.subtract: sub, np.multiply: mul, np.matmul: matmul}
        if method == "__call__" and ufunc in binary and len(inputs) == 2 and not kwargs:
            return binary[ufunc](*inputs)
        raise NonDifferentiableError(f"non-differentiable op: numpy.{ufunc.__name__}")

    def __array_function__(self, func, types, args, kwargs):
        raise NonDifferentiableError(f"non-differentiable op: numpy.{func.__name__}")

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        raise NonDifferentiableError("non-differentiable op: division by a tensor")

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        raise NonDifferentiableError(f"non-differentiable op: power {exponent!r}")

    def __abs__(self):
        raise NonDifferentiableError("non-differentiable op: abs")

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    """Wrap ``x`` as a constant tensor unless it already is one."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, check=False)


# --------------------------------------------------------------------------
# tangent helpers


def _batch_ndim(t: np.ndarray, value_ndim: int) -> int:
    return t.ndim - value_ndim


def _lift(t, value_ndim: int, out_ndim: int):
    """Insert unit axes after the batch axes so ``t`` broadcasts like its value."""
    if t is None or value_ndim >= out_ndim:
        return t
    b = t.ndim - value_ndim
    return t.reshape(t.shape[:b] + (1,) * (out_ndim - value_ndim) + t.shape[b:])


def _acc(*terms):
    out = None
    for term in terms:
        if term is None:
            continue
        out = term if out is None else out + term
    return out


def _node(value, tangent, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(value, tangent, check=False)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value + b.value
    nd = value.ndim
    tangent = _acc(_lift(a.tangent, a.ndim, nd), _lift(b.tangent, b.ndim, nd))

    def vjp(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return _node(value, tangent, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value - b.value
    nd = value.ndim
    tb = _lift(b.tangent, b.ndim, nd)
    tangent = _acc(_lift(a.tangent, a.ndim, nd), None if tb is None else -tb)

    def vjp(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            neg(sum_to(g, b.shape)) if b.requires_grad else None,
        )

    return _node(value, tangent, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value * b.value
    nd = value.ndim
    ta = _lift(a.tangent, a.ndim, nd)
    tb = _lift(b.tangent, b.ndim, nd)
    tangent = _acc(
        None if ta is None else ta * b.value,
        None if tb is None else a.value * tb,
    )

    def vjp(g):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _node(value, tangent, (a, b), vjp)


def neg(a) -> Tensor:
    return mul(a, -1.0)


def _tangent_at_matrix(t: np.ndarray, m: np.ndarray) -> np.ndarray:
    # fold batch axes into rows: one GEMM instead of a stack of small ones
    if t.ndim == 2:
        return t @ m
    rows = int(np.prod(t.shape[:-1], dtype=int))
    return (t.reshape(rows, t.shape[-1]) @ m).reshape(t.shape[:-1] + (m.shape[1],))


def _matrix_at_tangent(m: np.ndarray, t: np.ndarray) -> np.ndarray:
    if t.ndim == 2:
        return m @ t
    batch = t.shape[:-2]
    k, p = t.shape[-2:]
    nb = int(np.prod(batch, dtype=int))
    cols = np.moveaxis(t.reshape(nb, k, p), 0, 1).reshape(k, nb * p)
    out = (m @ cols).reshape(m.shape[0], nb, p)
    return np.moveaxis(out, 0, 1).reshape(batch + (m.shape[0], p))


def matmul(a, b) -> Tensor:
    """Product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    value = a.value @ b.value
    tangent = _acc(
        None if a.tangent is None else _tangent_at_matrix(a.tangent, b.value),
        None if b.tangent is None else _matrix_at_tangent(a.value, b.tangent),
    )

    def vjp(g):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    return _node(value, tangent, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    tangent = None if a.tangent is None else np.swapaxes(a.tangent, -1, -2)
    return _node(a.value.T, tangent, (a,), lambda g: (transpose(g),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    dy = 1.0 - y * y
    tangent = None if a.tangent is None else dy * a.tangent
    out = _node(y, tangent, (a,), None)
    if out.requires_grad:
        # derivative expressed through the output so its own tangent is exact
        out._vjp = lambda g: (mul(g, sub(1.0, square(_detached(out)))),)
    return out


def _detached(t: Tensor) -> Tensor:
    return Tensor(t.value, t.tangent, check=False)


def square(a) -> Tensor:
    a = as_tensor(a)
    value = a.value * a.value
    tangent = None if a.tangent is None else 2.0 * a.value * a.tangent
    return _node(value, tangent, (a,), lambda g: (mul(g, mul(a, 2.0)),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    value = np.sum(a.value, axis=axes, keepdims=keepdims)
    tangent = None
    if a.tangent is not None:
        neg_axes = tuple(ax - a.ndim for ax in axes)
        tangent = np.sum(a.tangent, axis=neg_axes, keepdims=keepdims)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _node(value, tangent, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    value = a.value.reshape(shape)
    tangent = None
    if a.tangent is not None:
        b = _batch_ndim(a.tangent, a.ndim)
        tangent = a.tangent.reshape(a.tangent.shape[:b] + value.shape)
    return _node(value, tangent, (a,), lambda g: (reshape(g, a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    value = np.broadcast_to(a.value, shape)
    tangent = None
    if a.tangent is not None:
        t = _lift(a.tangent, a.ndim, len(shape))
        b = _batch_ndim(t, len(shape))
        tangent = np.broadcast_to(t, t.shape[:b] + shape)
    return _node(value, tangent, (a,), lambda g: (sum_to(g, a.shape),))


def _sum_to_axes(shape, target):
    lead = len(shape) - len(target)
    axes = list(range(lead))
    for i, n in enumerate(target):
        if n == 1 and shape[lead + i] != 1:
            axes.append(lead + i)
    return lead, tuple(axes)


def sum_to(a, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead, axes = _sum_to_axes(a.shape, shape)
    value = np.sum(a.value, axis=axes, keepdims=True)
    value = value.reshape(shape)
    tangent = None
    if a.tangent is not None:
        b = _batch_ndim(a.tangent, a.ndim)
        t = np.sum(a.tangent, axis=tuple(ax + b for ax in axes), keepdims=True)
        tangent = t.reshape(a.tangent.shape[:b] + shape)
    return _node(value, tangent, (a,), lambda g: (broadcast_to(g, a.shape),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    if axis not in (-1,):
        raise ValueError("concat supports the last axis only")
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one tensor")
    ndim = parts[0].ndim
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.ndim != ndim or p.shape[:-1] != lead:
            raise ValueError(f"concat width mismatch: {[q.shape for q in parts]}")
    value = np.concatenate([p.value for p in parts], axis=-1)
    tangent = None
    tangents = [p.tangent for p in parts]
    ref = next((t for t in tangents if t is not None), None)
    if ref is not None:
        batch = ref.shape[: ref.ndim - ndim]
        tangent = np.concatenate(
            [
                t if t is not None else np.zeros(batch + p.shape)
                for t, p in zip(tangents, parts)
            ],
            axis=-1,
        )
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def vjp(g):
        return tuple(
            slice_last(g, int(bounds[i]), int(bounds[i + 1])) if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _node(value, tangent, tuple(parts), vjp)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    width = a.shape[-1]
    value = a.value[..., start:stop]
    tangent = None if a.tangent is None else a.tangent[..., start:stop]
    return _node(value, tangent, (a,), lambda g: (pad_last(g, start, width - stop),))


def pad_last(a, before: int, after: int) -> Tensor:
    a = as_tensor(a)
    width = a.shape[-1]

    def _pad(x):
        out = np.zeros(x.shape[:-1] + (before + width + after,))
        out[..., before:before + width] = x
        return out

    value = _pad(a.value)
    tangent = None if a.tangent is None else _pad(a.tangent)
    return _node(value, tangent, (a,), lambda g: (slice_last(g, before, before + width),))


def take(a, index) -> Tensor:
    """Gather rows: ``a[index]`` along the first value axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    value = a.value[index]
    tangent = None if a.tangent is None else np.take(a.tangent, index, axis=-a.ndim)
    n = a.shape[0]
    return _node(value, tangent, (a,), lambda g: (segment_sum(g, index, n),))


def _segment_sum_np(x: np.ndarray, index: np.ndarray, num_segments: int, value_ndim: int):
    b = x.ndim - value_ndim
    n = x.shape[b]
    # sparse incidence product; rows accumulate in index order like np.add.at
    incidence = sparse.csr_matrix(
        (np.ones(n), (index, np.arange(n))), shape=(num_segments, n)
    )
    rest = x.shape[:b] + x.shape[b + 1:]
    rows = np.moveaxis(x, b, 0).reshape(n, int(np.prod(rest, dtype=int)))
    out = np.asarray(incidence @ rows).reshape((num_segments,) + rest)
    return np.moveaxis(out, 0, b)


def segment_sum(a, index, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``index``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != a.shape[:1]:
        raise ValueError(f"segment index length {index.shape} does not match {a.shape}")
    value = _segment_sum_np(a.value, index, num_segments, a.ndim)
    tangent = None
    if a.tangent is not None:
        tangent = _segment_sum_np(a.tangent, index, num_segments, a.ndim)
    return _node(value, tangent, (a,), lambda g: (take(g, index),))


def layer_norm(x, scale, offset, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply a learnable scale and offset."""
    x, scale, offset = as_tensor(x), as_tensor(scale), as_tensor(offset)
    d = x.shape[-1]
    if scale.shape != (d,) or offset.shape != (d,):
        raise ValueError(f"layer_norm parameter width mismatch for input {x.shape}")
    xv = x.value
    xc = xv - xv.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    xhat = xc * r
    value = xhat * scale.value + offset.value

    t_xhat = t_r = None
    if x.tangent is not None:
        txc = x.tangent - x.tangent.mean(axis=-1, keepdims=True)
        tvar = 2.0 * (xc * txc).mean(axis=-1, keepdims=True)
        t_r = -0.5 * r**3 * tvar
        t_xhat = txc * r + xc * t_r
    nd = value.ndim
    ts = _lift(scale.tangent, 1, nd)
    tangent = _acc(
        None if t_xhat is None else t_xhat * scale.value,
        None if ts is None else xhat * ts,
        _lift(offset.tangent, 1, nd),
    )
    xhat_t = Tensor(xhat, t_xhat, check=False)
    r_t = Tensor(r, t_r, check=False)

    def vjp(g):
        gx = gs = go = None
        if x.requires_grad:
            gh = mul(g, scale)
            gx = mul(
                r_t,
                sub(
                    sub(gh, mean(gh, axis=-1, keepdims=True)),
                    mul(xhat_t, mean(mul(gh, xhat_t), axis=-1, keepdims=True)),
                ),
            )
        if scale.requires_grad:
            gs = sum_to(mul(g, xhat_t), scale.shape)
        if offset.requires_grad:
            go = sum_to(g, offset.shape)
        return gx, gs, go

    return _node(value, tangent, (x, scale, offset), vjp)


# --------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backward(root: Tensor, leaves: Iterable[Tensor]) -> dict[int, Tensor]:
    """Cotangents of ``root`` with respect to each leaf, keyed by ``id(leaf)``."""
    leaf_ids = {id(t) for t in leaves}
    grads: dict[int, Tensor] = {}
    if not root.requires_grad:
        return grads
    cot: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.value), check=False)}
    with no_grad():
        for node in reversed(_toposort(root)):
            g = cot.pop(id(node), None)
            if g is None:
                continue
            if id(node) in leaf_ids:
                grads[id(node)] = g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = cot.get(id(parent))
                cot[id(parent)] = pg if prev is None else add(prev, pg)
    return grads


# --------------------------------------------------------------------------
# parameter sets and blocks


class ParamSet:
    """Ordered named arrays partitioned into a shared block and task blocks.

    Names starting with ``shared/`` belong to the shared block; names starting
    with ``task{t}/`` belong to task ``t``. A block selector is ``"shared"``,
    ``"all"`` or an integer task index.
    """

    def __init__(self, items: Iterable[tuple[str, np.ndarray]]):
        self._names: list[str] = []
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in items:
            if name in self._arrays:
                raise ValueError(f"duplicate parameter name {name!r}")
            if not (name.startswith("shared/") or _task_of(name) is not None):
                raise ValueError(f"parameter {name!r} belongs to no block")
            arr = np.array(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} has non-finite entries")
            self._names.append(name)
            self._arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self._names == other._names and all(
            self[n].shape == other[n].shape and np.array_equal(self[n], other[n])
            for n in self._names
        )

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.size()} values)"

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def items(self):
        return [(n, self._arrays[n]) for n in self._names]

    @property
    def num_tasks(self) -> int:
        tasks = [_task_of(n) for n in self._names]
        tasks = [t for t in tasks if t is not None]
        return max(tasks) + 1 if tasks else 0

    def block_names(self, block="all") -> list[str]:
        if block == "all":
            return list(self._names)
        if block == "shared":
            return [n for n in self._names if n.startswith("shared/")]
        if isinstance(block, (int, np.integer)) and not isinstance(block, bool):
            return [n for n in self._names if _task_of(n) == int(block)]
        raise ValueError(f"unknown parameter block {block!r}")

    def size(self, block="all") -> int:
        return int(np.sum([self._arrays[n].size for n in self.block_names(block)], dtype=int))

    def copy(self) -> ParamSet:
        return ParamSet((n, a.copy()) for n, a in self.items())

    def replace(self, updates: Mapping[str, np.ndarray]) -> ParamSet:
        out = ParamSet.__new__(ParamSet)
        out._names = list(self._names)
        out._arrays = dict(self._arrays)
        for name, arr in updates.items():
            if name not in self._arrays:
                raise KeyError(name)
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._arrays[name].shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape}")
            out._arrays[name] = arr
        return out

    def to_document(self) -> list[dict]:
        return [
            {"name": n, "shape": list(a.shape), "values": a.ravel().tolist()}
            for n, a in self.items()
        ]

    @classmethod
    def from_document(cls, doc: Sequence[Mapping]) -> ParamSet:
        return cls(
            (entry["name"], np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"]))
            for entry in doc
        )


def _task_of(name: str):
    if not name.startswith("task"):
        return None
    head = name.split("/", 1)[0][4:]
    return int(head) if head.isdigit() else None


def flatten(params: ParamSet, block="all") -> np.ndarray:
    """Concatenate the block's arrays in canonical order."""
    names = params.block_names(block)
    if not names:
        return np.zeros(0)
    return np.concatenate([params[n].ravel() for n in names])


def _split_flat(flat: np.ndarray, params: ParamSet, names: list[str]) -> dict[str, np.ndarray]:
    """Split a ``(..., P)`` array into per-name pieces shaped ``(...,) + shape``."""
    total = sum_sizes = 0
    for n in names:
        sum_sizes += params[n].size
    if flat.shape[-1] != sum_sizes:
        raise ValueError(f"flat vector length {flat.shape[-1]} != block size {sum_sizes}")
    batch = flat.shape[:-1]
    out = {}
    for n in names:
        size = params[n].size
        out[n] = flat[..., total:total + size].reshape(batch + params[n].shape)
        total += size
    return out


def unflatten(flat, template: ParamSet, block="all") -> ParamSet:
    """Inverse of :func:`flatten`; arrays outside ``block`` come from ``template``."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1:
        raise ValueError("unflatten expects a 1-D vector")
    pieces = _split_flat(flat, template, template.block_names(block))
    return template.replace({n: p.copy() for n, p in pieces.items()})


# --------------------------------------------------------------------------
# transformations


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def _lift_params(params: ParamSet, block, requires_grad: bool, direction=None):
    names = set(params.block_names(block)) if block is not None else set()
    tangents = {}
    if direction is not None:
        tangents = _split_flat(np.asarray(direction, dtype=np.float64), params, params.block_names(block))
    lifted = {}
    for n, arr in params.items():
        in_block = n in names
        lifted[n] = Tensor(
            arr,
            tangents.get(n),
            requires_grad=requires_grad and in_block,
            check=False,
        )
    return lifted


def evaluate(fn: LossFn, params: ParamSet) -> np.ndarray:
    """Evaluate ``fn`` on constant parameters and return the numpy value."""
    with no_grad():
        return as_tensor(fn(_lift_params(params, None, False))).value


def _check_scalar(loss) -> Tensor:
    if not isinstance(loss, Tensor):
        raise TypeError(f"loss function must return a Tensor, got {type(loss).__name__}")
    if loss.size != 1 or loss.ndim != 0:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    return loss


def _gather(grads: dict[int, Tensor], lifted, names, params: ParamSet, tangent_batch=None):
    vals, tans = [], []
    for n in names:
        g = grads.get(id(lifted[n]))
        size = params[n].size
        if g is None:
            vals.append(np.zeros(size))
            if tangent_batch is not None:
                tans.append(np.zeros(tangent_batch + (size,)))
            continue
        vals.append(np.asarray(g.value).reshape(size))
        if tangent_batch is not None:
            if g.tangent is None:
                tans.append(np.zeros(tangent_batch + (size,)))
            else:
                tans.append(np.asarray(g.tangent).reshape(tangent_batch + (size,)))
    value = np.concatenate(vals) if vals else np.zeros(0)
    if tangent_batch is None:
        return value, None
    tangent = np.concatenate(tans, axis=-1) if tans else np.zeros(tangent_batch + (0,))
    return value, tangent


def value_and_grad(loss_fn: LossFn, params: ParamSet, block="all") -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``block``, flattened."""
    lifted = _lift_params(params, block, True)
    loss = _check_scalar(loss_fn(lifted))
    names = params.block_names(block)
    grads = _backward(loss, [lifted[n] for n in names])
    g, _ = _gather(grads, lifted, names, params)
    return float(loss.value), g


def grad(loss_fn: LossFn, params: ParamSet, block="all") -> np.ndarray:
    """Gradient of a scalar loss with respect to ``block``, flattened."""
    return value_and_grad(loss_fn, params, block)[1]


def jvp(f: Callable[[Mapping[str, Tensor]], Tensor], params: ParamSet, direction, block="all") -> np.ndarray:
    """Directional derivative of ``f`` at ``params`` along ``direction``.

    ``direction`` has length equal to the block size, or shape ``(K, P)`` for
    ``K`` directions at once. The output is the flattened tangent of ``f``.
    """
    direction = np.asarray(direction, dtype=np.float64)
    size = params.size(block)
    if direction.shape[-1:] != (size,) or direction.ndim > 2:
        raise ValueError(f"direction shape {direction.shape} does not match block size {size}")
    with no_grad():
        out = as_tensor(f(_lift_params(params, block, False, direction)))
    batch = direction.shape[:-1]
    if out.tangent is None:
        return np.zeros(batch + (out.size,))
    return out.tangent.reshape(batch + (out.size,))


def hvp_many(loss_fns: Sequence[LossFn] | Callable, params: ParamSet, block, v) -> list[np.ndarray]:
    """Hessian-vector products for several losses sharing one forward pass.

    ``loss_fns`` is a callable returning a list of scalar losses. The tangent
    pass through the shared computation runs once; each loss then gets its own
    reverse pass, whose tangents give ``H_i v``.
    """
    v = np.asarray(v, dtype=np.float64)
    size = params.size(block)
    if v.shape[-1:] != (size,) or v.ndim > 2:
        raise ValueError(f"vector shape {v.shape} does not match block size {size}")
    lifted = _lift_params(params, block, True, v)
    losses = [_check_scalar(loss) for loss in loss_fns(lifted)]
    names = params.block_names(block)
    leaves = [lifted[n] for n in names]
    batch = v.shape[:-1]
    out = []
    for loss in losses:
        grads = _backward(loss, leaves)
        _, hv = _gather(grads, lifted, names, params, tangent_batch=batch)
        out.append(hv)
    return out


def hvp(loss_fn: LossFn, params: ParamSet, block, v) -> np.ndarray:
    """Exact Hessian-vector product: the directional derivative of the gradient.

    ``v`` may be a single vector of length ``P`` or a ``(K, P)`` stack.
    """
    return hvp_many(lambda p: [loss_fn(p)], params, block, v)[0]


def max_relative_error(estimate, reference, rel_floor: float = 1e-4) -> float:
    """Largest componentwise ``|a - b| / max(|a|, |b|, rel_floor * max|b|)``.

    The floor keeps near-zero components, where a finite-difference reference
    is dominated by rounding noise, from defining the error.
    """
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    floor = rel_floor * float(np.max(np.abs(b)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    diff = np.abs(a - b)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(diff == 0, 0.0, diff / denom)
    return float(np.max(rel))


def finite_diff_grad(loss_fn: LossFn, params: ParamSet, block="all", eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient with per-coordinate step ``eps * (1 + |theta_i|)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = flatten(params, block)
    out = np.zeros_like(theta)
    for i in range(theta.size):
        h = eps * (1.0 + abs(theta[i]))
        up = theta.copy()
        up[i] += h
        dn = theta.copy()
        dn[i] -= h
        f_up = float(evaluate(loss_fn, unflatten(up, params, block)))
        f_dn = float(evaluate(loss_fn, unflatten(dn, params, block)))
        out[i] = (f_up - f_dn) / (2.0 * h)
    return out
