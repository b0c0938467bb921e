"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every backward rule is written with the same primitives it differentiates,
so a backward pass run with ``create_graph=True`` lands on the tape as
ordinary nodes and can itself be differentiated (reverse-over-reverse).

A :class:`Graph` lives for one forward/backward cycle. Tensors created from
plain arrays are constants; only :meth:`Graph.leaf` and the outputs of ops
on recorded tensors carry a node id.
"""

from __future__ import annotations

import heapq
import warnings

import numpy as np

from . import _kernels

__all__ = [
    "Graph",
    "GradientMap",
    "SecondOrderError",
    "ShapeError",
    "Tensor",
    "backward",
    "grad",
    "vjp",
]


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class SecondOrderError(RuntimeError):
    """A recorded (differentiable) backward pass was requested on a first-order graph."""


class _Node:
    __slots__ = ("op", "inputs", "forward", "backward", "out")

    def __init__(self, op, inputs, forward, backward, out):
        self.op = op
        self.inputs = inputs
        self.forward = forward
        self.backward = backward
        self.out = out


class Graph:
    """Append-only tape; node ids are positions, so creation order is a topological order.

    ``second_order`` must be set for ``create_graph=True`` backward passes. It is
    off by default so plain training steps cannot grow the tape quadratically
    by accident.
    """

    def __init__(self, second_order=False):
        self.nodes: list[_Node] = []
        self.second_order = second_order
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, copy=False) -> Tensor:
        data = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64)
        t = Tensor(data)
        self._record(t, "leaf", (), None, None)
        return t

    def _record(self, out, op, inputs, forward, backward):
        out.graph = self
        out.node = len(self.nodes)
        self.nodes.append(_Node(op, inputs, forward, backward, out))

    def replay(self):
        """Recompute every node from the leaves; returns the list of values."""
        values = []
        for node in self.nodes:
            if node.forward is None:
                values.append(node.out.data)
                continue
            args = [values[t.node] if t.graph is self else t.data for t in node.inputs]
            values.append(node.forward(*args))
        return values


class Tensor:
    __slots__ = ("data", "graph", "node")
    __array_priority__ = 100.0

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def requires_grad(self):
        return self.node is not None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph_of(op, inputs):
    graph = None
    for t in inputs:
        g = t.graph
        if g is None or not g.recording:
            continue
        if graph is None:
            graph = g
        elif g is not graph:
            raise ValueError(f"{op}: operands belong to different graphs")
    return graph


def _apply(op, forward, inputs, backward):
    data = forward(*[t.data for t in inputs])
    out = Tensor(data)
    graph = _graph_of(op, inputs)
    if graph is not None:
        graph._record(out, op, inputs, forward, backward)
    return out


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------ shape plumbing


def sum_to(x, shape) -> Tensor:
    """Sum a broadcast result back down to ``shape`` (the adjoint of broadcast_to)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )

    def fwd(a):
        return a.sum(axis=axes, keepdims=True).reshape(shape)

    return _apply("sum_to", fwd, (x,), lambda g, out, needs: (broadcast_to(g, x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _apply(
        "broadcast_to",
        lambda a: np.broadcast_to(a, shape).copy(),
        (x,),
        lambda g, out, needs: (sum_to(g, x.shape),),
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        np.empty(x.shape).reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _apply(
        "reshape", lambda a: a.reshape(shape), (x,), lambda g, out, needs: (reshape(g, x.shape),)
    )


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda a: np.transpose(a, axes),
        (x,),
        lambda g, out, needs: (transpose(g, inv),),
    )


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x, idx) -> Tensor:
    """Slice/select. Advanced indices must not repeat an element (scatter is an assignment)."""
    x = as_tensor(x)
    return _apply(
        "slice", lambda a: a[idx], (x,), lambda g, out, needs: (scatter_into(g, idx, x.shape),)
    )


def scatter_into(x, idx, shape) -> Tensor:
    """Zeros of ``shape`` with ``x`` written at ``idx``; adjoint of :func:`getitem`."""
    x = as_tensor(x)
    shape = tuple(shape)

    def fwd(a):
        out = np.zeros(shape)
        out[idx] = a
        return out

    return _apply("scatter", fwd, (x,), lambda g, out, needs: (getitem(g, idx),))


def concat(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bwd(g, out, needs):
        res = []
        for i, need in enumerate(needs):
            if not need:
                res.append(None)
                continue
            idx = (slice(None),) * ax + (slice(int(bounds[i]), int(bounds[i + 1])),)
            res.append(getitem(g, idx))
        return tuple(res)

    return _apply("concat", lambda *a: np.concatenate(a, axis=ax), tuple(xs), bwd)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding-lookup: ids outside [0, {table.shape[0]})")
    n_rows = table.shape[0]
    return _apply(
        "embedding",
        lambda w: w[ids],
        (table,),
        lambda g, out, needs: (scatter_rows(g, ids, n_rows),),
    )


def scatter_rows(x, ids, n_rows) -> Tensor:
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    width = x.shape[-1]
    return _apply(
        "scatter_rows",
        lambda a: _kernels.scatter_rows(a.reshape(-1, width), ids, n_rows),
        (x,),
        lambda g, out, needs: (take_rows(g, ids),),
    )


# ------------------------------------------------------------ arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _apply(
        "add",
        np.add,
        (a, b),
        lambda g, out, needs: (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("subtract", a, b)
    return _apply(
        "subtract",
        np.subtract,
        (a, b),
        lambda g, out, needs: (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a, b)
    return _apply(
        "multiply",
        np.multiply,
        (a, b),
        lambda g, out, needs: (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("divide", a, b)
    return _apply(
        "divide",
        np.divide,
        (a, b),
        lambda g, out, needs: (
            sum_to(div(g, b), a.shape) if needs[0] else None,
            sum_to(neg(div(mul(g, out), b)), b.shape) if needs[1] else None,
        ),
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _apply("negate", np.negative, (x,), lambda g, out, needs: (neg(g),))


def scale(x, c) -> Tensor:
    """Multiply by a Python scalar."""
    x = as_tensor(x)
    c = float(c)
    return _apply("scale", lambda a: a * c, (x,), lambda g, out, needs: (scale(g, c),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _apply(
        "square", lambda a: a * a, (x,), lambda g, out, needs: (mul(g, scale(x, 2.0)),)
    )


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    return _apply(
        "sqrt", np.sqrt, (x,), lambda g, out, needs: (scale(div(g, out), 0.5),)
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _apply("exp", np.exp, (x,), lambda g, out, needs: (mul(g, out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _apply("log", np.log, (x,), lambda g, out, needs: (div(g, x),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _apply(
        "tanh", np.tanh, (x,), lambda g, out, needs: (mul(g, sub(1.0, mul(out, out))),)
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _apply(
        "relu",
        lambda a: np.maximum(a, 0.0),
        (x,),
        lambda g, out, needs: (mul(g, Tensor((x.data > 0).astype(np.float64))),),
    )


def _gelu_slope(x):
    # d/dx gelu(x), written in primitives so it stays differentiable
    c, a = _kernels.GELU_C, _kernels.GELU_A
    x2 = mul(x, x)
    t = tanh(scale(mul(x, add(1.0, scale(x2, a))), c))
    sech2 = sub(1.0, mul(t, t))
    inner = scale(add(1.0, scale(x2, 3.0 * a)), c)
    return add(scale(add(1.0, t), 0.5), scale(mul(mul(x, sech2), inner), 0.5))


def gelu(x) -> Tensor:
    x = as_tensor(x)
    return _apply("gelu", _kernels.gelu, (x,), lambda g, out, needs: (mul(g, _gelu_slope(x)),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matrix-multiply: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matrix-multiply: incompatible shapes {a.shape} and {b.shape}") from None
    return _apply(
        "matrix-multiply",
        np.matmul,
        (a, b),
        lambda g, out, needs: (
            sum_to(matmul(g, swap_last(b)), a.shape) if needs[0] else None,
            sum_to(matmul(swap_last(a), g), b.shape) if needs[1] else None,
        ),
    )


# ------------------------------------------------------------ reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
        g = reshape(g, kept)
    return broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    return _apply(
        "sum",
        lambda a: a.sum(axis=axes, keepdims=keepdims),
        (x,),
        lambda g, out, needs: (_expand_back(g, x.shape, axes, keepdims),),
    )


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    return _apply(
        "mean",
        lambda a: a.mean(axis=axes, keepdims=keepdims),
        (x,),
        lambda g, out, needs: (scale(_expand_back(g, x.shape, axes, keepdims), 1.0 / count),),
    )


def dot(a, b) -> Tensor:
    """Full contraction ``sum(a * b)`` of two same-shape tensors; returns a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot-product: incompatible shapes {a.shape} and {b.shape}")
    return _apply(
        "dot-product",
        lambda u, v: np.asarray(np.dot(u.reshape(-1), v.reshape(-1))),
        (a, b),
        lambda g, out, needs: (
            mul(g, b) if needs[0] else None,
            mul(g, a) if needs[1] else None,
        ),
    )


# ------------------------------------------------------------ network ops


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    return _apply(
        "softmax",
        _kernels.softmax,
        (x,),
        lambda g, out, needs: (mul(out, sub(g, sum_(mul(g, out), -1, keepdims=True))),),
    )


def layer_norm(x, eps=1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (affine handled by caller)."""
    x = as_tensor(x)

    def bwd(g, out, needs):
        xc = sub(x, mean(x, -1, keepdims=True))
        rstd = div(1.0, sqrt(add(mean(mul(xc, xc), -1, keepdims=True), eps)))
        centered = sub(g, mean(g, -1, keepdims=True))
        return (mul(rstd, sub(centered, mul(out, mean(mul(g, out), -1, keepdims=True)))),)

    return _apply("layer-normalization", lambda a: _kernels.layer_norm(a, eps), (x,), bwd)


def cross_entropy(logits, targets) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer class targets."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross-entropy-with-logits: incompatible shapes {logits.shape} and {targets.shape}"
        )
    n = logits.shape[0]
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n), targets] = 1.0

    def fwd(z):
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        return np.asarray((lse - z[np.arange(n), targets]).mean())

    return _apply(
        "cross-entropy-with-logits",
        fwd,
        (logits,),
        lambda g, out, needs: (mul(scale(g, 1.0 / n), sub(softmax(logits), onehot)),),
    )


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mean-squared-error: incompatible shapes {pred.shape} and {target.shape}")
    n = pred.size

    def bwd(g, out, needs):
        r = mul(scale(g, 2.0 / n), sub(pred, target))
        return (r if needs[0] else None, neg(r) if needs[1] else None)

    return _apply(
        "mean-squared-error", lambda p, t: np.asarray(((p - t) ** 2).mean()), (pred, target), bwd
    )


# ------------------------------------------------------------ backward


class GradientMap(dict):
    """Leaf node id -> gradient Tensor. ``unreachable`` holds ids the output does not depend on."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.unreachable: set[int] = set()


def _mark_active(nodes, graph, top, low, targets):
    """Node id -> whether it depends on a target, for ancestors of ``top`` not older than ``low``."""
    active = {}
    stack = [top]
    while stack:
        j = stack[-1]
        if j in active:
            stack.pop()
            continue
        if j in targets:
            active[j] = True
            stack.pop()
            continue
        todo = [t.node for t in nodes[j].inputs
                if t.graph is graph and t.node is not None and t.node >= low and t.node not in active]
        if todo:
            stack.extend(todo)
            continue
        stack.pop()
        active[j] = any(
            active.get(t.node, False) for t in nodes[j].inputs if t.graph is graph and t.node is not None
        )
    return active


def _reverse(output, inputs, create_graph, seed, allow_unused=False):
    inputs = list(inputs)
    if seed is None and output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    graph = output.graph
    if create_graph and graph is not None and not graph.second_order:
        raise SecondOrderError(
            "create_graph=True needs a graph built with Graph(second_order=True); "
            "differentiating a gradient requires the first backward pass to be recorded"
        )
    results = [None] * len(inputs)
    targets = {}
    for i, t in enumerate(inputs):
        if graph is not None and t.graph is graph and t.node is not None and t.node <= output.node:
            targets.setdefault(t.node, []).append(i)

    unreachable = []
    if targets:
        nodes = graph.nodes
        top = output.node
        low = min(targets)
        active = _mark_active(nodes, graph, top, low, targets)
        if active.get(top):
            start = Tensor(np.ones(output.shape) if seed is None else as_tensor(seed).data)
            grads = {top: start}
            pending = [-top]
            prev = graph.recording
            graph.recording = create_graph
            try:
                while pending:
                    j = -heapq.heappop(pending)
                    g = grads.pop(j)
                    if j in targets:
                        for i in targets[j]:
                            results[i] = g
                    node = nodes[j]
                    if node.backward is None:
                        continue
                    needs = tuple(
                        t.graph is graph and t.node is not None and active.get(t.node, False)
                        for t in node.inputs
                    )
                    if not any(needs):
                        continue
                    for t, need, gi in zip(node.inputs, needs, node.backward(g, node.out, needs)):
                        if not need or gi is None:
                            continue
                        k = t.node
                        if k in grads:
                            grads[k] = add(grads[k], gi)
                        else:
                            grads[k] = gi
                            heapq.heappush(pending, -k)
            finally:
                graph.recording = prev

    for i, t in enumerate(inputs):
        if results[i] is None:
            unreachable.append(i)
            results[i] = Tensor(np.zeros(t.shape))
    if unreachable and not allow_unused:
        warnings.warn(
            f"backward: {len(unreachable)} requested tensor(s) unreachable from the output; "
            "returning zero gradients",
            stacklevel=3,
        )
    return results, unreachable


def grad(output, inputs, create_graph=False, seed=None, allow_unused=False):
    """Gradients of scalar ``output`` w.r.t. each tensor in ``inputs`` (leaves or intermediates).

    Intermediate targets get partial derivatives with everything upstream held fixed.
    With ``create_graph`` the computation is taped so the results are differentiable.
    Unreachable inputs get zeros, with a warning unless ``allow_unused``.
    """
    return _reverse(output, inputs, create_graph, seed, allow_unused)[0]


def backward(output, leaves, create_graph=False) -> GradientMap:
    """Like :func:`grad` but keyed by node id."""
    leaves = list(leaves)
    for t in leaves:
        if t.node is None:
            raise ValueError("backward: requested tensor is not recorded in a graph")
    gs, unreachable = _reverse(output, leaves, create_graph, None)
    out = GradientMap((t.node, g) for t, g in zip(leaves, gs))
    out.unreachable = {leaves[i].node for i in unreachable}
    return out


def vjp(z, v, x, create_graph=False) -> Tensor:
    """v^T (dz/dx) in one backward pass, shaped like ``x``."""
    v = as_tensor(v)
    if v.shape != z.shape:
        raise ShapeError(f"vjp: projection shape {v.shape} does not match output shape {z.shape}")
    return grad(dot(z, v), [x], create_graph=create_graph)[0]
