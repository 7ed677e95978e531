"""Reverse-mode automatic differentiation over dense float64 tensors.

The backward pass is assembled from the same primitive ops it differentiates,
so running it with ``create_graph=True`` records fresh graph nodes and the
returned gradients are themselves differentiable. That is what makes exact
second-order gradients through a gradient-descent update possible.

All arithmetic is 64-bit. Every op validates shapes and rejects non-finite
results, and a recorded graph is append-only, which keeps runs bitwise
reproducible.
"""

from __future__ import annotations

import math
from contextlib import contextmanager, nullcontext

import numpy as np

__all__ = [
    "Tensor", "Graph", "Node",
    "ShapeError", "NonFiniteError", "GraphFrozenError",
    "tensor", "as_tensor", "detach", "gradient", "apply",
    "add", "sub", "mul", "matmul", "transpose", "relu", "scale", "square",
    "mean_all", "sum_all", "broadcast_full", "add_bias",
    "sum_axis0", "broadcast_axis0", "sum_axis1", "broadcast_axis1",
    "softmax_rows", "softmax_cross_entropy",
    "concat_rows", "slice_rows", "pad_rows",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class GraphFrozenError(RuntimeError):
    """Differentiation or recording requested on a frozen graph."""


class Node:
    """One recorded op: kind, input tensors and op-specific saved state."""

    __slots__ = ("op", "inputs", "saved")

    def __init__(self, op, inputs, saved=None):
        self.op = op
        self.inputs = inputs
        self.saved = saved

    @property
    def input_ids(self):
        return tuple(t.node_id for t in self.inputs)


class Graph:
    """Append-only op record. Single-threaded; either recording or frozen."""

    __slots__ = ("nodes", "recording", "_suspended")

    def __init__(self):
        self.nodes = []
        self.recording = True
        self._suspended = 0

    def freeze(self):
        """Stop recording permanently. Ops on frozen-graph tensors still
        compute values but append nothing; gradient() refuses to run."""
        self.recording = False

    @property
    def frozen(self):
        return not self.recording

    @contextmanager
    def _pause(self):
        # Temporary non-recording window, used by gradient(create_graph=False).
        self._suspended += 1
        try:
            yield
        finally:
            self._suspended -= 1

    def leaf(self, data):
        """Register a differentiation root (e.g. a parameter) on this graph."""
        if not self.recording:
            raise GraphFrozenError("cannot add leaves to a frozen graph")
        out = _wrap(_as_array(data))
        out.graph = self
        out.node_id = len(self.nodes)
        self.nodes.append(Node("leaf", ()))
        return out

    def __len__(self):
        return len(self.nodes)


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense float64 value, optionally recorded in a Graph.

    Constants carry no graph linkage (``node_id is None``); gradients do not
    flow through them.
    """

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data):
        self.data = _as_array(data)
        self.graph = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = "const" if self.node_id is None else f"node {self.node_id}"
        return f"Tensor(shape={self.data.shape}, {tag})"


def _wrap(arr):
    # Internal fast constructor: arr is already a float64 C-order ndarray.
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.graph = None
    t.node_id = None
    return t


def tensor(data):
    """Constant tensor (no graph linkage)."""
    return Tensor(data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(t):
    """Same values, no graph linkage; gradients stop here."""
    t = as_tensor(t)
    return _wrap(t.data)


def _finite(arr, op):
    # Fast detector: any NaN/Inf makes the sum non-finite. The slow exact
    # check only runs when the sum itself overflows on finite data.
    s = float(arr.sum())
    if not math.isfinite(s):
        if bool(np.isfinite(arr).all()):
            return
        raise NonFiniteError(f"{op}: non-finite values in result")


def _result(op, arr, inputs, saved=None):
    graph = None
    for t in inputs:
        g = t.graph
        if g is not None:
            if graph is None:
                graph = g
            elif g is not graph:
                raise ValueError(f"{op}: inputs belong to different graphs")
    out = _wrap(arr)
    if graph is not None and graph.recording and graph._suspended == 0:
        out.graph = graph
        out.node_id = len(graph.nodes)
        graph.nodes.append(Node(op, inputs, saved))
    return out


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out = a.data + b.data
    _finite(out, "add")
    return _result("add", out, (a, b))


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")
    out = a.data - b.data
    _finite(out, "sub")
    return _result("sub", out, (a, b))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out = a.data * b.data
    _finite(out, "mul")
    return _result("mul", out, (a, b))


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul: both operands must be 2-d")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    _finite(out, "matmul")
    return _result("matmul", out, (a, b))


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose: operand must be 2-d")
    out = np.ascontiguousarray(a.data.T)
    return _result("transpose", out, (a,))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    _finite(out, "relu")
    # Subgradient at exactly 0 is 0, so the mask is a strict comparison.
    mask = _wrap((a.data > 0.0).astype(np.float64))
    return _result("relu", out, (a,), mask)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    out = a.data * c
    _finite(out, "scale")
    return _result("scale", out, (a,), c)


def square(a):
    a = as_tensor(a)
    out = a.data * a.data
    _finite(out, "square")
    return _result("square", out, (a,))


def sum_all(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum())
    _finite(out, "sum_all")
    return _result("sum_all", out, (a,))


def mean_all(a):
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("mean_all: empty tensor")
    out = np.asarray(a.data.mean())
    _finite(out, "mean_all")
    return _result("mean_all", out, (a,))


def broadcast_full(s, shape):
    """Scalar -> constant-filled tensor of ``shape``. Adjoint of sum_all."""
    s = as_tensor(s)
    if s.data.shape != ():
        raise ShapeError("broadcast_full: input must be a scalar")
    shape = tuple(int(d) for d in shape)
    out = np.full(shape, s.data)
    return _result("broadcast_full", out, (s,))


def add_bias(a, b):
    """Row-broadcast add: (n, m) + (m,)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"add_bias: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = a.data + b.data
    _finite(out, "add_bias")
    return _result("add_bias", out, (a, b))


def sum_axis0(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("sum_axis0: operand must be 2-d")
    out = a.data.sum(axis=0)
    _finite(out, "sum_axis0")
    return _result("sum_axis0", out, (a,))


def broadcast_axis0(v, n):
    """(m,) -> (n, m) by repeating rows. Adjoint of sum_axis0."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError("broadcast_axis0: operand must be 1-d")
    n = int(n)
    if n < 1:
        raise ShapeError("broadcast_axis0: n must be >= 1")
    out = np.ascontiguousarray(np.broadcast_to(v.data, (n, v.data.shape[0])))
    return _result("broadcast_axis0", out, (v,))


def sum_axis1(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("sum_axis1: operand must be 2-d")
    out = a.data.sum(axis=1)
    _finite(out, "sum_axis1")
    return _result("sum_axis1", out, (a,))


def broadcast_axis1(v, m):
    """(n,) -> (n, m) by repeating columns. Adjoint of sum_axis1."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError("broadcast_axis1: operand must be 1-d")
    m = int(m)
    if m < 1:
        raise ShapeError("broadcast_axis1: m must be >= 1")
    out = np.ascontiguousarray(np.broadcast_to(v.data[:, None], (v.data.shape[0], m)))
    return _result("broadcast_axis1", out, (v,))


def softmax_rows(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows: operand must be 2-d")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    _finite(out, "softmax_rows")
    t = _result("softmax_rows", out, (a,))
    if t.node_id is not None:
        # The backward rule reuses the output.
        t.graph.nodes[t.node_id].saved = t
    return t


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer class labels under row softmax.

    ``labels`` may be an int array or a tensor holding integer values. Uses
    max-subtracted log-sum-exp, so large logits do not overflow.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy: logits must be 2-d")
    raw = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    lab = raw.astype(np.int64).reshape(-1)
    if not np.array_equal(lab, raw.reshape(-1)):
        raise ValueError("softmax_cross_entropy: labels must be integers")
    n, c = logits.data.shape
    if lab.shape[0] != n:
        raise ShapeError(
            f"softmax_cross_entropy: {n} rows but {lab.shape[0]} labels")
    if (lab < 0).any() or (lab >= c).any():
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    nll = lse - z[np.arange(n), lab]
    out = np.asarray(nll.mean())
    _finite(out, "softmax_cross_entropy")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), lab] = 1.0
    return _result("softmax_cross_entropy", out, (logits,), (lab, _wrap(onehot)))


def concat_rows(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(
            f"concat_rows: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = np.concatenate([a.data, b.data], axis=0)
    return _result("concat_rows", out, (a, b), a.data.shape[0])


def slice_rows(a, start, stop):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("slice_rows: operand must be 2-d")
    start = int(start)
    stop = int(stop)
    if not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError(
            f"slice_rows: bounds [{start}, {stop}) invalid for {a.data.shape[0]} rows")
    out = np.ascontiguousarray(a.data[start:stop])
    return _result("slice_rows", out, (a,), (start, stop))


def pad_rows(a, total, offset):
    """Embed (k, m) into a (total, m) zero tensor at row ``offset``."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("pad_rows: operand must be 2-d")
    total = int(total)
    offset = int(offset)
    k, m = a.data.shape
    if offset < 0 or offset + k > total:
        raise ShapeError(f"pad_rows: {k} rows at offset {offset} exceed {total}")
    out = np.zeros((total, m))
    out[offset:offset + k] = a.data
    return _result("pad_rows", out, (a,), offset)


# ---------------------------------------------------------------------------
# backward rules
#
# Each rule maps (node, output adjoint) to per-input adjoints, expressed with
# the ops above so that a recorded backward pass is itself differentiable.
# Inputs without graph linkage get None (no gradient to propagate).


def _vjp_add(node, g):
    a, b = node.inputs
    return (g if a.node_id is not None else None,
            g if b.node_id is not None else None)


def _vjp_sub(node, g):
    a, b = node.inputs
    return (g if a.node_id is not None else None,
            scale(g, -1.0) if b.node_id is not None else None)


def _vjp_mul(node, g):
    a, b = node.inputs
    return (mul(g, b) if a.node_id is not None else None,
            mul(g, a) if b.node_id is not None else None)


def _vjp_matmul(node, g):
    a, b = node.inputs
    ga = matmul(g, transpose(b)) if a.node_id is not None else None
    gb = matmul(transpose(a), g) if b.node_id is not None else None
    return (ga, gb)


def _vjp_transpose(node, g):
    return (transpose(g),)


def _vjp_relu(node, g):
    return (mul(g, node.saved),)


def _vjp_scale(node, g):
    return (scale(g, node.saved),)


def _vjp_square(node, g):
    return (mul(g, scale(node.inputs[0], 2.0)),)


def _vjp_sum_all(node, g):
    return (broadcast_full(g, node.inputs[0].data.shape),)


def _vjp_mean_all(node, g):
    a = node.inputs[0]
    return (scale(broadcast_full(g, a.data.shape), 1.0 / a.data.size),)


def _vjp_broadcast_full(node, g):
    return (sum_all(g),)


def _vjp_add_bias(node, g):
    a, b = node.inputs
    return (g if a.node_id is not None else None,
            sum_axis0(g) if b.node_id is not None else None)


def _vjp_sum_axis0(node, g):
    return (broadcast_axis0(g, node.inputs[0].data.shape[0]),)


def _vjp_broadcast_axis0(node, g):
    return (sum_axis0(g),)


def _vjp_sum_axis1(node, g):
    return (broadcast_axis1(g, node.inputs[0].data.shape[1]),)


def _vjp_broadcast_axis1(node, g):
    return (sum_axis1(g),)


def _vjp_softmax_rows(node, g):
    s = node.saved
    m = s.data.shape[1]
    inner = sum_axis1(mul(g, s))
    return (mul(s, sub(g, broadcast_axis1(inner, m))),)


def _vjp_softmax_cross_entropy(node, g):
    logits = node.inputs[0]
    if logits.node_id is None:
        return (None,)
    _, onehot = node.saved
    n = logits.data.shape[0]
    coeff = broadcast_full(scale(g, 1.0 / n), logits.data.shape)
    return (mul(coeff, sub(softmax_rows(logits), onehot)),)


def _vjp_concat_rows(node, g):
    a, b = node.inputs
    n_a = node.saved
    total = g.data.shape[0]
    ga = slice_rows(g, 0, n_a) if a.node_id is not None else None
    gb = slice_rows(g, n_a, total) if b.node_id is not None else None
    return (ga, gb)


def _vjp_slice_rows(node, g):
    start, _ = node.saved
    return (pad_rows(g, node.inputs[0].data.shape[0], start),)


def _vjp_pad_rows(node, g):
    offset = node.saved
    k = node.inputs[0].data.shape[0]
    return (slice_rows(g, offset, offset + k),)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "relu": _vjp_relu,
    "scale": _vjp_scale,
    "square": _vjp_square,
    "sum_all": _vjp_sum_all,
    "mean_all": _vjp_mean_all,
    "broadcast_full": _vjp_broadcast_full,
    "add_bias": _vjp_add_bias,
    "sum_axis0": _vjp_sum_axis0,
    "broadcast_axis0": _vjp_broadcast_axis0,
    "sum_axis1": _vjp_sum_axis1,
    "broadcast_axis1": _vjp_broadcast_axis1,
    "softmax_rows": _vjp_softmax_rows,
    "softmax_cross_entropy": _vjp_softmax_cross_entropy,
    "concat_rows": _vjp_concat_rows,
    "slice_rows": _vjp_slice_rows,
    "pad_rows": _vjp_pad_rows,
}

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "transpose": transpose,
    "relu": relu,
    "scale": scale,
    "square": square,
    "sum_all": sum_all,
    "mean_all": mean_all,
    "broadcast_full": broadcast_full,
    "add_bias": add_bias,
    "sum_axis0": sum_axis0,
    "broadcast_axis0": broadcast_axis0,
    "sum_axis1": sum_axis1,
    "broadcast_axis1": broadcast_axis1,
    "softmax_rows": softmax_rows,
    "softmax_cross_entropy": softmax_cross_entropy,
    "concat_rows": concat_rows,
    "slice_rows": slice_rows,
    "pad_rows": pad_rows,
}


def apply(kind, *inputs, **params):
    """Apply an op by name. Mostly useful for generic test harnesses."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


def gradient(loss, wrt, create_graph=False):
    """d(loss)/d(wrt) by reverse accumulation.

    ``loss`` must be a scalar tensor on a recording graph. Tensors in ``wrt``
    must live on the same graph; any that the loss does not reach get an
    explicit zero gradient. With ``create_graph`` the backward computations
    are recorded (the results are differentiable); without it the graph is
    left untouched and the results are constants.
    """
    if not isinstance(loss, Tensor) or loss.graph is None:
        raise ValueError("loss must be a tensor recorded on a graph")
    if loss.data.shape != ():
        raise ShapeError(f"gradient: loss must be scalar, got shape {loss.data.shape}")
    graph = loss.graph
    if graph.frozen:
        raise GraphFrozenError("gradient on a frozen graph")
    wrt = list(wrt)
    positions = {}
    for i, w in enumerate(wrt):
        if not isinstance(w, Tensor) or w.graph is not graph:
            raise ValueError(f"wrt[{i}] is not a tensor on the loss graph")
        positions.setdefault(w.node_id, []).append(i)

    results = [None] * len(wrt)
    adjoint = {loss.node_id: _wrap(np.asarray(1.0))}
    nodes = graph.nodes
    ctx = nullcontext() if create_graph else graph._pause()
    with ctx:
        for nid in range(loss.node_id, -1, -1):
            g = adjoint.pop(nid, None)
            if g is None:
                continue
            for i in positions.get(nid, ()):
                results[i] = g
            node = nodes[nid]
            if node.op == "leaf":
                continue
            for inp, ig in zip(node.inputs, _VJP[node.op](node, g)):
                if ig is None:
                    continue
                iid = inp.node_id
                if iid is None:
                    continue
                prev = adjoint.get(iid)
                adjoint[iid] = ig if prev is None else add(prev, ig)
    for i, w in enumerate(wrt):
        if results[i] is None:
            results[i] = _wrap(np.zeros(w.data.shape))
    return results
