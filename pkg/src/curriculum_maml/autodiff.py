"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation is appended to a :class:`Graph` as a node holding its kind,
input node ids and the cached output array. :func:`backward` walks the graph
in reverse and, when ``create_graph=True``, records the gradient computation
into the same graph so the result can be differentiated again. This is what
MAML's outer update needs: the adapted parameters already contain a gradient.

Shape rules are intentionally narrow. Elementwise ops take equal shapes or a
scalar paired with a tensor; row-vector broadcasting (bias addition) goes
through the explicit ``broadcast_rows`` op.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Var",
    "ShapeError",
    "forward_op",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "relu",
    "mean",
    "sum",
    "log_softmax",
    "exp",
    "gather",
    "scatter",
    "square",
    "sqrt_scalar",
    "reciprocal",
    "scale",
    "broadcast_rows",
    "sum_rows",
    "cross_entropy_loss",
    "mse_loss",
]

_LEAF_KINDS = frozenset({"variable", "constant"})


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's shape rule."""


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Graph:
    """Append-only record of operations; node ids are topologically ordered."""

    __slots__ = ("kinds", "inputs", "values", "grad_flags", "attrs", "roots")

    def __init__(self) -> None:
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.grad_flags: list[bool] = []
        self.attrs: list[dict | None] = []
        self.roots: list[int] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def _append(self, kind, inputs, value, requires_grad, attrs=None) -> "Var":
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self.values.append(value)
        self.grad_flags.append(requires_grad)
        self.attrs.append(attrs)
        return Var(self, len(self.kinds) - 1)

    def variable(self, value) -> "Var":
        """Leaf that gradients can be taken with respect to."""
        arr = _frozen(value)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("variable contains non-finite values")
        var = self._append("variable", (), arr, True)
        self.roots.append(var.id)
        return var

    def constant(self, value) -> "Var":
        """Leaf excluded from differentiation."""
        return self._append("constant", (), _frozen(value), False)

    def apply(self, kind: str, inputs: Sequence["Var"], **attrs) -> "Var":
        try:
            fwd, _ = _OPS[kind]
        except KeyError:
            raise ValueError(f"unknown op kind {kind!r}") from None
        ids = []
        for v in inputs:
            if v.graph is not self:
                raise ValueError(f"{kind}: input belongs to a different graph")
            ids.append(v.id)
        vals = [self.values[i] for i in ids]
        out = np.asarray(fwd(vals, attrs), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{kind} produced non-finite values")
        out.flags.writeable = False
        requires_grad = any(self.grad_flags[i] for i in ids)
        return self._append(kind, tuple(ids), out, requires_grad, attrs or None)


class Var:
    """Handle to a node of a :class:`Graph`."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: Graph, node_id: int) -> None:
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.values[self.id].shape

    @property
    def requires_grad(self) -> bool:
        return self.graph.grad_flags[self.id]

    def __repr__(self) -> str:
        return f"Var(id={self.id}, kind={self.graph.kinds[self.id]}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self._lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    @property
    def T(self):
        return transpose(self)


# --------------------------------------------------------------------------
# forward rules


def _elementwise_shape(kind, a, b):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _add_fwd(vals, attrs):
    a, b = vals
    _elementwise_shape("add", a, b)
    return np.add(a, b)


def _sub_fwd(vals, attrs):
    a, b = vals
    _elementwise_shape("sub", a, b)
    return np.subtract(a, b)


def _mul_fwd(vals, attrs):
    a, b = vals
    _elementwise_shape("mul", a, b)
    return np.multiply(a, b)


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _transpose_fwd(vals, attrs):
    (a,) = vals
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def _relu_fwd(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _mean_fwd(vals, attrs):
    a = vals[0]
    if a.size == 0:
        raise ShapeError("mean: empty input")
    return np.array(a.mean())


def _sum_fwd(vals, attrs):
    return np.array(vals[0].sum())


def _log_softmax_fwd(vals, attrs):
    x = vals[0]
    if x.ndim != 2:
        raise ShapeError(f"log_softmax: expected [batch, classes], got shape {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _exp_fwd(vals, attrs):
    # overflow is reported by the finiteness check in Graph.apply
    with np.errstate(over="ignore"):
        return np.exp(vals[0])


def _gather_fwd(vals, attrs):
    x = vals[0]
    idx = attrs["index"]
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather: input shape {x.shape} vs index shape {idx.shape}")
    return x[np.arange(x.shape[0]), idx]


def _scatter_fwd(vals, attrs):
    v = vals[0]
    idx = attrs["index"]
    if v.ndim != 1 or idx.shape != v.shape:
        raise ShapeError(f"scatter: input shape {v.shape} vs index shape {idx.shape}")
    out = np.zeros((v.shape[0], attrs["width"]))
    out[np.arange(v.shape[0]), idx] = v
    return out


def _square_fwd(vals, attrs):
    return np.square(vals[0])


def _sqrt_scalar_fwd(vals, attrs):
    a = vals[0]
    if a.ndim != 0:
        raise ShapeError(f"sqrt_scalar: expected a scalar, got shape {a.shape}")
    if a <= 0.0:
        raise ValueError(f"sqrt_scalar: argument must be positive, got {float(a)}")
    return np.sqrt(a)


def _reciprocal_fwd(vals, attrs):
    a = vals[0]
    if np.any(a == 0.0):
        raise ZeroDivisionError("reciprocal of zero")
    return 1.0 / a


def _scale_fwd(vals, attrs):
    return vals[0] * attrs["factor"]


def _broadcast_rows_fwd(vals, attrs):
    v = vals[0]
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected a vector, got shape {v.shape}")
    return np.tile(v, (attrs["rows"], 1))


def _sum_rows_fwd(vals, attrs):
    x = vals[0]
    if x.ndim != 2:
        raise ShapeError(f"sum_rows: expected a matrix, got shape {x.shape}")
    return x.sum(axis=0)


# --------------------------------------------------------------------------
# backward rules; each returns one gradient (Var or None) per input and is
# written with graph ops so it can itself be differentiated.


class _Ctx:
    __slots__ = ("src", "dst", "node", "memo")

    def __init__(self, src: Graph, dst: Graph, memo: dict) -> None:
        self.src = src
        self.dst = dst
        self.node = -1
        self.memo = memo

    def _ref(self, nid: int) -> Var:
        if self.dst is self.src:
            return Var(self.src, nid)
        var = self.memo.get(nid)
        if var is None:
            var = self.memo[nid] = self.dst.constant(self.src.values[nid])
        return var

    def input(self, k: int) -> Var:
        return self._ref(self.src.inputs[self.node][k])

    def output(self) -> Var:
        return self._ref(self.node)

    def in_value(self, k: int) -> np.ndarray:
        return self.src.values[self.src.inputs[self.node][k]]

    @property
    def attrs(self) -> dict:
        return self.src.attrs[self.node]

    def const(self, value) -> Var:
        return self.dst.constant(value)


def _reduce_to(ctx: _Ctx, g: Var, k: int) -> Var:
    # undo scalar broadcasting
    if ctx.in_value(k).ndim == 0 and g.shape != ():
        return sum(g)
    return g


def _add_bwd(ctx, g):
    return [_reduce_to(ctx, g, 0), _reduce_to(ctx, g, 1)]


def _sub_bwd(ctx, g):
    return [_reduce_to(ctx, g, 0), scale(_reduce_to(ctx, g, 1), -1.0)]


def _mul_bwd(ctx, g):
    a, b = ctx.input(0), ctx.input(1)
    return [_reduce_to(ctx, mul(g, b), 0), _reduce_to(ctx, mul(g, a), 1)]


def _matmul_bwd(ctx, g):
    a, b = ctx.input(0), ctx.input(1)
    return [matmul(g, transpose(b)), matmul(transpose(a), g)]


def _transpose_bwd(ctx, g):
    return [transpose(g)]


def _relu_bwd(ctx, g):
    mask = (ctx.in_value(0) > 0.0).astype(np.float64)
    return [mul(g, ctx.const(mask))]


def _mean_bwd(ctx, g):
    x = ctx.in_value(0)
    return [scale(mul(ctx.const(np.ones(x.shape)), g), 1.0 / x.size)]


def _sum_bwd(ctx, g):
    return [mul(ctx.const(np.ones(ctx.in_value(0).shape)), g)]


def _log_softmax_bwd(ctx, g):
    width = ctx.in_value(0).shape[1]
    # g @ ones(w, w) places each row sum of g in every column
    row_sums = matmul(g, ctx.const(np.ones((width, width))))
    return [sub(g, mul(exp(ctx.output()), row_sums))]


def _exp_bwd(ctx, g):
    return [mul(g, ctx.output())]


def _gather_bwd(ctx, g):
    return [scatter(g, ctx.attrs["index"], ctx.in_value(0).shape[1])]


def _scatter_bwd(ctx, g):
    return [gather(g, ctx.attrs["index"])]


def _square_bwd(ctx, g):
    return [mul(g, scale(ctx.input(0), 2.0))]


def _sqrt_scalar_bwd(ctx, g):
    return [mul(g, scale(reciprocal(ctx.output()), 0.5))]


def _reciprocal_bwd(ctx, g):
    return [mul(g, scale(square(ctx.output()), -1.0))]


def _scale_bwd(ctx, g):
    return [scale(g, ctx.attrs["factor"])]


def _broadcast_rows_bwd(ctx, g):
    return [sum_rows(g)]


def _sum_rows_bwd(ctx, g):
    return [broadcast_rows(g, ctx.in_value(0).shape[0])]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "log_softmax": (_log_softmax_fwd, _log_softmax_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "gather": (_gather_fwd, _gather_bwd),
    "scatter": (_scatter_fwd, _scatter_bwd),
    "square": (_square_fwd, _square_bwd),
    "sqrt_scalar": (_sqrt_scalar_fwd, _sqrt_scalar_bwd),
    "reciprocal": (_reciprocal_fwd, _reciprocal_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "broadcast_rows": (_broadcast_rows_fwd, _broadcast_rows_bwd),
    "sum_rows": (_sum_rows_fwd, _sum_rows_bwd),
}

OP_KINDS = frozenset(_OPS)


# --------------------------------------------------------------------------
# public op constructors


def forward_op(kind: str, inputs: Sequence[Var], **attrs) -> Var:
    """Append ``kind`` applied to ``inputs`` to their graph and return the result."""
    if not inputs:
        raise ValueError(f"{kind}: no inputs")
    return inputs[0].graph.apply(kind, inputs, **attrs)


def add(a: Var, b: Var) -> Var:
    return a.graph.apply("add", (a, b))


def sub(a: Var, b: Var) -> Var:
    return a.graph.apply("sub", (a, b))


def mul(a: Var, b: Var) -> Var:
    return a.graph.apply("mul", (a, b))


def matmul(a: Var, b: Var) -> Var:
    return a.graph.apply("matmul", (a, b))


def transpose(a: Var) -> Var:
    return a.graph.apply("transpose", (a,))


def relu(a: Var) -> Var:
    return a.graph.apply("relu", (a,))


def mean(a: Var) -> Var:
    return a.graph.apply("mean", (a,))


def sum(a: Var) -> Var:  # noqa: A001 - mirrors the op name
    return a.graph.apply("sum", (a,))


def log_softmax(a: Var) -> Var:
    return a.graph.apply("log_softmax", (a,))


def exp(a: Var) -> Var:
    return a.graph.apply("exp", (a,))


def _as_index(index) -> np.ndarray:
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError(f"index array must be integer, got dtype {idx.dtype}")
    return idx.astype(np.intp, copy=False)


def gather(a: Var, index) -> Var:
    """Pick ``a[i, index[i]]`` for every row ``i``."""
    return a.graph.apply("gather", (a,), index=_as_index(index))


def scatter(a: Var, index, width: int) -> Var:
    """Inverse of :func:`gather`: a ``[len(a), width]`` matrix, zero except at ``index``."""
    return a.graph.apply("scatter", (a,), index=_as_index(index), width=int(width))


def square(a: Var) -> Var:
    return a.graph.apply("square", (a,))


def sqrt_scalar(a: Var) -> Var:
    return a.graph.apply("sqrt_scalar", (a,))


def reciprocal(a: Var) -> Var:
    return a.graph.apply("reciprocal", (a,))


def scale(a: Var, factor: float) -> Var:
    return a.graph.apply("scale", (a,), factor=float(factor))


def broadcast_rows(a: Var, rows: int) -> Var:
    """Stack vector ``a`` into a ``[rows, len(a)]`` matrix."""
    return a.graph.apply("broadcast_rows", (a,), rows=int(rows))


def sum_rows(a: Var) -> Var:
    return a.graph.apply("sum_rows", (a,))


# --------------------------------------------------------------------------
# differentiation


def _relevant_nodes(graph: Graph, out_id: int) -> list[int]:
    flags = graph.grad_flags
    inputs = graph.inputs
    seen = {out_id}
    stack = [out_id]
    while stack:
        nid = stack.pop()
        for i in inputs[nid]:
            if flags[i] and i not in seen:
                seen.add(i)
                stack.append(i)
    return sorted(seen, reverse=True)


def backward(output: Var, wrt: Sequence[Var], create_graph: bool = False):
    """Gradients of scalar ``output`` with respect to each of ``wrt``.

    With ``create_graph=False`` the result is a list of arrays. With
    ``create_graph=True`` it is a list of :class:`Var` recorded in the output's
    graph, so they can take part in further differentiable computation.
    A ``wrt`` entry that ``output`` does not depend on gets a zero gradient.

    Both modes evaluate the same rule code, so first-order values agree
    bit for bit.
    """
    graph = output.graph
    if output.shape != ():
        raise ShapeError(f"backward: output must be a scalar, got shape {output.shape}")
    for w in wrt:
        if w.graph is not graph:
            raise ValueError("backward: wrt variable belongs to a different graph")

    dst = graph if create_graph else Graph()
    ctx = _Ctx(graph, dst, {})
    adjoints: dict[int, Var] = {}
    if graph.grad_flags[output.id]:
        adjoints[output.id] = dst.constant(1.0)
        kinds = graph.kinds
        inputs = graph.inputs
        flags = graph.grad_flags
        for nid in _relevant_nodes(graph, output.id):
            kind = kinds[nid]
            if kind in _LEAF_KINDS:
                continue
            g = adjoints.get(nid)
            if g is None:
                continue
            ctx.node = nid
            grads = _OPS[kind][1](ctx, g)
            for inp, gi in zip(inputs[nid], grads):
                if gi is None or not flags[inp]:
                    continue
                prev = adjoints.get(inp)
                adjoints[inp] = gi if prev is None else add(prev, gi)

    results = []
    for w in wrt:
        g = adjoints.get(w.id)
        if g is None:
            g = dst.constant(np.zeros(w.shape))
        results.append(g if create_graph else g.value)
    return results


# --------------------------------------------------------------------------
# losses


def cross_entropy_loss(logits: Var, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    if len(logits.shape) != 2:
        raise ShapeError(f"cross_entropy_loss: logits must be [batch, way], got {logits.shape}")
    batch, way = logits.shape
    idx = _as_index(labels)
    if idx.shape != (batch,):
        raise ShapeError(
            f"cross_entropy_loss: {idx.shape[0] if idx.ndim else 0} labels for batch of {batch}"
        )
    if batch < 1:
        raise ShapeError("cross_entropy_loss: empty batch")
    if idx.min() < 0 or idx.max() >= way:
        raise ValueError(f"cross_entropy_loss: labels must lie in [0, {way}), got {idx.min()}..{idx.max()}")
    return scale(mean(gather(log_softmax(logits), idx)), -1.0)


def mse_loss(pred: Var, target) -> Var:
    """Mean squared error against a constant target array."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} vs target shape {target.shape}")
    return mean(square(sub(pred, pred.graph.constant(target))))
