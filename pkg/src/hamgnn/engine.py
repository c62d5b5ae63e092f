"""Dense tensors and a reverse-mode differentiation core.

Computation is expressed as an immutable graph of ``Node`` objects built by the
functions in this module (``affine``, ``tanh``, ``concat``, ...).  A graph is
built once and evaluated many times against ``bindings`` that map parameter
names to arrays; evaluation state lives in a per-call workspace, so concurrent
evaluations of one graph are safe.

Differentiation is graph-to-graph: ``gradient`` returns new ``Node`` graphs
over the same leaves, and every operation's derivative rule is itself built
from graph operations, so gradients of gradients are available to any depth.
All arithmetic is double precision.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "GradCheckReport", "MlpParams",
    "constant", "parameter",
    "affine", "outer", "solve", "stack_rows", "transpose",
    "gather_rows", "scatter_rows",
    "tanh", "sigmoid", "sin", "relu", "rehu", "kappa", "step",
    "softmax", "log_softmax",
    "add", "mul", "scale", "negate", "reduce_sum", "dot", "concat", "narrow",
    "forward", "evaluate", "gradient", "gradient_all", "grad", "jacobian",
    "check_gradient", "ACTIVATIONS",
]


class Tensor:
    """A dense array of finite double-precision reals.

    Stores values row-major.  Construction rejects NaN/Inf so that bad numbers
    surface where they are produced, not deep inside a later computation.
    """

    __slots__ = ("array",)

    def __init__(self, values):
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor entries must be finite (got NaN or Inf)")
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self.array.reshape(-1)

    def item(self) -> float:
        return float(self.array)

    def tolist(self):
        return self.array.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.array!r})"


def as_array(value) -> np.ndarray:
    """Normalize Tensor / array-like / scalar to a float64 ndarray."""
    if isinstance(value, Tensor):
        return value.array
    return np.asarray(value, dtype=np.float64)


_node_ids = itertools.count()


class Node:
    """One operation in an expression graph.

    Immutable: ``op`` is the operation tag, ``inputs`` the predecessor nodes,
    ``attrs`` any static attributes (constant value, parameter name, slice
    bounds, ...), ``shape`` the statically inferred result shape.
    """

    __slots__ = ("op", "inputs", "attrs", "shape", "nid")

    def __init__(self, op: str, inputs: Sequence["Node"], attrs: dict, shape: tuple):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.shape = tuple(shape)
        self.nid = next(_node_ids)

    def __repr__(self):
        label = self.attrs.get("label") or self.attrs.get("name")
        tag = f" {label!r}" if label else ""
        return f"<Node {self.nid} {self.op}{tag} shape={self.shape}>"


# ---------------------------------------------------------------------------
# graph construction


def constant(value, label: str | None = None) -> Node:
    t = value if isinstance(value, Tensor) else Tensor(value)
    attrs = {"value": t.array}
    if label:
        attrs["label"] = label
    return Node("constant", (), attrs, t.shape)


def parameter(name: str, shape: Sequence[int]) -> Node:
    """A named leaf bound to a value at evaluation time."""
    return Node("parameter", (), {"name": name}, tuple(shape))


def _check_vec_or_mat(shape, what):
    if len(shape) > 2:
        raise ValueError(f"{what} must be a scalar, vector or matrix, got shape {shape}")


def affine(x: Node, weight: Node, bias: Node | None = None,
           transpose_x: bool = False, transpose_weight: bool = False,
           label: str | None = None) -> Node:
    """Matrix product ``op(x) @ op(weight) [+ bias]``.

    ``x`` may be a vector (one sample) or a matrix (rows are samples);
    ``weight`` may be a matrix or a vector (matrix-vector product).  A vector
    bias broadcasts over rows.
    """
    xs, ws = x.shape, weight.shape
    _check_vec_or_mat(xs, "affine input")
    _check_vec_or_mat(ws, "affine weight")
    if transpose_x and len(xs) != 2:
        raise ValueError("transpose_x requires a matrix input")
    if transpose_weight and len(ws) != 2:
        raise ValueError("transpose_weight requires a matrix weight")
    exs = (xs[1], xs[0]) if transpose_x else xs
    ews = (ws[1], ws[0]) if transpose_weight else ws
    if len(exs) == 1 and len(ews) == 1:
        raise ValueError("vector-vector product: use dot()")
    inner_x = exs[-1]
    inner_w = ews[0]
    if inner_x != inner_w:
        raise ValueError(f"affine inner dimensions differ: {exs} @ {ews}")
    out = exs[:-1] + ews[1:]
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != out and not (len(out) == 2 and bias.shape == (out[1],)):
            raise ValueError(f"bias shape {bias.shape} does not fit output {out}")
        inputs.append(bias)
    attrs = {"tx": transpose_x, "tw": transpose_weight}
    if label:
        attrs["label"] = label
    return Node("affine", inputs, attrs, out)


def outer(u: Node, v: Node) -> Node:
    if len(u.shape) != 1 or len(v.shape) != 1:
        raise ValueError("outer expects two vectors")
    return Node("outer", (u, v), {}, (u.shape[0], v.shape[0]))


def solve(matrix: Node, rhs: Node, transpose_matrix: bool = False) -> Node:
    """Solution of ``op(matrix) @ y = rhs`` for a square matrix."""
    ms, rs = matrix.shape, rhs.shape
    if len(ms) != 2 or ms[0] != ms[1]:
        raise ValueError(f"solve needs a square matrix, got {ms}")
    if rs != (ms[0],):
        raise ValueError(f"solve rhs shape {rs} does not match matrix {ms}")
    return Node("solve", (matrix, rhs), {"tm": transpose_matrix}, rs)


def stack_rows(rows: Sequence[Node]) -> Node:
    rows = tuple(rows)
    if not rows:
        raise ValueError("stack_rows needs at least one row")
    width = rows[0].shape
    if len(width) != 1 or any(r.shape != width for r in rows):
        raise ValueError("stack_rows expects equal-length vectors")
    return Node("stack-rows", rows, {}, (len(rows), width[0]))


def transpose(x: Node) -> Node:
    if len(x.shape) != 2:
        raise ValueError("transpose expects a matrix")
    return Node("transpose", (x,), {}, (x.shape[1], x.shape[0]))


def gather_rows(x: Node, indices: Sequence[int]) -> Node:
    idx = tuple(int(i) for i in indices)
    if len(x.shape) not in (1, 2):
        raise ValueError("gather_rows expects a vector or matrix")
    n = x.shape[0]
    for i in idx:
        if not 0 <= i < n:
            raise ValueError(f"gather index {i} out of range [0, {n})")
    return Node("gather-rows", (x,), {"indices": idx}, (len(idx),) + x.shape[1:])


def scatter_rows(x: Node, indices: Sequence[int], num_rows: int) -> Node:
    """Rows of ``x`` accumulated into a zero array of ``num_rows`` rows."""
    idx = tuple(int(i) for i in indices)
    if x.shape[0] != len(idx):
        raise ValueError("scatter_rows: one index per input row required")
    return Node("scatter-rows", (x,), {"indices": idx, "num_rows": int(num_rows)},
                (int(num_rows),) + x.shape[1:])


def _unary(op: str, x: Node, attrs: dict | None = None) -> Node:
    return Node(op, (x,), attrs or {}, x.shape)


def tanh(x: Node) -> Node:
    return _unary("tanh", x)


def sigmoid(x: Node) -> Node:
    return _unary("sigmoid", x)


def sin(x: Node) -> Node:
    return _unary("sin", x)


def relu(x: Node) -> Node:
    return _unary("relu", x)


def rehu(x: Node) -> Node:
    """Rectified Huber with knee 1: 0 for x<=0, x^2/2 inside (0,1), x-1/2 after."""
    return _unary("rehu", x)


def kappa(x: Node) -> Node:
    """x^2/2 on the positive side, exp(x)-1 on the non-positive side."""
    return _unary("kappa", x)


def step(x: Node, include_zero: bool = False) -> Node:
    """Indicator of x > 0 (or x >= 0); derivative is zero everywhere."""
    return _unary("step", x, {"include_zero": include_zero})


def softmax(x: Node) -> Node:
    if len(x.shape) not in (1, 2):
        raise ValueError("softmax expects a vector or matrix")
    return _unary("softmax", x)


def log_softmax(x: Node) -> Node:
    if len(x.shape) not in (1, 2):
        raise ValueError("log_softmax expects a vector or matrix")
    return _unary("log-softmax", x)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    # Permitted: equal shapes, scalar with anything, row vector with matrix.
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) == 2 and b == (a[1],):
        return a
    if len(b) == 2 and a == (b[1],):
        return b
    raise ValueError(f"shapes {a} and {b} do not broadcast")


def add(a: Node, b: Node) -> Node:
    return Node("elementwise-add", (a, b), {}, _broadcast_shape(a.shape, b.shape))


def mul(a: Node, b: Node) -> Node:
    return Node("elementwise-mul", (a, b), {}, _broadcast_shape(a.shape, b.shape))


def scale(x: Node, factor: float) -> Node:
    return Node("scale", (x,), {"factor": float(factor)}, x.shape)


def negate(x: Node) -> Node:
    return Node("negate", (x,), {}, x.shape)


def reduce_sum(x: Node, axis: int | None = None) -> Node:
    if axis is None:
        out = ()
    elif len(x.shape) == 2 and axis in (0, 1):
        out = (x.shape[1],) if axis == 0 else (x.shape[0],)
    else:
        raise ValueError(f"cannot sum shape {x.shape} over axis {axis}")
    return Node("sum", (x,), {"axis": axis}, out)


def dot(a: Node, b: Node) -> Node:
    if len(a.shape) != 1 or a.shape != b.shape:
        raise ValueError(f"dot expects equal-length vectors, got {a.shape}, {b.shape}")
    return Node("dot", (a, b), {}, ())


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat needs at least one part")
    nd = len(parts[0].shape)
    if any(len(p.shape) != nd for p in parts):
        raise ValueError("concat parts must have equal rank")
    ax = axis % nd if nd else 0
    if nd not in (1, 2):
        raise ValueError("concat supports vectors and matrices")
    other = 1 - ax
    if nd == 2 and any(p.shape[other] != parts[0].shape[other] for p in parts):
        raise ValueError("concat parts disagree on the non-concatenated extent")
    total = sum(p.shape[ax] for p in parts)
    out = (total,) if nd == 1 else (
        (total, parts[0].shape[1]) if ax == 0 else (parts[0].shape[0], total))
    return Node("concat", parts, {"axis": ax}, out)


def narrow(x: Node, start: int, stop: int, axis: int = -1) -> Node:
    """Contiguous slice [start, stop) along one axis."""
    nd = len(x.shape)
    if nd not in (1, 2):
        raise ValueError("narrow supports vectors and matrices")
    ax = axis % nd
    extent = x.shape[ax]
    if not (0 <= start <= stop <= extent):
        raise ValueError(f"slice [{start}, {stop}) out of range for extent {extent}")
    out = list(x.shape)
    out[ax] = stop - start
    return Node("slice", (x,), {"start": start, "stop": stop, "axis": ax}, tuple(out))


# ---------------------------------------------------------------------------
# forward evaluation


def _fw_affine(node, vals):
    x, w = vals[0], vals[1]
    if node.attrs["tx"]:
        x = x.T
    if node.attrs["tw"]:
        w = w.T
    y = x @ w
    if len(node.inputs) == 3:
        y = y + vals[2]
    return y


def _fw_sigmoid(node, vals):
    # exponentials of non-positive arguments only, so saturation cannot
    # overflow under the raise-on-overflow evaluation regime
    x = vals[0]
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def _fw_rehu(node, vals):
    # equals 0 / x^2/2 / x-1/2 on the three pieces without evaluating the
    # quadratic outside its piece
    x = vals[0]
    clipped = np.clip(x, 0.0, 1.0)
    return 0.5 * clipped * clipped + np.maximum(x - 1.0, 0.0)


def _fw_kappa(node, vals):
    # quadratic piece only sees the positive part; exponential piece only
    # sees the non-positive part
    x = vals[0]
    pos = np.maximum(x, 0.0)
    return 0.5 * pos * pos + np.expm1(np.minimum(x, 0.0))


def _fw_softmax(node, vals):
    x = vals[0]
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _fw_log_softmax(node, vals):
    x = vals[0]
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _fw_scatter(node, vals):
    out = np.zeros(node.shape)
    np.add.at(out, np.array(node.attrs["indices"], dtype=np.intp), vals[0])
    return out


def _fw_slice(node, vals):
    s = [slice(None)] * len(vals[0].shape)
    s[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
    return vals[0][tuple(s)]


_FORWARD = {
    "constant": lambda node, vals: node.attrs["value"],
    "affine": _fw_affine,
    "outer": lambda node, vals: np.outer(vals[0], vals[1]),
    "solve": lambda node, vals: np.linalg.solve(
        vals[0].T if node.attrs["tm"] else vals[0], vals[1]),
    "stack-rows": lambda node, vals: np.stack(vals),
    "transpose": lambda node, vals: vals[0].T,
    "gather-rows": lambda node, vals: vals[0][np.array(node.attrs["indices"], dtype=np.intp)],
    "scatter-rows": _fw_scatter,
    "tanh": lambda node, vals: np.tanh(vals[0]),
    "sigmoid": _fw_sigmoid,
    "sin": lambda node, vals: np.sin(vals[0]),
    "relu": lambda node, vals: np.maximum(vals[0], 0.0),
    "rehu": _fw_rehu,
    "kappa": _fw_kappa,
    "step": lambda node, vals: (
        (vals[0] >= 0.0) if node.attrs["include_zero"] else (vals[0] > 0.0)
    ).astype(np.float64),
    "softmax": _fw_softmax,
    "log-softmax": _fw_log_softmax,
    "elementwise-add": lambda node, vals: vals[0] + vals[1],
    "elementwise-mul": lambda node, vals: vals[0] * vals[1],
    "scale": lambda node, vals: vals[0] * node.attrs["factor"],
    "negate": lambda node, vals: -vals[0],
    "sum": lambda node, vals: np.sum(vals[0], axis=node.attrs["axis"]),
    "dot": lambda node, vals: np.dot(vals[0], vals[1]),
    "concat": lambda node, vals: np.concatenate(vals, axis=node.attrs["axis"]),
    "slice": _fw_slice,
}


def _toposort(outputs: Sequence[Node], stop: frozenset | None = None) -> list[Node]:
    """Post-order over the reachable graph; ``stop`` nodes are not expanded."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(o, False) for o in reversed(outputs)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.nid in seen:
            continue
        seen.add(node.nid)
        stack.append((node, True))
        if stop and node.nid in stop:
            continue
        for inp in reversed(node.inputs):
            if inp.nid not in seen:
                stack.append((inp, False))
    return order


def _bad_rows(val: np.ndarray) -> str:
    """Offending row indices of a non-finite array (rows are graph vertices
    in batched evaluation)."""
    arr = np.asarray(val)
    if arr.ndim < 1:
        return ""
    bad = ~np.isfinite(arr)
    while bad.ndim > 1:
        bad = bad.any(axis=-1)
    rows = np.flatnonzero(bad)[:8].tolist()
    return f" (rows {rows})" if rows else ""


def evaluate(outputs, bindings=None, check_finite: bool = True):
    """Evaluate one node or a sequence of nodes under the given bindings.

    Values of interior nodes are cached in a per-call workspace and freed as
    soon as their last consumer has run, so peak memory tracks graph width,
    not graph size.
    """
    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    bindings = bindings or {}
    order = _toposort(outs)

    consumers: dict[int, int] = {}
    for node in order:
        for inp in node.inputs:
            consumers[inp.nid] = consumers.get(inp.nid, 0) + 1
    pinned = {o.nid for o in outs}

    values: dict[int, np.ndarray] = {}
    for node in order:
        if node.op == "parameter":
            name = node.attrs["name"]
            if name not in bindings:
                raise ValueError(f"unbound leaf {name!r}")
            val = as_array(bindings[name])
            if val.shape != node.shape:
                raise ValueError(
                    f"binding for {name!r} has shape {val.shape}, expected {node.shape}")
            if check_finite and not np.all(np.isfinite(val)):
                raise FloatingPointError(f"non-finite value bound to {name!r}")
        else:
            vals = [values[i.nid] for i in node.inputs]
            # overflow is allowed to surface as inf so the finiteness check
            # below can report the producing node and its offending rows
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                val = _FORWARD[node.op](node, vals)
            if check_finite and not np.all(np.isfinite(val)):
                raise FloatingPointError(
                    f"non-finite intermediate at {node!r}{_bad_rows(val)}")
        values[node.nid] = np.asarray(val, dtype=np.float64)
        for inp in node.inputs:
            consumers[inp.nid] -= 1
            if consumers[inp.nid] == 0 and inp.nid not in pinned:
                del values[inp.nid]

    result = [values[o.nid] for o in outs]
    return result[0] if single else result


def forward(f: Node, bindings=None) -> Tensor:
    """Evaluate an expression graph and return its value."""
    return Tensor(evaluate(f, bindings))


# ---------------------------------------------------------------------------
# derivative rules (graph-to-graph)


def _reduce_to_shape(g: Node, shape: tuple) -> Node:
    """Sum a broadcast adjoint back down to an operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return reduce_sum(g)
    if len(g.shape) == 2 and shape == (g.shape[1],):
        return reduce_sum(g, axis=0)
    raise AssertionError(f"cannot reduce {g.shape} to {shape}")


def _vjp_affine(node, g):
    # y = X @ W with X = op_tx(x), W = op_tw(w); dX = g W^T and dW = X^T g,
    # mapped back through the transposes.
    x, w = node.inputs[0], node.inputs[1]
    tx, tw = node.attrs["tx"], node.attrs["tw"]

    if len(w.shape) == 1:
        # matrix-vector product: x is necessarily a matrix here
        gx = outer(g, w)
        if tx:
            gx = transpose(gx)
        gw = affine(x, g, transpose_x=not tx)
    elif len(x.shape) == 1:
        # vector-matrix product
        gx = affine(g, w, transpose_weight=not tw)
        gw = outer(g, x) if tw else outer(x, g)
    else:
        gx = affine(g, w, transpose_weight=not tw)
        if tx:
            gx = transpose(gx)
        gw = affine(x, g, transpose_x=not tx)
        if tw:
            gw = transpose(gw)
    grads = [gx, gw]
    if len(node.inputs) == 3:
        grads.append(_reduce_to_shape(g, node.inputs[2].shape))
    return grads


def _vjp_solve(node, g):
    # y = M^{-1} v  =>  v_bar = M^{-T} g,  M_bar = -v_bar y^T
    tm = node.attrs["tm"]
    vbar = solve(node.inputs[0], g, transpose_matrix=not tm)
    mbar = negate(outer(vbar, node))
    if tm:
        mbar = transpose(mbar)
    return [mbar, vbar]


def _vjp_softmax(node, g):
    s = node
    t = reduce_sum(mul(g, s), axis=1 if len(node.shape) == 2 else None)
    if len(node.shape) == 2:
        t = outer(t, constant(np.ones(node.shape[1])))
    return [mul(s, add(g, negate(t)))]


def _vjp_log_softmax(node, g):
    s = softmax(node.inputs[0])
    t = reduce_sum(g, axis=1 if len(node.shape) == 2 else None)
    if len(node.shape) == 2:
        t = outer(t, constant(np.ones(node.shape[1])))
    return [add(g, negate(mul(s, t)))]


def _vjp_sum(node, g):
    x = node.inputs[0]
    if node.attrs["axis"] == 1:
        return [outer(g, constant(np.ones(x.shape[1])))]
    # scalar or row adjoint broadcasts back over the summed entries
    return [add(scale(x, 0.0), g)]


def _vjp_slice(node, g):
    x = node.inputs[0]
    ax, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    parts = []
    if start > 0:
        parts.append(scale(narrow(x, 0, start, axis=ax), 0.0))
    parts.append(g)
    if stop < x.shape[ax]:
        parts.append(scale(narrow(x, stop, x.shape[ax], axis=ax), 0.0))
    return [concat(parts, axis=ax) if len(parts) > 1 else g]


def _vjp_kappa(node, g):
    x = node.inputs[0]
    on_plus = step(x, include_zero=True)
    plus = mul(on_plus, x)
    minus = mul(add(constant(1.0), negate(on_plus)), add(node, constant(1.0)))
    return [mul(g, add(plus, minus))]


_VJP = {
    "affine": _vjp_affine,
    "outer": lambda node, g: [affine(g, node.inputs[1]),
                              affine(node.inputs[0], g)],
    "solve": _vjp_solve,
    "stack-rows": lambda node, g: [
        reduce_sum(gather_rows(g, (i,)), axis=0) for i in range(len(node.inputs))],
    "transpose": lambda node, g: [transpose(g)],
    "gather-rows": lambda node, g: [
        scatter_rows(g, node.attrs["indices"], node.inputs[0].shape[0])],
    "scatter-rows": lambda node, g: [gather_rows(g, node.attrs["indices"])],
    "tanh": lambda node, g: [mul(g, add(constant(1.0), negate(mul(node, node))))],
    "sigmoid": lambda node, g: [mul(g, mul(node, add(constant(1.0), negate(node))))],
    "sin": lambda node, g: [mul(g, sin(add(node.inputs[0], constant(math.pi / 2.0))))],
    "relu": lambda node, g: [mul(g, step(node.inputs[0]))],
    "rehu": lambda node, g: [mul(g, add(relu(node.inputs[0]),
                                        negate(relu(add(node.inputs[0],
                                                        constant(-1.0))))))],
    "kappa": _vjp_kappa,
    "step": lambda node, g: [None],
    "softmax": _vjp_softmax,
    "log-softmax": _vjp_log_softmax,
    "elementwise-add": lambda node, g: [
        _reduce_to_shape(g, node.inputs[0].shape),
        _reduce_to_shape(g, node.inputs[1].shape)],
    "elementwise-mul": lambda node, g: [
        _reduce_to_shape(mul(g, node.inputs[1]), node.inputs[0].shape),
        _reduce_to_shape(mul(g, node.inputs[0]), node.inputs[1].shape)],
    "scale": lambda node, g: [scale(g, node.attrs["factor"])],
    "negate": lambda node, g: [negate(g)],
    "sum": _vjp_sum,
    "dot": lambda node, g: [mul(g, node.inputs[1]), mul(g, node.inputs[0])],
    "concat": None,  # handled inline (needs per-part offsets)
    "slice": _vjp_slice,
}


def _vjp_concat(node, g):
    ax = node.attrs["axis"]
    grads, offset = [], 0
    for part in node.inputs:
        extent = part.shape[ax]
        grads.append(narrow(g, offset, offset + extent, axis=ax))
        offset += extent
    return grads


def gradient_all(f: Node, wrts: Sequence[Node], allow_unused: bool = False,
                 stop_at: Sequence[Node] = ()) -> list[Node]:
    """Adjoints of a scalar graph with respect to several nodes, one sweep.

    The returned nodes are ordinary expression graphs over the same leaves,
    so they can be differentiated again.  ``stop_at`` nodes are treated as
    independent inputs: the sweep collects their adjoints without descending
    into their history (the partial-derivative view a vector field needs when
    its state is itself a computed quantity).
    """
    if f.shape != ():
        raise ValueError(f"gradient target must be scalar, got shape {f.shape}")
    stop = frozenset(n.nid for n in stop_at)
    order = _toposort([f], stop)
    in_graph = {n.nid for n in order}
    adjoint: dict[int, Node] = {f.nid: constant(1.0)}
    for node in reversed(order):
        g = adjoint.get(node.nid)
        if g is None or node.nid in stop or node.op in ("constant", "parameter"):
            continue
        if node.op == "concat":
            contribs = _vjp_concat(node, g)
        else:
            contribs = _VJP[node.op](node, g)
        for inp, contrib in zip(node.inputs, contribs):
            if contrib is None:
                continue
            prev = adjoint.get(inp.nid)
            adjoint[inp.nid] = contrib if prev is None else add(prev, contrib)

    # Distinct parameter nodes with one name are one logical leaf (bindings
    # are by name), so their adjoints sum.
    by_name: dict[str, Node] = {}
    names_in_graph: set[str] = set()
    for node in order:
        if node.op != "parameter":
            continue
        name = node.attrs["name"]
        names_in_graph.add(name)
        got = adjoint.get(node.nid)
        if got is not None:
            prev = by_name.get(name)
            by_name[name] = got if prev is None else add(prev, got)

    results = []
    for wrt in wrts:
        if wrt.op == "parameter":
            name = wrt.attrs["name"]
            got = by_name.get(name)
            present = name in names_in_graph
        else:
            got = adjoint.get(wrt.nid)
            present = wrt.nid in in_graph
        if got is None:
            if present or allow_unused:
                got = scale(wrt, 0.0)  # unused, or reached only through
                                       # zero-derivative operations
            else:
                raise ValueError(f"leaf {wrt!r} does not appear in the graph")
        results.append(got)
    return results


def gradient(f: Node, wrt: Node) -> Node:
    """Expression graph for the derivative of scalar ``f`` w.r.t. one leaf."""
    return gradient_all(f, [wrt])[0]


def grad(f: Node, x: Node, bindings=None) -> Tensor:
    """Value of df/dx; same shape as x."""
    return Tensor(evaluate(gradient(f, x), bindings))


def jacobian(f: Node, x: Node, bindings=None) -> Tensor:
    """Jacobian of a vector-valued graph, assembled row-by-row."""
    if len(f.shape) != 1:
        raise ValueError(f"jacobian target must be a vector, got shape {f.shape}")
    rows = [gradient(reduce_sum(narrow(f, i, i + 1)), x) for i in range(f.shape[0])]
    return Tensor(np.stack(evaluate(rows, bindings)))


class GradCheckReport:
    """Outcome of a finite-difference comparison."""

    def __init__(self, max_relative_error: float, tolerance: float):
        self.max_relative_error = float(max_relative_error)
        self.tolerance = float(tolerance)
        self.passed = self.max_relative_error <= self.tolerance

    def __repr__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({verdict}, max_rel_err={self.max_relative_error:.3e},"
                f" tol={self.tolerance:.1e})")


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def finite_difference(f: Node, x: Node, bindings, fd_step: float) -> np.ndarray:
    """Central differences of a scalar graph w.r.t. one bound leaf."""
    name = x.attrs.get("name")
    if x.op != "parameter" or name is None:
        raise ValueError("finite differences need a named parameter leaf")
    base = as_array(bindings[name]).copy()
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    pert = dict(bindings)
    for i in range(flat.size):
        for sgn in (1.0, -1.0):
            shifted = base.copy().reshape(-1)
            shifted[i] += sgn * fd_step
            pert[name] = shifted.reshape(base.shape)
            out.reshape(-1)[i] += sgn * float(evaluate(f, pert))
    return out / (2.0 * fd_step)


def check_gradient(f: Node, x: Node, bindings, fd_step: float = 1e-5,
                   tol: float = 1e-6) -> GradCheckReport:
    """Compare the reverse-mode gradient against central differences."""
    if fd_step <= 0.0:
        raise ValueError("nonpositive step")
    if tol <= 0.0:
        raise ValueError("nonpositive tolerance")
    analytic = evaluate(gradient(f, x), bindings)
    numeric = finite_difference(f, x, bindings, fd_step)
    return GradCheckReport(relative_error(analytic, numeric), tol)


# ---------------------------------------------------------------------------
# multilayer perceptron parameters

ACTIVATIONS = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "sin": sin,
    "relu": relu,
    "rehu": rehu,
    "kappa": kappa,
}

# activations that are convex and non-decreasing, hence admissible in
# convexity-constrained networks
CONVEX_ACTIVATIONS = ("rehu", "kappa")


class MlpParams:
    """Weights of a fully connected network.

    ``layers`` is an ordered list of ``(weight, bias, activation)`` where
    ``weight`` is (out, in), ``bias`` is (out,) and ``activation`` is an
    activation tag applied after the layer, or None.  Arrays stay writable:
    the optimizer updates them in place between evaluations.
    """

    def __init__(self, layers, convex_from_second: bool = False):
        self.layers = []
        for weight, bias, act in layers:
            w = np.array(weight, dtype=np.float64)
            b = np.array(bias, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"bad layer shapes: weight {w.shape}, bias {b.shape}")
            if act is not None and act not in ACTIVATIONS:
                raise ValueError(f"unknown activation tag {act!r}")
            self.layers.append((w, b, act))
        for (w_prev, _, _), (w_next, _, _) in zip(self.layers, self.layers[1:]):
            if w_next.shape[1] != w_prev.shape[0]:
                raise ValueError(
                    f"layer dimensions do not chain: {w_prev.shape} then {w_next.shape}")
        self.convex_from_second = convex_from_second
        if convex_from_second:
            self._check_convex()

    def _check_convex(self):
        for i, (w, _, act) in enumerate(self.layers):
            if i >= 1 and np.any(w < 0.0):
                raise ValueError(f"layer {i + 1} has negative weights in a "
                                 "convexity-constrained network")
            if act is not None and act not in CONVEX_ACTIVATIONS:
                raise ValueError(f"activation {act!r} is not convex and non-decreasing")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @classmethod
    def init(cls, dims: Sequence[int], activations: Sequence[str | None],
             rng: np.random.Generator, convex_from_second: bool = False) -> "MlpParams":
        """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation slot per layer")
        layers = []
        for i, (din, dout) in enumerate(zip(dims, dims[1:])):
            bound = 1.0 / math.sqrt(din)
            w = rng.uniform(-bound, bound, size=(dout, din))
            if convex_from_second and i >= 1:
                w = np.abs(w)  # start inside the feasible set
            layers.append((w, np.zeros(dout), activations[i]))
        return cls(layers, convex_from_second=convex_from_second)

    def param_items(self, name: str):
        """Ordered (binding-name, array) pairs; arrays are the live storage."""
        items = []
        for i, (w, b, _) in enumerate(self.layers):
            items.append((f"{name}.w{i}", w))
            items.append((f"{name}.b{i}", b))
        return items

    def bindings(self, name: str) -> dict:
        return dict(self.param_items(name))

    def graph(self, x: Node, name: str) -> Node:
        """Forward graph with parameter leaves named ``{name}.w{i}`` / ``.b{i}``."""
        out = x
        for i, (w, b, act) in enumerate(self.layers):
            wl = parameter(f"{name}.w{i}", w.shape)
            bl = parameter(f"{name}.b{i}", b.shape)
            out = affine(out, wl, bl, transpose_weight=True,
                         label=f"{name} layer {i}")
            if act is not None:
                out = ACTIVATIONS[act](out)
        return out

    def clamp_nonnegative_from_second(self):
        """Project weights of layers 2..end onto w >= 0, in place."""
        for w, _, _ in self.layers[1:]:
            np.maximum(w, 0.0, out=w)

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy(), act) for w, b, act in self.layers],
                         convex_from_second=self.convex_from_second)
