"""Symbolic reverse-mode differentiation over dense float64 arrays.

Graphs are built once from :class:`Expression` nodes and evaluated many times
against a ``bindings`` mapping (name -> ndarray).  :func:`grad` returns the
derivative as another graph, so it can be differentiated again; this is what
makes the look-ahead meta-gradient exact.

Typical use::

    x = param("x", ())
    y = x * x * x
    (dy,) = grad(y, ["x"]).values()
    (d2y,) = grad(dy, ["x"]).values()
    evaluate(d2y, {"x": np.array(2.0)})   # -> 12.0
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expression",
    "Program",
    "AutodiffError",
    "UnboundSymbolError",
    "ShapeError",
    "NumericOverflowError",
    "RankError",
    "DetachedGradientError",
    "input_",
    "param",
    "constant",
    "as_expr",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "maximum",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "sqrt",
    "softmax",
    "sq_l2",
    "sum_",
    "mean",
    "stop_gradient",
    "grad",
    "gradient",
    "second_order_gradient",
    "finite_diff_gradient",
    "evaluate",
    "compile_program",
    "leaves",
]


class AutodiffError(Exception):
    pass


class UnboundSymbolError(AutodiffError, KeyError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericOverflowError(AutodiffError, ArithmeticError):
    pass


class RankError(AutodiffError, ValueError):
    pass


class DetachedGradientError(AutodiffError, TypeError):
    pass


Shape = tuple  # entries are int or None (unknown until bound)


class Expression:
    """Immutable graph node.  Build with the module-level constructors."""

    __slots__ = ("op", "children", "attrs", "shape", "_program", "__weakref__")

    def __init__(self, op: str, children: tuple = (), attrs: dict | None = None,
                 shape: Shape = ()):
        self.op = op
        self.children = children
        self.attrs = attrs or {}
        self.shape = tuple(shape)
        self._program = None

    @property
    def name(self) -> str | None:
        return self.attrs.get("name")

    def __repr__(self) -> str:
        label = self.attrs.get("name", "")
        return f"Expression({self.op}{':' + label if label else ''}, shape={self.shape})"

    # Arithmetic sugar.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------------------
# static shape helpers
# ---------------------------------------------------------------------------

def _broadcast_shapes(a: Shape, b: Shape) -> Shape:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x == 1:
            out.append(y)
        elif y == 1:
            out.append(x)
        elif x is None:
            out.append(y)
        elif y is None or x == y:
            out.append(x)
        else:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
    return tuple(reversed(out))


def _reduced_shape(shape: Shape, axis, keepdims: bool) -> Shape:
    if axis is None:
        return tuple(1 for _ in shape) if keepdims else ()
    ax = axis % len(shape)
    if keepdims:
        return tuple(1 if i == ax else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i != ax)


def _static_equal(a: Shape, b: Shape) -> bool:
    return a == b and None not in a


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def input_(name: str, shape: Sequence) -> Expression:
    """Data leaf, bound by name at evaluation; never differentiated by default."""
    return Expression("input", (), {"name": name}, tuple(shape))


def param(name: str, shape: Sequence) -> Expression:
    return Expression("param", (), {"name": name}, tuple(shape))


def constant(value) -> Expression:
    arr = np.asarray(value, dtype=np.float64)
    arr.setflags(write=False)
    return Expression("const", (), {"value": arr}, arr.shape)


def as_expr(x) -> Expression:
    return x if isinstance(x, Expression) else constant(x)


def _binary(op: str, a, b) -> Expression:
    a, b = as_expr(a), as_expr(b)
    return Expression(op, (a, b), None, _broadcast_shapes(a.shape, b.shape))


def add(a, b) -> Expression:
    return _binary("add", a, b)


def sub(a, b) -> Expression:
    return _binary("sub", a, b)


def mul(a, b) -> Expression:
    return _binary("mul", a, b)


def div(a, b) -> Expression:
    return _binary("div", a, b)


def maximum(a, b) -> Expression:
    """Elementwise max; at ties neither argument receives gradient."""
    return _binary("maximum", a, b)


def _mask_gt(a: Expression, b: Expression) -> Expression:
    return Expression("mask_gt", (a, b), None, _broadcast_shapes(a.shape, b.shape))


def _unary(op: str, a) -> Expression:
    a = as_expr(a)
    return Expression(op, (a,), None, a.shape)


def neg(a) -> Expression:
    return _unary("neg", a)


def exp(a) -> Expression:
    return _unary("exp", a)


def log(a) -> Expression:
    return _unary("log", a)


def tanh(a) -> Expression:
    return _unary("tanh", a)


def sigmoid(a) -> Expression:
    return _unary("sigmoid", a)


def sqrt(a) -> Expression:
    return _unary("sqrt", a)


def softmax(a) -> Expression:
    """Softmax over the last axis (max-subtracted)."""
    a = as_expr(a)
    if len(a.shape) == 0:
        raise ShapeError("softmax needs at least one axis")
    return Expression("softmax", (a,), None, a.shape)


def matmul(a, b) -> Expression:
    a, b = as_expr(a), as_expr(b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    ka, kb = a.shape[1], b.shape[0]
    if ka is not None and kb is not None and ka != kb:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return Expression("matmul", (a, b), None, (a.shape[0], b.shape[1]))


def transpose(a) -> Expression:
    a = as_expr(a)
    if len(a.shape) != 2:
        raise ShapeError("transpose expects a 2-D operand")
    return Expression("transpose", (a,), None, a.shape[::-1])


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Expression:
    a = as_expr(a)
    return Expression("sum", (a,), {"axis": axis, "keepdims": keepdims},
                      _reduced_shape(a.shape, axis, keepdims))


def mean(a, axis: int | None = None, keepdims: bool = False) -> Expression:
    a = as_expr(a)
    return Expression("mean", (a,), {"axis": axis, "keepdims": keepdims},
                      _reduced_shape(a.shape, axis, keepdims))


def sq_l2(a, axis: int | None = -1, keepdims: bool = False) -> Expression:
    """Sum of squares along ``axis`` (all entries when ``axis`` is None)."""
    a = as_expr(a)
    return Expression("sq_l2", (a,), {"axis": axis, "keepdims": keepdims},
                      _reduced_shape(a.shape, axis, keepdims))


def stop_gradient(a) -> Expression:
    """Passes the value through; differentiation treats it as a constant."""
    return _unary("stop_gradient", a)


# Internal nodes emitted by differentiation.

def _sum_like(g: Expression, ref: Expression) -> Expression:
    if _static_equal(g.shape, ref.shape):
        return g
    return Expression("sum_like", (g, ref), None, ref.shape)


def _broadcast_like(g: Expression, ref: Expression) -> Expression:
    if _static_equal(g.shape, ref.shape):
        return g
    return Expression("broadcast_like", (g, ref), None, ref.shape)


def _reduce_bcast(kind: str, g: Expression, ref: Expression, axis, keepdims) -> Expression:
    # kind "sum": broadcast g back over the reduced axis; "mean": same, divided by count.
    return Expression(f"{kind}_bcast", (g, ref), {"axis": axis, "keepdims": keepdims},
                      ref.shape)


def _zeros_like(ref: Expression) -> Expression:
    return Expression("zeros_like", (ref,), None, ref.shape)


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------

def _fwd_sum_like(node, g, ref):
    target = ref.shape
    if g.shape == target:
        return g
    lead = g.ndim - len(target)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(target) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _expand(g, axis, keepdims, ndim):
    if axis is None:
        return g.reshape((1,) * ndim) if not keepdims else g
    if not keepdims:
        return np.expand_dims(g, axis % ndim)
    return g


def _fwd_sum_bcast(node, g, ref):
    a = node.attrs
    return np.broadcast_to(_expand(g, a["axis"], a["keepdims"], ref.ndim), ref.shape)


def _fwd_mean_bcast(node, g, ref):
    a = node.attrs
    count = ref.size if a["axis"] is None else ref.shape[a["axis"]]
    return np.broadcast_to(_expand(g, a["axis"], a["keepdims"], ref.ndim) / count, ref.shape)


def _fwd_softmax(node, x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_sigmoid(node, x):
    # tanh form cannot overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_matmul(node, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


_FORWARD: dict[str, Callable] = {
    "const": lambda n: n.attrs["value"],
    "add": lambda n, a, b: a + b,
    "sub": lambda n, a, b: a - b,
    "mul": lambda n, a, b: a * b,
    "div": lambda n, a, b: a / b,
    "neg": lambda n, a: -a,
    "maximum": lambda n, a, b: np.maximum(a, b),
    "mask_gt": lambda n, a, b: (a > b).astype(np.float64),
    "exp": lambda n, a: np.exp(a),
    "log": lambda n, a: np.log(a),
    "tanh": lambda n, a: np.tanh(a),
    "sigmoid": _fwd_sigmoid,
    "sqrt": lambda n, a: np.sqrt(a),
    "softmax": _fwd_softmax,
    "matmul": _fwd_matmul,
    "transpose": lambda n, a: a.T,
    "sum": lambda n, a: np.asarray(a.sum(axis=n.attrs["axis"], keepdims=n.attrs["keepdims"])),
    "mean": lambda n, a: np.asarray(a.mean(axis=n.attrs["axis"], keepdims=n.attrs["keepdims"])),
    "sq_l2": lambda n, a: np.asarray(
        (a * a).sum(axis=n.attrs["axis"], keepdims=n.attrs["keepdims"])),
    "sum_like": _fwd_sum_like,
    "broadcast_like": lambda n, g, ref: np.broadcast_to(g, ref.shape),
    "sum_bcast": _fwd_sum_bcast,
    "mean_bcast": _fwd_mean_bcast,
    "zeros_like": lambda n, ref: np.zeros(ref.shape),
    "stop_gradient": lambda n, a: a,
}

_NON_DIFFERENTIABLE = frozenset({"mask_gt", "zeros_like", "stop_gradient"})


# ---------------------------------------------------------------------------
# vector-Jacobian products, written with graph nodes so they nest
# ---------------------------------------------------------------------------

def _vjp(node: Expression, g: Expression, need: Sequence[bool]) -> list:
    op = node.op
    ch = node.children
    out: list = []
    if op == "add":
        a, b = ch
        if need[0]:
            out.append((0, _sum_like(g, a)))
        if need[1]:
            out.append((1, _sum_like(g, b)))
    elif op == "sub":
        a, b = ch
        if need[0]:
            out.append((0, _sum_like(g, a)))
        if need[1]:
            out.append((1, _sum_like(neg(g), b)))
    elif op == "mul":
        a, b = ch
        if need[0]:
            out.append((0, _sum_like(mul(g, b), a)))
        if need[1]:
            out.append((1, _sum_like(mul(g, a), b)))
    elif op == "div":
        a, b = ch
        if need[0]:
            out.append((0, _sum_like(div(g, b), a)))
        if need[1]:
            out.append((1, _sum_like(neg(div(mul(g, node), b)), b)))
    elif op == "neg":
        out.append((0, neg(g)))
    elif op == "maximum":
        a, b = ch
        if need[0]:
            out.append((0, _sum_like(mul(g, _mask_gt(a, b)), a)))
        if need[1]:
            out.append((1, _sum_like(mul(g, _mask_gt(b, a)), b)))
    elif op == "exp":
        out.append((0, mul(g, node)))
    elif op == "log":
        out.append((0, div(g, ch[0])))
    elif op == "tanh":
        out.append((0, sub(g, mul(g, mul(node, node)))))
    elif op == "sigmoid":
        out.append((0, mul(g, mul(node, sub(1.0, node)))))
    elif op == "sqrt":
        out.append((0, div(mul(g, 0.5), node)))
    elif op == "softmax":
        gs = mul(g, node)
        out.append((0, sub(gs, mul(node, sum_(gs, axis=-1, keepdims=True)))))
    elif op == "matmul":
        a, b = ch
        if need[0]:
            out.append((0, matmul(g, transpose(b))))
        if need[1]:
            out.append((1, matmul(transpose(a), g)))
    elif op == "transpose":
        out.append((0, transpose(g)))
    elif op == "sum":
        a = node.attrs
        out.append((0, _reduce_bcast("sum", g, ch[0], a["axis"], a["keepdims"])))
    elif op == "mean":
        a = node.attrs
        out.append((0, _reduce_bcast("mean", g, ch[0], a["axis"], a["keepdims"])))
    elif op == "sq_l2":
        a = node.attrs
        spread = _reduce_bcast("sum", g, ch[0], a["axis"], a["keepdims"])
        out.append((0, mul(spread, mul(2.0, ch[0]))))
    elif op == "sum_like":
        if need[0]:
            out.append((0, _broadcast_like(g, ch[0])))
    elif op == "broadcast_like":
        if need[0]:
            out.append((0, _sum_like(g, ch[0])))
    elif op == "sum_bcast":
        a = node.attrs
        if need[0]:
            out.append((0, sum_(g, axis=a["axis"], keepdims=a["keepdims"])))
    elif op == "mean_bcast":
        a = node.attrs
        if need[0]:
            out.append((0, mean(g, axis=a["axis"], keepdims=a["keepdims"])))
    elif op in _NON_DIFFERENTIABLE:
        pass
    else:  # pragma: no cover - every constructor above is covered
        raise AutodiffError(f"no derivative rule for {op!r}")
    return out


# ---------------------------------------------------------------------------
# graph traversal and evaluation
# ---------------------------------------------------------------------------

def _toposort(outputs: Iterable[Expression]) -> list[Expression]:
    order: list[Expression] = []
    seen: set[int] = set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in reversed(node.children):
                if id(child) not in seen:
                    stack.append((child, False))
    return order


def leaves(expr: Expression) -> list[Expression]:
    """All input/param leaves reachable from ``expr``."""
    return [n for n in _toposort([expr]) if n.op in ("input", "param")]


class Program:
    """A compiled evaluation schedule for one or more output expressions.

    Compiling is the only place the graph is walked; :meth:`run` is a flat loop
    over the schedule.  Programs hold no evaluation state, so one program may
    be run from several threads.
    """

    def __init__(self, outputs: Sequence[Expression]):
        self.outputs = list(outputs)
        order = _toposort(self.outputs)
        index = {id(n): i for i, n in enumerate(order)}
        self._nodes = order
        self._child_idx = [tuple(index[id(c)] for c in n.children) for n in order]
        self._out_idx = [index[id(o)] for o in self.outputs]
        self.symbols = {n.attrs["name"]: n.shape for n in order if n.op in ("input", "param")}

    def __len__(self) -> int:
        return len(self._nodes)

    def _bind(self, node: Expression, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
        name = node.attrs["name"]
        try:
            value = bindings[name]
        except KeyError:
            raise UnboundSymbolError(f"no binding for {node.op} {name!r}") from None
        value = np.asarray(value, dtype=np.float64)
        decl = node.shape
        if value.ndim != len(decl) or any(d is not None and d != s
                                           for d, s in zip(decl, value.shape)):
            raise ShapeError(f"binding {name!r} has shape {value.shape}, expected {decl}")
        if not np.all(np.isfinite(value)):
            raise NumericOverflowError(f"binding {name!r} holds non-finite values")
        return value

    def run(self, bindings: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        vals: list = [None] * len(self._nodes)
        fwd = _FORWARD
        with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
            for i, (node, cidx) in enumerate(zip(self._nodes, self._child_idx)):
                op = node.op
                if op == "input" or op == "param":
                    vals[i] = self._bind(node, bindings)
                    continue
                try:
                    vals[i] = fwd[op](node, *[vals[j] for j in cidx])
                except FloatingPointError as exc:
                    raise NumericOverflowError(f"non-finite value in {op}: {exc}") from None
                except ValueError as exc:
                    raise ShapeError(f"{op}: {exc}") from None
        return [vals[i] for i in self._out_idx]


def compile_program(outputs: Sequence[Expression]) -> Program:
    return Program(outputs)


def evaluate(expr: Expression, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    """Value of ``expr`` under ``bindings``.  Pure; the schedule is cached on ``expr``."""
    prog = expr._program
    if prog is None:
        prog = Program([expr])
        expr._program = prog
    return np.array(prog.run(bindings)[0])


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _wrt_names(wrt) -> list[str]:
    if isinstance(wrt, str):
        return [wrt]
    return [w if isinstance(w, str) else w.attrs["name"] for w in wrt]


def grad(expr: Expression, wrt) -> dict[str, Expression]:
    """Derivative graphs d(expr)/d(leaf) for each named leaf in ``wrt``.

    ``expr`` must be scalar (size one).  Leaves not reachable from ``expr``
    get an all-zero graph of matching shape.  Both ``param`` and ``input``
    leaves may be named.
    """
    if any(s is not None and s != 1 for s in expr.shape):
        raise RankError(f"gradient needs a scalar expression, got shape {expr.shape}")
    names = _wrt_names(wrt)
    order = _toposort([expr])
    targets = {id(n) for n in order
               if n.op in ("param", "input") and n.attrs["name"] in names}

    needs: dict[int, bool] = {}
    for n in order:
        needs[id(n)] = id(n) in targets or (
            n.op not in _NON_DIFFERENTIABLE and any(needs[id(c)] for c in n.children))

    adj: dict[int, Expression] = {id(expr): constant(np.ones(
        tuple(1 for _ in expr.shape)))}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or not node.children or not needs[id(node)]:
            continue
        flags = [needs[id(c)] for c in node.children]
        for i, contrib in _vjp(node, g, flags):
            child = node.children[i]
            prev = adj.get(id(child))
            adj[id(child)] = contrib if prev is None else add(prev, contrib)

    by_name: dict[str, Expression] = {}
    first_leaf: dict[str, Expression] = {}
    for n in order:
        if id(n) in targets:
            name = n.attrs["name"]
            first_leaf.setdefault(name, n)
            g = adj.get(id(n))
            if g is not None:
                g = _sum_like(g, n)
                by_name[name] = g if name not in by_name else add(by_name[name], g)
    result = {}
    for name in names:
        if name in by_name:
            result[name] = by_name[name]
        elif name in first_leaf:
            result[name] = _zeros_like(first_leaf[name])
        else:
            result[name] = None  # resolved by gradient() against the bindings
    return result


def _zero_fill(grads: dict, bindings: Mapping[str, np.ndarray]) -> dict:
    out = {}
    for name, g in grads.items():
        if g is None:
            if name not in bindings:
                raise UnboundSymbolError(f"no binding for {name!r}")
            out[name] = constant(np.zeros(np.shape(bindings[name])))
        else:
            out[name] = g
    return out


def gradient(expr: Expression, wrt, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Numeric d(expr)/d(wrt) under ``bindings``.

    Use :func:`grad` for the graph-valued form.
    """
    graphs = _zero_fill(grad(expr, wrt), bindings)
    names = list(graphs)
    prog = Program([expr] + [graphs[n] for n in names])
    vals = prog.run(bindings)
    if vals[0].size != 1:
        raise RankError(f"gradient needs a scalar expression, got shape {vals[0].shape}")
    return {n: np.array(v) for n, v in zip(names, vals[1:])}


def second_order_gradient(outer: Expression, inner_grad: Mapping[str, Expression], wrt,
                          bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """d(outer)/d(wrt) where ``outer`` was built from the graphs in ``inner_grad``.

    ``inner_grad`` must come from :func:`grad`; plain arrays mean the update
    was detached and the dependency path is lost.
    """
    for name, g in inner_grad.items():
        if not isinstance(g, Expression):
            raise DetachedGradientError(
                f"inner gradient {name!r} is numeric; build it with grad() instead")
    reachable = {id(n) for n in _toposort([outer])}
    if not any(id(g) in reachable for g in inner_grad.values()):
        raise DetachedGradientError("outer expression does not depend on the inner gradient")
    return gradient(outer, wrt, bindings)


def finite_diff_gradient(loss_fn: Callable[[np.ndarray], float], point, step: float = 1e-5
                         ) -> np.ndarray:
    """Central differences (f(p + h e_k) - f(p - h e_k)) / 2h for every coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(point, dtype=np.float64)
    out = np.empty_like(p)
    flat, gflat = p.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(loss_fn(p.copy()))
        flat[k] = orig - step
        fm = float(loss_fn(p.copy()))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericOverflowError(f"loss is not finite around coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * step)
    return out
