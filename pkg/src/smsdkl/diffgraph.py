"""Small reverse-mode differentiation engine over dense float64 arrays.

Graphs are built eagerly: every op computes its value at construction, so shape
errors surface immediately.  ``forward`` re-evaluates an existing graph with new
input bindings and ``backward`` accumulates gradients of a scalar root.

The two linear-algebra ops (``quadform_spd`` and ``logdet_spd``) are fused
nodes: they factor their SPD argument once with Cholesky and use closed-form
adjoints instead of differentiating through the factorization.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "Node",
    "ParamStore",
    "NotPositiveDefiniteError",
    "NonFiniteGradientError",
    "input_",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sum_",
    "mean",
    "concat",
    "slice_",
    "transpose",
    "quadform_spd",
    "logdet_spd",
    "cholesky_jitter",
    "forward",
    "backward",
    "topo_order",
    "adam_step",
    "grad_check",
    "count_flops",
]

JITTER_START = 1e-8
JITTER_MAX = 1e-4


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky failed even after the largest allowed diagonal jitter."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        super().__init__(f"non-finite gradient in parameters: {', '.join(self.names)}")


# --------------------------------------------------------------------------- #
# operation counting (used by complexity tests)

_flops: contextvars.ContextVar[list | None] = contextvars.ContextVar("_flops", default=None)


@contextlib.contextmanager
def count_flops():
    """Accumulate approximate multiply-add counts of dense linear algebra.

    Yields a one-element list whose entry is the running total.
    """
    box = [0]
    token = _flops.set(box)
    try:
        yield box
    finally:
        _flops.reset(token)


def _tally(n: float) -> None:
    box = _flops.get()
    if box is not None:
        box[0] += int(n)


def cholesky_jitter(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``, adding diagonal jitter on failure.

    Jitter starts at 1e-8 and grows tenfold up to 1e-4.  Returns the factor
    and the jitter actually used (0.0 when none was needed).
    """
    n = A.shape[0]
    _tally(n**3 / 3)
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(n)
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10
    raise NotPositiveDefiniteError(f"matrix of size {n} not positive definite after jitter {JITTER_MAX:g}")


# --------------------------------------------------------------------------- #
# nodes


class Node:
    """A value in the computation graph.

    ``fwd`` recomputes the value from parent values; ``vjp`` maps the output
    gradient to a tuple of parent gradients (``None`` for parents that need
    none).
    """

    __slots__ = ("op", "parents", "value", "grad", "fwd", "vjp", "name", "cache", "needs")
    # numpy defers to the reflected Node operators
    __array_ufunc__ = None

    def __init__(self, op: str, parents: tuple["Node", ...], value, fwd=None, vjp=None, name: str | None = None):
        self.op = op
        self.parents = parents
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.grad: np.ndarray | None = None
        self.fwd = fwd
        self.vjp = vjp
        self.name = name
        self.cache = None
        # whether any input node lies upstream; constant subtrees skip backward
        needs = op == "input"
        for p in parents:
            needs = needs or p.needs
        self.needs = needs

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

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

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def input_(value, name: str | None = None) -> Node:
    return Node("input", (), np.array(value, dtype=np.float64), name=name)


def constant(value) -> Node:
    return Node("constant", (), value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Node, b: Node, op: str) -> None:
    if a.value.shape == b.value.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_check(a, b, "add")

    def fwd(x, y):
        return x + y

    def vjp(g, x, y, out):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return Node("add", (a, b), a.value + b.value, fwd, vjp)


def sub(a, b) -> Node:
    return add(a, neg(b))


def neg(a) -> Node:
    a = _as_node(a)
    return Node("mul", (a,), -a.value, lambda x: -x, lambda g, x, out: (-g,))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_check(a, b, "mul")

    def fwd(x, y):
        return x * y

    def vjp(g, x, y, out):
        return (
            _unbroadcast(g * y, x.shape) if a.needs else None,
            _unbroadcast(g * x, y.shape) if b.needs else None,
        )

    return Node("mul", (a, b), a.value * b.value, fwd, vjp)


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim == 0 or b.value.ndim == 0 or a.value.ndim > 2 or b.value.ndim > 2:
        raise ValueError(f"matmul: operands must be 1-d or 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def fwd(x, y):
        _tally(x.size * (y.shape[1] if y.ndim == 2 else 1))
        return x @ y

    def vjp(g, x, y, out):
        if x.ndim == 1 and y.ndim == 1:
            return g * y, g * x
        if x.ndim == 1:
            return (y @ g if a.needs else None), (np.outer(x, g) if b.needs else None)
        if y.ndim == 1:
            return (np.outer(g, y) if a.needs else None), (x.T @ g if b.needs else None)
        return (g @ y.T if a.needs else None), (x.T @ g if b.needs else None)

    return Node("matmul", (a, b), fwd(a.value, b.value), fwd, vjp)


def _unary(op: str, f: Callable, df: Callable) -> Callable[[Node], Node]:
    def build(a) -> Node:
        a = _as_node(a)
        return Node(op, (a,), f(a.value), f, lambda g, x, out: (g * df(x, out),))

    build.__name__ = op
    return build


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


tanh = _unary("tanh", np.tanh, lambda x, out: 1.0 - out * out)
sigmoid = _unary("sigmoid", _sigmoid, lambda x, out: out * (1.0 - out))
relu = _unary("relu", lambda x: np.maximum(x, 0.0), lambda x, out: (x > 0).astype(np.float64))
exp = _unary("exp", np.exp, lambda x, out: out)
log = _unary("log", np.log, lambda x, out: 1.0 / x)


def sum_(a, axis: int | None = None) -> Node:
    a = _as_node(a)

    def fwd(x):
        return x.sum(axis=axis)

    def vjp(g, x, out):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Node("sum", (a,), fwd(a.value), fwd, vjp)


def mean(a, axis: int | None = None) -> Node:
    a = _as_node(a)
    n = a.value.size if axis is None else a.shape[axis]

    def fwd(x):
        return x.mean(axis=axis)

    def vjp(g, x, out):
        if axis is None:
            return (np.full(x.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return Node("mean", (a,), fwd(a.value), fwd, vjp)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = tuple(_as_node(n) for n in nodes)
    if not nodes:
        raise ValueError("concat: no operands")
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as err:
        raise ValueError(f"concat: {err}") from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, *args):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(nodes)))

    return Node("concat", nodes, value, fwd, vjp)


def slice_(a, index) -> Node:
    a = _as_node(a)

    def fwd(x):
        return x[index]

    def vjp(g, x, out):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g) if _is_fancy(index) else gx.__setitem__(index, g)
        return (gx,)

    return Node("slice", (a,), np.array(a.value[index]), fwd, vjp)


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def transpose(a) -> Node:
    a = _as_node(a)
    return Node("transpose", (a,), a.value.T, lambda x: x.T, lambda g, x, out: (g.T,))


def _factor(node: Node, A: np.ndarray) -> np.ndarray:
    # node.cache holds (input array, factor) so repeated forwards refactor
    if node.cache is not None and node.cache[0] is A:
        return node.cache[1]
    L, _ = cholesky_jitter(A)
    node.cache = (A, L)
    return L


def quadform_spd(A, b) -> Node:
    """``trace(bᵀ A⁻¹ b)`` for SPD ``A``; a plain quadratic form when ``b`` is a vector."""
    A, b = _as_node(A), _as_node(b)
    if A.value.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"quadform_spd: A must be square, got {A.shape}")
    if b.shape[0] != A.shape[0] or b.value.ndim > 2:
        raise ValueError(f"quadform_spd: b of shape {b.shape} does not match A {A.shape}")
    node = Node("cholesky-solve-quadform", (A, b), 0.0)

    def fwd(Av, bv):
        L = _factor(node, Av)
        w = solve_triangular(L, bv, lower=True, check_finite=False)
        _tally(Av.shape[0] ** 2 * (bv.shape[1] if bv.ndim == 2 else 1))
        return np.sum(w * w)

    def vjp(g, Av, bv, out):
        L = _factor(node, Av)
        s = cho_solve((L, True), bv, check_finite=False)
        _tally(2 * Av.shape[0] ** 2 * (bv.shape[1] if bv.ndim == 2 else 1))
        if bv.ndim == 1:
            gA = -g * np.outer(s, s)
        else:
            gA = -g * (s @ s.T)
        return gA, 2.0 * g * s

    node.fwd, node.vjp = fwd, vjp
    node.value = np.asarray(fwd(A.value, b.value), dtype=np.float64)
    return node


def logdet_spd(A) -> Node:
    """``log|A|`` of an SPD matrix as ``2 Σ log diag(L)``."""
    A = _as_node(A)
    if A.value.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"logdet_spd: A must be square, got {A.shape}")
    node = Node("logdet-spd", (A,), 0.0)

    def fwd(Av):
        L = _factor(node, Av)
        return 2.0 * np.sum(np.log(np.diag(L)))

    def vjp(g, Av, out):
        L = _factor(node, Av)
        n = Av.shape[0]
        _tally(n**3)
        Linv = solve_triangular(L, np.eye(n), lower=True, check_finite=False)
        return (g * (Linv.T @ Linv),)

    node.fwd, node.vjp = fwd, vjp
    node.value = np.asarray(fwd(A.value), dtype=np.float64)
    return node


# --------------------------------------------------------------------------- #
# evaluation


def topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward(root: Node, bindings: dict | None = None) -> np.ndarray:
    """Re-evaluate the graph under ``root`` with new values for input nodes.

    ``bindings`` maps input nodes (or their names) to arrays.  Shapes of bound
    values must match the originals.
    """
    bindings = bindings or {}
    order = topo_order(root)
    by_name = {n.name: n for n in order if n.op == "input" and n.name is not None}
    for key, val in bindings.items():
        node = by_name[key] if isinstance(key, str) else key
        val = np.asarray(val, dtype=np.float64)
        if val.shape != node.shape:
            raise ValueError(f"binding for {node!r} has shape {val.shape}")
        node.value = val.copy()
    for node in order:
        if node.fwd is not None:
            node.value = np.asarray(node.fwd(*(p.value for p in node.parents)), dtype=np.float64)
    return root.value


def backward(root: Node) -> list[Node]:
    """Populate ``grad`` on every node reachable from the scalar ``root``.

    Nodes with no input upstream (constant subtrees) are not differentiated
    and keep ``grad = None``.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None or not node.needs:
            continue
        grads = node.vjp(node.grad, *(p.value for p in node.parents), node.value)
        for p, g in zip(node.parents, grads):
            if g is None or not p.needs:
                continue
            p.grad = g if p.grad is None else p.grad + g
    for node in order:
        if node.grad is None and node.needs:
            node.grad = np.zeros_like(node.value)
    return order


# --------------------------------------------------------------------------- #
# parameters and optimization


@dataclass
class ParamStore:
    """Named float64 parameter arrays plus Adam moment accumulators."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def nodes(self) -> dict[str, Node]:
        return {k: input_(v, name=k) for k, v in self.params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
        )

    def size(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One Adam descent step, in place.  Callers maximizing pass negated grads."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad)
    for k, g in grads.items():
        if g.shape != store.params[k].shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, expected {store.params[k].shape}")
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for k, g in grads.items():
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def value_and_grad(fn: Callable[[dict[str, Node]], Node], store: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    nodes = store.nodes()
    root = fn(nodes)
    backward(root)
    return float(root.value), {k: n.grad if n.grad is not None else np.zeros_like(n.value) for k, n in nodes.items()}


def grad_check(fn: Callable[[dict[str, Node]], Node], store: ParamStore, eps: float = 1e-5,
               order: int = 2) -> float:
    """Worst relative error between backprop and central differences.

    ``order=2`` is the two-point stencil ``(f(p+ε) - f(p-ε)) / 2ε``; ``order=4``
    is the five-point stencil, whose smaller truncation error permits a larger
    ``eps`` and so less round-off on very small gradients.  The relative error
    of each coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.  ``store`` is left
    unchanged.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    _, analytic = value_and_grad(fn, store)

    def at(flat, i, orig, h):
        flat[i] = orig + h
        return float(fn(store.nodes()).value)

    worst = 0.0
    for name, arr in store.params.items():
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            d1 = at(flat, i, orig, eps) - at(flat, i, orig, -eps)
            if order == 2:
                num = d1 / (2 * eps)
            else:
                d2 = at(flat, i, orig, 2 * eps) - at(flat, i, orig, -2 * eps)
                num = (8 * d1 - d2) / (12 * eps)
            flat[i] = orig
            denom = max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, abs(a_flat[i] - num) / denom)
    return worst


def grad_check_blocks(fn: Callable[[dict[str, Node]], Node], store: ParamStore, eps: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter tensor, ``‖a - n‖ / max(‖a‖, ‖n‖, 1e-300)``.

    Each tensor is judged against its own gradient scale, so a block whose
    gradients are many orders smaller than the rest is still checked
    meaningfully while single coordinates below finite-difference resolution
    do not dominate.
    """
    _, analytic = value_and_grad(fn, store)
    out = {}
    for name, arr in store.params.items():
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(store.nodes()).value)
            flat[i] = orig - eps
            fm = float(fn(store.nodes()).value)
            flat[i] = orig
            num[i] = (fp - fm) / (2 * eps)
        a = analytic[name].reshape(-1)
        out[name] = float(np.linalg.norm(a - num) / max(np.linalg.norm(a), np.linalg.norm(num), 1e-300))
    return out
