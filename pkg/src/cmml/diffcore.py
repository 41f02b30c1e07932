"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value on a :class:`Tape` is a 2-D ``numpy`` array.  Primitives are
registered in :data:`PRIMITIVES`; each one knows how to compute its output
and how to pull an output adjoint back onto its inputs.  The tape records
nodes in creation order, which is a valid topological order, so backward is
a single reverse sweep.

Conventions that matter for the losses built on top of this:

* max/min reductions break ties toward the first index in iteration order;
* Euclidean distance adds ``DIST_EPS`` under the square root so the gradient
  stays finite when two points coincide.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DIST_EPS = 1e-12
KL_FLOOR = 1e-12


class ShapeError(ValueError):
    """Inputs do not conform to a primitive's signature."""


@dataclass(eq=False)
class DiffNode:
    value: np.ndarray
    op: str = "leaf"
    parents: tuple["DiffNode", ...] = ()
    requires_grad: bool = False
    adjoint: np.ndarray | None = None
    ctx: dict = field(default_factory=dict, repr=False)
    tape: "Tape | None" = field(default=None, repr=False)

    # make ``ndarray <op> node`` defer to the node's reflected operators
    __array_ufunc__ = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item: node of shape {self.shape} is not a scalar")
        return float(self.value[0, 0])

    def zero_adjoint(self) -> None:
        self.adjoint = np.zeros_like(self.value)

    # operator sugar, so loss code reads like arithmetic
    def __add__(self, other):
        return self.tape.apply("add", self, _lift(self.tape, other))

    def __radd__(self, other):
        return self.tape.apply("add", _lift(self.tape, other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, _lift(self.tape, other))

    def __rsub__(self, other):
        return self.tape.apply("sub", _lift(self.tape, other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, factor=float(other))
        return self.tape.apply("mul", self, _lift(self.tape, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, factor=1.0 / float(other))
        return self.tape.apply("div", self, _lift(self.tape, other))

    def __neg__(self):
        return self.tape.apply("scale", self, factor=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, _lift(self.tape, other))

    @property
    def T(self):
        return self.tape.apply("transpose", self)


def _lift(tape: "Tape", x) -> DiffNode:
    if isinstance(x, DiffNode):
        return x
    return tape.constant(x)


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


# --------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: int
    forward: Callable  # (values, ctx, **kw) -> out
    vjp: Callable  # (adj, values, out, ctx, **kw) -> list of adjoints (None = no grad)


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, arity: int):
    def deco(pair):
        fwd, vjp = pair()
        PRIMITIVES[name] = Primitive(name, arity, fwd, vjp)
        return pair

    return deco


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    out = []
    for da, db in zip(a.shape, b.shape):
        if da == db or db == 1 or da == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _binary_elementwise(name, fwd_fn, grad_a, grad_b):
    def pair():
        def forward(vals, ctx):
            a, b = vals
            _broadcast_shape(name, a, b)
            return fwd_fn(a, b)

        def vjp(adj, vals, out, ctx):
            a, b = vals
            return [
                _unbroadcast(grad_a(adj, a, b, out), a.shape),
                _unbroadcast(grad_b(adj, a, b, out), b.shape),
            ]

        return forward, vjp

    _register(name, 2)(pair)


_binary_elementwise("add", np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)
_binary_elementwise("sub", np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)
_binary_elementwise("mul", np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)
_binary_elementwise(
    "div", np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * a / (b * b)
)


@_register("matmul", 2)
def _matmul():
    def forward(vals, ctx):
        a, b = vals
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        return a @ b

    def vjp(adj, vals, out, ctx):
        a, b = vals
        return [adj @ b.T, a.T @ adj]

    return forward, vjp


@_register("transpose", 1)
def _transpose():
    return (lambda vals, ctx: vals[0].T.copy()), (lambda adj, vals, out, ctx: [adj.T])


@_register("scale", 1)
def _scale():
    def forward(vals, ctx, factor):
        return vals[0] * factor

    def vjp(adj, vals, out, ctx, factor):
        return [adj * factor]

    return forward, vjp


@_register("relu", 1)
def _relu():
    return (
        lambda vals, ctx: np.maximum(vals[0], 0.0),
        lambda adj, vals, out, ctx: [adj * (vals[0] > 0.0)],
    )


@_register("exp", 1)
def _exp():
    return (lambda vals, ctx: np.exp(vals[0])), (lambda adj, vals, out, ctx: [adj * out])


@_register("log", 1)
def _log():
    def forward(vals, ctx):
        if np.any(vals[0] <= 0.0):
            raise ValueError("log: input must be strictly positive")
        return np.log(vals[0])

    return forward, lambda adj, vals, out, ctx: [adj / vals[0]]


@_register("sqrt", 1)
def _sqrt():
    def forward(vals, ctx):
        if np.any(vals[0] < 0.0):
            raise ValueError("sqrt: input must be nonnegative")
        return np.sqrt(vals[0])

    return forward, lambda adj, vals, out, ctx: [adj * 0.5 / out]


@_register("sum_rows", 1)
def _sum_rows():
    """Row-wise sum, (n, m) -> (n, 1)."""
    return (
        lambda vals, ctx: vals[0].sum(axis=1, keepdims=True),
        lambda adj, vals, out, ctx: [np.broadcast_to(adj, vals[0].shape).copy()],
    )


@_register("sum_all", 1)
def _sum_all():
    return (
        lambda vals, ctx: np.array([[vals[0].sum()]]),
        lambda adj, vals, out, ctx: [np.full(vals[0].shape, adj[0, 0])],
    )


@_register("concat_cols", 2)
def _concat_cols():
    def forward(vals, ctx):
        a, b = vals
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"concat_cols: row counts differ, {a.shape} and {b.shape}")
        return np.concatenate([a, b], axis=1)

    def vjp(adj, vals, out, ctx):
        k = vals[0].shape[1]
        return [adj[:, :k], adj[:, k:]]

    return forward, vjp


@_register("sqdist", 2)
def _sqdist():
    """Pairwise squared differences summed over features: (n,d),(m,d) -> (n,m)."""

    def forward(vals, ctx):
        a, b = vals
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"sqdist: feature widths differ, {a.shape} vs {b.shape}")
        diff = a[:, None, :] - b[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(adj, vals, out, ctx):
        a, b = vals
        ga = 2.0 * (adj.sum(axis=1, keepdims=True) * a - adj @ b)
        gb = 2.0 * (adj.sum(axis=0)[:, None] * b - adj.T @ a)
        return [ga, gb]

    return forward, vjp


def _segment_extreme(kind: str):
    pick = np.argmax if kind == "max" else np.argmin

    def pair():
        def forward(vals, ctx, groups, num_groups):
            (a,) = vals
            groups = np.asarray(groups)
            if groups.shape != (a.shape[1],):
                raise ShapeError(
                    f"segment_{kind}: need one group id per column, "
                    f"got {groups.shape} for input {a.shape}"
                )
            out = np.empty((a.shape[0], num_groups))
            idx = np.empty((a.shape[0], num_groups), dtype=np.int64)
            for g in range(num_groups):
                cols = np.flatnonzero(groups == g)
                if cols.size == 0:
                    raise ShapeError(f"segment_{kind}: group {g} has no columns")
                sub = a[:, cols]
                j = pick(sub, axis=1)  # first index on ties
                idx[:, g] = cols[j]
                out[:, g] = sub[np.arange(a.shape[0]), j]
            ctx["idx"] = idx
            return out

        def vjp(adj, vals, out, ctx, groups, num_groups):
            g = np.zeros_like(vals[0])
            rows = np.repeat(np.arange(adj.shape[0]), adj.shape[1])
            np.add.at(g, (rows, ctx["idx"].ravel()), adj.ravel())
            return [g]

        return forward, vjp

    _register(f"segment_{kind}", 1)(pair)


_segment_extreme("max")
_segment_extreme("min")


@_register("max", 1)
def _max():
    """Maximum over all entries of a matrix -> (1, 1); first index wins ties."""

    def forward(vals, ctx):
        j = int(np.argmax(vals[0]))
        ctx["j"] = j
        return np.array([[vals[0].flat[j]]])

    def vjp(adj, vals, out, ctx):
        g = np.zeros_like(vals[0])
        g.flat[ctx["j"]] = adj[0, 0]
        return [g]

    return forward, vjp


@_register("min", 1)
def _min():
    def forward(vals, ctx):
        j = int(np.argmin(vals[0]))
        ctx["j"] = j
        return np.array([[vals[0].flat[j]]])

    def vjp(adj, vals, out, ctx):
        g = np.zeros_like(vals[0])
        g.flat[ctx["j"]] = adj[0, 0]
        return [g]

    return forward, vjp


def _check_mask(name, a, mask):
    if mask is None:
        return np.ones(a.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"{name}: mask shape {mask.shape} != input shape {a.shape}")
    if not mask.any(axis=1).all():
        raise ShapeError(f"{name}: every row needs at least one unmasked entry")
    return mask


def _masked_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    zm = np.where(mask, z, -np.inf)
    zm = zm - zm.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(zm), 0.0)
    return e / e.sum(axis=1, keepdims=True)


@_register("logsumexp", 1)
def _logsumexp():
    """Row-wise log-sum-exp over unmasked entries, (n, m) -> (n, 1)."""

    def forward(vals, ctx, mask=None):
        (a,) = vals
        m = _check_mask("logsumexp", a, mask)
        zm = np.where(m, a, -np.inf)
        top = zm.max(axis=1, keepdims=True)
        s = np.where(m, np.exp(zm - top), 0.0).sum(axis=1, keepdims=True)
        ctx["mask"] = m
        return top + np.log(s)

    def vjp(adj, vals, out, ctx, mask=None):
        return [adj * _masked_softmax(vals[0], ctx["mask"])]

    return forward, vjp


@_register("softmax", 1)
def _softmax():
    """Row-wise softmax of ``a / temperature``; masked entries get probability 0."""

    def forward(vals, ctx, temperature=1.0, mask=None):
        if temperature <= 0:
            raise ValueError(f"softmax: temperature must be > 0, got {temperature}")
        (a,) = vals
        m = _check_mask("softmax", a, mask)
        ctx["mask"] = m
        return _masked_softmax(a / temperature, m)

    def vjp(adj, vals, out, ctx, temperature=1.0, mask=None):
        inner = (adj * out).sum(axis=1, keepdims=True)
        return [out * (adj - inner) / temperature]

    return forward, vjp


@_register("kl", 2)
def _kl():
    """Row-wise KL(p || q) = sum p ln(p/q), (n, m),(n, m) -> (n, 1).

    0 ln 0 is taken as 0 and q is floored at ``KL_FLOOR``.
    """

    def forward(vals, ctx):
        p, q = vals
        if p.shape != q.shape:
            raise ShapeError(f"kl: distribution shapes differ, {p.shape} vs {q.shape}")
        qf = np.maximum(q, KL_FLOOR)
        pos = p > 0.0
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(qf)), 0.0)
        return terms.sum(axis=1, keepdims=True)

    def vjp(adj, vals, out, ctx):
        p, q = vals
        qf = np.maximum(q, KL_FLOOR)
        pos = p > 0.0
        gp = np.where(pos, np.log(np.where(pos, p, 1.0)) - np.log(qf) + 1.0, 0.0)
        gq = np.where(q > KL_FLOOR, -p / qf, 0.0)
        return [adj * gp, adj * gq]

    return forward, vjp


# --------------------------------------------------------------------------
# tape


class Tape:
    """Records nodes in creation order; one tape per training step."""

    def __init__(self):
        self.nodes: list[DiffNode] = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value) -> DiffNode:
        node = DiffNode(as_matrix(value).copy(), requires_grad=True, tape=self)
        self.nodes.append(node)
        return node

    def constant(self, value) -> DiffNode:
        node = DiffNode(as_matrix(value), tape=self)
        self.nodes.append(node)
        return node

    def apply(self, primitive: str, *inputs: DiffNode, **kw) -> DiffNode:
        try:
            prim = PRIMITIVES[primitive]
        except KeyError:
            raise KeyError(f"unknown primitive {primitive!r}") from None
        if len(inputs) != prim.arity:
            raise ShapeError(f"{primitive}: expected {prim.arity} inputs, got {len(inputs)}")
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{primitive}: input node belongs to a different tape")
        ctx: dict = {}
        out = prim.forward([x.value for x in inputs], ctx, **kw)
        node = DiffNode(
            as_matrix(out),
            op=primitive,
            parents=inputs,
            requires_grad=any(x.requires_grad for x in inputs),
            ctx={"kw": kw, **ctx},
            tape=self,
        )
        self.nodes.append(node)
        return node

    def zero_adjoints(self) -> None:
        for node in self.nodes:
            node.adjoint = None

    def backward(self, output: DiffNode) -> dict[DiffNode, np.ndarray]:
        """Fill adjoints by a reverse sweep and return ``{leaf variable: gradient}``."""
        if output.shape != (1, 1):
            raise ShapeError(f"backward: output must be scalar (1, 1), got {output.shape}")
        if output.tape is not self:
            raise ValueError("backward: output belongs to a different tape")
        self.zero_adjoints()
        output.adjoint = np.ones((1, 1))
        stop = self.nodes.index(output)
        for node in reversed(self.nodes[: stop + 1]):
            if node.adjoint is None or not node.parents or not node.requires_grad:
                continue
            prim = PRIMITIVES[node.op]
            kw = node.ctx["kw"]
            grads = prim.vjp(
                node.adjoint, [p.value for p in node.parents], node.value, node.ctx, **kw
            )
            for parent, g in zip(node.parents, grads):
                if not parent.requires_grad or g is None:
                    continue
                if parent.adjoint is None:
                    parent.adjoint = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.adjoint = parent.adjoint + g
        return {
            n: (n.adjoint if n.adjoint is not None else np.zeros_like(n.value))
            for n in self.nodes
            if n.requires_grad and not n.parents
        }


def forward(tape: Tape, primitive: str, inputs: Sequence[DiffNode], **kw) -> DiffNode:
    return tape.apply(primitive, *inputs, **kw)


def backward(tape: Tape, output: DiffNode) -> dict[DiffNode, np.ndarray]:
    return tape.backward(output)


# --------------------------------------------------------------------------
# composite helpers used by the losses


def relu(x: DiffNode) -> DiffNode:
    return x.tape.apply("relu", x)


def exp(x: DiffNode) -> DiffNode:
    return x.tape.apply("exp", x)


def log(x: DiffNode) -> DiffNode:
    return x.tape.apply("log", x)


def sqrt(x: DiffNode) -> DiffNode:
    return x.tape.apply("sqrt", x)


def sum_rows(x: DiffNode) -> DiffNode:
    return x.tape.apply("sum_rows", x)


def sum_all(x: DiffNode) -> DiffNode:
    return x.tape.apply("sum_all", x)


def concat_cols(a: DiffNode, b: DiffNode) -> DiffNode:
    return a.tape.apply("concat_cols", a, b)


def logsumexp(x: DiffNode, mask=None) -> DiffNode:
    return x.tape.apply("logsumexp", x, mask=mask)


def softmax(x: DiffNode, temperature: float = 1.0, mask=None) -> DiffNode:
    return x.tape.apply("softmax", x, temperature=temperature, mask=mask)


def kl(p: DiffNode, q: DiffNode) -> DiffNode:
    return p.tape.apply("kl", p, q)


def segment_max(x: DiffNode, groups, num_groups: int) -> DiffNode:
    return x.tape.apply("segment_max", x, groups=groups, num_groups=num_groups)


def segment_min(x: DiffNode, groups, num_groups: int) -> DiffNode:
    return x.tape.apply("segment_min", x, groups=groups, num_groups=num_groups)


def euclidean(a: DiffNode, b: DiffNode) -> DiffNode:
    """Pairwise Euclidean distances between the rows of ``a`` and ``b``."""
    return sqrt(a.tape.apply("sqdist", a, b) + DIST_EPS)


# --------------------------------------------------------------------------
# verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple | None
    failed: bool
    message: str = ""

    def __float__(self):
        return self.max_rel_error


def grad_check(fn: Callable, point, step: float = 1e-5) -> GradCheckResult:
    """Compare the tape gradient of ``fn`` with central differences.

    ``fn(tape, *variables) -> scalar DiffNode``; ``point`` is an array or a
    sequence of arrays (one per variable).  The relative error per coordinate
    is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [as_matrix(point)] if single else [as_matrix(p) for p in point]

    tape = Tape()
    leaves = [tape.variable(a) for a in arrays]
    out = fn(tape, *leaves)
    grads = tape.backward(out)
    analytic = [grads[leaf] for leaf in leaves]

    def value_at(k, pos, delta):
        shifted = [a.copy() for a in arrays]
        shifted[k][pos] += delta
        t = Tape()
        try:
            return float(fn(t, *[t.constant(a) for a in shifted]).value[0, 0])
        except (ValueError, FloatingPointError):
            return float("nan")

    worst, worst_at = 0.0, None
    for k, a in enumerate(arrays):
        for pos in np.ndindex(a.shape):
            numeric = (value_at(k, pos, step) - value_at(k, pos, -step)) / (2 * step)
            ana = analytic[k][pos]
            if not (np.isfinite(numeric) and np.isfinite(ana)):
                return GradCheckResult(
                    np.inf, (k, *pos), True, f"non-finite gradient at variable {k} index {pos}"
                )
            err = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            if err > worst:
                worst, worst_at = err, (k, *pos)
    return GradCheckResult(worst, worst_at, False)
