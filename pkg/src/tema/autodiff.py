"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every value in a computation graph is a matrix; scalars are 1x1. Each
primitive builds a `Node` holding the forward value and one hand-written
backward rule per parent. `backward` walks the graph once in reverse
topological order; `finite_difference_check` is the standing gradient
oracle used by the test suite and the `gradcheck` CLI command.

Sequences are matrices and batches are loops: nothing here is more than
two-dimensional.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionMismatch, EmptyInput, NotScalar, ZeroVector

Array = np.ndarray

LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_matrix(value) -> Array:
    """Coerce to a C-contiguous 2-D float64 array; 1-D input becomes a row."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


class Node:
    """One matrix in the graph: value, gradient slot, and parent links.

    `parents` pairs each parent node with a local rule mapping this node's
    output gradient to that parent's gradient contribution. Graphs are
    acyclic by construction (nodes only reference earlier nodes).
    """

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value: Array = as_matrix(value)
        self.grad: Array | None = None
        self.parents: tuple[tuple[Node, Callable[[Array], Array]], ...] = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p, _ in self.parents
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Node:
    """A leaf that never receives gradient (targets, masks, context)."""
    return Node(value, requires_grad=False)


def parameter(value) -> Node:
    """A trainable leaf; entries must be finite."""
    node = Node(value, requires_grad=True)
    if not np.all(np.isfinite(node.value)):
        raise ValueError("parameter entries must be finite")
    return node


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


def _topological_order(root: Node) -> list[Node]:
    """Iterative post-order over the grad-requiring subgraph."""
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into `.grad` of every reachable leaf.

    Each call computes one full gradient flow in a scratch map and adds it
    to the persistent `.grad` slots of leaf nodes (parameters and
    constants-with-grad), so repeated calls without zeroing accumulate
    exactly. Interior node gradients are transient scratch.
    """
    if loss.shape != (1, 1):
        raise NotScalar(f"backward needs a 1x1 loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    flow: dict[int, Array] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            # copy: pass-through rules can hand one array to several leaves
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        for parent, rule in node.parents:
            if not parent.requires_grad:
                continue
            pid = id(parent)
            contribution = rule(g)
            existing = flow.get(pid)
            # allocate on accumulation instead of mutating: contributions
            # may alias upstream flow arrays
            flow[pid] = contribution if existing is None else existing + contribution


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionMismatch(f"add: {a.shape} vs {b.shape}")
    return Node(a.value + b.value, ((a, lambda g: g), (b, lambda g: g)))


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionMismatch(f"sub: {a.shape} vs {b.shape}")
    return Node(a.value - b.value, ((a, lambda g: g), (b, lambda g: -g)))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"mul: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return Node(av * bv, ((a, lambda g: g * bv), (b, lambda g: g * av)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, ((a, lambda g: g * c),))


def add_bias(x: Node, bias: Node) -> Node:
    """Broadcast a 1xN row onto every row of x (bias add, segment add)."""
    if bias.shape != (1, x.shape[1]):
        raise DimensionMismatch(f"add_bias: {x.shape} vs bias {bias.shape}")
    return Node(
        x.value + bias.value,
        ((x, lambda g: g), (bias, lambda g: g.sum(axis=0, keepdims=True))),
    )


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return Node(av @ bv, ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)))


def transpose(a: Node) -> Node:
    return Node(a.value.T, ((a, lambda g: g.T),))


def concat_rows(parts: Sequence[Node]) -> Node:
    """Stack matrices of equal width in argument order."""
    if len(parts) == 0:
        raise EmptyInput("concat_rows: no parts")
    width = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != width:
            raise DimensionMismatch(f"concat_rows: widths {[q.shape for q in parts]}")
    spans = []
    start = 0
    for p in parts:
        spans.append((start, start + p.shape[0]))
        start += p.shape[0]
    value = np.concatenate([p.value for p in parts], axis=0)

    def make_rule(lo, hi):
        return lambda g: g[lo:hi, :]

    return Node(value, tuple((p, make_rule(lo, hi)) for p, (lo, hi) in zip(parts, spans)))


def concat_cols(parts: Sequence[Node]) -> Node:
    if len(parts) == 0:
        raise EmptyInput("concat_cols: no parts")
    height = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != height:
            raise DimensionMismatch(f"concat_cols: heights {[q.shape for q in parts]}")
    spans = []
    start = 0
    for p in parts:
        spans.append((start, start + p.shape[1]))
        start += p.shape[1]
    value = np.concatenate([p.value for p in parts], axis=1)

    def make_rule(lo, hi):
        return lambda g: g[:, lo:hi]

    return Node(value, tuple((p, make_rule(lo, hi)) for p, (lo, hi) in zip(parts, spans)))


def slice_rows(a: Node, start: int, stop: int) -> Node:
    rows, _ = a.shape
    if not (0 <= start < stop <= rows):
        raise DimensionMismatch(f"slice_rows: [{start}:{stop}] of {a.shape}")

    def rule(g):
        out = np.zeros_like(a.value)
        out[start:stop, :] = g
        return out

    return Node(a.value[start:stop, :].copy(), ((a, rule),))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    _, cols = a.shape
    if not (0 <= start < stop <= cols):
        raise DimensionMismatch(f"slice_cols: [{start}:{stop}] of {a.shape}")

    def rule(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return out

    return Node(a.value[:, start:stop].copy(), ((a, rule),))


def mean_rows(x: Node) -> Node:
    """Column means as a 1xN row."""
    m = x.shape[0]
    if m < 1:
        raise EmptyInput("mean_rows: zero rows")
    value = x.value.mean(axis=0, keepdims=True)
    return Node(value, ((x, lambda g: np.repeat(g, m, axis=0) / m),))


def sum_all(x: Node) -> Node:
    value = np.array([[x.value.sum()]])
    return Node(value, ((x, lambda g: np.full_like(x.value, g[0, 0])),))


def softmax_rows(x: Node) -> Node:
    """Row-wise softmax, stabilized by row-max subtraction."""
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return Node(s, ((x, rule),))


def log_softmax_rows(x: Node) -> Node:
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_z
    soft = np.exp(out)

    def rule(g):
        return g - soft * g.sum(axis=1, keepdims=True)

    return Node(out, ((x, rule),))


def layer_norm_rows(x: Node, gain: Node, bias: Node, eps: float = LAYER_NORM_EPS) -> Node:
    """Per-row normalization: (x - mean) / sqrt(var + eps) * gain + bias."""
    rows, n = x.shape
    if n < 2:
        raise DimensionMismatch(f"layer_norm_rows: need width >= 2, got {n}")
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionMismatch(
            f"layer_norm_rows: gain {gain.shape}, bias {bias.shape} for width {n}"
        )
    v = x.value
    mu = v.mean(axis=1, keepdims=True)
    centered = v - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.value + bias.value

    def rule_x(g):
        gy = g * gain.value
        m1 = gy.mean(axis=1, keepdims=True)
        m2 = (gy * xhat).mean(axis=1, keepdims=True)
        return inv * (gy - m1 - xhat * m2)

    return Node(
        out,
        (
            (x, rule_x),
            (gain, lambda g: (g * xhat).sum(axis=0, keepdims=True)),
            (bias, lambda g: g.sum(axis=0, keepdims=True)),
        ),
    )


def gelu(x: Node) -> Node:
    """Exact (erf) GELU."""
    v = x.value
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    pdf = np.exp(-0.5 * v * v) * _INV_SQRT2PI
    return Node(v * cdf, ((x, lambda g: g * (cdf + v * pdf)),))


def l2_normalize_rows(x: Node) -> Node:
    """Scale each row to unit L2 norm."""
    norms = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ZeroVector("l2_normalize_rows: zero row")
    y = x.value / norms

    def rule(g):
        dots = (g * y).sum(axis=1, keepdims=True)
        return (g - y * dots) / norms

    return Node(y, ((x, rule),))


def cosine_similarity(u: Node, v: Node) -> Node:
    """Cosine of two 1xN rows, as a 1x1 node."""
    if u.shape != v.shape or u.shape[0] != 1:
        raise DimensionMismatch(f"cosine_similarity: {u.shape} vs {v.shape}")
    uv, vv = u.value, v.value
    nu = float(np.sqrt((uv * uv).sum()))
    nv = float(np.sqrt((vv * vv).sum()))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine_similarity: zero operand")
    c = float((uv * vv).sum() / (nu * nv))

    def rule_u(g):
        return g[0, 0] * (vv / (nu * nv) - c * uv / (nu * nu))

    def rule_v(g):
        return g[0, 0] * (uv / (nu * nv) - c * vv / (nv * nv))

    return Node(np.array([[c]]), ((u, rule_u), (v, rule_v)))


def frobenius_sq(x: Node) -> Node:
    """Sum of squared entries, as a 1x1 node."""
    v = x.value
    return Node(np.array([[(v * v).sum()]]), ((x, lambda g: 2.0 * v * g[0, 0]),))


# --------------------------------------------------------------------------
# gradient oracle
# --------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def format(self) -> str:
        lines = [f"{'parameter':<32}\t{'entries':>7}\t{'max_rel_err':>12}"]
        for e in self.entries:
            lines.append(f"{e.name:<32}\t{e.checked:>7}\t{e.max_rel_err:>12.3e}")
        lines.append(
            f"overall max relative error {self.max_rel_err:.3e} "
            f"({'PASS' if self.passed else 'FAIL'} at tol {self.tol:g})"
        )
        return "\n".join(lines)


def _named(params) -> list[tuple[str, Node]]:
    named = []
    for i, p in enumerate(params):
        if isinstance(p, Node):
            named.append((f"param{i}", p))
        else:
            named.append((str(p[0]), p[1]))
    return named


def finite_difference_check(
    f: Callable[[], Node],
    params,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central
    differences, entry by entry.

    `f` must rebuild its graph from the current `.value` of each parameter
    on every call. When `max_entries` is given, large parameters are probed
    on a seeded random subset of entries.
    """
    named = _named(params)
    for _, p in named:
        p.zero_grad()
    loss = f()
    if loss.shape != (1, 1):
        raise NotScalar(f"finite_difference_check: f returned shape {loss.shape}")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for name, p in named
    }

    rng = np.random.default_rng(seed)
    entries = []
    for name, p in named:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            f_plus = float(f().value[0, 0])
            flat[k] = orig - h
            f_minus = float(f().value[0, 0])
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(a_flat[k])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if rel > worst:
                worst = rel
        entries.append(GradCheckEntry(name=name, max_rel_err=worst, checked=len(idx)))
    return GradCheckReport(entries=entries, tol=tol)
