"""Reverse-mode differentiation over dense float64 arrays.

A Node wraps a value, its parents, and a vector-Jacobian closure; backward
visits each node exactly once in reverse topological order and accumulates
into leaf gradients. The operator set is exactly what the training losses
need. Non-smooth ops record how close their inputs came to a kink so the
finite-difference harness can skip unreliable draws.

Subgradient conventions: |x| and the rectifier take gradient 0 at 0; max
routes its gradient to the lowest argmax index on ties.
"""
from __future__ import annotations

import json

import numpy as np

_SQRT_GRAD_FLOOR = 1e-24


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "op", "grad", "_vjp", "kink_margin",
                 "_consumed")

    def __init__(self, value, parents=(), op="const", vjp=None,
                 kink_margin=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self.grad = None
        self._vjp = vjp
        self.kink_margin = kink_margin
        self._consumed = False

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def leaf(value) -> Node:
    """Parameter node; read .grad after backward."""
    return Node(value, op="leaf")


def constant(value) -> Node:
    return Node(value, op="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _toposort(root: Node) -> list[Node]:
    order = []
    seen = set()
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into .grad for every node reachable from
    the scalar root. A graph can be walked once; reuse is rejected."""
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    order = _toposort(root)
    for node in order:
        if node._consumed:
            raise RuntimeError("graph already consumed by a previous backward call")
    for node in order:
        node.grad = np.zeros_like(node.value)
        node._consumed = True
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or not node.parents:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None:
                parent.grad = parent.grad + g


def min_kink_margin(root: Node) -> float:
    """Smallest recorded distance to a non-smooth point in the graph."""
    margin = np.inf
    for node in _toposort(root):
        if node.kink_margin is not None:
            margin = min(margin, node.kink_margin)
    return margin


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _kink_margin_of(values: np.ndarray) -> float:
    """Distance to the nearest kink, ignoring exact zeros: an exactly-zero
    gap means the input is structurally pinned to the kink, where the
    composition is locally constant and the subgradient convention agrees
    with finite differences."""
    a = np.abs(np.asarray(values))
    nz = a[a > 0.0]
    return float(nz.min()) if nz.size else np.inf


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(a.value + b.value, (a, b), "add",
                lambda g: (_unbroadcast(g, a.value.shape),
                           _unbroadcast(g, b.value.shape)))


def subtract(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(a.value - b.value, (a, b), "subtract",
                lambda g: (_unbroadcast(g, a.value.shape),
                           _unbroadcast(-g, b.value.shape)))


def multiply(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(a.value * b.value, (a, b), "multiply",
                lambda g: (_unbroadcast(g * b.value, a.value.shape),
                           _unbroadcast(g * a.value, b.value.shape)))


def scalar_multiply(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), "scalar_multiply", lambda g: (g * c,))


def affine(weight: Node, bias, x) -> Node:
    """x @ weight + bias for a (B, n_in) batch; bias may be None."""
    weight, x = as_node(weight), as_node(x)
    if x.value.ndim != 2 or weight.value.ndim != 2 \
            or x.value.shape[1] != weight.value.shape[0]:
        raise ValueError(f"affine shape mismatch: x {x.value.shape}, "
                         f"weight {weight.value.shape}")
    if bias is None:
        return Node(x.value @ weight.value, (weight, x), "affine",
                    lambda g: (x.value.T @ g, g @ weight.value.T))
    bias = as_node(bias)
    return Node(x.value @ weight.value + bias.value, (weight, bias, x), "affine",
                lambda g: (x.value.T @ g, g.sum(axis=0), g @ weight.value.T))


def rectified_linear(x) -> Node:
    x = as_node(x)
    mask = x.value > 0.0
    margin = _kink_margin_of(x.value)
    return Node(np.where(mask, x.value, 0.0), (x,), "relu",
                lambda g: (g * mask,), kink_margin=margin)


def absolute(x) -> Node:
    x = as_node(x)
    sign = np.sign(x.value)
    margin = _kink_margin_of(x.value)
    return Node(np.abs(x.value), (x,), "abs",
                lambda g: (g * sign,), kink_margin=margin)


def sqrt(x) -> Node:
    """Square root; the gradient denominator is floored at sqrt(1e-24) so it
    stays finite at 0."""
    x = as_node(x)
    if (x.value < 0.0).any():
        raise ValueError("sqrt requires non-negative input; clamp first")
    out = np.sqrt(x.value)
    denom = 2.0 * np.sqrt(np.maximum(x.value, _SQRT_GRAD_FLOOR))
    return Node(out, (x,), "sqrt", lambda g: (g / denom,))


def sigmoid(x) -> Node:
    x = as_node(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    return Node(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def clamp_min(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    mask = x.value > c
    margin = _kink_margin_of(x.value - c)
    return Node(np.maximum(x.value, c), (x,), "clamp_min",
                lambda g: (g * mask,), kink_margin=margin)


def maximum(a, b) -> Node:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_node(a), as_node(b)
    take_a = a.value >= b.value
    margin = _kink_margin_of(a.value - b.value)
    return Node(np.maximum(a.value, b.value), (a, b), "maximum",
                lambda g: (_unbroadcast(g * take_a, a.value.shape),
                           _unbroadcast(g * ~take_a, b.value.shape)),
                kink_margin=margin)


def concatenate(a, b) -> Node:
    """Concatenate along the last axis."""
    a, b = as_node(a), as_node(b)
    na = a.value.shape[-1]
    return Node(np.concatenate([a.value, b.value], axis=-1), (a, b), "concat",
                lambda g: (g[..., :na], g[..., na:]))


def dot(a, b) -> Node:
    """Row-wise inner product over the last axis."""
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"dot shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Node(np.sum(a.value * b.value, axis=-1), (a, b), "dot",
                lambda g: (g[..., None] * b.value, g[..., None] * a.value))


def squared_norm(x) -> Node:
    """Row-wise squared L2 norm over the last axis."""
    x = as_node(x)
    return Node(np.sum(x.value * x.value, axis=-1), (x,), "squared_norm",
                lambda g: (2.0 * g[..., None] * x.value,))


def mean(x) -> Node:
    """Mean of all entries (scalar output)."""
    x = as_node(x)
    n = x.value.size
    return Node(np.mean(x.value), (x,), "mean",
                lambda g: (np.full_like(x.value, float(g) / n),))


def sum_over_axis(x) -> Node:
    """Sum over the last axis."""
    x = as_node(x)
    return Node(np.sum(x.value, axis=-1), (x,), "sum_over_axis",
                lambda g: (np.broadcast_to(g[..., None], x.value.shape).copy(),))


def mean_over_axis(x) -> Node:
    """Mean over the last axis."""
    x = as_node(x)
    n = x.value.shape[-1]
    return Node(np.mean(x.value, axis=-1), (x,), "mean_over_axis",
                lambda g: (np.broadcast_to(g[..., None] / n, x.value.shape).copy(),))


def max_over_axis(x) -> Node:
    """Max over the last axis; the gradient goes to the lowest argmax index."""
    x = as_node(x)
    v = x.value
    idx = np.argmax(v, axis=-1)
    if v.shape[-1] >= 2:
        top2 = np.sort(v, axis=-1)[..., -2:]
        margin = _kink_margin_of(top2[..., 1] - top2[..., 0])
    else:
        margin = np.inf

    def vjp(g):
        gx = np.zeros_like(v)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return Node(np.max(v, axis=-1), (x,), "max_over_axis", vjp,
                kink_margin=margin)


class _SgFreeze:
    """Capture/replay of stop-gradient values for the finite-difference
    harness: the derivative a stop-gradient defines holds the blocked branch
    constant, so difference quotients must evaluate with the center-point
    branch values."""

    __slots__ = ("capture", "replay", "idx")

    def __init__(self):
        self.capture = None
        self.replay = None
        self.idx = 0


_SG = _SgFreeze()


def stop_gradient(x) -> Node:
    """Identity forward; blocks all gradient flow."""
    x = as_node(x)
    if _SG.replay is not None:
        value = _SG.replay[_SG.idx]
        _SG.idx += 1
        return Node(value, (), "stop_gradient")
    if _SG.capture is not None:
        _SG.capture.append(x.value)
    return Node(x.value, (), "stop_gradient")


def indicator_positive(x) -> Node:
    """Detached 0/1 mask (x > 0); records closeness to the threshold."""
    x = as_node(x)
    margin = _kink_margin_of(x.value)
    return Node((x.value > 0.0).astype(np.float64), (), "indicator",
                kink_margin=margin)


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.value.shape
    return Node(x.value.reshape(shape), (x,), "reshape",
                lambda g: (g.reshape(old),))


def gather_rows(x, indices) -> Node:
    """Select first-axis rows by a constant index array (duplicates allowed);
    the gradient scatter-adds back."""
    x = as_node(x)
    indices = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, indices, g)
        return (gx,)

    return Node(x.value[indices], (x,), "gather_rows", vjp)


def take_along_last(x, indices) -> Node:
    """Gather along the last axis with a constant index array."""
    x = as_node(x)
    indices = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x.value)
        flat_g = g.reshape(-1, g.shape[-1])
        flat_idx = np.broadcast_to(indices, g.shape).reshape(-1, g.shape[-1])
        flat_gx = gx.reshape(-1, gx.shape[-1])
        rows = np.repeat(np.arange(flat_gx.shape[0]), flat_idx.shape[1])
        np.add.at(flat_gx, (rows, flat_idx.ravel()), flat_g.ravel())
        return (flat_gx.reshape(x.value.shape),)

    return Node(np.take_along_axis(x.value, indices, axis=-1), (x,),
                "take_along_last", vjp)


def cummax_last(x) -> Node:
    """Running maximum along the last axis; each output's gradient is routed
    to the position that last raised the running max."""
    x = as_node(x)
    v = x.value
    length = v.shape[-1]
    out = np.maximum.accumulate(v, axis=-1)
    idx = np.zeros(v.shape, dtype=np.int64)
    margin = np.inf
    for j in range(1, length):
        take_new = v[..., j] > out[..., j - 1]
        idx[..., j] = np.where(take_new, j, idx[..., j - 1])
        margin = min(margin, _kink_margin_of(v[..., j] - out[..., j - 1]))

    def vjp(g):
        gx = np.zeros_like(v)
        flat_g = g.reshape(-1, length)
        flat_idx = idx.reshape(-1, length)
        flat_gx = gx.reshape(-1, length)
        rows = np.repeat(np.arange(flat_gx.shape[0]), length)
        np.add.at(flat_gx, (rows, flat_idx.ravel()), flat_g.ravel())
        return (flat_gx.reshape(v.shape),)

    return Node(out, (x,), "cummax_last", vjp,
                kink_margin=margin if length > 1 else None)


def slice_last(x, start: int, stop: int) -> Node:
    x = as_node(x)

    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[..., start:stop] = g
        return (gx,)

    return Node(x.value[..., start:stop], (x,), "slice_last", vjp)


class ParamStore:
    """Named trainable arrays plus per-parameter Adam moment state."""

    def __init__(self, values: dict):
        self.values = {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}
        self.m = {k: np.zeros_like(v) for k, v in self.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.values.items()}
        self.step = 0

    def leaves(self) -> dict:
        """Fresh leaf nodes viewing the current parameter arrays."""
        return {k: leaf(v) for k, v in self.values.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore({k: v.copy() for k, v in self.values.items()})
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out


def adam_step(params: ParamStore, gradients: dict, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected adaptive-moment update, in place and deterministic."""
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in gradients.items():
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.values[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params: ParamStore, gradients: dict, lr: float) -> None:
    """Plain gradient descent, in place."""
    params.step += 1
    for name, g in gradients.items():
        if g is None:
            continue
        params.values[name] -= lr * np.asarray(g, dtype=np.float64)


def params_to_json_dict(params: ParamStore) -> dict:
    return {name: value.tolist() for name, value in params.values.items()}


def params_from_json_dict(doc: dict) -> ParamStore:
    return ParamStore({name: np.asarray(value, dtype=np.float64)
                       for name, value in doc.items()})


def save_params_json(params: ParamStore, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_json_dict(params), fh, sort_keys=True)
        fh.write("\n")


def load_params_json(path) -> ParamStore:
    with open(path) as fh:
        return params_from_json_dict(json.load(fh))


def central_difference(f, values: dict, name: str, flat_index: int,
                       h: float = 1e-5) -> float:
    """Two-sided difference of f({name: array}) -> float in one coordinate."""
    plus = {k: v.copy() for k, v in values.items()}
    minus = {k: v.copy() for k, v in values.items()}
    plus[name].flat[flat_index] += h
    minus[name].flat[flat_index] -= h
    return (f(plus) - f(minus)) / (2.0 * h)


def gradient_check(build, values: dict, rng: np.random.Generator,
                   n_coords: int = 8, h: float = 1e-5,
                   kink_tol: float = 1e-6):
    """Compare autodiff against central differences at one parameter draw.

    build({name: Node}) must return the scalar loss Node. Stop-gradient
    branch values are captured at the center point and replayed in every
    difference evaluation, matching the derivative those branches define.
    Returns (max_rel_err, min_kink_margin), or None when the draw lands
    within kink_tol of a non-smooth point and cannot be checked reliably.
    """
    leaves = {k: leaf(v.copy()) for k, v in values.items()}
    _SG.capture = []
    try:
        root = build(leaves)
    finally:
        frozen = _SG.capture
        _SG.capture = None
    margin = min_kink_margin(root)
    if margin < kink_tol:
        return None
    backward(root)

    def f(vals):
        _SG.replay = frozen
        _SG.idx = 0
        try:
            node = build({k: leaf(v) for k, v in vals.items()})
        finally:
            _SG.replay = None
        return float(node.value)

    sizes = [(name, v.size) for name, v in values.items()]
    total = sum(s for _, s in sizes)
    max_rel = 0.0
    for _ in range(n_coords):
        pick = int(rng.integers(total))
        for name, size in sizes:
            if pick < size:
                break
            pick -= size
        fd = central_difference(f, values, name, pick, h)
        grad = leaves[name].grad
        ad = float(grad.flat[pick]) if grad is not None else 0.0
        rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel, margin
