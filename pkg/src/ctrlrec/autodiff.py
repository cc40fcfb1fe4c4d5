"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Covers exactly the operations the recommendation model and the matrix
factorization completer need: matmul, broadcasting add/mul, concat, row
selection (embedding lookup), tanh, sigmoid, softmax, layer norm, and a
cross-entropy-from-logits loss, plus a few structural helpers (reshape,
swap_last, sum_all).

Gradients accumulate additively: calling backward() twice on the same graph
without clearing doubles every stored gradient.  Checked mode (default on)
asserts finiteness and shapes after every op; switch it off for long
training runs with set_checked(False).
"""

from __future__ import annotations

import numpy as np

CHECKED = True


def set_checked(flag: bool) -> None:
    global CHECKED
    CHECKED = bool(flag)


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


class DivergenceError(FloatingPointError):
    pass


class Node:
    """One value in the computation graph.

    value is an ndarray, parents are the producing inputs, _bw propagates an
    incoming gradient to the parents via the per-call gradient dict.
    """

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_bw")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False, bw=None):
        self.value = np.asarray(value)
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._bw = bw
        if CHECKED and self.value.dtype.kind == "f" and not np.all(np.isfinite(self.value)):
            raise DivergenceError(f"non-finite value produced by op '{op}'")

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


def leaf(value, requires_grad=True):
    return Node(np.asarray(value, dtype=np.float64), "leaf", requires_grad=requires_grad)


def const(value):
    return Node(np.asarray(value, dtype=np.float64), "const", requires_grad=False)


def _as_node(x):
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _as_node(a), _as_node(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.value.shape))
        acc(b, _unbroadcast(g, b.value.shape))

    return Node(out, "add", (a, b), bw=bw)


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def bw(g, acc):
        acc(a, _unbroadcast(g * b.value, a.value.shape))
        acc(b, _unbroadcast(g * a.value, b.value.shape))

    return Node(out, "mul", (a, b), bw=bw)


def neg(a):
    return mul(a, const(-1.0))


def sub(a, b):
    return add(a, neg(b))


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.value @ b.value
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g, acc):
        acc(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape))
        acc(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape))

    return Node(out, "matmul", (a, b), bw=bw)


def concat(nodes, axis=-1):
    nodes = [_as_node(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, acc):
        for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
            acc(n, piece)

    return Node(out, "concat", nodes, bw=bw)


def row_select(table, idx):
    """Embedding lookup: out[...] = table[idx[...], :]."""
    table = _as_node(table)
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= table.value.shape[0]):
        raise LookupError(f"row_select: index out of range for table {table.shape}")
    out = table.value[idx]

    def bw(g, acc):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, g)
        acc(table, gt)

    return Node(out, "row_select", (table,), bw=bw)


def tanh(a):
    a = _as_node(a)
    out = np.tanh(a.value)

    def bw(g, acc):
        acc(a, g * (1.0 - out * out))

    return Node(out, "tanh", (a,), bw=bw)


def sigmoid(a):
    a = _as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.value))

    def bw(g, acc):
        acc(a, g * out * (1.0 - out))

    return Node(out, "sigmoid", (a,), bw=bw)


def softmax(a):
    """Softmax over the last axis, max-subtracted for stability."""
    a = _as_node(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g, acc):
        gy = g * out
        acc(a, gy - out * gy.sum(axis=-1, keepdims=True))

    return Node(out, "softmax", (a,), bw=bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, bias = _as_node(x), _as_node(gain), _as_node(bias)
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = xhat * gain.value + bias.value
    n = x.value.shape[-1]

    def bw(g, acc):
        gy = g * gain.value
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        acc(x, gx)
        acc(gain, _unbroadcast(g * xhat, gain.value.shape))
        acc(bias, _unbroadcast(g, bias.value.shape))
        _ = n

    return Node(out, "layer_norm", (x, gain, bias), bw=bw)


def cross_entropy_logits(logits, labels):
    """Mean negative log-likelihood over rows of (N, V) logits."""
    logits = _as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.value.shape[0],):
        raise ShapeError("cross_entropy_logits", logits.shape, labels.shape)
    shifted = logits.value - logits.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(labels.shape[0])
    nll = lse - shifted[rows, labels]
    out = nll.mean()
    probs = np.exp(shifted - lse[:, None])

    def bw(g, acc):
        gl = probs.copy()
        gl[rows, labels] -= 1.0
        acc(logits, gl * (g / labels.shape[0]))

    return Node(out, "cross_entropy_logits", (logits,), bw=bw)


def reshape(a, shape):
    a = _as_node(a)
    out = a.value.reshape(shape)

    def bw(g, acc):
        acc(a, g.reshape(a.value.shape))

    return Node(out, "reshape", (a,), bw=bw)


def swap_last(a):
    """Transpose the last two axes."""
    a = _as_node(a)
    out = np.swapaxes(a.value, -1, -2)

    def bw(g, acc):
        acc(a, np.swapaxes(g, -1, -2))

    return Node(out, "swap_last", (a,), bw=bw)


def select_steps(a, idx):
    """Gather positions along axis 1 of a (B, T, ...) array."""
    a = _as_node(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim < 2:
        raise ShapeError("select_steps", a.shape)
    out = a.value[:, idx]

    def bw(g, acc):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (slice(None), idx), g)
        acc(a, ga)

    return Node(out, "select_steps", (a,), bw=bw)


def sum_all(a):
    a = _as_node(a)
    out = a.value.sum()

    def bw(g, acc):
        acc(a, np.broadcast_to(g, a.value.shape).copy())

    return Node(out, "sum_all", (a,), bw=bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo(loss):
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss):
    """Accumulate gradients from a scalar loss into every reachable node.

    Returns the map {leaf node: gradient from this call} over reachable
    parameter leaves.  Stored .grad fields accumulate across calls.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    grads = {id(loss): np.ones((), dtype=loss.value.dtype)}
    nodes = {id(loss): loss}

    def acc(node, g):
        if not node.requires_grad:
            return
        key = id(node)
        nodes[key] = node
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    leaf_map = {}
    for node in reversed(_topo(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        g = np.broadcast_to(g, node.value.shape) if g.shape != node.value.shape else g
        if node._bw is not None:
            node._bw(g, acc)
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad = node.grad + g
            if not node.parents:
                leaf_map[node] = np.array(g)
    return leaf_map


# ---------------------------------------------------------------------------
# optimizer


def adam_init(params):
    """Fresh Adam state for a {name: ndarray} parameter dict."""
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.  Returns new (params, state) dicts."""
    t = state["t"] + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        if CHECKED and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter '{k}'")
        m = beta1 * state["m"][k] + (1 - beta1) * g
        v = beta2 * state["v"][k] + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, {"t": t, "m": new_m, "v": new_v}
