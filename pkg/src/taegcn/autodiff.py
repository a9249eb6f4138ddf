"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and records the operation graph as
expressions are built. Calling :meth:`Tensor.backward` on a scalar result
walks the graph once in reverse topological order and accumulates
gradients into every reachable leaf that was created with
``requires_grad=True``. Gradients add up across repeated backward calls;
:meth:`Adam.step` resets them after applying an update.

All values are stored as C-contiguous (row major) float64 arrays and all
operations are deterministic, so identical inputs reproduce identical
results bit for bit.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus an optional gradient accumulator.

    Leaves are built directly from array data; interior nodes are produced
    by the operations below and keep references to their parents together
    with a vector-Jacobian closure used during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return absolute(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._vjp = None
    return t


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(a.data / b.data, (a, b), vjp)


# -- activations ----------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _result(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # branch on sign so neither exp overflows
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.maximum(x, 0.0))),
                   np.exp(np.minimum(x, 0.0)) / (1.0 + np.exp(np.minimum(x, 0.0))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), vjp)


def absolute(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), vjp)


# -- shape manipulation ----------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc

    def vjp(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), vjp)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _result(out, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _result(out, (a,), vjp)


def narrow(a, key) -> Tensor:
    """Basic slicing (ints, slices, and Ellipsis; no fancy indexing)."""
    a = _as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (k is Ellipsis or isinstance(k, (int, np.integer, slice))):
            raise ShapeError(f"unsupported index component {k!r}; use ints and slices")
    out = a.data[key]

    def vjp(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _result(out, (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes incompatible: {[p.shape for p in parts]}") from exc
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(parts), vjp)


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _result(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.shape).copy(),)

    return _result(out, (a,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style broadcasting of leading batch axes.

    Last two axes multiply: [..., m, k] @ [..., k, n] -> [..., m, n].
    Outputs narrower than 4 columns go through an explicit product-and-sum
    instead of BLAS: the small-n GEMM kernels blend rows into micro-panels
    whose rounding depends on row position, which would break bit-exact
    row-relabeling invariance in the layers that map onto nodes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    try:
        if b.shape[-1] < 4:
            out = (a.data[..., :, :, None] * b.data[..., None, :, :]).sum(axis=-2)
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), vjp)


def node_mix(adj, feats) -> Tensor:
    """Weighted sum of feature rows: out[..., i, q] = sum_j adj[..., i, j] * feats[..., j, q].

    The reduction sorts each addend list by value before summing so the
    result is invariant, bit for bit, under a simultaneous permutation of
    the row index sets of ``adj`` and ``feats``.
    """
    adj, feats = _as_tensor(adj), _as_tensor(feats)
    if adj.ndim < 2 or feats.ndim < 2:
        raise ShapeError(f"node_mix operands need >= 2 dims, got {adj.shape} and {feats.shape}")
    if adj.shape[-1] != adj.shape[-2]:
        raise ShapeError(f"node_mix adjacency must be square, got {adj.shape}")
    if adj.shape[-1] != feats.shape[-2]:
        raise ShapeError(f"node_mix row counts differ: {adj.shape} vs {feats.shape}")
    if adj.shape[:-2] != feats.shape[:-2]:
        raise ShapeError(f"node_mix leading dimensions differ: {adj.shape} vs {feats.shape}")
    prod = adj.data[..., :, :, None] * feats.data[..., None, :, :]
    out = np.sort(prod, axis=-2).sum(axis=-2)

    def vjp(g):
        g_adj = np.matmul(g, np.swapaxes(feats.data, -1, -2))
        g_feats = np.matmul(np.swapaxes(adj.data, -1, -2), g)
        return g_adj, g_feats

    return _result(out, (adj, feats), vjp)


def masked_softmax(scores, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is True.

    Disallowed positions are excluded from both the max subtraction and the
    normalizing sum, so their probability is exactly 0.0 rather than a small
    residual. Rows with no allowed position are rejected.
    """
    scores = _as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if scores.ndim < 2:
        raise ShapeError(f"masked_softmax expects >= 2 dims, got {scores.shape}")
    if mask.shape != scores.shape[-mask.ndim:]:
        raise ShapeError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    if not mask.any(axis=-1).all():
        bad = np.argwhere(~mask.any(axis=-1)).ravel().tolist()
        raise ContractError(f"masked_softmax: fully masked row(s) {bad}")
    walled = np.where(mask, scores.data, -np.inf)
    peak = walled.max(axis=-1, keepdims=True)
    weights = np.exp(walled - peak)  # exp(-inf) == 0.0 exactly
    total = weights.sum(axis=-1, keepdims=True)
    out = weights / total

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (scores,), vjp)


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into each reachable requires_grad leaf.

    The seed must be a scalar (single-element tensor). Repeated calls keep
    adding into ``.grad``; leaves that the loss does not depend on are left
    untouched (an absent gradient reads as zero).
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative depth-first post-order to avoid recursion limits
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            held = grads.get(id(parent))
            if held is None:
                grads[id(parent)] = pg
            else:
                grads[id(parent)] = held + pg


# -- parameters and optimizer ---------------------------------------------------


class ParameterStore:
    """Named collection of trainable tensors.

    Names are dot-separated paths; iteration is always in lexicographic
    name order so optimizer updates and serialization are deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        if not tensor.requires_grad:
            raise ContractError(f"parameter {name!r} must have requires_grad=True")
        self._params[name] = tensor
        return tensor

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def parameter_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ContractError(
                f"parameter name mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, tensor in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != expected {tensor.shape}")
            tensor.data = np.ascontiguousarray(arr)


class Adam:
    """Adam with decoupled-from-nothing classic L2: the penalty joins the
    gradient (g <- g + weight_decay * theta) before the moment updates.

    First/second moment estimates live per parameter; the step counter is
    shared. Parameters without a gradient are treated as having a zero
    gradient (so weight decay still applies). Gradients are cleared after
    every step.
    """

    def __init__(self, store: ParameterStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-4):
        self.store = store
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / correct1
            v_hat = v / correct2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Trainable tensor drawn uniformly from +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
