"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional tape closure; building an
expression records the graph, and ``loss.backward()`` walks it once in
reverse topological order, accumulating gradients on every leaf created with
``parameter``. Primitives cover exactly what the networks here need; anything
exotic can be added through ``custom_op``, which registers a forward/VJP pair
after a shape self-check.

With debug checks enabled (``set_debug_checks(True)`` or RODRI_DEBUG=1),
every op output is verified to be finite.
"""

import math
import os

import numpy as np

from .errors import InvalidLoss, ShapeError

_DEBUG = os.environ.get("RODRI_DEBUG", "0").strip().lower() in {"1", "true", "on", "yes"}


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf."""
        if self.data.size != 1:
            raise InvalidLoss(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar; every overload routes through the module primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.asarray(data), requires_grad=True, op="parameter")


def constant(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=False, op="constant")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _node(data, parents, backward, op) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_op(a, b, fwd, bwd_a, bwd_b, op):
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(bwd_a(g), a.shape))
        _accumulate(b, _unbroadcast(bwd_b(g), b.shape))

    return _node(data, (a, b), backward, op)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(a, b, np.add, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(a, b, np.subtract, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _node(a.data * s, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(data, (a, b), backward, "matmul")


def _parse_einsum(spec):
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for sub_ in (sa, sb, out):
        if len(set(sub_)) != len(sub_):
            raise ShapeError(f"einsum {spec!r}: repeated index within one operand")
    for name, sub_, other in (("first", sa, sb), ("second", sb, sa)):
        missing = set(sub_) - set(out) - set(other)
        if missing:
            raise ShapeError(f"einsum {spec!r}: {name} operand index {missing} not recoverable")
    return sa, sb, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; gradients come from swapping the output subscript
    with the differentiated operand's."""
    sa, sb, out = _parse_einsum(spec)
    try:
        data = np.einsum(spec, a.data, b.data)
    except ValueError:
        raise ShapeError(
            f"einsum {spec!r}: incompatible shapes {a.shape} and {b.shape}"
        ) from None

    def backward(g):
        _accumulate(a, np.einsum(f"{out},{sb}->{sa}", g, b.data))
        _accumulate(b, np.einsum(f"{out},{sa}->{sb}", g, a.data))

    return _node(data, (a, b), backward, "einsum")


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return _node(data, (a,), backward, "sum")


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, a.shape) / count)

    return _node(data, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward, "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _node(data.copy(), (a,), backward, "broadcast_to")


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accumulate(t, g[tuple(index)])

    return _node(data, tensors, backward, "concat")


def take(a: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); each input element is selected at
    most once, so the backward scatter is a plain assignment."""
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accumulate(a, full)

    return _node(data, (a,), backward, "take")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def sin(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * np.cos(a.data))

    return _node(np.sin(a.data), (a,), backward, "sin")


def cos(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g * np.sin(a.data))

    return _node(np.cos(a.data), (a,), backward, "cos")


def linear(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """x @ weight.T + bias with weight (out, in) and any leading batch dims."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y2 = x2 @ weight.data.T
    if bias is not None:
        y2 = y2 + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        _accumulate(x, (g2 @ weight.data).reshape(x.shape))
        _accumulate(weight, g2.T @ x2)
        if bias is not None:
            _accumulate(bias, g2.sum(axis=0))

    return _node(y2.reshape(*lead, weight.shape[0]), parents, backward, "linear")


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, n_axes: int = 1) -> Tensor:
    """Normalize jointly over the last n_axes, then apply the learned
    per-entry affine. gamma/beta must match a trailing slice of x.shape
    covering at least the normalized axes; extra leading affine axes (e.g. a
    per-link axis) broadcast against the batch."""
    if gamma.shape != beta.shape or gamma.ndim < n_axes or gamma.ndim > x.ndim:
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} invalid for "
            f"input {x.shape} with {n_axes} normalized axes"
        )
    if gamma.shape != x.shape[x.ndim - gamma.ndim :]:
        raise ShapeError(
            f"layer_norm: affine shape {gamma.shape} is not a suffix of input shape {x.shape}"
        )
    axes = tuple(range(x.ndim - n_axes, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv

    def backward(g):
        _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        _accumulate(beta, _unbroadcast(g, beta.shape))
        gx = g * gamma.data
        gx = inv * (
            gx
            - gx.mean(axis=axes, keepdims=True)
            - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
        )
        _accumulate(x, gx)

    return _node(gamma.data * xhat + beta.data, (x, gamma, beta), backward, "layer_norm")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (a,), backward, "softmax")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = sub(pred, target)
    return mean_(mul(diff, diff))


def attention_core(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled-dot-product multi-head attention on already-projected
    (N, T, d_attn) tensors, composed from primitives."""
    n, t, d_attn = q.shape
    if d_attn % num_heads != 0:
        raise ShapeError(f"attention width {d_attn} not divisible by {num_heads} heads")
    dh = d_attn // num_heads

    def split_heads(x):
        return transpose(reshape(x, (n, t, num_heads, dh)), (0, 2, 1, 3))

    scores = scale(
        matmul(split_heads(q), transpose(split_heads(k), (0, 1, 3, 2))), 1.0 / math.sqrt(dh)
    )
    ctx = matmul(softmax(scores), split_heads(v))
    return reshape(transpose(ctx, (0, 2, 1, 3)), (n, t, d_attn))


def multi_head_attention(tokens, wq, bq, wk, wv, bv, wo, bo, num_heads: int):
    """Multi-head self-attention over (N, T, d_model) tokens. The q/k/v
    projections map d_model -> d_attn and the output projection maps d_attn
    back to wo's output width. The k projection takes no bias: softmax is
    invariant to it, so the parameter would be permanently gradient-free."""
    ctx = attention_core(
        linear(tokens, wq, bq), linear(tokens, wk, None), linear(tokens, wv, bv), num_heads
    )
    return linear(ctx, wo, bo)


def custom_op(name: str, forward, vjp, probes):
    """Register a (forward, vjp) pair as a tape op.

    ``forward(*arrays) -> array`` and ``vjp(grad_out, *arrays) -> tuple`` of
    per-input gradients (None for non-differentiable inputs). The pair is
    self-checked on the supplied probe arrays at registration time; a VJP
    whose gradient shapes disagree with its inputs is rejected immediately.
    Returns a callable over Tensors that behaves like any built-in primitive.
    """
    probe_out = forward(*probes)
    probe_grads = vjp(np.ones_like(probe_out), *probes)
    if not isinstance(probe_grads, (tuple, list)) or len(probe_grads) != len(probes):
        raise ShapeError(
            f"custom op {name!r}: vjp returned {len(probe_grads)} gradients "
            f"for {len(probes)} inputs"
        )
    for i, (g, p) in enumerate(zip(probe_grads, probes)):
        if g is not None and g.shape != np.asarray(p).shape:
            raise ShapeError(
                f"custom op {name!r}: gradient {i} has shape {g.shape}, "
                f"input has shape {np.asarray(p).shape}"
            )

    def apply(*tensors):
        datas = tuple(t.data for t in tensors)
        out = forward(*datas)

        def backward(g):
            grads = vjp(g, *datas)
            for t, gt in zip(tensors, grads):
                if gt is not None:
                    _accumulate(t, gt)

        return _node(out, tensors, backward, name)

    return apply
