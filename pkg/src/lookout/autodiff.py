"""Dense-tensor reverse-mode automatic differentiation on float64 numpy arrays.

Deliberately minimal: exactly the operations the fusion network needs, no
broadcasting rules beyond numpy's, no views (every op produces a fresh
array). Gradients are accumulated into ``Tensor.grad`` by ``backward()``.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "hardtanh",
    "softmax",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "conv2d",
    "dropout",
    "binary_cross_entropy",
    "kl_to_standard_normal",
    "multi_head_attention",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 ndarray plus an optional gradient buffer.

    ``requires_grad`` marks leaves (parameters); interior nodes inherit it
    from their parents at construction time.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                if node is not self:
                    node.grad = None  # interior buffer, consumed

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar used by loss code and tests
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


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # grads are never mutated in place, so sharing buffers between nodes is fine
    t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not _GRAD_ENABLED:
        return Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if not tracked:
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tracked
    out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to produce it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's batched-matmul leading-dim broadcasting."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects tensors with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g @ _swap_last(b.data), a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(_swap_last(a.data) @ g, b.data.shape))

    return _node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * (x.data > 0.0))

    return _node(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ev = np.exp(d[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _node(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _node(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    """Natural log; callers are responsible for keeping inputs positive."""
    x = _lift(x)
    out = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _node(out, (x,), backward)


def hardtanh(x: Tensor, lo: float = -10.0, hi: float = 10.0) -> Tensor:
    """Elementwise clamp; gradient is 1 strictly inside (lo, hi), 0 outside."""
    if not lo < hi:
        raise ValueError(f"hardtanh requires lo < hi, got {lo} >= {hi}")
    x = _lift(x)
    out = np.clip(x.data, lo, hi)

    def backward(g):
        _accumulate(x, g * ((x.data > lo) & (x.data < hi)))

    return _node(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (g - inner))

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _node(out, (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        n = x.data.shape[axis]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _lift(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _node(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _lift(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        _accumulate(x, np.ascontiguousarray(g.transpose(inverse)))

    return _node(out, (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("concat requires at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad or t._parents:
                _accumulate(t, np.ascontiguousarray(piece))

    return _node(out, tuple(ts), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _lift(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW layout, square kernel, via im2col.

    x: (B, C, H, W); w: (O, C, k, k); b: (O,).
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    bsz, cin, h, wid = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if cin != cin_w or k != k2:
        raise ValueError(f"conv2d weight shape {w.data.shape} incompatible with input {x.data.shape}")
    if b.data.shape != (cout,):
        raise ValueError(f"conv2d bias shape {b.data.shape} != ({cout},)")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wid + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d output would be empty; check kernel/stride/padding")

    if padding:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, oh, ow, k, k)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz, oh * ow, cin * k * k
    )
    w2 = w.data.reshape(cout, cin * k * k)
    out = cols @ w2.T  # (B, oh*ow, O)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(bsz, cout, oh, ow)
    out += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz, oh * ow, cout)
        if b.requires_grad or b._parents:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad or w._parents:
            flat_cols = cols.reshape(bsz * oh * ow, cin * k * k)
            flat_g = g2.reshape(bsz * oh * ow, cout)
            _accumulate(w, (flat_g.T @ flat_cols).reshape(w.data.shape))
        if x.requires_grad or x._parents:
            dcols = g2 @ w2  # (B, oh*ow, C*k*k)
            dcols = dcols.reshape(bsz, oh, ow, cin, k, k)
            dpad = np.zeros(
                (bsz, cin, h + 2 * padding, wid + 2 * padding), dtype=np.float64
            )
            for ki in range(k):
                for kj in range(k):
                    dpad[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                        dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                    )
            if padding:
                dpad = dpad[:, :, padding:-padding, padding:-padding]
            _accumulate(x, np.ascontiguousarray(dpad))

    return _node(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# stochastic / composite ops


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted-scaling dropout; identity when not training or p == 0."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in train mode requires an rng stream")
    x = _lift(x)
    keep = 1.0 - p
    mask = (rng.random(x.data.shape) >= p) / keep
    return mul(x, Tensor(mask))


def binary_cross_entropy(p: Tensor, y, eps: float = 1e-7) -> Tensor:
    """Mean BCE; probabilities are clamped to [eps, 1-eps] before the log."""
    p = _lift(p)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.data.shape:
        raise ValueError(f"labels shape {y.shape} != predictions shape {p.data.shape}")
    pc = hardtanh(p, eps, 1.0 - eps)
    term = add(mul(Tensor(y), log(pc)), mul(Tensor(1.0 - y), log(sub(1.0, pc))))
    return neg(tensor_mean(term))


def kl_to_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over all elements."""
    mu, logvar = _lift(mu), _lift(logvar)
    if mu.data.shape != logvar.data.shape:
        raise ValueError(
            f"mu shape {mu.data.shape} != logvar shape {logvar.data.shape}"
        )
    inner = sub(add(1.0, logvar), add(mul(mu, mu), exp(logvar)))
    return mul(tensor_sum(inner), -0.5)


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    num_heads: int,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention with learned projections.

    Token tensors are (..., n, d); the four projections are bias-free (d, d)
    matrices. Returns the attended tokens, and optionally the per-head
    attention weights (..., heads, n, n).
    """
    d = q_in.data.shape[-1]
    if d % num_heads != 0:
        raise ValueError(f"model dim {d} not divisible by num_heads {num_heads}")
    if k_in.data.shape != q_in.data.shape or v_in.data.shape != q_in.data.shape:
        raise ValueError("attention expects Q, K, V token tensors of equal shape")
    hd = d // num_heads
    n = q_in.data.shape[-2]
    lead = q_in.data.shape[:-2]

    def split_heads(t: Tensor) -> Tensor:
        t = reshape(t, lead + (n, num_heads, hd))
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(t, perm)  # (..., heads, n, hd)

    q = split_heads(matmul(q_in, wq))
    k = split_heads(matmul(k_in, wk))
    v = split_heads(matmul(v_in, wv))

    scores = mul(matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))), 1.0 / np.sqrt(hd))
    weights = softmax(scores, axis=-1)
    heads = matmul(weights, v)  # (..., heads, n, hd)
    perm_back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    merged = reshape(transpose(heads, perm_back), lead + (n, d))
    out = matmul(merged, wo)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Ordered map from dotted parameter name to Tensor.

    Iteration is always lexicographic by name, so checkpointing and the
    optimizer see a deterministic order regardless of insertion order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, t in self.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} != {t.data.shape}"
                )
            t.data = arr.copy()
