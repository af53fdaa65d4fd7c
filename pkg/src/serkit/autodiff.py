"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run engine: every operation on a Tensor appends a node to the
implicit compute graph (parents + a backward closure that knows the exact
local gradient). Calling ``backward()`` on a scalar output walks the graph
once in reverse topological order and accumulates gradients into every
tensor that has ``requires_grad`` set.

All buffers are float64 and row-major. Every op validates that its output
is finite; a NaN/Inf raises :class:`NumericError` naming the node, so a
diverging forward pass fails loudly instead of poisoning gradients.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_node_ids = itertools.count()


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 tensor with optional gradient tracking.

    Values are immutable once consumed by the forward pass (read-only
    sharing across threads is safe); parameter tensors are mutated only
    between steps by the optimizer, which owns write access.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._id = next(_node_ids)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph machinery -------------------------------------------------------

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad: np.ndarray | None = None):
        """Reverse-mode sweep seeding d(self)/d(self) = 1 (scalars only)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without explicit gradient requires a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        # Iterative topological order over the grad-requiring subgraph.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- primitive ops ---------------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents, op: str, backward=None) -> "Tensor":
        out = Tensor(data, _parents=tuple(parents), _op=op)
        out.requires_grad = any(p.requires_grad for p in parents)
        if not np.isfinite(out.data).all():
            raise NumericError(f"non-finite value in op '{op}' (node {out._id})")
        if out.requires_grad:
            out._backward = backward
        return out

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._make(a.data + b.data, (a, b), "add", backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._make(-a.data, (a,), "neg", backward)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._make(a.data * b.data, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._make(a.data / b.data, (a, b), "div", backward)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise ConfigError("pow supports scalar exponents only")
        a, c = self, float(exponent)

        def backward(g):
            a._accumulate(g * c * np.power(a.data, c - 1.0))

        return Tensor._make(np.power(a.data, c), (a,), f"pow{c}", backward)

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul shape mismatch {a.data.shape} @ {b.data.shape} (node op 'matmul')"
            )

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), "matmul", backward)

    def exp(self):
        a = self
        with np.errstate(over="ignore"):
            out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return Tensor._make(out_data, (a,), "exp", backward)

    def log(self):
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = np.log(a.data)
        return Tensor._make(out_data, (a,), "log", backward)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._make(out_data, (a,), "tanh", backward)

    def sigmoid(self):
        a = self
        # Stable two-branch form; clamp keeps saturated outputs strictly
        # inside (0, 1) where float64 rounding would hit the endpoints.
        e = np.exp(-np.abs(a.data))
        out_data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out_data = np.clip(out_data, 1e-300, np.nextafter(1.0, 0.0))

        def backward(g):
            a._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (a,), "sigmoid", backward)

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._make(np.where(mask, a.data, 0.0), (a,), "relu", backward)

    def maximum(self, floor: float):
        """Elementwise max(x, floor); grad passes only where x > floor."""
        a = self
        mask = a.data > floor

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._make(np.maximum(a.data, floor), (a,), "maximum", backward)

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g.reshape(1), a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", backward)

    def mean(self, axis=None, keepdims=False):
        a = self
        n = a.data.size if axis is None else a.data.shape[axis]

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g.reshape(1), a.data.shape) / n)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape) / n)

        return Tensor._make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), "mean", backward)

    def softmax(self):
        """Softmax over the last axis; rows sum to 1 within 1e-12."""
        a = self
        shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / np.sum(e, axis=-1, keepdims=True)

        def backward(g):
            dot = np.sum(g * out_data, axis=-1, keepdims=True)
            a._accumulate(out_data * (g - dot))

        return Tensor._make(out_data, (a,), "softmax", backward)

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def backward(g):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._make(a.data.reshape(shape), (a,), "reshape", backward)

    @property
    def T(self):
        a = self
        if a.data.ndim != 2:
            raise ShapeError(f"transpose requires rank-2 tensor, got shape {a.data.shape}")

        def backward(g):
            a._accumulate(g.T)

        return Tensor._make(a.data.T.copy(), (a,), "transpose", backward)

    def __getitem__(self, key):
        a = self

        def backward(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[key] += g

        return Tensor._make(a.data[key].copy(), (a,), "slice", backward)

    def gather_rows(self, indices):
        """Select rows by integer index array; backward scatter-adds."""
        a = self
        idx = np.asarray(indices, dtype=np.intp)

        def backward(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

        return Tensor._make(a.data[idx].copy(), (a,), "gather", backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def stack_rows(tensors) -> Tensor:
    """Stack rank-1 tensors of equal length into a rank-2 matrix."""
    return concat([t.reshape(1, -1) for t in tensors], axis=0)


def conv1d_dilated(x: Tensor, weight: Tensor, bias: Tensor | None, dilation: int = 1) -> Tensor:
    """Dilated 1D convolution over [C_in, T] preserving T.

    weight is [C_out, C_in, K] with odd K; symmetric zero padding of
    (K-1)//2 * dilation on each side keeps the time axis length.
    """
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d expects x[C,T], w[Co,Ci,K]; got {x.data.shape}, {weight.data.shape}")
    c_out, c_in, k = weight.data.shape
    if x.data.shape[0] != c_in:
        raise ShapeError(f"conv1d channel mismatch: x has {x.data.shape[0]}, weight expects {c_in}")
    if k % 2 != 1:
        raise ConfigError(f"conv1d kernel width must be odd for symmetric padding, got {k}")
    if dilation < 1:
        raise ConfigError(f"conv1d dilation must be >= 1, got {dilation}")
    t = x.data.shape[1]
    pad = (k - 1) // 2 * dilation
    xp = np.zeros((c_in, t + 2 * pad))
    xp[:, pad:pad + t] = x.data
    # im2col: col[(k, c), t] stacked so conv becomes one matmul
    col = np.empty((k * c_in, t))
    for i in range(k):
        col[i * c_in:(i + 1) * c_in, :] = xp[:, i * dilation:i * dilation + t]
    w_flat = weight.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out_data = w_flat @ col
    parents = [x, weight]
    if bias is not None:
        out_data = out_data + bias.data[:, None]
        parents.append(bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=1))
        if weight.requires_grad:
            dw_flat = g @ col.T
            weight._accumulate(dw_flat.reshape(c_out, k, c_in).transpose(0, 2, 1))
        if x.requires_grad:
            dcol = w_flat.T @ g
            dxp = np.zeros_like(xp)
            for i in range(k):
                dxp[:, i * dilation:i * dilation + t] += dcol[i * c_in:(i + 1) * c_in, :]
            x._accumulate(dxp[:, pad:pad + t])

    return Tensor._make(out_data, parents, f"conv1d(d={dilation})", backward)


def variance(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population (divide-by-n) variance, differentiable."""
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    return (centered * centered).mean(axis=axis, keepdims=keepdims)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """GroupNorm over [C, T]: per-group stats over the group's channels x all time steps."""
    if x.data.ndim != 2:
        raise ShapeError(f"group_norm expects [C, T], got shape {x.data.shape}")
    c, t = x.data.shape
    if num_groups < 1 or c % num_groups != 0:
        raise ConfigError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if eps <= 0:
        raise ConfigError(f"group_norm eps must be > 0, got {eps}")
    xg = x.reshape(num_groups, (c // num_groups) * t)
    mu = xg.mean(axis=1, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    normalized = centered / ((var + eps) ** 0.5)
    return normalized.reshape(c, t) * gamma.reshape(c, 1) + beta.reshape(c, 1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row LayerNorm over the feature axis of [T, d]."""
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / ((var + eps) ** 0.5) * gamma.reshape(1, -1) + beta.reshape(1, -1)


def forward_backward(graph, inputs: dict) -> tuple:
    """Run `graph(inputs)` to a scalar and return (value, grads).

    `grads` maps each requires_grad input name to d(value)/d(input);
    non-grad inputs are absent. Gradients on the inputs are reset first,
    so repeated calls do not accumulate across invocations.
    """
    for tensor in inputs.values():
        tensor.grad = None
    value = graph(inputs)
    if not isinstance(value, Tensor):
        raise ShapeError("graph must return a Tensor")
    if value.data.size != 1:
        raise ShapeError(f"graph output must be scalar, got shape {value.data.shape}")
    value.backward()
    grads = {}
    for name, tensor in inputs.items():
        if tensor.requires_grad:
            grads[name] = tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
    return value, grads


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise.

    The oracle gradient path: independent of the reverse-mode engine.
    """
    if h <= 0:
        raise ConfigError(f"finite difference step must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xp[i] += h
        fp = float(f(xp.reshape(x.shape)))
        xm = x.copy().reshape(-1)
        xm[i] -= h
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value in finite differences at index {i}")
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_difference_sample(f, x: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences at a subset of flat indices (for large tensors)."""
    if h <= 0:
        raise ConfigError(f"finite difference step must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        xp = x.copy().reshape(-1)
        xp[i] += h
        fp = float(f(xp.reshape(x.shape)))
        xm = x.copy().reshape(-1)
        xm[i] -= h
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value in finite differences at index {i}")
        out[j] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, oracle: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - o| / max(|a|, |o|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(oracle)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - oracle) / denom))
