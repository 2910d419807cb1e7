"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine covering exactly the primitives the encoder/decoder
models need: dense linear algebra, normalization, activations, direct and
transposed 2-D convolution, and nearest-neighbor upsampling. Every operation
records a backward closure; ``Tensor.backward()`` replays the tape in reverse
topological order. ``grad_check`` verifies analytic gradients against central
finite differences.

Conventions:
  - arrays are row-major numpy arrays; float32 is the working precision,
    float64 is used for high-precision gradient checking
  - image-like tensors are channel-last: ``(batch, height, width, channels)``;
    the conv ops also accept a single unbatched ``(height, width, channels)``
  - ops are pure functions of their inputs; repeated calls are bit-identical
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GeometryError(ValueError):
    """A convolution/upsampling geometry produces an invalid output extent."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _finite_checks_enabled() -> bool:
    return getattr(_state, "finite_checks", False)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (forward-only evaluation) in this thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def finite_checks() -> Iterator[None]:
    """Raise ``FloatingPointError`` naming the op that first produces NaN/Inf."""
    prev = _finite_checks_enabled()
    _state.finite_checks = True
    try:
        yield
    finally:
        _state.finite_checks = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A node in the computation graph: a value plus an optional backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        if _finite_checks_enabled() and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by op '{op}'")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate dL/dx into ``.grad`` of every reachable tensor (L = self)."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # operator sugar; scalars stay raw python numbers so dtype is preserved
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"


class Parameter(Tensor):
    """Named leaf tensor with a persistent gradient buffer."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        kind = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.shape}{kind})"


class ParameterStore:
    """Ordered, name-unique collection of parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self if p.trainable]

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def total_size(self) -> int:
        return sum(p.data.size for p in self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [n for n in self.names() if n not in arrays]
        unknown = [n for n in arrays if n not in self]
        if missing or unknown:
            raise KeyError(f"parameter name mismatch: missing={missing}, unknown={unknown}")
        for p in self:
            arr = np.asarray(arrays[p.name])
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {p.name!r}: stored shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)
            p.zero_grad()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, c = (a, b) if isinstance(a, Tensor) else (b, a)
        t = as_tensor(t)
        out = Tensor._from_op(t.data + float(c), (t,), "add")
        if out.requires_grad:
            def _bwd():
                _accumulate(t, out.grad)
            out._backward = _bwd
        return out
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bwd():
            _accumulate(a, _sum_to_shape(out.grad, a.data.shape))
            _accumulate(b, _sum_to_shape(out.grad, b.data.shape))
        out._backward = _bwd
    return out


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    if isinstance(a, (int, float)):
        return add(mul(b, -1.0), float(a))
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bwd():
            _accumulate(a, _sum_to_shape(out.grad, a.data.shape))
            _accumulate(b, _sum_to_shape(-out.grad, b.data.shape))
        out._backward = _bwd
    return out


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, c = (a, b) if isinstance(a, Tensor) else (b, a)
        t = as_tensor(t)
        c = float(c)
        out = Tensor._from_op(t.data * c, (t,), "mul")
        if out.requires_grad:
            def _bwd():
                _accumulate(t, out.grad * c)
            out._backward = _bwd
        return out
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bwd():
            _accumulate(a, _sum_to_shape(out.grad * b.data, a.data.shape))
            _accumulate(b, _sum_to_shape(out.grad * a.data, b.data.shape))
        out._backward = _bwd
    return out


def square(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._from_op(x.data * x.data, (x,), "square")
    if out.requires_grad:
        def _bwd():
            _accumulate(x, out.grad * (2.0 * x.data))
        out._backward = _bwd
    return out


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor._from_op(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                _accumulate(a, _sum_to_shape(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                _accumulate(b, _sum_to_shape(gb, b.data.shape))
        out._backward = _bwd
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor._from_op(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        def _bwd():
            _accumulate(x, out.grad.reshape(x.data.shape))
        out._backward = _bwd
    return out


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor._from_op(np.transpose(x.data, axes), (x,), "transpose")
    if out.requires_grad:
        inverse = np.argsort(axes)
        def _bwd():
            _accumulate(x, np.transpose(out.grad, inverse))
        out._backward = _bwd
    return out


def swap_last_axes(x) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def narrow(x, idx) -> Tensor:
    """Basic (slice/integer/ellipsis) indexing; gradients scatter back."""
    x = as_tensor(x)
    out = Tensor._from_op(x.data[idx], (x,), "narrow")
    if out.requires_grad:
        def _bwd():
            g = np.zeros_like(x.data)
            g[idx] = out.grad
            _accumulate(x, g)
        out._backward = _bwd
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bwd():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, out.grad[tuple(idx)])
        out._backward = _bwd
    return out


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor._from_op(np.broadcast_to(x.data, shape).copy(), (x,), "broadcast_to")
    if out.requires_grad:
        def _bwd():
            _accumulate(x, _sum_to_shape(out.grad, x.data.shape))
        out._backward = _bwd
    return out


def _normalize_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    out = Tensor._from_op(x.data.sum(axis=axes, keepdims=keepdims), (x,), "sum")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        out._backward = _bwd
    return out


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._from_op(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        def _bwd():
            _accumulate(x, out.grad * (x.data > 0))
        out._backward = _bwd
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out = Tensor._from_op(0.5 * x.data * (1.0 + t), (x,), "gelu")
    if out.requires_grad:
        def _bwd():
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
            local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            _accumulate(x, out.grad * local)
        out._backward = _bwd
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # stable two-sided formulation
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data)))
    s = s.astype(x.data.dtype)
    out = Tensor._from_op(s, (x,), "sigmoid")
    if out.requires_grad:
        def _bwd():
            _accumulate(x, out.grad * s * (1.0 - s))
        out._backward = _bwd
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Row-stochastic softmax along ``axis``, computed with max-subtraction."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if x.data.shape[ax] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)
    out = Tensor._from_op(s, (x,), "softmax")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            dot = (g * s).sum(axis=ax, keepdims=True)
            _accumulate(x, s * (g - dot))
        out._backward = _bwd
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim ({d},)"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor._from_op(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
            if beta.requires_grad:
                _accumulate(beta, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, inv_std * (gx - m1 - xhat * m2))
        out._backward = _bwd
    return out


def linear(x, weight, bias=None) -> Tensor:
    """y = x @ weight (+ bias). x is (..., d_in), weight (d_in, d_out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.data.shape[-1] != weight.data.shape[0]:
        raise ShapeError(f"linear: x shape {x.shape} incompatible with weight shape {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (weight.data.shape[1],):
            raise ShapeError(
                f"linear: bias shape {bias.shape} != ({weight.data.shape[1]},)"
            )
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# spatial ops (channel-last)
# ---------------------------------------------------------------------------


def _as_nhwc(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.data.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (B, H, W, C), got shape {x.shape}")


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation). kernels: (K, K, C_in, C_out)."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4 or kernels.data.shape[0] != kernels.data.shape[1]:
        raise ShapeError(f"conv2d kernels must be (K, K, C_in, C_out), got {kernels.shape}")
    if stride < 1 or padding < 0:
        raise GeometryError(f"conv2d: invalid stride={stride} or padding={padding}")
    xb, squeeze = _as_nhwc(x)
    b, h, w, c_in = xb.data.shape
    k = kernels.data.shape[0]
    if kernels.data.shape[2] != c_in:
        raise ShapeError(
            f"conv2d: input has {c_in} channels but kernels expect {kernels.data.shape[2]}"
        )
    if h + 2 * padding < k or w + 2 * padding < k:
        raise GeometryError(
            f"conv2d: kernel {k} exceeds padded input ({h + 2 * padding}, {w + 2 * padding})"
        )
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    c_out = kernels.data.shape[3]

    xp = np.pad(xb.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    dtype = np.result_type(xp, kernels.data)
    y = np.zeros((b, out_h, out_w, c_out), dtype=dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, ki:ki + stride * out_h:stride, kj:kj + stride * out_w:stride, :]
            y += patch @ kernels.data[ki, kj]

    parents = [xb, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        y = y + bias.data
        parents.append(bias)
    out = Tensor._from_op(y, parents, "conv2d")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 1, 2)))
            gxp = np.zeros_like(xp) if xb.requires_grad else None
            gk_total = np.zeros_like(kernels.data) if kernels.requires_grad else None
            for ki in range(k):
                for kj in range(k):
                    sl = (slice(None), slice(ki, ki + stride * out_h, stride),
                          slice(kj, kj + stride * out_w, stride), slice(None))
                    if gk_total is not None:
                        gk_total[ki, kj] = np.tensordot(xp[sl], g, axes=([0, 1, 2], [0, 1, 2]))
                    if gxp is not None:
                        gxp[sl] += g @ kernels.data[ki, kj].T
            if gk_total is not None:
                _accumulate(kernels, gk_total)
            if gxp is not None:
                if padding:
                    _accumulate(xb, gxp[:, padding:-padding, padding:-padding, :])
                else:
                    _accumulate(xb, gxp)
        out._backward = _bwd
    return reshape(out, out.data.shape[1:]) if squeeze else out


def transposed_conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution, the adjoint of ``conv2d`` with the same geometry.

    kernels: (K, K, C_in, C_out). Output extent: (in - 1)*stride - 2*padding + K.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4 or kernels.data.shape[0] != kernels.data.shape[1]:
        raise ShapeError(f"transposed_conv2d kernels must be (K, K, C_in, C_out), got {kernels.shape}")
    k = kernels.data.shape[0]
    if stride < 1 or k < stride:
        raise GeometryError(f"transposed_conv2d requires kernel >= stride, got K={k}, stride={stride}")
    if not 0 <= padding < k:
        raise GeometryError(f"transposed_conv2d requires 0 <= padding < kernel, got padding={padding}, K={k}")
    xb, squeeze = _as_nhwc(x)
    b, h, w, c_in = xb.data.shape
    if kernels.data.shape[2] != c_in:
        raise ShapeError(
            f"transposed_conv2d: input has {c_in} channels but kernels expect {kernels.data.shape[2]}"
        )
    out_h = (h - 1) * stride - 2 * padding + k
    out_w = (w - 1) * stride - 2 * padding + k
    if out_h < 1 or out_w < 1:
        raise GeometryError(
            f"transposed_conv2d: nonpositive output extent ({out_h}, {out_w}) "
            f"from input ({h}, {w}), K={k}, stride={stride}, padding={padding}"
        )
    c_out = kernels.data.shape[3]
    full_h = (h - 1) * stride + k
    full_w = (w - 1) * stride + k

    dtype = np.result_type(xb.data, kernels.data)
    canvas = np.zeros((b, full_h, full_w, c_out), dtype=dtype)
    for ki in range(k):
        for kj in range(k):
            canvas[:, ki:ki + stride * (h - 1) + 1:stride,
                   kj:kj + stride * (w - 1) + 1:stride, :] += xb.data @ kernels.data[ki, kj]
    y = canvas[:, padding:padding + out_h, padding:padding + out_w, :]

    parents = [xb, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({c_out},)")
        y = y + bias.data
        parents.append(bias)
    else:
        y = y.copy()
    out = Tensor._from_op(y, parents, "transposed_conv2d")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 1, 2)))
            g_canvas = np.zeros((b, full_h, full_w, c_out), dtype=g.dtype)
            g_canvas[:, padding:padding + out_h, padding:padding + out_w, :] = g
            gx = np.zeros_like(xb.data) if xb.requires_grad else None
            gk_total = np.zeros_like(kernels.data) if kernels.requires_grad else None
            for ki in range(k):
                for kj in range(k):
                    tap = g_canvas[:, ki:ki + stride * (h - 1) + 1:stride,
                                   kj:kj + stride * (w - 1) + 1:stride, :]
                    if gx is not None:
                        gx += tap @ kernels.data[ki, kj].T
                    if gk_total is not None:
                        gk_total[ki, kj] = np.tensordot(xb.data, tap, axes=([0, 1, 2], [0, 1, 2]))
            if gx is not None:
                _accumulate(xb, gx)
            if gk_total is not None:
                _accumulate(kernels, gk_total)
        out._backward = _bwd
    return reshape(out, out.data.shape[1:]) if squeeze else out


def upsample_nearest(x, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbor upsampling; each output pixel copies its source pixel."""
    x = as_tensor(x)
    xb, squeeze = _as_nhwc(x)
    b, h, w, c = xb.data.shape
    if target_h < h or target_w < w:
        raise GeometryError(
            f"upsample_nearest target ({target_h}, {target_w}) smaller than input ({h}, {w})"
        )
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    y = xb.data[:, rows, :, :][:, :, cols, :]
    out = Tensor._from_op(y, (xb,), "upsample_nearest")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            tmp = np.zeros((b, h, target_w, c), dtype=g.dtype)
            np.add.at(tmp, (slice(None), rows), g)
            gx = np.zeros((b, h, w, c), dtype=g.dtype)
            np.add.at(gx, (slice(None), slice(None), cols), tmp)
            _accumulate(xb, gx)
        out._backward = _bwd
    return reshape(out, out.data.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    n_checked: int
    frozen: bool = False
    worst_index: tuple[int, ...] | None = None

    def ok(self, tol: float) -> bool:
        return self.frozen or self.max_rel_err < tol


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        errs = [e.max_rel_err for e in self.entries if not e.frozen]
        return max(errs) if errs else 0.0

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.ok(self.tol)]

    @property
    def passed(self) -> bool:
        return not self.failures

    def format(self) -> str:
        lines = []
        for e in self.entries:
            status = "FROZEN" if e.frozen else ("PASS" if e.ok(self.tol) else "FAIL")
            lines.append(f"{status:6s} {e.name:40s} max_rel_err={e.max_rel_err:.3e} (n={e.n_checked})")
        lines.append(
            f"{'PASS' if self.passed else 'FAIL'}: {len(self.entries) - len(self.failures)}"
            f"/{len(self.entries)} parameter groups within tol={self.tol:g}"
        )
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterStore,
    eps: float = 1e-6,
    tol: float = 1e-5,
    max_samples_per_param: int | None = None,
    seed: int = 0,
    rel_floor: float = 0.05,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central finite differences.

    The analytic pass runs at the parameters' own precision. The finite
    difference pass temporarily promotes the perturbed parameter to float64
    so the quotient measures the true local slope rather than
    single-precision evaluation noise; the reported relative error is then
    the analytic gradient's own error.

    Piecewise-linear activations (ReLU) make raw central differences
    unreliable when the probe interval straddles a kink, so each element is
    probed at two step sizes: if the quotients disagree, the step shrinks
    (8x, up to three attempts) until they are consistent. A genuinely wrong
    analytic gradient stays wrong at every step size and is still reported.

    Per element, ``rel = |analytic - fd| / max(|analytic|, |fd|, floor)``.
    The floor is ``rel_floor`` times the group's largest analytic gradient,
    raised when necessary so the implied absolute-error budget
    (``tol * floor``) stays a factor of two above the FD quotient's own
    resolution (``~ulp(loss) / step``): elements whose slope cannot be
    resolved relatively are compared on that absolute scale instead of
    scoring measurement noise as error.

    Frozen (``trainable=False``) parameters are reported with an identically
    zero gradient and excluded from FD comparison.
    """
    params.zero_grad()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError("grad_check: loss is non-finite")
    loss.backward()
    analytic = {p.name: np.array(p.grad, copy=True) for p in params}
    loss_scale = max(abs(float(loss.data)), 1.0)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for p in params:
        if not p.trainable:
            if np.any(analytic[p.name] != 0.0):
                raise AssertionError(f"frozen parameter {p.name!r} accumulated a gradient")
            report.entries.append(GradCheckEntry(p.name, 0.0, 0, frozen=True))
            continue
        size = p.data.size
        if max_samples_per_param is None or size <= max_samples_per_param:
            flat_idx = np.arange(size)
        else:
            flat_idx = np.sort(rng.choice(size, size=max_samples_per_param, replace=False))
        a_group = analytic[p.name].ravel()
        fd_noise = 8.0 * np.finfo(np.float64).eps * loss_scale / (2.0 * eps)
        floor = max(rel_floor * float(np.abs(a_group).max(initial=0.0)),
                    2.0 * fd_noise / tol, 1e-12)
        orig = p.data
        work = orig.astype(np.float64).ravel()
        worst = 0.0
        worst_index: tuple[int, ...] | None = None

        def evaluate(i: int, value: float) -> float:
            saved = work[i]
            work[i] = value
            p.data = work.reshape(orig.shape)
            with no_grad():
                out = float(loss_fn().data)
            work[i] = saved
            return out

        try:
            for i in flat_idx:
                center = work[i]
                h = eps * max(1.0, abs(center))
                fd = None
                for _ in range(3):
                    fd_full = (evaluate(i, center + h) - evaluate(i, center - h)) / (2.0 * h)
                    fd_half = (evaluate(i, center + h / 2) - evaluate(i, center - h / 2)) / h
                    fd = fd_half
                    # the difference quotient is quantized to ~ulp(loss)/2h;
                    # disagreement below that is rounding, not a kink
                    noise = 8.0 * np.finfo(np.float64).eps * loss_scale / (2.0 * h)
                    limit = max(0.25 * tol * max(abs(fd_full), abs(fd_half), floor), noise)
                    if abs(fd_full - fd_half) <= limit:
                        break
                    h /= 8.0
                a = float(a_group[i])
                rel = abs(a - fd) / max(abs(a), abs(fd), floor)
                if rel > worst:
                    worst = rel
                    worst_index = np.unravel_index(int(i), orig.shape)
        finally:
            p.data = orig
        report.entries.append(
            GradCheckEntry(p.name, worst, len(flat_idx), worst_index=worst_index)
        )
    return report
