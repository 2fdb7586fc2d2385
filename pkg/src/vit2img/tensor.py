"""N-D float64 tensors with reverse-mode automatic differentiation.

Every numeric kernel used by the layers above lives here: matmul, softmax,
normalizations, convolutions (plain and transposed), bilinear resampling,
activations and concat, each with an analytic backward rule.

Autodiff is tape-based per forward pass.  Each op links its output tensor to
its inputs, so the executed graph is the chain of parent references hanging
off the final tensor.  ``backward(loss)`` walks that graph once in reverse
topological order, keeping adjoints for interior nodes in a per-call table
and accumulating into ``.grad`` only on ``requires_grad`` leaves.  Calling
``backward`` twice without ``zero_grad`` therefore accumulates leaf grads.
Graphs are not retained across optimizer steps; they are garbage-collected
with the loss tensor.

A recording graph is confined to one thread.  Tensors themselves are
immutable after construction except for grad accumulation, so finished
tensors (e.g. shared model parameters during evaluation) may be handed to
other threads freely.

Layout conventions (bit-exact, checkpoints depend on them):
  * row-major (C order) everywhere, images are NHWC
  * conv2d kernels are [K, K, Cin, Cout]; conv2d_transpose kernels are
    [K, K, Cout, Cin]
  * "same" padding pads to ceil(in/stride) outputs, zeros split evenly with
    the extra row/column on the bottom/right
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

# When true, every op asserts its output is finite. Costs one pass per op,
# so it is only switched on by tests / debugging sessions.
debug_checks = os.environ.get("VIT2IMG_DEBUG_CHECKS", "") == "1"

# Recording state is per thread: evaluation may run many independent graphs
# in parallel without their no_grad scopes interfering.
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, metrics)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient slot and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the real work.
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._parents


def _make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the tape edge when grad mode is on."""
    out = Tensor(data)
    if debug_checks and not np.all(np.isfinite(data)):
        raise NumericDebugError("op produced a non-finite value")
    if _grad_enabled() and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class NumericDebugError(AssertionError):
    """Raised by the debug finiteness check; never in normal operation."""


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar (size-1) tensor.  Interior adjoints live in a
    per-call table; repeat calls accumulate onto leaf ``.grad`` slots.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")

    # Iterative reverse topological order over the recorded graph.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and _tracked(p):
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _tracked(parent):
                continue
            acc = adjoint.get(id(parent))
            # Never accumulate in place: a backward rule may hand the same
            # array to two parents (add) or a view of the incoming adjoint.
            adjoint[id(parent)] = pg if acc is None else acc + pg


def _sum_to_shape(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reverse numpy broadcasting: sum ``arr`` down to ``shape``."""
    if arr.shape == shape:
        return arr
    extra = arr.ndim - len(shape)
    if extra > 0:
        arr = arr.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and arr.shape[i] != 1)
    if keep:
        arr = arr.sum(axis=keep, keepdims=True)
    return arr.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def grad(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(out, (a, b), grad)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def grad(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _make(out, (a, b), grad)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def grad(g):
        return (_sum_to_shape(g * b.data, a.shape),
                _sum_to_shape(g * a.data, b.shape))

    return _make(out, (a, b), grad)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def grad(g):
        return (_sum_to_shape(g / b.data, a.shape),
                _sum_to_shape(-g * out / b.data, b.shape))

    return _make(out, (a, b), grad)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    """Elementwise a**exponent for a constant scalar exponent."""
    a = as_tensor(a)
    out = a.data ** exponent

    def grad(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), grad)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    """Elementwise |a|; subgradient 0 at exact ties."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0.0),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    out = np.where(a.data > 0.0, a.data, slope * a.data)

    def grad(g):
        return (g * np.where(a.data > 0.0, 1.0, slope),)

    return _make(out, (a,), grad)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), grad)


def concat(xs, axis: int) -> Tensor:
    """Stack tensors along ``axis``; backward splits the gradient."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty tensor list")
    base = xs[0].shape
    for x in xs[1:]:
        if len(x.shape) != len(base) or any(
            d != b for i, (d, b) in enumerate(zip(x.shape, base)) if i != axis % len(base)
        ):
            raise DimensionError(
                f"concat: non-axis dimensions disagree: {base} vs {x.shape}"
            )
    out = np.concatenate([x.data for x in xs], axis=axis)
    offsets = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def grad(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _make(out, tuple(xs), grad)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in ax]))

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), grad)


# ---------------------------------------------------------------------------
# matmul / softmax / normalizations


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes as numpy does."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree: {a.shape} x {b.shape}"
        )
    out = a.data @ b.data

    def grad(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return (_sum_to_shape(g @ bt, a.shape), _sum_to_shape(at @ g, b.shape))

    return _make(out, (a, b), grad)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; outputs are positive and sum to 1 along axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), grad)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along axis, stabilized by max subtraction."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), grad)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gamma, beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} do not match last axis of {x.shape}"
        )
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


def batch_norm(x, gamma, beta, running_mean, running_var, mode: str,
               eps: float = 1e-5, momentum: float = 0.99):
    """Normalize per channel (last axis) over all other axes.

    Train mode uses batch statistics and updates the running arrays in place
    via an exponential moving average; eval mode normalizes with the stored
    running statistics.  Returns the normalized tensor.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm: gamma/beta {gamma.shape}/{beta.shape} do not match channel axis of {x.shape}"
        )
    if mode == "train":
        axes = tuple(range(x.data.ndim - 1))
        mu = mean(x, axis=axes, keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(c)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(c)
        inv = power(add(var, eps), -0.5)
        xhat = mul(centered, inv)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = mul(sub(x, Tensor(running_mean)), Tensor(inv))
    else:
        raise ContractError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    return add(mul(xhat, gamma), beta)


# ---------------------------------------------------------------------------
# convolutions


def _same_pad(in_size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Return (out_size, pad_before, pad_after) for 'same' padding."""
    out = -(-in_size // stride)  # ceil
    total = max((out - 1) * stride + k - in_size, 0)
    before = total // 2
    return out, before, total - before


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        ho, pt, pb = _same_pad(h, k, stride)
        wo, pl, pr = _same_pad(w, k, stride)
    elif padding == "valid":
        if k > h or k > w:
            raise DimensionError(
                f"conv2d: kernel {k}x{k} larger than input {h}x{w} with valid padding"
            )
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    return ho, wo, pt, pb, pl, pr


def _im2col(xpad: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View the padded NHWC input as [N, Ho, Wo, K, K, C] patches."""
    n, _, _, c = xpad.shape
    sn, sh, sw, sc = xpad.strides
    view = np.lib.stride_tricks.as_strided(
        xpad,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def _col2im(cols: np.ndarray, xpad_shape, stride: int) -> np.ndarray:
    """Scatter-add [N, Ho, Wo, K, K, C] patches back onto a padded canvas."""
    n, ho, wo, k, _, c = cols.shape
    out = np.zeros(xpad_shape, dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride, :] += cols[:, :, :, ki, kj, :]
    return out


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation over NHWC input with a [K, K, Cin, Cout] kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    k, k2, wcin, cout = w.shape
    if k != k2 or wcin != cin:
        raise DimensionError(f"conv2d: kernel {w.shape} does not match input channels of {x.shape}")
    b = as_tensor(b) if b is not None else None
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias {b.shape} does not match {cout} output channels")

    ho, wo, pt, pb, pl, pr = _conv_geometry(h, wd, k, stride, padding)
    xpad = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(xpad, k, stride, ho, wo).reshape(n * ho * wo, k * k * cin)
    out = cols @ w.data.reshape(k * k * cin, cout)
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)

    def grad(g):
        g2 = g.reshape(n * ho * wo, cout)
        dw = (cols.T @ g2).reshape(w.shape)
        dcols = (g2 @ w.data.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k, k, cin)
        dxpad = _col2im(dcols, xpad.shape, stride)
        dx = dxpad[:, pt:pt + h, pl:pl + wd, :]
        db = g2.sum(axis=0) if b is not None else None
        return np.ascontiguousarray(dx), dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, grad)


def conv2d_transpose(x, w, b=None, stride: int = 2, padding: str = "same") -> Tensor:
    """Fractionally-strided convolution: the gradient map of conv2d.

    Kernel layout is [K, K, Cout, Cin].  With 'same' padding the output
    spatial size is exactly stride times the input size (kernel >= stride
    required so the implied padding is nonnegative).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d_transpose: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    k, k2, cout, wcin = w.shape
    if k != k2 or wcin != cin:
        raise DimensionError(f"conv2d_transpose: kernel {w.shape} does not match input channels of {x.shape}")
    if padding != "same":
        raise ContractError("conv2d_transpose supports 'same' padding only")
    if k < stride:
        raise DimensionError(f"conv2d_transpose: kernel {k} smaller than stride {stride}")
    b = as_tensor(b) if b is not None else None
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d_transpose: bias {b.shape} does not match {cout} output channels")

    ho, wo = h * stride, wd * stride
    # Padding of the equivalent forward conv (output -> input direction).
    _, pt, pb = _same_pad(ho, k, stride)
    _, pl, pr = _same_pad(wo, k, stride)
    w2 = w.data.reshape(k * k * cout, cin)

    cols = (x.data.reshape(n * h * wd, cin) @ w2.T).reshape(n, h, wd, k, k, cout)
    opad = _col2im(cols, (n, ho + pt + pb, wo + pl + pr, cout), stride)
    out = opad[:, pt:pt + ho, pl:pl + wo, :]
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out)

    def grad(g):
        gpad = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        gcols = _im2col(gpad, k, stride, h, wd).reshape(n * h * wd, k * k * cout)
        dx = (gcols @ w2).reshape(n, h, wd, cin)
        dw = (gcols.T @ x.data.reshape(n * h * wd, cin)).reshape(w.shape)
        db = g.sum(axis=(0, 1, 2)) if b is not None else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, grad)


# ---------------------------------------------------------------------------
# bilinear resampling


def _lerp_indices(out_size: int, in_size: int):
    """align-corners-false source indices and fractions for one axis."""
    s = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    s = np.maximum(s, 0.0)
    i0 = np.minimum(s.astype(np.int64), in_size - 1)
    f = s - i0
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, f


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    """Resize NHWC images with bilinear interpolation (align_corners=False).

    Computed as a lerp ``x0 + f*(x1 - x0)`` per axis, so constant images stay
    bit-exactly constant at any target size.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"bilinear_upsample: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"bilinear_upsample: target size {out_h}x{out_w} must be positive")
    if out_h < h or out_w < w:
        raise DimensionError(
            f"bilinear_upsample: target {out_h}x{out_w} smaller than source {h}x{w}"
        )
    hi0, hi1, hf = _lerp_indices(out_h, h)
    wi0, wi1, wf = _lerp_indices(out_w, w)
    hfb = hf[None, :, None, None]
    wfb = wf[None, None, :, None]

    rows = x.data[:, hi0] + hfb * (x.data[:, hi1] - x.data[:, hi0])
    out = rows[:, :, wi0] + wfb * (rows[:, :, wi1] - rows[:, :, wi0])

    def grad(g):
        drows = np.zeros((n, out_h, w, c))
        np.add.at(drows.transpose(2, 0, 1, 3), wi0, ((1.0 - wfb) * g).transpose(2, 0, 1, 3))
        np.add.at(drows.transpose(2, 0, 1, 3), wi1, (wfb * g).transpose(2, 0, 1, 3))
        dx = np.zeros((n, h, w, c))
        np.add.at(dx.transpose(1, 0, 2, 3), hi0, ((1.0 - hfb) * drows).transpose(1, 0, 2, 3))
        np.add.at(dx.transpose(1, 0, 2, 3), hi1, (hfb * drows).transpose(1, 0, 2, 3))
        return (dx,)

    return _make(out, (x,), grad)
