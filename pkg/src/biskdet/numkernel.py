"""Dense NHWC array kernel with tape-based reverse-mode differentiation.

Feature maps are ``(H, W, C)`` or batched ``(N, H, W, C)`` float arrays.
Operations record themselves on the active :class:`Tape` whenever one of their
inputs requires a gradient; outside a tape they are plain numpy evaluations.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the working precision (float64 for checks, float32 for speed)."""
    global DTYPE
    DTYPE = np.dtype(dtype).type


@contextmanager
def precision(dtype):
    """Temporarily switch the working precision."""
    old = DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / scalar)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """Trainable tensor; its gradient buffer always exists and matches its shape."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Tape:
    """Records differentiable operations in execution order.

    Use as a context manager; nested tapes record into the innermost one.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Sequence[Tensor], backward) -> Tensor:
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward_pass(tape: Tape, loss: Tensor, retain: Sequence[Tensor] = ()) -> None:
    """Replay ``tape`` in reverse, accumulating d(loss)/d(param) into every Parameter.

    Intermediate gradients are freed as soon as they are consumed, except for
    the tensors listed in ``retain``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if len(tape) == 0:
        raise ValueError("tape is empty")
    for node in tape.nodes:
        if not isinstance(node, Parameter):
            node.grad = None
    keep = {id(t) for t in retain}
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        node._backward(node.grad)
        if not isinstance(node, Parameter) and id(node) not in keep:
            node.grad = None


# --------------------------------------------------------------------------
# elementwise / reduction algebra


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: _accum(a, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(a.data**exponent)

    def backward(g):
        if exponent == 0:
            return
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _record(out, (a,), backward)


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``max(a, eps)``; the clamp blocks the gradient where active."""
    clamped = np.maximum(a.data, eps) if eps > 0 else a.data
    out = Tensor(np.log(clamped))

    def backward(g):
        mask = a.data >= eps if eps > 0 else True
        _accum(a, g / clamped * mask)

    return _record(out, (a,), backward)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))

    def backward(g):
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
        _accum(a, g * mask)

    return _record(out, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _record(out, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: _accum(a, g.reshape(a.data.shape)))


def smooth_l1(a: Tensor) -> Tensor:
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (elementwise)."""
    x = a.data
    ax = np.abs(x)
    out = Tensor(np.where(ax < 1.0, 0.5 * x * x, ax - 0.5))

    def backward(g):
        _accum(a, g * np.where(ax < 1.0, x, np.sign(x)))

    return _record(out, (a,), backward)


# --------------------------------------------------------------------------
# activations


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    out = Tensor(s)
    return _record(out, (a,), lambda g: _accum(a, g * s * (1.0 - s)))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: _accum(a, g * (a.data > 0)))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, slope * a.data))
    return _record(out, (a,), lambda g: _accum(a, g * np.where(pos, 1.0, slope)))


def swish(a: Tensor, beta) -> Tensor:
    """x * sigmoid(beta * x) with a (possibly trainable) scalar beta."""
    beta = _wrap(beta)
    b = beta.data
    x = a.data
    s = expit(b * x)
    out = Tensor(x * s)

    def backward(g):
        ds = s * (1.0 - s)
        _accum(a, g * (s + x * b * ds))
        if beta.requires_grad:
            _accum(beta, np.sum(g * x * x * ds).reshape(beta.data.shape))

    return _record(out, (a, beta), backward)


def swish_derivative(x, beta: float = 1.0):
    """Closed form d/dx swish: s + x*beta*s*(1-s), s = sigmoid(beta*x)."""
    s = expit(beta * np.asarray(x, dtype=DTYPE))
    return s + x * beta * s * (1.0 - s)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        _accum(a, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _record(out, (a,), backward)


def activation_apply(kind: str, x: Tensor, beta=1.0, slope: float = 0.01) -> Tensor:
    if kind == "swish":
        return swish(x, beta)
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis=-1)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# combination


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = [_wrap(t) for t in inputs]
    spatial = {t.shape[:-1] for t in inputs}
    if len(spatial) != 1:
        raise ValueError(f"concat needs equal spatial extents, got {[t.shape for t in inputs]}")
    out = Tensor(np.concatenate([t.data for t in inputs], axis=-1))
    splits = np.cumsum([t.shape[-1] for t in inputs])[:-1]

    def backward(g):
        for t, part in zip(inputs, np.split(g, splits, axis=-1)):
            _accum(t, part)

    return _record(out, inputs, backward)


def tensor_combine(mode: str, inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("no inputs")
    if mode == "concat_channels":
        return concat_channels(inputs)
    if mode == "add_elementwise":
        shapes = {tuple(_wrap(t).shape) for t in inputs}
        if len(shapes) != 1:
            raise ValueError(f"add needs identical shapes, got {sorted(shapes)}")
        out = inputs[0]
        for t in inputs[1:]:
            out = add(out, t)
        return out
    raise ValueError(f"unknown combine mode {mode!r}")


# --------------------------------------------------------------------------
# convolutions (NHWC, 3-d inputs treated as a batch of one)


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ValueError(f"expected (H,W,C) or (N,H,W,C), got {x.shape}")


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _pad_spec(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        ho, pt, pb = _same_pads(h, k, stride)
        wo, pl, pr = _same_pads(w, k, stride)
    elif padding == "valid":
        if h < k or w < k:
            raise ValueError("input smaller than kernel under valid padding")
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return ho, wo, ((0, 0), (pt, pb), (pl, pr), (0, 0))


def _window(xp: np.ndarray, u: int, v: int, ho: int, wo: int, s: int):
    return (slice(None), slice(u, u + (ho - 1) * s + 1, s), slice(v, v + (wo - 1) * s + 1, s))


def depthwise_conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel spatial convolution; ``kernels`` is ``(D, D, K)``."""
    x, kernels = _wrap(x), _wrap(kernels)
    if stride < 1:
        raise ValueError("stride must be positive")
    xd, squeeze = _batched(x)
    d, d2, kc = kernels.shape
    if d != d2 or kc != xd.shape[-1]:
        raise ValueError(f"kernel {kernels.shape} incompatible with input channels {xd.shape[-1]}")
    ho, wo, pads = _pad_spec(xd.shape[1], xd.shape[2], d, stride, padding)
    xp = np.pad(xd, pads)
    k = kernels.data
    out = np.zeros((xd.shape[0], ho, wo, kc), dtype=xd.dtype)
    for u in range(d):
        for v in range(d):
            out += xp[_window(xp, u, v, ho, wo, stride)] * k[u, v]
    res = Tensor(out[0] if squeeze else out)

    def backward(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for u in range(d):
            for v in range(d):
                w = _window(xp, u, v, ho, wo, stride)
                gxp[w] += g4 * k[u, v]
                gk[u, v] = np.sum(xp[w] * g4, axis=(0, 1, 2))
        (pt, _), (pl, _) = pads[1], pads[2]
        gx = gxp[:, pt : pt + xd.shape[1], pl : pl + xd.shape[2]]
        _accum(x, gx[0] if squeeze else gx)
        _accum(kernels, gk)

    return _record(res, (x, kernels), backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Dense convolution; ``kernel`` is ``(Kd, Kd, C_in, C_out)``."""
    x, kernel = _wrap(x), _wrap(kernel)
    if stride < 1:
        raise ValueError("stride must be positive")
    xd, squeeze = _batched(x)
    kd, _, cin, cout = kernel.shape
    if cin != xd.shape[-1]:
        raise ValueError(f"kernel expects {cin} channels, input has {xd.shape[-1]}")
    ho, wo, pads = _pad_spec(xd.shape[1], xd.shape[2], kd, stride, padding)
    xp = np.pad(xd, pads)
    k = kernel.data
    out = np.zeros((xd.shape[0], ho, wo, cout), dtype=xd.dtype)
    for u in range(kd):
        for v in range(kd):
            out += xp[_window(xp, u, v, ho, wo, stride)] @ k[u, v]
    res = Tensor(out[0] if squeeze else out)

    def backward(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        g2 = g4.reshape(-1, cout)
        for u in range(kd):
            for v in range(kd):
                w = _window(xp, u, v, ho, wo, stride)
                gxp[w] += g4 @ k[u, v].T
                gk[u, v] = xp[w].reshape(-1, cin).T @ g2
        (pt, _), (pl, _) = pads[1], pads[2]
        gx = gxp[:, pt : pt + xd.shape[1], pl : pl + xd.shape[2]]
        _accum(x, gx[0] if squeeze else gx)
        _accum(kernel, gk)

    return _record(res, (x, kernel), backward)


def pointwise_conv2d(x: Tensor, weights: Tensor) -> Tensor:
    """1x1 convolution; ``weights`` is ``(1, 1, K, K')`` or ``(K, K')``."""
    x, weights = _wrap(x), _wrap(weights)
    w = weights.data.reshape(weights.shape[-2], weights.shape[-1])
    if w.shape[0] != x.shape[-1]:
        raise ValueError(f"weights expect {w.shape[0]} channels, input has {x.shape[-1]}")
    out = Tensor(x.data @ w)

    def backward(g):
        _accum(x, g @ w.T)
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        _accum(weights, gw.reshape(weights.data.shape))

    return _record(out, (x, weights), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    return add(x, bias)


def transposed_conv2d(
    x: Tensor, kernel: Tensor, stride: int = 2, output_size: tuple[int, int] | None = None
) -> Tensor:
    """Transposed convolution, the adjoint of ``conv2d(..., padding='valid')``.

    Full output extent is ``(H - 1) * stride + Kd``; ``output_size`` crops the
    bottom/right border down to the requested extent.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if stride < 1:
        raise ValueError("stride must be positive")
    xd, squeeze = _batched(x)
    kd, _, cin, cout = kernel.shape
    if cin != xd.shape[-1]:
        raise ValueError(f"kernel expects {cin} channels, input has {xd.shape[-1]}")
    n, h, w, _ = xd.shape
    hf, wf = (h - 1) * stride + kd, (w - 1) * stride + kd
    ho, wo = output_size if output_size is not None else (hf, wf)
    if ho > hf or wo > wf:
        raise ValueError("output_size exceeds the full transposed extent")
    k = kernel.data
    full = np.zeros((n, hf, wf, cout), dtype=xd.dtype)
    for u in range(kd):
        for v in range(kd):
            full[_window(full, u, v, h, w, stride)] += xd @ k[u, v]
    out = full[:, :ho, :wo]
    res = Tensor(out[0] if squeeze else out)

    def backward(g):
        g4 = g[None] if squeeze else g
        gfull = np.zeros_like(full)
        gfull[:, :ho, :wo] = g4
        gx = np.zeros_like(xd)
        gk = np.zeros_like(k)
        x2 = xd.reshape(-1, cin)
        for u in range(kd):
            for v in range(kd):
                gw = gfull[_window(gfull, u, v, h, w, stride)]
                gx += gw @ k[u, v].T
                gk[u, v] = x2.T @ gw.reshape(-1, cout)
        _accum(x, gx[0] if squeeze else gx)
        _accum(kernel, gk)

    return _record(res, (x, kernel), backward)


def resize_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = _wrap(x)
    h, w = x.shape[-3], x.shape[-2]
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    out = Tensor(x.data[..., rows, :, :][..., cols, :])

    def backward(g):
        gx = np.zeros_like(x.data)
        tmp = np.zeros(x.data.shape[:-3] + (h, out_w, x.shape[-1]), dtype=g.dtype)
        np.add.at(tmp, (Ellipsis, rows, slice(None), slice(None)), g)
        np.add.at(gx, (Ellipsis, slice(None), cols, slice(None)), tmp)
        _accum(x, gx)

    return _record(out, (x,), backward)


# --------------------------------------------------------------------------
# modules and initialisation


def he_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


class Module:
    """Attribute-walking parameter container."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


# --------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    tol: float = 1e-4,
    grad: np.ndarray | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``x`` is perturbed in place, so ``f`` may close over it (e.g. a Parameter).
    Per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    if grad is None:
        was = x.requires_grad
        saved = x.grad
        x.requires_grad = True
        x.grad = np.zeros_like(x.data)
        with Tape() as tape:
            y = f(x)
        if y.data.size != 1:
            raise ValueError("f must return a scalar")
        if len(tape):
            backward_pass(tape, y)
        grad = x.grad.copy()
        x.requires_grad, x.grad = was, saved
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).data
        flat[i] = orig - h
        fm = f(x).data
        flat[i] = orig
        if fp.size != 1:
            raise ValueError("f must return a scalar")
        numeric.reshape(-1)[i] = (fp.item() - fm.item()) / (2 * h)
    err = np.abs(grad - numeric) / np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), floor)
    worst = float(err.max()) if err.size else 0.0
    return GradCheckReport(worst, worst < tol, np.asarray(grad), numeric)
