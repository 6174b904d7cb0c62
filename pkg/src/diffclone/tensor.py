"""Float64 arrays with a dynamic reverse-mode tape and an Adam optimizer.

Every operation that touches a tensor with ``requires_grad`` records its
operands and a backward rule on the output. ``Tensor.backward`` walks the
recorded graph once in reverse topological order, accumulates gradients
into the leaf tensors and then drops the graph.

Only what the denoiser, the encoders and the BC head need is provided:
elementwise arithmetic with numpy broadcasting, (batched) matmul, reductions,
reshaping, 1D convolution, group normalisation and a few activations.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # operators -------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        if self.op and self._backward is None:
            raise UsageError("this graph was already consumed by backward(); recompute the loss")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            node._parents = ()
            node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    # a finite sum implies finite entries; only fall back to the full scan otherwise
    if not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)),
        "div",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; backward hands the input an exact zero gradient."""
    return _result(a.data.copy(), (a,), lambda g: (np.zeros_like(g),), "stop_gradient")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x)).

    With e = exp(x): tanh(softplus(x)) = e(e+2) / (e(e+2) + 2), one exp per call.
    """
    x = a.data
    e = np.exp(np.minimum(x, 20.0))
    n = e * (e + 2.0)
    th = n / (n + 2.0)

    def backward(g):
        sig = e / (1.0 + e)
        return (g * (th + x * (1.0 - th * th) * sig),)

    return _result(x * th, (a,), backward, "mish")


# shape and reductions ------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def take(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = np.exp(x - out)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), backward, "logsumexp")


# linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(np.matmul(ad, bd), (a, b), backward, "matmul")


def conv1d(x, kernel, bias=None, stride: int = 1, padding: int = 0, channels_last: bool = False) -> Tensor:
    """Cross-correlation along the length axis with zero padding.

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]`` (``[.., L, C_in]`` when
    ``channels_last``); ``kernel`` is always ``[C_out, C_in, K]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects a 3-d kernel and 2/3-d input, got {kernel.shape}, {x.shape}")
    if not channels_last:
        xd = xd.transpose(0, 2, 1)
    B, L, C = xd.shape
    O, Ck, K = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv1d channel mismatch: input has {C}, kernel expects {Ck}")
    Lp = L + 2 * padding
    L_out = (Lp - K) // stride + 1
    if L_out < 1:
        raise ShapeError(f"conv1d output would be empty (L={L}, K={K}, padding={padding})")
    span = stride * (L_out - 1) + 1
    if padding:
        xp = np.zeros((B, Lp, C))
        xp[:, padding : padding + L] = xd
    else:
        xp = xd
    cols = np.concatenate([xp[:, k : k + span : stride] for k in range(K)], axis=2)
    cols = cols.reshape(B * L_out, K * C)
    wmat = kernel.data.transpose(0, 2, 1).reshape(O, K * C)
    out = (cols @ wmat.T).reshape(B, L_out, O)
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents = parents + (bias,)
    if not channels_last:
        out = out.transpose(0, 2, 1)
    out = out[0] if unbatched else out

    def backward(g):
        g3 = g[None] if unbatched else g
        if not channels_last:
            g3 = g3.transpose(0, 2, 1)
        g2 = g3.reshape(B * L_out, O)
        gw = (g2.T @ cols).reshape(O, K, C).transpose(0, 2, 1) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, L_out, K, C)
            gxp = np.zeros((B, Lp, C))
            for k in range(K):
                gxp[:, k : k + span : stride] += gcols[:, :, k]
            gx = gxp[:, padding : padding + L]
            if not channels_last:
                gx = gx.transpose(0, 2, 1)
            gx = gx[0] if unbatched else gx
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, backward, "conv1d")


def group_norm(x, groups: int, scale, shift, eps: float = 1e-5, channels_last: bool = False) -> Tensor:
    """Per-sample group normalisation over ``[C, L]`` (or ``[B, C, L]``), then affine.

    Population variance; ``eps`` is added under the square root.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if not channels_last:
        xd = xd.transpose(0, 2, 1)
    B, L, C = xd.shape
    if groups < 1 or C % groups:
        raise ConfigError(f"{C} channels cannot be split into {groups} groups")
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"scale/shift must have shape ({C},)")
    gshape = (B, L, groups, C // groups)
    axes = (1, 3)
    xg = xd.reshape(gshape)
    centered = xg - xg.mean(axis=axes, keepdims=True)
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(B, L, C)
    sd = scale.data
    out = xhat * sd + shift.data
    if not channels_last:
        out = out.transpose(0, 2, 1)
    out = out[0] if unbatched else out

    def backward(g):
        g3 = g[None] if unbatched else g
        if not channels_last:
            g3 = g3.transpose(0, 2, 1)
        gscale = np.sum(g3 * xhat, axis=(0, 1))
        gshift = np.sum(g3, axis=(0, 1))
        gx = None
        if x.requires_grad:
            dxhat = (g3 * sd).reshape(gshape)
            xh = xhat.reshape(gshape)
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xh * np.mean(dxhat * xh, axis=axes, keepdims=True)
            )
            gx = gx.reshape(B, L, C)
            if not channels_last:
                gx = gx.transpose(0, 2, 1)
            gx = gx[0] if unbatched else gx
        return gx, gscale, gshift

    return _result(out, (x, scale, shift), backward, "group_norm")


def upsample_nearest(x: Tensor, factor: int = 2, axis: int = -1) -> Tensor:
    """Repeat every position along ``axis`` ``factor`` times."""
    shape = x.shape
    ax = axis % x.ndim

    def backward(g):
        return (g.reshape(shape[:ax] + (shape[ax], factor) + shape[ax + 1 :]).sum(axis=ax + 1),)

    return _result(np.repeat(x.data, factor, axis=ax), (x,), backward, "upsample")


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target)
    return mean(diff * diff)


# optimisation -------------------------------------------------------------

class Adam:
    """Bias-corrected Adam. Moments live alongside the parameter list."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(f"parameter {i} has no gradient; run backward() first")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            # rebind rather than mutate: old arrays may still be held by a graph
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = np.zeros_like(p.data)


def adam_step(state: Adam, params: Sequence[Tensor] | None = None) -> None:
    """Functional spelling of ``state.step()``; ``params`` must be the optimizer's own list."""
    if params is not None and [id(p) for p in params] != [id(p) for p in state.params]:
        raise UsageError("params do not match the optimizer state")
    state.step()


# finite differences ----------------------------------------------------------

def numerical_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn()`` with respect to every entry of ``param``."""
    param.data = np.ascontiguousarray(param.data)
    flat = param.data.reshape(-1)
    grad = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            grad[i] = (up - down) / (2 * h)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between backprop and central differences over ``params``."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_grad(lambda: float(loss_fn().data), p, h)
        worst = max(worst, float(np.max(relative_error(a, n, floor), initial=0.0)))
    return worst
