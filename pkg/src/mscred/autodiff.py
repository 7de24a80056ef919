"""Small reverse-mode autodiff over dense float64 numpy arrays.

Only the primitives the network needs are provided. Images use the
``(batch, height, width, channels)`` layout and convolution kernels are
``(k, k, c_in, c_out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _accel
from .errors import ShapeError

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717


class Tensor:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`; intermediate results do not keep gradients.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents: tuple = (), backward_fn=None, requires_grad: bool | None = None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

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
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad=False)


def _op(value, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents, backward_fn, True)
    return Tensor(value, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return _op(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


elementwise_mul = mul


def scale(a, c: float) -> Tensor:
    a = constant(a)
    return _op(a.value * c, (a,), lambda g: (g * c,))


def sum_(a, axis=None) -> Tensor:
    a = constant(a)
    shape = a.shape
    out = a.value.sum(axis=axis)

    def backward(g):
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
        return (np.broadcast_to(g, shape).copy(),)

    return _op(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    old = a.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx) -> Tensor:
    """Basic (non-fancy) indexing only."""
    a = constant(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _op(a.value[idx], (a,), backward)


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [constant(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _op(np.concatenate([t.value for t in items], axis=axis), tuple(items), backward)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [constant(t) for t in items]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _op(np.stack([t.value for t in items], axis=axis), tuple(items), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def selu(a) -> Tensor:
    a = constant(a)
    x = a.value
    neg = SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    y = np.where(x > 0, SELU_LAMBDA * x, neg)
    slope = np.where(x > 0, SELU_LAMBDA, neg + SELU_LAMBDA * SELU_ALPHA)
    return _op(y, (a,), lambda g: (g * slope,))


def sigmoid(a) -> Tensor:
    a = constant(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _op(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = constant(a)
    y = np.tanh(a.value)
    return _op(y, (a,), lambda g: (g * (1.0 - y * y),))


def softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def same_padding(k: int) -> tuple[int, int]:
    """Total padding ``k - 1``; the odd element goes to the bottom/right."""
    top = (k - 1) // 2
    return top, k - 1 - top


def conv_output_size(size: int, stride: int) -> int:
    return -(-size // stride)


def deconv_reachable_sizes(size: int, stride: int) -> list[int]:
    return [stride * size - a for a in range(stride) if stride * size - a >= 1]


def _batched(x: Tensor):
    if x.value.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.value.ndim != 4:
        raise ShapeError(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")
    return x, False


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Same-padded 2-D convolution; output spatial size is ``ceil(in / stride)``."""
    x, w = constant(x), constant(w)
    x, squeeze = _batched(x)
    B, H, W, C = x.shape
    k, k2, cin, cout = w.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {w.shape}")
    if cin != C:
        raise ShapeError(f"input has {C} channels, kernel expects {cin}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    top, bot = same_padding(k)
    ho, wo = conv_output_size(H, stride), conv_output_size(W, stride)
    xp = np.pad(x.value, ((0, 0), (top, bot), (top, bot), (0, 0)))
    cols = _accel.im2col(xp, k, stride, ho, wo)
    wmat = w.value.reshape(k * k * cin, cout)
    out = cols @ wmat
    if b is not None:
        b = constant(b)
        out += b.value
    out = out.reshape(B, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = _accel.col2im(g2 @ wmat.T, xp.shape, k, stride, ho, wo)
            dx = dxp[:, top : top + H, top : top + W, :]
        grads = (dx, dw)
        if b is not None:
            grads += (g2.sum(axis=0),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    res = _op(out, parents, backward)
    return reshape(res, res.shape[1:]) if squeeze else res


def deconv2d(x, w, b=None, stride: int = 1, target_hw: tuple[int, int] | None = None) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    ``w`` has shape ``(k, k, c_in, c_out)`` with ``c_in`` the channels of
    ``x``. ``target_hw`` picks the output size among the sizes a same-padded
    stride-``stride`` convolution maps onto the input size.
    """
    x, w = constant(x), constant(w)
    x, squeeze = _batched(x)
    B, H, W, C = x.shape
    k, _, cin, cout = w.shape
    if cin != C:
        raise ShapeError(f"input has {C} channels, kernel expects {cin}")
    if target_hw is None:
        target_hw = (H * stride, W * stride)
    ht, wt = target_hw
    if conv_output_size(ht, stride) != H or conv_output_size(wt, stride) != W:
        raise ShapeError(
            f"target {target_hw} unreachable from {(H, W)} with stride {stride}; "
            f"achievable heights {deconv_reachable_sizes(H, stride)}, widths {deconv_reachable_sizes(W, stride)}"
        )
    top, bot = same_padding(k)
    padded = (B, ht + k - 1, wt + k - 1, cout)
    kmat = w.value.transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
    x2 = x.value.reshape(-1, cin)
    outp = _accel.col2im(x2 @ kmat.T, padded, k, stride, H, W)
    out = outp[:, top : top + ht, top : top + wt, :]
    if b is not None:
        b = constant(b)
        out = out + b.value
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gp = np.pad(g, ((0, 0), (top, bot), (top, bot), (0, 0)))
        gcols = _accel.im2col(gp, k, stride, H, W)
        dx = (gcols @ kmat).reshape(x.shape) if x.requires_grad else None
        dw = None
        if w.requires_grad:
            dw = (gcols.T @ x2).reshape(k, k, cout, cin).transpose(0, 1, 3, 2)
        grads = (dx, dw)
        if b is not None:
            grads += (g.sum(axis=(0, 1, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    res = _op(out, parents, backward)
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves in ``params`` that the loss does not reach get zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    for p in params:
        p.grad = np.zeros_like(p.value)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    checked: int

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_error(a, b, floor: float = 1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float | None = None,
    refine_above: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values. With
    ``max_entries`` set, that many randomly chosen entries per parameter are
    checked instead of all of them. Entries whose error reaches
    ``refine_above`` are re-measured once with step ``eps / 100``.
    """
    loss = loss_fn()
    if floor is None:
        # central differences carry roughly eps_machine * |loss| / step of
        # rounding noise; gradients below ~1000x that are compared absolutely
        floor = max(1e-6, 1e3 * np.finfo(np.float64).eps * max(abs(float(loss.value)), 1.0) / eps)
    backward(loss, params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}
    rng = np.random.default_rng(seed)
    per_param, checked = {}, 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        expect = analytic[name].reshape(-1)[idx]

        def central(i, step):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().value)
            flat[i] = orig - step
            down = float(loss_fn().value)
            flat[i] = orig
            return (up - down) / (2 * step)

        numeric = np.array([central(i, eps) for i in idx])
        err = relative_error(expect, numeric, floor)
        # a step that straddles an activation kink (SELU at 0) gives a mixed
        # slope; re-probe only those entries with a step well inside the kink gap
        for j in np.flatnonzero(err >= refine_above):
            retry = relative_error(expect[j], central(idx[j], eps * 1e-2), floor)
            err[j] = min(err[j], float(retry))
        per_param[name] = float(err.max()) if err.size else 0.0
        checked += len(idx)
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(worst, per_param, checked)
