"""Dense tensors with reverse-mode automatic differentiation on a tape.

Everything that trains in this package runs on this substrate: float32 for
training loops, float64 for gradient checks. Ops record nodes on the active
tape in execution order, which is already a topological order, so the
backward pass is a single reversed sweep that touches each node once.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class Tensor:
    """A dense array plus grad bookkeeping. Data is always an ndarray."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Wrap array-like data as a leaf tensor, rejecting non-finite values."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind not in "fiu":
        raise TypeError(f"tensor data must be numeric, got dtype {arr.dtype}")
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ValueError("tensor data contains NaN or Inf")
    return Tensor(arr, requires_grad)


def parameter(data, dtype=np.float32) -> Tensor:
    return tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Node:
    """One recorded primitive: output, parent tensors, and a vjp closure."""

    __slots__ = ("op", "out", "parents", "grad_fn")

    def __init__(self, op, out, parents, grad_fn):
        self.op = op
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Execution-ordered record of primitives. One tape per thread at a time;
    nesting reuses the innermost tape."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _record(op: str, out: Tensor, parents: tuple, grad_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(Node(op, out, parents, grad_fn))
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def grad(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _record("add", out, (a, b), grad)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def grad(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _record("sub", out, (a, b), grad)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def grad(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _record("mul", out, (a, b), grad)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * a.data)
    return _record("square", out, (a,), lambda g: (g * (2.0 * a.data),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record("sqrt", out, (a,), lambda g: (g * (0.5 / y),))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    # the sign is pinned under grad_check so that L1 terms are checked
    # against the locally-linear function their gradient implements
    sign = pin_value(np.sign(a.data))
    out = Tensor(a.data * sign)
    return _record("abs", out, (a,), lambda g: (g * sign,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record("exp", out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record("log", out, (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record("relu", out, (a,), lambda g: (g * (a.data > 0),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    y = np.where(a.data > 0, a.data, neg_part)
    out = Tensor(y)
    return _record("elu", out, (a,), lambda g: (g * np.where(a.data > 0, 1.0, neg_part + alpha),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    return _record("sigmoid", out, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Tensor:
    # log(1 + e^x), computed stably as max(x, 0) + log1p(e^{-|x|})
    a = _as_tensor(a)
    y = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    out = Tensor(y)
    return _record("softplus", out, (a,), lambda g: (g / (1.0 + np.exp(-a.data)),))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

try:
    from scipy.special import erf as _erf
except ImportError:  # pragma: no cover
    _erf = np.vectorize(__import__("math").erf)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * cdf)

    def grad(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _record("gelu", out, (a,), grad)


# ---------------------------------------------------------------------------
# matmul / affine


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def grad(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.shape != a.data.shape:
                ga = _unbroadcast(ga, a.data.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # stacked lhs against a plain weight: contract directly
                k, n = b.data.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                if gb.shape != b.data.shape:
                    gb = _unbroadcast(gb, b.data.shape)
        return (ga, gb)

    return _record("matmul", out, (a, b), grad)


def affine(x, w, b=None) -> Tensor:
    """x @ w (+ b) over the last axis."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(ts), grad)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along one axis by integer index (duplicates allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    out = Tensor(np.take(a.data, idx, axis=axis))

    def grad(g):
        ga = np.zeros_like(a.data)
        # scatter-add handles repeated indices
        np.add.at(ga, (slice(None),) * axis + (idx,), g)
        return (ga,)

    return _record("take", out, (a,), grad)


def take_along_last(a, indices) -> Tensor:
    """Select one entry along the last axis per leading position:
    a (..., N), indices (...) integer -> (...)."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"take_along_last index shape {idx.shape} != {a.data.shape[:-1]}")
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])

    def grad(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _record("take_along_last", out, (a,), grad)


def embedding(table, ids) -> Tensor:
    """Row lookup: table is (N, D), ids any integer shape -> (*ids.shape, D)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()} max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def grad(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _record("embedding", out, (table,), grad)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record("sum", out, (a,), grad)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[i] for i in axes]))

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _record("mean", out, (a,), grad)


# ---------------------------------------------------------------------------
# softmax / layer norm


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def grad(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", out, (a,), grad)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def grad(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), grad)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.shape[-1] != gamma.data.shape[-1] or x.data.shape[-1] != beta.data.shape[-1]:
        raise ShapeError(
            f"layer_norm feature dim mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    n = x.data.shape[-1]

    def grad(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        ggamma = _unbroadcast(g * xhat, gamma.data.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return (gx, ggamma, gbeta)

    return _record("layer_norm", out, (x, gamma, beta), grad)


# ---------------------------------------------------------------------------
# convolution / upsampling (NCHW)


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # (b, c, oh, ow, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NCHW layout, weight (F, C, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: x {x.shape} vs w {w.shape}")
    f, c, kh, kw = w.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(f, c * kh * kw)
    y = (w2 @ cols).reshape(x.data.shape[0], f, oh, ow)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data.reshape(1, f, 1, 1)
        parents.append(b)
    out = Tensor(y)

    def grad(g):
        g2 = g.reshape(g.shape[0], f, oh * ow)
        gw = np.einsum("bfo,bco->fc", g2, cols).reshape(w.data.shape)
        gcols = w2.T @ g2
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding)
        if b is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)).reshape(b.data.shape))
        return (gx, gw)

    return _record("conv2d", out, tuple(parents), grad)


def upsample2x(x) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling (NCHW)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects 4-d input, got {x.shape}")
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))
    b, c, h, w = x.data.shape

    def grad(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample2x", out, (x,), grad)


# ---------------------------------------------------------------------------
# stop-gradient / dropout


def pin_value(value: np.ndarray) -> np.ndarray:
    """Trace hook for values the gradient treats as constants (stop-gradient
    outputs, discrete argmin/sampling results). A no-op normally; under
    grad_check's pinning mode the base pass records them and the
    finite-difference passes replay them, so the check compares against the
    function the tape actually differentiates."""
    st = getattr(_local, "sg_state", None)
    if st is None:
        return value
    if st["mode"] == "record":
        st["values"].append(value)
        return value
    if st["idx"] >= len(st["values"]):
        raise RuntimeError("pinned-value replay ran past the recorded trace")
    v = st["values"][st["idx"]]
    st["idx"] += 1
    return v


def stop_gradient(a) -> Tensor:
    """Forward identity; no gradient flows to the input."""
    a = _as_tensor(a)
    return Tensor(pin_value(a.data))


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    a = _as_tensor(a)
    if p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    keep = keep.astype(a.data.dtype)
    out = Tensor(a.data * keep)
    return _record("dropout", out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# backward / gradient check


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss. Returns a map tensor -> gradient
    covering every requires-grad tensor reached from the loss."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(node.out)
        if g_out is None:
            continue
        parent_grads = node.grad_fn(g_out)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            acc = grads.get(parent)
            grads[parent] = g if acc is None else acc + g
    return grads


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    checked: int
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        note = f", skipped {len(self.skipped)} kink coords" if self.skipped else ""
        return f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} over {self.checked} coords{note}"


def grad_check(f, x: Tensor, tol: float = 1e-4, step: float = 1e-4,
               pin_stop_gradients: bool = True) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f(x) against central finite
    differences, coordinate by coordinate, in double precision.

    Coordinates where forward and backward one-sided differences disagree
    badly (a kink inside the stencil, e.g. relu at 0) are skipped with a
    notice instead of failing the check. With `pin_stop_gradients`,
    stop_gradient outputs recorded on the base pass are replayed during the
    finite-difference evaluations, so losses built on straight-through
    estimators are checked against the function they actually differentiate.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    if pin_stop_gradients:
        _local.sg_state = {"mode": "record", "values": [], "idx": 0}
    try:
        with Tape() as tape:
            loss = f(x64)
            grads = backward(loss, tape)
        if pin_stop_gradients:
            _local.sg_state["mode"] = "replay"
        g_ad = grads.get(x64)
        if g_ad is None:
            g_ad = np.zeros_like(x64.data)

        flat = x64.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        max_rel = 0.0
        skipped: list[tuple[int, str]] = []
        checked = 0

        def eval_at(vec):
            st = getattr(_local, "sg_state", None)
            if st is not None:
                st["idx"] = 0
            t = Tensor(vec.reshape(x64.data.shape), requires_grad=False)
            return float(f(t).data)

        f0 = eval_at(flat)
        for i in range(flat.size):
            orig = flat[i]
            vp, vm = flat.copy(), flat.copy()
            vp[i] = orig + step
            vm[i] = orig - step
            fp, fm = eval_at(vp), eval_at(vm)
            central = (fp - fm) / (2 * step)
            # kink detection: compare the two one-sided slopes
            fwd = (fp - f0) / step
            bwd = (f0 - fm) / step
            scale = max(abs(fwd), abs(bwd), 1.0)
            if abs(fwd - bwd) > 0.1 * scale:
                skipped.append((i, f"one-sided slopes disagree ({fwd:.4g} vs {bwd:.4g})"))
                continue
            denom = max(abs(central), abs(g_flat[i]), 1.0)
            rel = abs(central - g_flat[i]) / denom
            max_rel = max(max_rel, rel)
            checked += 1
    finally:
        _local.sg_state = None

    return GradCheckReport(passed=max_rel < tol, max_rel_err=max_rel, checked=checked, skipped=skipped)
