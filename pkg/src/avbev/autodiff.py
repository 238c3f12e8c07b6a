"""Reverse-mode automatic differentiation over float64 numpy arrays.

A dynamic computation graph is built as ops execute; ``Tensor.backward()``
walks it in reverse topological order and accumulates gradients into every
reachable node.  All arithmetic is 64-bit so analytic gradients can be
verified against central finite differences to tight tolerances.

Conventions:
  * images / feature maps are (N, C, H, W)
  * matmul is strictly 2-D; reshape around it
  * broadcasting in add/mul follows numpy rules, gradients are summed back
    down to each operand's shape
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


class NonScalarLossError(ValueError):
    """Raised when backward() is started from a non-scalar node."""


_node_ids = itertools.count()


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node in the computation graph: value, gradient and parent links."""

    __slots__ = ("data", "grad", "node_id", "name", "needs_grad", "_parents",
                 "_backprop")

    def __init__(self, data, parents: tuple = (), backprop: Callable | None = None,
                 name: str | None = None, needs_grad: bool | None = None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None   # allocated on first accumulation
        self.node_id = next(_node_ids)
        self.name = name
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents) if parents else True
        self.needs_grad = needs_grad
        self._parents = parents
        self._backprop = backprop

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def label(self) -> str:
        return self.name if self.name is not None else f"node{self.node_id}"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r}, id={self.node_id})"

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def _acc(self, g: np.ndarray):
        """Accumulate a gradient contribution (copies on first write)."""
        if not self.needs_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def _acc_own(self, g: np.ndarray):
        """Like _acc for a freshly allocated array the caller hands over."""
        if not self.needs_grad:
            return
        if self.grad is None and g.shape == self.data.shape:
            self.grad = g
        else:
            self._acc(g)

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(node) into .grad for every upstream node."""
        if self.size != 1:
            raise NonScalarLossError(
                f"backward() requires a scalar loss, got shape {self.shape} "
                f"at {self.label()}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __sub__(self, other):
        return add(self, -_lift(other))

    def __rsub__(self, other):
        return add(_lift(other), -self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name=None) -> Tensor:
    """A graph leaf that never needs a gradient (targets, masks, images)."""
    return Tensor(x, name=name, needs_grad=False)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(
            f"add: {a.shape} vs {b.shape} at {a.label()}/{b.label()}")

    def bp(out):
        a._acc(_unbroadcast(out.grad, a.shape))
        b._acc(_unbroadcast(out.grad, b.shape))

    return Tensor(data, (a, b), bp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(
            f"mul: {a.shape} vs {b.shape} at {a.label()}/{b.label()}")

    def bp(out):
        a._acc(_unbroadcast(out.grad * b.data, a.shape))
        b._acc(_unbroadcast(out.grad * a.data, b.shape))

    return Tensor(data, (a, b), bp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: {a.shape} @ {b.shape} at {a.label()}/{b.label()}")
    data = a.data @ b.data

    def bp(out):
        if a.needs_grad:
            a._acc(out.grad @ b.data.T)
        if b.needs_grad:
            b._acc(a.data.T @ out.grad)

    return Tensor(data, (a, b), bp)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bp(out):
        x._acc(out.grad * (x.data > 0.0))

    return Tensor(data, (x,), bp)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                    np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bp(out):
        x._acc(out.grad * data * (1.0 - data))

    return Tensor(data, (x,), bp)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def bp(out):
        x._acc(out.grad * (1.0 - data * data))

    return Tensor(data, (x,), bp)


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bp(out):
        dot = (out.grad * data).sum(axis=axis, keepdims=True)
        x._acc(data * (out.grad - dot))

    return Tensor(data, (x,), bp)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bp(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._acc(np.broadcast_to(g, x.shape))

    return Tensor(data, (x,), bp)


def mean_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.size if axis is None else x.data.size // data.size

    def bp(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._acc(np.broadcast_to(g, x.shape) / n)

    return Tensor(data, (x,), bp)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bp(out):
        x._acc(out.grad.reshape(x.shape))

    return Tensor(data, (x,), bp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of (N, C, H, W)."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"upsample2x expects 4-D, got {x.shape}")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bp(out):
        n, c, h2, w2 = out.grad.shape
        g = out.grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        x._acc_own(g)

    return Tensor(data, (x,), bp)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bp(out):
        x._acc(out.grad.transpose(inverse))

    return Tensor(data, (x,), bp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bp(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(lo, hi)
            p._acc(out.grad[tuple(sl)])

    return Tensor(data, tuple(parts), bp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = x.data[sl]

    def bp(out):
        if not x.needs_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[sl] += out.grad

    return Tensor(data, (x,), bp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding=0) -> Tensor:
    """2-D convolution: x (N,C,H,W) * w (O,C,kh,kw) -> (N,O,Ho,Wo).

    ``padding`` may be an int or an (ph, pw) pair for rectangular kernels.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(
            f"conv2d: x {x.shape} vs w {w.shape} at {x.label()}/{w.label()}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1:
        cols = np.ascontiguousarray(xp.transpose(0, 2, 3, 1)).reshape(
            n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride,
                                                             ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1).T
    out_mat = cols @ wmat
    data = out_mat.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        data = data + b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bp(out):
        g = out.grad
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        if w.needs_grad:
            w._acc((cols.T @ gmat).T.reshape(w.shape))
        if b is not None and b.needs_grad:
            b._acc(g.sum(axis=(0, 2, 3)))
        if not x.needs_grad:
            return
        dcols = (gmat @ wmat.T).reshape(n, ho, wo, c, kh, kw)
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            x._acc(dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2))
            return
        # one contiguous transpose so the per-tap adds stream over (ho, wo)
        dct = np.ascontiguousarray(dcols.transpose(0, 3, 4, 5, 1, 2))
        dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                    dct[:, :, i, j]
        if ph or pw:
            dxp = np.ascontiguousarray(
                dxp[:, :, ph:h + ph, pw:wd + pw])
        x._acc_own(dxp)

    return Tensor(data, parents, bp)


# ---------------------------------------------------------------------------
# gather / scatter (BEV warping and splatting build on these)
# ---------------------------------------------------------------------------

def bilinear_gather(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Sample x (C,H,W) at fractional (rows, cols); zero outside. -> (C,M)

    Differentiable w.r.t. x only; the sample locations are fixed geometry.
    """
    if x.ndim != 3:
        raise ShapeMismatchError(f"bilinear_gather: expected (C,H,W), got {x.shape}")
    c, h, w = x.shape
    rows = np.asarray(rows, dtype=np.float64).ravel()
    cols = np.asarray(cols, dtype=np.float64).ravel()
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    corners = []
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        corners.append((np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1), wt * valid))
    flat = x.data.reshape(c, h * w)
    data = np.zeros((c, rows.size))
    for rr, cc, wt in corners:
        data += flat[:, rr * w + cc] * wt

    def bp(out):
        if not x.needs_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        gflat = x.grad.reshape(c, h * w)
        for rr, cc, wt in corners:
            np.add.at(gflat.T, rr * w + cc, (out.grad * wt).T)

    return Tensor(data, (x,), bp)


def scatter_columns(values: Tensor, index: np.ndarray, n_cols: int) -> Tensor:
    """Sum columns of values (C,M) into an output (C,n_cols) by index.

    Duplicate indices accumulate; this is the splat primitive.
    """
    if values.ndim != 2 or index.shape != (values.shape[1],):
        raise ShapeMismatchError(
            f"scatter_columns: values {values.shape} vs index {index.shape}")
    c = values.shape[0]
    index = np.asarray(index, dtype=np.int64)
    data = np.empty((c, n_cols))
    for ch in range(c):
        data[ch] = np.bincount(index, weights=values.data[ch], minlength=n_cols)

    def bp(out):
        values._acc_own(out.grad[:, index])

    return Tensor(data, (values,), bp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def lift_flatten(feats: Tensor, probs: Tensor) -> Tensor:
    """Fused feature/depth outer product flattened for scattering.

    feats (N, C, H, W) and probs (N, D, H, W) -> (C, N*D*H*W), equal to the
    outer product transposed to channel-major; one op instead of a
    reshape/mul/transpose chain over the largest array in the pipeline.
    """
    if feats.ndim != 4 or probs.ndim != 4 or feats.shape[0] != probs.shape[0] \
            or feats.shape[2:] != probs.shape[2:]:
        raise ShapeMismatchError(
            f"lift_flatten: {feats.shape} vs {probs.shape}")
    nb, c, h, w = feats.shape
    d = probs.shape[1]
    f3 = feats.data.reshape(nb, c, h * w)
    p3 = probs.data.reshape(nb, d, h * w)
    data = np.einsum("ncp,ndp->cndp", f3, p3).reshape(c, nb * d * h * w)

    def bp(out):
        g4 = out.grad.reshape(c, nb, d, h * w)
        if feats.needs_grad:
            feats._acc_own(np.einsum("cndp,ndp->ncp", g4, p3,
                                     optimize=True).reshape(feats.shape))
        if probs.needs_grad:
            probs._acc_own(np.einsum("cndp,ncp->ndp", g4, f3,
                                     optimize=True).reshape(probs.shape))

    return Tensor(data, (feats, probs), bp)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = _as_f64(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.shape:
        raise ShapeMismatchError(f"mse_loss: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    data = np.mean(diff * diff)

    def bp(out):
        pred._acc(out.grad * 2.0 * diff / diff.size)

    return Tensor(data, (pred,), bp)


def bce_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Per-element binary cross-entropy on logits, weighted mean reduction."""
    t = _as_f64(targets.data if isinstance(targets, Tensor) else targets)
    if t.shape != logits.shape:
        raise ShapeMismatchError(f"bce_with_logits: {logits.shape} vs {t.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    if weights is None:
        denom = float(per.size)
        data = per.sum() / denom
        warr = None
    else:
        warr = _as_f64(weights)
        denom = float(np.broadcast_to(warr, per.shape).sum())
        data = (per * warr).sum() / denom
    p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bp(out):
        g = (p - t) / denom
        if warr is not None:
            g = g * warr
        logits._acc(out.grad * g)

    return Tensor(data, (logits,), bp)


def focal_bce(logits: Tensor, targets, gamma: float = 2.0) -> Tensor:
    """Binary focal loss on logits with soft targets, mean reduction."""
    t = _as_f64(targets.data if isinstance(targets, Tensor) else targets)
    if t.shape != logits.shape:
        raise ShapeMismatchError(f"focal_bce: {logits.shape} vs {t.shape}")
    x = logits.data
    log_p = -np.logaddexp(0.0, -x)       # log sigmoid(x)
    log_q = -np.logaddexp(0.0, x)        # log (1 - sigmoid(x))
    p = np.exp(log_p)
    q = np.exp(log_q)
    per = -(t * q**gamma * log_p + (1.0 - t) * p**gamma * log_q)
    n = per.size
    data = per.sum() / n

    def bp(out):
        dpos = gamma * p * q**gamma * log_p - q**(gamma + 1.0)
        dneg = p**(gamma + 1.0) - gamma * q * p**gamma * log_q
        logits._acc(out.grad * (t * dpos + (1.0 - t) * dneg) / n)

    return Tensor(data, (logits,), bp)


def l1_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean absolute error; optional elementwise mask (mean over mask support).

    Subgradient at zero is taken as 0.
    """
    t = _as_f64(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.shape:
        raise ShapeMismatchError(f"l1_loss: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    if mask is None:
        denom = float(diff.size)
        data = np.abs(diff).sum() / denom
        marr = None
    else:
        marr = _as_f64(mask)
        denom = max(float(np.broadcast_to(marr, diff.shape).sum()), 1.0)
        data = (np.abs(diff) * marr).sum() / denom

    def bp(out):
        g = np.sign(diff) / denom
        if marr is not None:
            g = g * marr
        pred._acc(out.grad * g)

    return Tensor(data, (pred,), bp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[Sequence[Tensor]], Tensor],
               points: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the tensors in ``points`` to a scalar Tensor.  The error at
    each coordinate is |analytic - numeric| / max(1, |numeric|); the max over
    all coordinates of all tensors is returned.  Non-finite values raise with
    the offending tensor and flat coordinate index.
    """
    for p in points:
        p.zero_grad()
    loss = fn(points)
    loss.backward()
    analytic = [p.grad_or_zeros().copy() for p in points]
    worst = 0.0
    for ti, p in enumerate(points):
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(points).item()
            flat[i] = orig - eps
            dn = fn(points).item()
            flat[i] = orig
            numeric = (up - dn) / (2.0 * eps)
            ana = analytic[ti].ravel()[i]
            if not (np.isfinite(numeric) and np.isfinite(ana)):
                raise FloatingPointError(
                    f"grad_check: non-finite at tensor {ti} ({p.label()}), "
                    f"coordinate {i}: analytic={ana}, numeric={numeric}")
            err = abs(ana - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
