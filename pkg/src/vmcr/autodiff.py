"""Minimal reverse-mode autodiff over numpy arrays.

Exactly the operation set the segmentation model and its losses need:
elementwise arithmetic, conv2d, 2x2 maxpool, 2x nearest upsampling, channel
concat, relu/sigmoid, weighted BCE-with-logits, and full/mean reductions.
No general broadcasting (tensor-scalar only); shape misuse raises ShapeError
at op time rather than silently broadcasting.

Gradients are verified against central finite differences via `gradcheck`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (teacher inference path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An n-d array plus an optional gradient and backward closure.

    Results of operations hold references to their (grad-requiring) inputs,
    forming the computation graph walked by `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _prev: tuple = (), _backward=None):
        self.data = _as_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NumericsError("non-finite value in tensor data")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self) -> np.ndarray:
        return self.data.copy()

    # -- graph construction helper ------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        live = tuple(p for p in parents if p.requires_grad)
        if _grad_enabled and live:
            return Tensor(data, requires_grad=True, _prev=live, _backward=backward)
        return Tensor(data)

    # -- elementwise arithmetic ----------------------------------------

    def _binary(self, other, fwd, back_a, back_b):
        if isinstance(other, (int, float)):
            other = Tensor(np.full_like(self.data, other, shape=()), dtype=self.dtype)
        if not isinstance(other, Tensor):
            raise TypeError(f"unsupported operand type {type(other)!r}")
        if other.shape != () and other.shape != self.shape:
            raise ShapeError(f"operand shapes {self.shape} vs {other.shape}")
        a, b = self, other
        out_data = fwd(a.data, b.data)

        def backward(out):
            g = out.grad
            if a.requires_grad:
                a._accum(back_a(g, a.data, b.data))
            if b.requires_grad:
                gb = back_b(g, a.data, b.data)
                if b.shape == () and gb.shape != ():
                    gb = gb.sum()
                b._accum(gb)

        return Tensor._result(out_data, (a, b), backward)

    def __add__(self, other):
        return self._binary(other, lambda x, y: x + y,
                            lambda g, x, y: g, lambda g, x, y: g)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return self._binary(other, lambda x, y: x - y,
                            lambda g, x, y: g, lambda g, x, y: -g)

    def __mul__(self, other):
        return self._binary(other, lambda x, y: x * y,
                            lambda g, x, y: g * y, lambda g, x, y: g * x)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.__mul__(-1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division only by python scalar")
        return self.__mul__(1.0 / other)

    # -- reductions -----------------------------------------------------

    def sum(self) -> "Tensor":
        a = self
        out_data = a.data.sum()

        def backward(out):
            a._accum(np.full_like(a.data, out.grad))

        return Tensor._result(out_data, (a,), backward)

    def mean(self) -> "Tensor":
        return self.sum() / float(self.data.size)

    # -- activations -----------------------------------------------------

    def relu(self) -> "Tensor":
        a = self
        out_data = np.maximum(a.data, 0)

        def backward(out):
            a._accum(out.grad * (a.data > 0))

        return Tensor._result(out_data, (a,), backward)

    def sigmoid(self) -> "Tensor":
        a = self
        out_data = _sigmoid(a.data)

        def backward(out):
            a._accum(out.grad * out_data * (1 - out_data))

        return Tensor._result(out_data, (a,), backward)

    # -- backward --------------------------------------------------------

    def backward(self):
        """Populate grads of every reachable requires-grad tensor.

        Root must be scalar. Gradients accumulate additively across
        multiple uses of a node.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node)
                if node.grad is not None and not np.all(np.isfinite(node.grad)):
                    raise NumericsError("non-finite gradient during backward")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic: no overflow for large |x|, output kept
    strictly inside (0, 1) even where the true value rounds to 1."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    one = out.dtype.type(1)
    zero = out.dtype.type(0)
    np.minimum(out, np.nextafter(one, zero), out=out)
    np.maximum(out, np.nextafter(zero, one), out=out)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


# -- structured ops -------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride,
                                  j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation, NCHW input, OIKK weights, per-output-channel bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    n, c, h, wdt = x.shape
    o, ci, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"non-square kernel {w.shape}")
    if ci != c:
        raise ShapeError(f"channel mismatch: input {c} vs kernel {ci}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape}, expected ({o},)")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdt + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {k} does not fit padded input {h}x{wdt} (pad {pad})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)                       # (n, c*k*k, ho*wo)
    wmat = w.data.reshape(o, c * k * k)
    out_data = (wmat @ cols).reshape(n, o, ho, wo) + bias.data.reshape(1, o, 1, 1)

    def backward(out):
        g = out.grad.reshape(n, o, ho * wo)
        if bias.requires_grad:
            bias._accum(out.grad.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w._accum(np.einsum("nop,nkp->ok", g, cols).reshape(w.shape))
        if x.requires_grad:
            dcols = (wmat.T @ g).reshape(n, c, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcols[:, :, i, j]
            x._accum(dxp[:, :, pad:pad + h, pad:pad + wdt] if pad else dxp)

    return Tensor._result(out_data, (x, w, bias), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max. Ties go to the first element in row-major
    window scan order, so runs are reproducible."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5) \
                    .reshape(n, c, h2, w2, 4)
    idx = np.argmax(windows, axis=-1)
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(out):
        gwin = np.zeros((n, c, h2, w2, 4), dtype=x.dtype)
        np.put_along_axis(gwin, idx[..., None], out.grad[..., None], axis=-1)
        x._accum(gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                     .reshape(n, c, h, w))

    return Tensor._result(out_data, (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; backward sums the block."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects 4-d input, got {x.shape}")
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(out):
        n, c, h, w = out.grad.shape
        x._accum(out.grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)))

    return Tensor._result(out_data, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-d inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad[:, :ca])
        if b.requires_grad:
            b._accum(out.grad[:, ca:])

    return Tensor._result(out_data, (a, b), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Elementwise binary cross-entropy on logits; positives weighted.

    Stable form: w_pos*y*softplus(-z) + (1-y)*softplus(z). Targets are
    constants (no gradient)."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"targets shape {y.shape} vs logits {logits.shape}")
    z = logits.data
    out_data = pos_weight * y * _softplus(-z) + (1 - y) * _softplus(z)

    def backward(out):
        s = _sigmoid(z)
        logits._accum(out.grad * (-pos_weight * y * (1 - s) + (1 - y) * s))

    return Tensor._result(out_data, (logits,), backward)


# -- optimizer -------------------------------------------------------------


class Adam:
    """Adam with bias correction over a name->Tensor parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != self.m[name].shape:
                raise ShapeError(f"gradient shape {g.shape} vs state "
                                 f"{self.m[name].shape} for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out


# -- gradient checking ------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_input: int = 0
    worst_index: tuple = ()
    analytic: float = 0.0
    numeric: float = 0.0
    details: list = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def gradcheck(f, inputs: list[Tensor], step: float = 1e-5) -> GradcheckReport:
    """Central finite differences vs analytic backward, 64-bit inputs.

    Relative error per element: |a - n| / max(1e-8, |a| + |n|).
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")
        t.zero_grad()
    out = f(*inputs)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    report = GradcheckReport(max_rel_error=0.0)
    with no_grad():
        for i, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = float(f(*inputs).data)
                flat[j] = orig - step
                fm = float(f(*inputs).data)
                flat[j] = orig
                num = (fp - fm) / (2 * step)
                a = float(analytic[i].reshape(-1)[j])
                rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
                if rel > report.max_rel_error:
                    report.max_rel_error = rel
                    report.worst_input = i
                    report.worst_index = np.unravel_index(j, t.data.shape)
                    report.analytic = a
                    report.numeric = num
    return report
