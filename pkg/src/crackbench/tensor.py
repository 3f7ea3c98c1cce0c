"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are numpy arrays in fixed NCHW layout. Every op builds a node in a
tape-style graph (parents + a backward closure that maps the incoming
gradient to one gradient per parent); calling ``backward()`` on a scalar
result accumulates gradients into every reachable tensor that requires
them. Single precision is the default; pass float64 arrays for
gradient-check work.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "no_grad",
    "conv2d",
    "maxpool2",
    "bilinear_upsample",
    "bilinear_kernel_1d",
    "concat_channels",
    "concat_all",
    "relu",
    "sigmoid",
    "abs_val",
    "grad_check",
    "sigmoid_np",
    "softplus_np",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / FD evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when an op receives tensors of incompatible shape."""


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and data.dtype in _FLOAT_DTYPES:
        return data
    return np.asarray(data, dtype=dtype or np.float32)


# A backward closure receives the output gradient and returns one gradient
# array (or None) per parent, in parent order. Returned arrays are never
# mutated in place by the engine, so views and aliases are safe to return.
BackwardFn = Callable[[np.ndarray], tuple]


class Tensor:
    """Dense n-d array with an optional gradient slot.

    ``grad`` is lazily allocated on the first backward accumulation and has
    the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "meta", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.meta: dict = {}
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: BackwardFn) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- public helpers ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                held = grads.get(key)
                grads[key] = pg if held is None else held + pg

    # -- arithmetic (the little we need) --------------------------------------

    def __add__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.dtype))
        if other.shape != self.shape and other.data.size != 1 and self.data.size != 1:
            raise ShapeError(f"add shape mismatch: {self.shape} vs {other.shape}")
        a, b = self, other
        out_data = a.data + b.data

        def backward(g: np.ndarray) -> tuple:
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(out_data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, scalar) -> "Tensor":
        s = float(scalar)
        x = self

        def backward(g: np.ndarray) -> tuple:
            return (g * s,)

        return Tensor._from_op(x.data * s, (x,), backward)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        x = self
        out_data = np.asarray(x.data.sum(dtype=x.dtype))

        def backward(g: np.ndarray) -> tuple:
            return (np.broadcast_to(g, x.shape),)

        return Tensor._from_op(out_data, (x,), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return np.broadcast_to(g, shape)


class Parameter:
    """A named tensor with a learnable flag.

    Frozen parameters (``learnable=False``) never receive gradients and are
    skipped by the optimizer, so their bytes are stable across training.
    """

    __slots__ = ("name", "value", "learnable")

    def __init__(self, name: str, data, learnable: bool = True, dtype=None):
        self.name = name
        self.value = Tensor(data, requires_grad=learnable, dtype=dtype)
        self.learnable = bool(learnable)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self) -> str:
        kind = "learnable" if self.learnable else "frozen"
        return f"Parameter({self.name!r}, shape={self.data.shape}, {kind})"


# ---------------------------------------------------------------------------
# numerics helpers (plain numpy, shared with the loss module)
# ---------------------------------------------------------------------------

def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large |x|
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _require_nchw(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name} must be NCHW, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """(N, C, Hp, Wp) -> (N, C*k*k, Ho*Wo) patch matrix (copied)."""
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape: tuple[int, ...], k: int, stride: int,
            pad: int) -> np.ndarray:
    """Scatter-add a patch matrix back to the (unpadded) input layout."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols6 = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        hi = i + stride * ho
        for j in range(k):
            wj = j + stride * wo
            xp[:, :, i:hi:stride, j:wj:stride] += cols6[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``weight`` is (C_out, C_in, k, k); ``bias`` is (C_out,). Zero padding.
    Output extent per axis is floor((H + 2*pad - k)/stride) + 1. Backward
    yields gradients for input, weight and bias.
    """
    _require_nchw(x, "conv2d input")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise ShapeError(f"conv2d weight must be (C_out, C_in, k, k), got {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d pad must be >= 0, got {pad}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, weight expects {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be ({c_out},), got {bias.shape}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(
            f"conv2d kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, k, stride)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out_data = (w2 @ cols).reshape(n, c_out, ho, wo) + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> tuple:
        g2 = g.reshape(n, c_out, ho * wo)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.einsum("nop,nfp->of", g2, cols, optimize=True).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.einsum("of,nop->nfp", w2, g2, optimize=True)
            gx = _col2im(dcols, x.shape, k, stride, pad)
        return gx, gw, gb

    return Tensor._from_op(out_data, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.

    Odd extents are replication-padded to even first (recorded in
    ``out.meta['pool_pad']``). Backward routes each gradient element to the
    first (row-major) maximum of its window, so gradient mass is conserved.
    """
    _require_nchw(x, "maxpool2 input")
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    else:
        xp = x.data
    hp, wp = h + ph, w + pw
    windows = xp.reshape(n, c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, hp // 2, wp // 2, 4)
    idx = np.argmax(flat, axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> tuple:
        gflat = np.zeros((n, c, hp // 2, wp // 2, 4), dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gp = gflat.reshape(n, c, hp // 2, wp // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gp = np.ascontiguousarray(gp.reshape(n, c, hp, wp))
        if ph:
            gp[:, :, h - 1, :] += gp[:, :, h, :]
        if pw:
            gp[:, :, :, w - 1] += gp[:, :, :, w]
        return (np.ascontiguousarray(gp[:, :, :h, :w]),)

    out = Tensor._from_op(out_data, (x,), backward)
    if ph or pw:
        out.meta["pool_pad"] = (ph, pw)
    return out


# ---------------------------------------------------------------------------
# fixed bilinear upsampling
# ---------------------------------------------------------------------------

def bilinear_kernel_1d(factor: int, dtype=np.float32) -> np.ndarray:
    """Tent kernel of a stride-``factor`` transposed convolution."""
    size = 2 * factor - factor % 2
    center = (size - 1) / 2.0
    i = np.arange(size, dtype=np.float64)
    return (1.0 - np.abs(i - center) / factor).astype(dtype)


def _upsample_matrix(h: int, factor: int, dtype) -> np.ndarray:
    """Dense (factor*h, h) operator: transposed conv + border renormalization.

    Rows hold the stride-``factor`` transposed-convolution stencil of the
    tent kernel; each row is rescaled to sum to 1 so constants stay constant
    at the borders (interior rows already sum to 1).
    """
    k1d = bilinear_kernel_1d(factor, np.float64)
    ksize = k1d.size
    pad = (ksize - factor) // 2
    out_h = factor * h
    mat = np.zeros((out_h, h), dtype=np.float64)
    for p in range(out_h):
        lo = -(-(p + pad - ksize + 1) // factor)  # ceil division
        for i in range(max(lo, 0), h):
            j = p + pad - factor * i
            if j < 0:
                break
            if j < ksize:
                mat[p, i] = k1d[j]
    mat /= mat.sum(axis=1, keepdims=True)
    return mat.astype(dtype)


_UPSAMPLE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _get_upsample_matrix(h: int, factor: int, dtype) -> np.ndarray:
    key = (h, factor, np.dtype(dtype).name)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = _upsample_matrix(h, factor, dtype)
        _UPSAMPLE_CACHE[key] = m
    return m


def bilinear_upsample(x: Tensor, factor: int,
                      size: Optional[tuple[int, int]] = None) -> Tensor:
    """Fixed-weight bilinear upsampling by an integer factor.

    Equivalent to a transposed convolution with the standard tent kernel,
    with border rows renormalized (partition of unity). The kernel is a
    constant of the op: no gradient flows to it, only to the input. ``size``
    crops the top-left corner to an exact target after upsampling.
    """
    _require_nchw(x, "bilinear_upsample input")
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if factor == 1:
        if size is None or size == (h, w):
            def backward_id(g: np.ndarray) -> tuple:
                return (g,)

            return Tensor._from_op(x.data, (x,), backward_id)
        th, tw = size

        def backward_crop(g: np.ndarray) -> tuple:
            gp = np.zeros_like(x.data)
            gp[:, :, :th, :tw] = g
            return (gp,)

        return Tensor._from_op(np.ascontiguousarray(x.data[:, :, :th, :tw]),
                               (x,), backward_crop)

    ah = _get_upsample_matrix(h, factor, x.dtype)
    aw = _get_upsample_matrix(w, factor, x.dtype)
    if size is not None:
        th, tw = size
        if th > factor * h or tw > factor * w:
            raise ShapeError(
                f"crop target {size} exceeds upsampled extent {(factor * h, factor * w)}")
        ah = ah[:th]
        aw = aw[:tw]
    # y[n,c,p,q] = sum_ij ah[p,i] x[n,c,i,j] aw[q,j], applied as two matmuls
    out_data = np.einsum("pi,ncij,qj->ncpq", ah, x.data, aw, optimize=True)

    def backward(g: np.ndarray) -> tuple:
        return (np.einsum("pi,ncpq,qj->ncij", ah, g, aw, optimize=True),)

    return Tensor._from_op(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# concatenation and activations
# ---------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; backward splits by channel range."""
    _require_nchw(a, "concat_channels a")
    _require_nchw(b, "concat_channels b")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(g: np.ndarray) -> tuple:
        return g[:, :ca], g[:, ca:]

    return Tensor._from_op(out_data, (a, b), backward)


def concat_all(tensors: Sequence[Tensor]) -> Tensor:
    """Left fold of :func:`concat_channels` over one or more tensors."""
    if not tensors:
        raise ValueError("concat_all needs at least one tensor")
    acc = tensors[0]
    for t in tensors[1:]:
        acc = concat_channels(acc, t)
    return acc


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def backward(g: np.ndarray) -> tuple:
        return (np.where(mask, g, 0),)

    return Tensor._from_op(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)

    def backward(g: np.ndarray) -> tuple:
        return (g * s * (1.0 - s),)

    return Tensor._from_op(s, (x,), backward)


def abs_val(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""

    def backward(g: np.ndarray) -> tuple:
        return (g * np.sign(x.data),)

    return Tensor._from_op(np.abs(x.data), (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter],
               eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must rebuild the scalar objective from the parameters' current
    values on every call, and learnable parameters must be double precision.
    Frozen parameters are skipped (their error is 0 by definition). Returns
    the maximum per-entry error |analytic - fd| / max(1, |analytic|, |fd|).
    """
    params = list(params)
    for p in params:
        if p.learnable and p.data.dtype != np.float64:
            raise ValueError(
                f"grad_check requires float64 parameters, {p.name} is {p.data.dtype}")

    for p in params:
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ValueError(f"grad_check objective must be scalar, got shape {loss.shape}")
    loss.backward()
    analytic = {
        p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for p in params if p.learnable
    }

    max_err = 0.0
    with no_grad():
        for p in params:
            if not p.learnable:
                continue
            flat = p.data.reshape(-1)
            an = analytic[p.name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                a = an[i]
                err = abs(a - fd) / max(1.0, abs(a), abs(fd))
                if err > max_err:
                    max_err = err
    return max_err
