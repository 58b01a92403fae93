"""Reverse-mode tape autodiff on numpy arrays.

Float32 at runtime, float64 when verifying gradients. Ops record nodes on the
active Tape only when some input requires grad; a forward pass with frozen
inputs therefore costs exactly the numpy math. backward() walks the tape in
reverse, which is reverse topological order because nodes are appended in
execution order.

Every op checks its output for NaN/Inf and raises NumericError instead of
letting them propagate (set_finite_checks(False) disables this for timing
runs; the test suite keeps it on).
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shape or rank mismatch."""


class ContractError(ValueError):
    """Input violates an op's documented contract."""


class NumericError(ArithmeticError):
    """Non-finite value or domain violation."""


_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _check_finite(data: np.ndarray, name: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"{name} produced non-finite values")


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed ops. Single-owner: one tape per loss, one
    thread. Enter as a context manager to make it the recording target."""

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []
        self.produced: set[int] = set()
        self._prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = self._prev
        self._prev = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype not in (np.float32, np.float64):
                raise ContractError("tensors are float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise ContractError(f"mixed dtypes {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, _coerce(b, a.dtype)
    return _coerce(a, b.dtype), b


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = Tape._active
    if tape is not None and out.requires_grad:
        tape.nodes.append(_Node(out, inputs, backward))
        tape.produced.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every requires_grad leaf
    reached from loss through this tape. Repeated calls accumulate."""
    if loss.data.size != 1:
        raise ContractError("backward needs a scalar loss")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in tape.produced:
                acc = pending.get(id(t))
                pending[id(t)] = gi if acc is None else acc + gi
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
    pending.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to shape (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b, name):
    a, b = _pair(a, b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"{name}: {e}") from None

    def bw(g):
        return (
            _unbroadcast(bwd_a(g, a.data, b.data), a.shape),
            _unbroadcast(bwd_b(g, a.data, b.data), b.shape),
        )

    return _make(data, (a, b), bw, name)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def _div_fwd(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return x / y  # zeros in y produce inf/nan, caught by the finite check


def div(a, b):
    return _binary(
        a, b,
        _div_fwd,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
        "div",
    )


def _unary(x: Tensor, fwd, bwd, name):
    data = fwd(x.data)

    def bw(g):
        return (bwd(g, x.data, data),)

    return _make(data, (x,), bw, name)


def neg(x: Tensor) -> Tensor:
    return _unary(x, lambda v: -v, lambda g, v, o: -g, "neg")


def relu(x: Tensor) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0), lambda g, v, o: g * (v > 0), "relu")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    def fwd(v):
        return np.where(v > 0, v, v * v.dtype.type(alpha))

    def bwd(g, v, o):
        return g * np.where(v > 0, v.dtype.type(1), v.dtype.type(alpha))

    return _unary(x, fwd, bwd, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # 0.5 * (tanh(x/2) + 1) is overflow-free for any finite x
    def fwd(v):
        return v.dtype.type(0.5) * (np.tanh(v * v.dtype.type(0.5)) + v.dtype.type(1))

    return _unary(x, fwd, lambda g, v, o: g * o * (1 - o), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return _unary(x, np.tanh, lambda g, v, o: g * (1 - o * o), "tanh")


def abs_(x: Tensor) -> Tensor:
    return _unary(x, np.abs, lambda g, v, o: g * np.sign(v), "abs")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericError("sqrt of negative value")
    return _unary(x, np.sqrt, lambda g, v, o: g * 0.5 / np.maximum(o, o.dtype.type(1e-30)), "sqrt")


def clamp01(x: Tensor) -> Tensor:
    """Clip to [0, 1] with a straight-through gradient (backward = identity)."""
    return _unary(x, lambda v: np.clip(v, 0.0, 1.0), lambda g, v, o: g, "clamp01")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi], straight-through gradient."""
    return _unary(x, lambda v: np.clip(v, lo, hi), lambda g, v, o: g, "clamp")


def round_ste(x: Tensor) -> Tensor:
    """Round to nearest with a straight-through gradient."""
    return _unary(x, np.rint, lambda g, v, o: g, "round_ste")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    data = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))

    def bw(g):
        gg = g if keepdims or x.data.ndim == 0 else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _make(data, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    s = sum_(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {e}") from None

    def bw(g):
        return (g.reshape(x.data.shape),)

    return _make(data, (x,), bw, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    dt = tensors[0].dtype
    for t in tensors:
        if t.dtype != dt:
            raise ContractError("concat: mixed dtypes")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bw, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.data.shape[axis]):
        raise DimensionError("narrow out of range")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = x.data[sl].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _make(data, (x,), bw, "narrow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def bw(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(data, (a, b), bw, "matmul")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """(C, H, W) -> (C, 2H, 2W) by pixel repetition."""
    if x.data.ndim != 3:
        raise DimensionError("upsample_nearest2x expects (C, H, W)")
    data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    c, h, w = x.data.shape

    def bw(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _make(data, (x,), bw, "upsample_nearest2x")


def pad_reflect2d(x: Tensor, pad: int) -> Tensor:
    """Reflect-pad the two trailing axes of a (C, H, W) tensor."""
    if x.data.ndim != 3:
        raise DimensionError("pad_reflect2d expects (C, H, W)")
    if pad == 0:
        return x
    c, h, w = x.data.shape
    if pad >= h or pad >= w:
        raise ContractError("reflect pad wider than the image")
    data = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    # source index of every padded cell, by padding an index image
    idx = np.pad(np.arange(h * w).reshape(h, w), pad, mode="reflect")

    def bw(g):
        hp, wp = idx.shape
        flat = (idx[None, :, :] + (np.arange(c) * h * w)[:, None, None]).ravel()
        acc = np.bincount(flat, weights=g.ravel().astype(np.float64), minlength=c * h * w)
        return (acc.reshape(c, h, w).astype(g.dtype),)

    return _make(data, (x,), bw, "pad_reflect2d")


# conv2d: im2col forward, bincount col2im backward. Index maps cached by
# geometry since training reuses a handful of shapes thousands of times.
_COL_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _col_indices(cin, hp, wp, kh, kw, stride):
    key = (cin, hp, wp, kh, kw, stride)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    oy = (np.arange(ho) * stride)[:, None, None, None, None]
    ox = (np.arange(wo) * stride)[None, :, None, None, None]
    cc = np.arange(cin)[None, None, :, None, None]
    ky = np.arange(kh)[None, None, None, :, None]
    kx = np.arange(kw)[None, None, None, None, :]
    idx = cc * (hp * wp) + (oy + ky) * wp + (ox + kx)
    idx = idx.reshape(ho * wo, cin * kh * kw)
    _COL_INDEX_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) on a single (C_in, H, W) image.

    w: (C_out, C_in, kh, kw); optional bias (C_out,). Zero padding.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x (C,H,W) and w (O,C,kh,kw)")
    cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch {cin} vs {cin_w}")
    if x.dtype != w.dtype or (b is not None and b.dtype != x.dtype):
        raise ContractError("conv2d mixed dtypes")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError("conv2d kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    idx = _col_indices(cin, hp, wp, kh, kw, stride)
    cols = xp.reshape(-1)[idx]  # (ho*wo, cin*kh*kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T  # (ho*wo, cout)
    if b is not None:
        out = out + b.data[None, :]
    data = np.ascontiguousarray(out.T.reshape(cout, ho, wo))

    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.reshape(cout, -1).T  # (ho*wo, cout)
        dw = (gmat.T @ cols).reshape(w.data.shape)
        dcols = gmat @ wmat  # (ho*wo, cin*kh*kw)
        acc = np.bincount(
            idx.ravel(), weights=dcols.ravel().astype(np.float64), minlength=cin * hp * wp
        ).reshape(cin, hp, wp)
        dx = acc[:, padding : padding + h, padding : padding + wdt].astype(g.dtype)
        if b is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(1, 2)))

    return _make(data, inputs, bw, "conv2d")


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of (C, H, W) at grid (Ho, Wo, 2) in [-1, 1] coords.

    grid[..., 0] is x (width), grid[..., 1] is y (height); -1/+1 map to the
    first/last pixel centers (align-corners). Out-of-range samples read zero.
    Differentiable in both the image and the grid.
    """
    if x.data.ndim != 3 or grid.data.ndim != 3 or grid.data.shape[2] != 2:
        raise DimensionError("grid_sample expects x (C,H,W), grid (Ho,Wo,2)")
    if x.dtype != grid.dtype:
        raise ContractError("grid_sample mixed dtypes")
    c, h, w = x.data.shape
    ft = x.data.dtype.type
    # positions in float64 so a float32 identity grid lands on exact pixel
    # centers; the interpolation weights drop back to the image dtype
    px = (grid.data[..., 0].astype(np.float64) + 1.0) * 0.5 * (w - 1)
    py = (grid.data[..., 1].astype(np.float64) + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = (px - x0).astype(ft)
    wy = (py - y0).astype(ft)
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    vals = []
    masks = []
    coords = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0i + dx
            yi = y0i + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            v = x.data[:, yi_c, xi_c] * ok  # (C, Ho, Wo)
            vals.append(v)
            masks.append(ok)
            coords.append((yi_c, xi_c))
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    weights = [w00, w01, w10, w11]
    data = sum(v * wt for v, wt in zip(vals, weights)).astype(x.data.dtype)

    def bw(g):
        dx_img = np.zeros(c * h * w, dtype=np.float64)
        for (yi, xi), ok, wt in zip(coords, masks, weights):
            flat = (yi * w + xi)[None, :, :] + (np.arange(c) * h * w)[:, None, None]
            contrib = (g * (wt * ok)[None, :, :]).astype(np.float64)
            dx_img += np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=c * h * w)
        dximg = dx_img.reshape(c, h, w).astype(g.dtype)

        gsum = lambda v: (g * v).sum(axis=0)  # noqa: E731
        dpx = gsum((1 - wy) * (vals[1] - vals[0]) + wy * (vals[3] - vals[2]))
        dpy = gsum((1 - wx) * (vals[2] - vals[0]) + wx * (vals[3] - vals[1]))
        dgrid = np.stack(
            [dpx * ft(0.5) * ft(w - 1), dpy * ft(0.5) * ft(h - 1)], axis=-1
        ).astype(g.dtype)
        return (dximg, dgrid)

    return _make(data, (x, grid), bw, "grid_sample")
