"""Dense rank-4 tensors with tape-based reverse-mode differentiation.

Every value is a ``[N, H, W, C]`` array. Operations executed while a
:class:`Tape` is active, and with at least one input that requires a
gradient, are appended to that tape together with a closure computing the
vector-Jacobian product. :meth:`Tape.backward` walks the records in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "ShapeError", "NonFiniteError",
    "precision", "default_dtype", "no_grad",
    "conv2d", "conv_transpose2d", "batchnorm", "RunningStats",
    "relu", "sigmoid", "tanh", "add", "sub", "mul", "hadamard", "scale",
    "concat", "total", "mean", "square", "sum_per_sample", "mse", "elementwise",
]

_DTYPE = np.float32
_TAPES: list["Tape"] = []
_CHECK_FINITE = True
# im2col working buffers above this byte size fall back to per-offset matmuls
_IM2COL_BUDGET = 64 * 2**20


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the dtype used for newly created tensors (32 or 64)."""
    global _DTYPE
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    old = _DTYPE
    _DTYPE = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Suspend recording on all active tapes."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


class Tensor:
    """Immutable-by-convention 4-D array node."""

    __slots__ = ("data", "requires_grad", "param")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 [N,H,W,C]; got shape {arr.shape}")
        if _CHECK_FINITE and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.param = None

    @classmethod
    def zeros(cls, shape, dtype=None):
        return cls(np.zeros(shape, dtype=dtype or _DTYPE))

    @classmethod
    def scalar(cls, value: float):
        return cls(np.full((1, 1, 1, 1), value, dtype=_DTYPE))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """Trainable tensor with its gradient and Adam moments."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.value.param = self
        self.grad = np.zeros_like(self.value.data)
        self.adam_m = np.zeros_like(self.value.data)
        self.adam_v = np.zeros_like(self.value.data)
        self.step_count = 0
        self.trainable = True

    @property
    def shape(self):
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def assign(self, arr) -> None:
        arr = np.asarray(arr, dtype=self.value.data.dtype)
        if arr.shape != self.value.shape:
            raise ShapeError(f"cannot assign {arr.shape} to parameter {self.name} of shape {self.value.shape}")
        self.value.data = arr.copy()

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Record:
    __slots__ = ("out", "inputs", "vjp", "name")

    def __init__(self, out, inputs, vjp, name):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside are recorded. Records are
    appended in execution order, so every input precedes its consumers.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Reverse sweep from ``loss``; returns ``{id(leaf): grad}``.

        Only leaves (tensors not produced by a record on this tape) appear in
        the result. If ``wrt`` is given, missing entries are filled with zeros.
        """
        if loss.data.size != 1 or loss.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        for rec in reversed(self.records):
            produced.add(id(rec.out))
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out = {k: v for k, v in grads.items() if k not in produced}
        if wrt is not None:
            for t in wrt:
                out.setdefault(id(t), np.zeros_like(t.data))
        return out

    def backward(self, loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
        """Accumulate d(loss)/d(param) into ``param.grad``.

        With ``params=None`` every parameter reached by the sweep is updated.
        Parameters listed but unreachable keep their (zero) gradients.
        """
        if loss.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
        grads = self.gradients(loss)
        if params is None:
            seen = {}
            for rec in self.records:
                for inp in rec.inputs:
                    if inp.param is not None:
                        seen[id(inp)] = inp.param
            targets = seen.values()
        else:
            targets = params
        for p in targets:
            g = grads.get(id(p.value))
            if g is not None:
                p.grad += g


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _make(out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
    t = Tensor(out)
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.records.append(_Record(t, tuple(inputs), vjp, name))
    return t


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.value
    return Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def _same_pads(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def _conv_core(xp: np.ndarray, k: np.ndarray, sh: int, sw: int):
    """Valid correlation of padded input ``xp`` with kernel ``k``.

    Returns the output plus a context tuple for the backward pass.
    """
    n, hp, wp, cin = xp.shape
    kh, kw, _, cout = k.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {k.shape[:2]} larger than padded input {xp.shape[1:3]}")
    rows = n * ho * wo
    if kh == 1 and kw == 1 and sh == 1 and sw == 1:
        cols = xp.reshape(rows, cin)
        out = cols @ k.reshape(cin, cout)
        return out.reshape(n, ho, wo, cout), ("1x1", cols)
    if (sh, sw) == (kh, kw):
        crop = xp[:, : ho * kh, : wo * kw, :]
        cols = (crop.reshape(n, ho, kh, wo, kw, cin)
                .transpose(0, 1, 3, 2, 4, 5).reshape(rows, kh * kw * cin))
        out = cols @ k.reshape(kh * kw * cin, cout)
        return out.reshape(n, ho, wo, cout), ("patch", cols)
    if rows * kh * kw * cin * xp.itemsize <= _IM2COL_BUDGET:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(rows, kh * kw * cin)
        out = cols @ k.reshape(kh * kw * cin, cout)
        return out.reshape(n, ho, wo, cout), ("im2col", cols)
    out = np.zeros((rows, cout), dtype=np.result_type(xp, k))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :]
            out += xs.reshape(rows, cin) @ k[i, j]
    return out.reshape(n, ho, wo, cout), ("loop", None)


def _conv_core_backward(g: np.ndarray, xp: np.ndarray, k: np.ndarray, sh: int, sw: int, ctx):
    kind, cols = ctx
    n, hp, wp, cin = xp.shape
    kh, kw, _, cout = k.shape
    _, ho, wo, _ = g.shape
    rows = n * ho * wo
    g2 = g.reshape(rows, cout)
    if kind == "1x1":
        dk = (cols.T @ g2).reshape(k.shape)
        dxp = (g2 @ k.reshape(cin, cout).T).reshape(xp.shape)
        return dxp, dk
    if kind == "patch":
        dk = (cols.T @ g2).reshape(k.shape)
        dcols = g2 @ k.reshape(kh * kw * cin, cout).T
        dxp = np.zeros_like(xp)
        dxp[:, : ho * kh, : wo * kw, :] = (dcols.reshape(n, ho, wo, kh, kw, cin)
                                           .transpose(0, 1, 3, 2, 4, 5)
                                           .reshape(n, ho * kh, wo * kw, cin))
        return dxp, dk
    if sh == 1 and sw == 1 and cout < cin and rows * kh * kw * cout * g.itemsize <= _IM2COL_BUDGET:
        # stride 1: input grad is a full correlation of g with the flipped kernel
        gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        kf = np.ascontiguousarray(k[::-1, ::-1].transpose(0, 1, 3, 2))
        dxp, _ = _conv_core(gp, kf, 1, 1)
        if dxp.shape != xp.shape:  # rows/cols of xp never touched by the kernel
            full = np.zeros_like(xp)
            full[:, : dxp.shape[1], : dxp.shape[2], :] = dxp
            dxp = full
        if kind == "im2col":
            dk = (cols.T @ g2).reshape(k.shape)
        else:
            dk = np.empty_like(k)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, i : i + ho, j : j + wo, :].reshape(rows, cin)
                    dk[i, j] = xs.T @ g2
        return dxp, dk
    dxp = np.zeros_like(xp)
    if kind == "im2col":
        dk = (cols.T @ g2).reshape(k.shape)
        dcols = (g2 @ k.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += dcols[:, :, :, i, j, :]
        return dxp, dk
    dk = np.zeros_like(k)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
            xs = xp[sl].reshape(rows, cin)
            dk[i, j] = xs.T @ g2
            dxp[sl] += (g2 @ k[i, j].T).reshape(n, ho, wo, cin)
    return dxp, dk


def conv2d(x, kernel, bias=None, stride=(1, 1), padding: str = "valid") -> Tensor:
    """2-D cross-correlation, channel-last.

    ``kernel`` is ``[kh, kw, Cin, Cout]``; ``bias`` is ``[1, 1, 1, Cout]``.
    ``padding="same"`` zero-pads so that the output is ``ceil(H / stride)``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    b = _as_tensor(bias) if bias is not None else None
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input {x.shape} has {x.shape[3]} channels but kernel {kernel.shape} expects {cin}")
    if b is not None and b.shape != (1, 1, 1, cout):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {kernel.shape}")
    if padding == "same":
        pt, pb = _same_pads(x.shape[1], kh, sh)
        pl, pr = _same_pads(x.shape[2], kw, sw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
    out, ctx = _conv_core(xp, kernel.data, sh, sw)
    if b is not None:
        out = out + b.data
    h, w = xd.shape[1], xd.shape[2]

    def vjp(g):
        dxp, dk = _conv_core_backward(g, xp, kernel.data, sh, sw, ctx)
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        db = g.sum(axis=(0, 1, 2)).reshape(1, 1, 1, -1) if b is not None else None
        return dx, dk, db

    inputs = (x, kernel, b) if b is not None else (x, kernel)
    return _make(out, inputs, vjp, "conv2d")


def _convT_core(xd: np.ndarray, k: np.ndarray, sh: int, sw: int) -> np.ndarray:
    n, h, w, cin = xd.shape
    kh, kw, cout, _ = k.shape
    rows = n * h * w
    x2 = xd.reshape(rows, cin)
    if (sh, sw) == (kh, kw):
        kmat = k.transpose(3, 0, 1, 2).reshape(cin, kh * kw * cout)
        out = (x2 @ kmat).reshape(n, h, w, kh, kw, cout).transpose(0, 1, 3, 2, 4, 5)
        return out.reshape(n, h * kh, w * kw, cout)
    out = np.zeros((n, (h - 1) * sh + kh, (w - 1) * sw + kw, cout), dtype=np.result_type(xd, k))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * (h - 1) + 1 : sh, j : j + sw * (w - 1) + 1 : sw, :] += (x2 @ k[i, j].T).reshape(n, h, w, cout)
    return out


def conv_transpose2d(x, kernel, bias=None, stride=(1, 1)) -> Tensor:
    """Transposed convolution; the adjoint of a valid :func:`conv2d`.

    ``kernel`` is ``[kh, kw, Cout, Cin]``. Output spatial size is
    ``(H - 1) * stride + k``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    b = _as_tensor(bias) if bias is not None else None
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv_transpose2d: stride must be >= 1, got {(sh, sw)}")
    kh, kw, cout, cin = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv_transpose2d: input {x.shape} has {x.shape[3]} channels but kernel {kernel.shape} expects {cin}")
    if b is not None and b.shape != (1, 1, 1, cout):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} does not match kernel {kernel.shape}")
    xd, kd = x.data, kernel.data
    out = _convT_core(xd, kd, sh, sw)
    if b is not None:
        out = out + b.data

    def vjp(g):
        # [kh,kw,Cout,Cin] read as a correlation kernel maps g back to x
        dx, _ = _conv_core(g, kd, sh, sw)
        n, h, w, _ = xd.shape
        rows = n * h * w
        x2 = xd.reshape(rows, cin)
        dk = np.zeros_like(kd)
        for i in range(kh):
            for j in range(kw):
                gs = g[:, i : i + sh * (h - 1) + 1 : sh, j : j + sw * (w - 1) + 1 : sw, :].reshape(rows, cout)
                dk[i, j] = gs.T @ x2
        db = g.sum(axis=(0, 1, 2)).reshape(1, 1, 1, -1) if b is not None else None
        return dx, dk, db

    inputs = (x, kernel, b) if b is not None else (x, kernel)
    return _make(out, inputs, vjp, "conv_transpose2d")


# ---------------------------------------------------------------------------
# batch normalization


class RunningStats:
    """Per-channel running mean/variance for eval-mode batchnorm."""

    def __init__(self, channels: int, dtype=None):
        dt = dtype or _DTYPE
        self.mean = np.zeros((1, 1, 1, channels), dtype=dt)
        self.var = np.ones((1, 1, 1, channels), dtype=dt)
        self.count = 0

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float):
        if self.count == 0:
            self.mean = mean.astype(self.mean.dtype, copy=True)
            self.var = var.astype(self.var.dtype, copy=True)
        else:
            self.mean = ((1 - momentum) * self.mean + momentum * mean).astype(self.mean.dtype)
            self.var = ((1 - momentum) * self.var + momentum * var).astype(self.var.dtype)
        self.count += 1


def batchnorm(x, gamma, beta, mode: str = "train", running: RunningStats | None = None,
              momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    """Per-channel normalization over ``N*H*W`` followed by ``gamma * xhat + beta``."""
    if epsilon <= 0:
        raise ValueError("batchnorm epsilon must be > 0")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[3]
    if gamma.shape != (1, 1, 1, c) or beta.shape != (1, 1, 1, c):
        raise ShapeError(f"batchnorm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}")
    xd, gd = x.data, gamma.data
    m = xd.shape[0] * xd.shape[1] * xd.shape[2]
    if mode == "train":
        mu = xd.mean(axis=(0, 1, 2), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 1, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + epsilon)
        xhat = xc * inv
        if running is not None:
            running.update(mu, var, momentum)
    elif mode == "eval":
        if running is None or running.count == 0:
            raise RuntimeError("batchnorm eval mode requires running statistics recorded during training")
        inv = 1.0 / np.sqrt(running.var + epsilon)
        xhat = (xd - running.mean) * inv
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    out = gd * xhat + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 1, 2), keepdims=True)
        dbeta = g.sum(axis=(0, 1, 2), keepdims=True)
        dxhat = g * gd
        if mode == "train":
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2), keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=(0, 1, 2), keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp, "batchnorm")


# ---------------------------------------------------------------------------
# elementwise


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign to avoid overflow in exp
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_bin(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    # channel-vector broadcast only: b is [1,1,1,C]
    if b.shape == (1, 1, 1, a.shape[3]) or b.shape == (1, 1, 1, 1):
        return
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bin(a, b, "add")
    sb = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bin(a, b, "sub")
    sb = b.shape
    return _make(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product; ``b`` may also be a per-channel ``[1,1,1,C]`` vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bin(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, bd.shape)), "mul")


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "hadamard")
    return mul(a, b)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def concat(tensors: Sequence, axis: int = 3) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    base = ts[0].shape
    for t in ts[1:]:
        if any(t.shape[i] != base[i] for i in range(4) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[axis] for t in ts]
    edges = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=axis)

    def vjp(g):
        parts = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            idx = [slice(None)] * 4
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, ts, vjp, "concat")


def total(x) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    x = _as_tensor(x)
    shp = x.shape
    s = x.data.sum(dtype=np.float64).astype(x.data.dtype).reshape(1, 1, 1, 1)
    return _make(s, (x,), lambda g: (np.broadcast_to(g, shp).astype(g.dtype),), "total")


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    return scale(total(x), 1.0 / n)


def sum_per_sample(x) -> Tensor:
    """Sum over H, W, C keeping the batch axis: ``[N,1,1,1]``."""
    x = _as_tensor(x)
    shp = x.shape
    s = x.data.sum(axis=(1, 2, 3), keepdims=True)
    return _make(s, (x,), lambda g: (np.broadcast_to(g, shp).astype(g.dtype),), "sum_per_sample")


def mse(a, b) -> Tensor:
    """Mean of squared differences over every element."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mse")
    d = a.data - b.data
    n = d.size
    val = np.asarray((d.astype(np.float64) ** 2).sum() / n, dtype=d.dtype).reshape(1, 1, 1, 1)

    def vjp(g):
        gd = g.reshape(()) * (2.0 / n) * d
        return gd, -gd

    return _make(val, (a, b), vjp, "mse")


_ELEMENTWISE = {
    "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "add": add, "sub": sub,
    "hadamard": hadamard, "mul": mul, "scale": scale, "square": square,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; choose from {sorted(_ELEMENTWISE)}") from None
    return fn(*args)
