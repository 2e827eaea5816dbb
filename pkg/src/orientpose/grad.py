"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  A tape is append-only, so its
records are already in topological order and :meth:`Tape.backward` simply
walks them in reverse.

Elementwise binary ops require equal shapes (Python scalars excepted);
use :func:`broadcast` to expand explicitly.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mean(square(w * 2.0))
    >>> tape.backward(loss)[w]
    array([2.66666667, 2.66666667, 2.66666667])
"""
from __future__ import annotations

import struct
from collections.abc import Callable, Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

_TAPES: list["Tape"] = []
_KINK_LOG: list[list[np.ndarray]] = []


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Record:
    __slots__ = ("out", "inputs", "pullbacks", "name")

    def __init__(self, out, inputs, pullbacks, name):
        self.out = out
        self.inputs = inputs
        self.pullbacks = pullbacks
        self.name = name


class Gradients(Mapping):
    """Gradients keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._keys: dict[int, Tensor] = {}

    def _set(self, t: Tensor, g: np.ndarray) -> None:
        self._grads[id(t)] = g
        self._keys[id(t)] = t

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[id(t)]

    def __contains__(self, t) -> bool:
        return id(t) in self._grads

    def __iter__(self):
        return iter(self._keys.values())

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.records: list[_Record] = []
        self._tensors: list[Tensor] = []
        self._nodes: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _node(self, t: Tensor) -> int:
        key = id(t)
        if key not in self._nodes:
            self._nodes[key] = len(self._tensors)
            self._tensors.append(t)
            t.node = self._nodes[key]
        return self._nodes[key]

    def record(self, out: Tensor, inputs: Sequence[Tensor], pullbacks, name: str) -> None:
        for t in inputs:
            if t.requires_grad:
                self._node(t)
        self._node(out)
        self.records.append(_Record(out, tuple(inputs), tuple(pullbacks), name))

    def backward(self, loss: Tensor) -> Gradients:
        """Gradients of scalar ``loss`` for every tracked tensor on this tape.

        Leaf tensors (those not produced by a recorded op) also get their
        ``.grad`` attribute accumulated.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._nodes:
            raise ValueError("loss was not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self._tensors)
        grads[self._nodes[id(loss)]] = np.ones_like(loss.data)
        produced = set()
        for rec in reversed(self.records):
            onode = self._nodes[id(rec.out)]
            produced.add(onode)
            g = grads[onode]
            if g is None:
                continue
            for t, pb in zip(rec.inputs, rec.pullbacks):
                if not t.requires_grad or pb is None:
                    continue
                gi = pb(g)
                n = self._nodes[id(t)]
                grads[n] = gi if grads[n] is None else grads[n] + gi
        out = Gradients()
        for n, (t, g) in enumerate(zip(self._tensors, grads)):
            if g is None:
                continue
            out._set(t, g)
            if n not in produced:
                t.grad = g if t.grad is None else t.grad + g
        return out


def backward(tape: Tape, loss: Tensor) -> Gradients:
    return tape.backward(loss)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], pullbacks, name: str) -> Tensor:
    tape = _TAPES[-1] if _TAPES else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, inputs, pullbacks, name)
    return out


def _log_kink(pattern: np.ndarray) -> None:
    if _KINK_LOG:
        _KINK_LOG[-1].append(np.asarray(pattern).copy())


class kink_log:
    """Collect the branch pattern of every non-smooth op run inside the block."""

    def __enter__(self) -> list[np.ndarray]:
        _KINK_LOG.append([])
        return _KINK_LOG[-1]

    def __exit__(self, *exc) -> None:
        _KINK_LOG.pop()


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    ta, tb = _as_tensor(a, like), _as_tensor(b, like)
    if ta.ndim and tb.ndim and ta.shape != tb.shape:
        raise ValueError(f"{op}: shape mismatch {ta.shape} vs {tb.shape}")
    return ta, tb


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operand combined with an array: its gradient is the total
    if t.ndim == 0 and g.ndim:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 (lambda g: _unscalar(g, a), lambda g: _unscalar(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 (lambda g: _unscalar(g, a), lambda g: _unscalar(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 (lambda g: _unscalar(g * b.data, a), lambda g: _unscalar(g * a.data, b)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 (lambda g: _unscalar(g / b.data, a),
                  lambda g: _unscalar(-g * out / b.data, b)), "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), (lambda g: -g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 (lambda g: g @ np.swapaxes(b.data, -1, -2),
                  lambda g: np.swapaxes(a.data, -1, -2) @ g), "matmul")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0
    _log_kink(on)
    return _make(np.where(on, x.data, 0).astype(x.dtype), (x,), (lambda g: g * on,), "relu")


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0
    _log_kink(on)
    k = np.where(on, 1.0, slope).astype(x.dtype)
    return _make(x.data * k, (x,), (lambda g: g * k,), "leaky_relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, (x,), (lambda g: g * s * (1 - s),), "sigmoid")


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _make(np.log(x.data), (x,), (lambda g: g / x.data,), "log")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), (lambda g: g * e,), "exp")


def abs_(x) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    x = _as_tensor(x)
    sgn = np.sign(x.data)
    _log_kink(sgn)
    return _make(np.abs(x.data), (x,), (lambda g: g * sgn,), "abs")


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data * x.data, (x,), (lambda g: 2 * g * x.data,), "square")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    r = np.sqrt(x.data)
    return _make(r, (x,), (lambda g: g / (2 * r),), "sqrt")


def clip(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _log_kink(inside)
    return _make(np.clip(x.data, lo, hi), (x,), (lambda g: g * inside,), "clip")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def pb(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, x.shape).copy()

    return _make(out, (x,), (pb,), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum_(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), (lambda g: np.transpose(g, inv),), "transpose")


def broadcast(x, shape) -> Tensor:
    """Expand ``x`` to ``shape`` (numpy rules); the only implicit expansion allowed."""
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ValueError(f"broadcast: cannot expand {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim
    stretched = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def pb(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if stretched:
            g = g.sum(axis=tuple(a - lead for a in stretched), keepdims=True)
        return g

    return _make(out.copy(), (x,), (pb,), "broadcast")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                a != b for i, (a, b) in enumerate(zip(x.shape, xs[0].shape)) if i != axis):
            raise ValueError(f"concat: shape mismatch {xs[0].shape} vs {x.shape}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def piece(i):
        sl = [slice(None)] * xs[0].ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 [piece(i) for i in range(len(xs))], "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ax = axis % (xs[0].ndim + 1)
    shp = xs[0].shape[:ax] + (1,) + xs[0].shape[ax:]
    return concat([reshape(x, shp) for x in xs], axis=ax)


def _basic_index(idx) -> bool:
    idx = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in idx)


def slice_(x, idx) -> Tensor:
    x = _as_tensor(x)
    basic = _basic_index(idx)

    def pb(g):
        z = np.zeros_like(x.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return z

    return _make(x.data[idx], (x,), (pb,), "slice")


def take(x, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (repeats allowed)."""
    x = _as_tensor(x)
    indices = np.asarray(indices)
    axis = axis % x.ndim

    def pb(g):
        z = np.zeros_like(x.data)
        np.add.at(np.moveaxis(z, axis, 0), indices, np.moveaxis(g, axis, 0))
        return z

    return _make(np.take(x.data, indices, axis=axis), (x,), (pb,), "take")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation.  x: (N, C, H, W), w: (O, C, kh, kw), b: (O,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (o,):
            raise ValueError(f"conv2d: bias shape {b.shape} does not match {o} outputs")
        out = out + b.data
        inputs.append(b)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def flat(g):
        return g.transpose(0, 2, 3, 1).reshape(-1, o)

    def pb_x(g):
        # transposed convolution: dilate by the stride, pad, correlate with flipped kernel
        if stride > 1:
            gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        ph, pw = kh - 1 - pad, kw - 1 - pad
        eh = h - (gd.shape[2] + 2 * ph - kh + 1)
        ew = wd - (gd.shape[3] + 2 * pw - kw + 1)
        gp = np.pad(gd, ((0, 0), (0, 0), (ph, ph + eh), (pw, pw + ew)))
        wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        dx = _im2col(gp, kh, kw, 1, h, wd) @ wt.T
        return np.ascontiguousarray(dx.reshape(n, h, wd, c).transpose(0, 3, 1, 2))

    pbs = [pb_x, lambda g: (flat(g).T @ cols).reshape(w.shape)]
    if b is not None:
        pbs.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _make(np.ascontiguousarray(out), inputs, pbs, "conv2d")


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                     coords: Iterable[int] | None = None) -> dict[int, float]:
    """Central differences of scalar ``f`` at ``x`` for the given flat coordinates."""
    base = x.data.copy()
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = {}
    for k in coords:
        flat[k] = base.flat[k] + h
        up = flat[k]
        fp = float(f(x).data)
        flat[k] = base.flat[k] - h
        step = up - flat[k]           # the step actually realised in floating point
        fm = float(f(x).data)
        flat[k] = base.flat[k]
        out[int(k)] = (fp - fm) / step
    return out


def autodiff_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        if not y.requires_grad:         # f does not depend on x
            return np.zeros_like(x.data)
        g = tape.backward(y).get(x)
    finally:
        x.requires_grad = was
    return np.zeros_like(x.data) if g is None else g


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                      coords: Iterable[int] | None = None, floor: float = 1e-8) -> float:
    """Max relative error between autodiff and central-difference gradients.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    a = autodiff_grad(f, x).reshape(-1)
    num = finite_diff_grad(f, x, h, coords)
    worst = 0.0
    for k, n in num.items():
        den = max(abs(a[k]), abs(n), floor)
        worst = max(worst, abs(a[k] - n) / den)
    return worst


def is_smooth_at(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                 coords: Iterable[int] | None = None) -> bool:
    """True when no non-smooth op switches branch within the difference stencil."""
    def pattern():
        with kink_log() as log_:
            f(x)
        return log_

    base = x.data.copy()
    flat = x.data.reshape(-1)
    ref = pattern()
    coords = range(flat.size) if coords is None else coords
    try:
        for k in coords:
            for s in (h, -h):
                flat[k] = base.flat[k] + s
                got = pattern()
                if len(got) != len(ref) or any(not np.array_equal(p, q) for p, q in zip(got, ref)):
                    return False
            flat[k] = base.flat[k]
    finally:
        x.data[...] = base
    return True


class RmsProp:
    """RMSProp: ``v <- a*v + (1-a)*g^2``, ``p <- p - lr*g/(sqrt(v)+eps)``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-4,
                 alpha: float = 0.99, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.state = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping) -> None:
        for k, p in self.params.items():
            g = grads.get(p) if isinstance(grads, Gradients) else grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            p.data, self.state[k] = rmsprop_step(p.data, g, self.state[k],
                                                 self.lr, self.alpha, self.eps)


def rmsprop_step(param: np.ndarray, grad: np.ndarray, v: np.ndarray, lr: float,
                 alpha: float = 0.99, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    if param.shape != grad.shape or param.shape != v.shape:
        raise ValueError(f"rmsprop_step: shape mismatch {param.shape}, {grad.shape}, {v.shape}")
    v = alpha * v + (1 - alpha) * grad * grad
    return (param - lr * grad / (np.sqrt(v) + eps)).astype(param.dtype), v.astype(param.dtype)


_CKPT_MAGIC = b"OPCK"


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write ``<path>`` (little-endian float32 blob) and ``<path>.manifest``."""
    path = Path(path)
    lines = []
    offset = 0
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(params)))
        for name, t in params.items():
            arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
            fh.write(arr.tobytes(order="C"))
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += arr.size
    path.with_name(path.name + ".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack("<I", raw[4:8])
    blob = np.frombuffer(raw[8:], dtype="<f4")
    out = {}
    for line in path.with_name(path.name + ".manifest").read_text().splitlines():
        name, shape, offset = line.split("\t")
        shp = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        n = int(np.prod(shp))
        start = int(offset)
        if start + n > blob.size:
            raise ValueError(f"{path}: truncated at tensor {name!r}")
        out[name] = blob[start: start + n].reshape(shp).astype(np.float32)
    if len(out) != count:
        raise ValueError(f"{path}: manifest lists {len(out)} tensors, header says {count}")
    return out
