"""Dense arrays with a small reverse-mode differentiation engine.

Only the operations the segmentation networks need are provided. Operations
executed while a :class:`Tape` is active are recorded together with the
activations their backward pass needs; outside a tape they run forward only.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    """A numeric array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, dtype={self.data.dtype})"


# Alias matching the domain vocabulary.
DenseArray = Tensor

_active_tapes: list["Tape"] = []


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops run inside the ``with`` block are recorded
    and :meth:`backward` replays their backward closures in reverse order.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def op_names(self):
        return [name for name, _, _, _ in self._nodes]

    def record(self, name, output, inputs, backward_fn):
        self._nodes.append((name, output, inputs, backward_fn))

    def backward(self, loss, seed_grad=None, visit=None):
        if seed_grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed_grad = np.ones_like(loss.data)
        loss._accumulate(seed_grad)
        for name, output, inputs, backward_fn in reversed(self._nodes):
            if visit is not None:
                visit(name)
            if output.grad is None:
                continue
            grads = backward_fn(output.grad)
            for t, g in zip(inputs, grads):
                if g is not None and t.requires_grad:
                    t._accumulate(g)

    def clear(self):
        self._nodes.clear()


def _tape():
    return _active_tapes[-1] if _active_tapes else None


def _record(name, out, inputs, backward_fn):
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, out, inputs, backward_fn)
    return out


@contextlib.contextmanager
def no_tape():
    """Temporarily suspend recording on every active tape."""
    saved = _active_tapes[:]
    _active_tapes.clear()
    try:
        yield
    finally:
        _active_tapes.extend(saved)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# convolution family


def _pad_hw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp, kh, kw, ho, wo):
    # (B, C*kh*kw, ho*wo); column order matches kernel.reshape(O, C*kh*kw)
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + ho, j : j + wo]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(gcols, shape, kh, kw, ho, wo):
    b, c, hp, wp = shape
    g6 = gcols.reshape(b, c, kh, kw, ho, wo)
    gxp = np.zeros(shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho, j : j + wo] += g6[:, :, i, j]
    return gxp


def conv2d(input, kernel, bias=None, padding="same"):
    """2D cross-correlation with stride 1.

    ``input`` is (batch, C_in, H, W), ``kernel`` is (C_out, C_in, kh, kw)
    and ``bias`` is (C_out,) or None. ``padding`` is ``"same"`` or ``"valid"``.
    """
    x, k = as_tensor(input), as_tensor(kernel)
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with kernel shape {k.shape}")
    o, c, kh, kw = k.shape
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: 'same' padding needs odd kernel size, kernel shape {k.shape}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel shape {k.shape}")

    b, _, h, w = x.shape
    xp = _pad_hw(x.data, ph, pw)
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} smaller than kernel shape {k.shape}")
    cols = _im2col(xp, kh, kw, ho, wo)
    k2 = k.data.reshape(o, c * kh * kw)
    out = np.matmul(k2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    result = Tensor(out.reshape(b, o, ho, wo))

    def backward(g):
        g3 = g.reshape(b, o, ho * wo)
        gk = g3[0] @ cols[0].T
        for i in range(1, b):
            gk += g3[i] @ cols[i].T
        gk = gk.reshape(k.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(np.matmul(k2.T, g3), xp.shape, kh, kw, ho, wo)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, k) if bias is None else (x, k, bias)
    return _record("conv2d", result, inputs, backward)


def upsample_block(input, kernel, bias=None):
    """2x2 transposed convolution with stride 2; doubles H and W.

    ``kernel`` is laid out (C_in, C_out, 2, 2).
    """
    x, k = as_tensor(input), as_tensor(kernel)
    if x.ndim != 4 or k.ndim != 4 or k.shape[2:] != (2, 2) or x.shape[1] != k.shape[0]:
        raise ShapeError(f"upsample_block: input shape {x.shape} incompatible with kernel shape {k.shape}")
    b, c, h, w = x.shape
    o = k.shape[1]
    xr = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    k2 = k.data.reshape(c, o * 4)
    y = (xr @ k2).reshape(b, h, w, o, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(b, o, 2 * h, 2 * w)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[None, :, None, None]
    result = Tensor(np.ascontiguousarray(y))

    def backward(g):
        g2 = g.reshape(b, o, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(b * h * w, o * 4)
        gx = (g2 @ k2.T).reshape(b, h, w, c).transpose(0, 3, 1, 2)
        gk = (xr.T @ g2).reshape(k.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, k) if bias is None else (x, k, bias)
    return _record("upsample_block", result, inputs, backward)


def max_pool_2x2(input):
    """Non-overlapping 2x2 max pooling.

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(input)
    if x.ndim != 4:
        raise ShapeError(f"max_pool_2x2: expected (batch, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool_2x2: spatial dims must be even, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    result = Tensor(out)

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _record("max_pool_2x2", result, (x,), backward)


def global_avg_pool(input):
    """Channel means over the spatial axes: (batch, F, H, W) -> (batch, F)."""
    x = as_tensor(input)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (batch, F, H, W), got {x.shape}")
    h, w = x.shape[2:]
    result = Tensor(x.data.mean(axis=(2, 3)))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _record("global_avg_pool", result, (x,), backward)


def dense(input, weights):
    """Bias-free fully connected layer: ``input @ weights``."""
    x, wt = as_tensor(input), as_tensor(weights)
    if x.ndim != 2 or wt.ndim != 2 or x.shape[1] != wt.shape[0]:
        raise ShapeError(f"dense: input shape {x.shape} incompatible with weights shape {wt.shape}")
    result = Tensor(x.data @ wt.data)

    def backward(g):
        return g @ wt.data.T, x.data.T @ g

    return _record("dense", result, (x, wt), backward)


def activation(input, kind):
    """Elementwise ``relu`` or ``sigmoid``."""
    x = as_tensor(input)
    if kind == "relu":
        mask = x.data > 0
        result = Tensor(np.where(mask, x.data, 0.0))

        def backward(g):
            return (g * mask,)

    elif kind == "sigmoid":
        y = expit(x.data)
        result = Tensor(y)

        def backward(g):
            return (g * y * (1.0 - y),)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _record(kind, result, (x,), backward)


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def channel_scale(input, scale):
    """Multiply each channel map of ``input`` (B,F,H,W) by ``scale`` (B,F)."""
    x, s = as_tensor(input), as_tensor(scale)
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: input shape {x.shape} incompatible with scale shape {s.shape}")
    result = Tensor(x.data * s.data[:, :, None, None])

    def backward(g):
        return g * s.data[:, :, None, None], (g * x.data).sum(axis=(2, 3))

    return _record("channel_scale", result, (x, s), backward)


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} do not conform")
    ca = a.shape[1]
    result = Tensor(np.concatenate([a.data, b.data], axis=1))

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _record("concat_channels", result, (a, b), backward)


def reshape(input, shape):
    x = as_tensor(input)
    result = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _record("reshape", result, (x,), backward)


def sum_all(input):
    x = as_tensor(input)
    result = Tensor(np.asarray(x.data.sum()))

    def backward(g):
        return (np.full_like(x.data, g),)

    return _record("sum_all", result, (x,), backward)


# --------------------------------------------------------------------------
# finite-difference verification


def gradient_check(f, point, eps=1e-5, coords=None, rng=None):
    """Compare analytic gradients against central differences.

    Parameters
    ----------
    f : callable
        Maps ``point`` to a scalar :class:`Tensor` using recorded ops.
    point : Tensor or sequence of Tensor
        Where to evaluate. Tensors are perturbed in place and restored.
    eps : float
        Central-difference step.
    coords : int, optional
        Check only this many randomly chosen coordinates per tensor.

    Returns
    -------
    float
        ``max |analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    params = [point] if isinstance(point, Tensor) else list(point)
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError(f"gradient_check: non-finite values in {p!r}")
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.zero_grad()

    with Tape() as tape:
        out = f(point)
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise ValueError("gradient_check: f must return a finite scalar")
    tape.backward(out)
    tape.clear()

    def evaluate():
        with no_tape():
            v = float(f(point).data)
        if not np.isfinite(v):
            raise ValueError("gradient_check: non-finite value at perturbed point")
        return v

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        agrad = analytic.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = agrad[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
