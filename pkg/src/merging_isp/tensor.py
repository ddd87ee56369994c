"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what a conv pipeline with a
tonemapped L2 loss needs. No general broadcasting; the only implicit
broadcasts are the conv bias add and the per-channel PReLU slope.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the mathematical domain of the operation."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, repeated backward, ...)."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Image-valued tensors use batch x channels x height x width layout.
    Tensors created through ops remember their parents so that
    ``backward()`` on a scalar can propagate gradients to every
    ``requires_grad`` leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor values must be finite (got NaN or Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._done = False

    # Internal fast path: results of ops skip the finite check (inputs were
    # checked at the graph boundary and every op preserves finiteness on its
    # domain).
    @classmethod
    def _make(cls, data, parents, backward):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = any(p.requires_grad for p in parents)
        t.grad = None
        t._done = False
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from here.

        Only valid on scalar roots, and only once per recorded graph.
        """
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.data.shape}")
        if self._done:
            raise GraphError("backward already ran on this graph; rebuild it before calling again")
        self._done = True

        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _toposort(root):
    """Reverse topological order (root first), iteratively."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def square(a):
    a = _as_tensor(a)
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def mean(a):
    a = _as_tensor(a)
    n = a.data.size
    out = np.array(a.data.mean())
    return Tensor._make(out, (a,), lambda g: (np.full_like(a.data, float(g) / n),))


def mul_scalar(a, s):
    a = _as_tensor(a)
    s = float(s)
    return Tensor._make(a.data * s, (a,), lambda g: (g * s,))


def div_scalar(a, s):
    s = float(s)
    if s == 0.0:
        raise DomainError("div_scalar: divisor is zero")
    return mul_scalar(a, 1.0 / s)


def pow_scalar(a, exponent):
    """Elementwise a**exponent. Fractional exponents require a >= 0."""
    a = _as_tensor(a)
    e = float(exponent)
    if not e.is_integer() and np.any(a.data < 0):
        raise DomainError("pow_scalar: negative base with fractional exponent")
    out = np.power(a.data, e)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = e * np.power(a.data, e - 1.0)
        # 0**(e-1) for e > 1 is 0; numpy already gives that. For e == 1 the
        # derivative is identically 1.
        if e == 1.0:
            d = np.ones_like(a.data)
        return (g * d,)

    return Tensor._make(out, (a,), backward)


def log1p_scaled(a, scale):
    """Elementwise log(1 + scale*a); requires scale*a > -1."""
    a = _as_tensor(a)
    s = float(scale)
    if np.any(s * a.data <= -1.0):
        raise DomainError("log1p_scaled: argument of log is non-positive")
    out = np.log1p(s * a.data)
    return Tensor._make(out, (a,), lambda g: (g * (s / (1.0 + s * a.data)),))


# ---------------------------------------------------------------------------
# activations


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    # subgradient at 0 is taken as 0
    return Tensor._make(out, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def prelu(a, alpha):
    """PReLU with one trainable slope per channel.

    The channel axis is axis 1 for ndim >= 2 inputs and axis 0 for vectors.
    For x <= 0 the negative-branch slope applies (so relu == prelu with
    alpha 0, including the subgradient convention at 0).
    """
    a, alpha = _as_tensor(a), _as_tensor(alpha)
    if alpha.ndim != 1:
        raise ShapeError(f"prelu: alpha must be 1-D, got shape {alpha.shape}")
    axis = 1 if a.ndim >= 2 else 0
    if a.shape[axis] != alpha.shape[0]:
        raise ShapeError(
            f"prelu: alpha length {alpha.shape[0]} != channel count {a.shape[axis]}"
        )
    bshape = [1] * a.ndim
    bshape[axis] = alpha.shape[0]
    al = alpha.data.reshape(bshape)
    pos = a.data > 0.0
    out = np.where(pos, a.data, al * a.data)

    def backward(g):
        ga = g * np.where(pos, 1.0, al)
        reduce_axes = tuple(i for i in range(a.ndim) if i != axis)
        galpha = np.sum(g * np.where(pos, 0.0, a.data), axis=reduce_axes)
        return (ga, galpha)

    return Tensor._make(out, (a, alpha), backward)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(inputs):
    """Concatenate 4-D tensors along the channel axis, in argument order."""
    ts = [_as_tensor(t) for t in inputs]
    if not ts:
        raise ShapeError("concat_channels: empty input list")
    first = ts[0]
    for t in ts:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels: expected 4-D tensors, got {t.shape}")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch {t.shape} vs {first.shape}"
            )
    out = np.concatenate([t.data for t in ts], axis=1)
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return Tensor._make(out, tuple(ts), backward)


# ---------------------------------------------------------------------------
# convolution with reflective padding


def _reflect_pad(x, ph, pw):
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="reflect")


def _reflect_pad_adjoint(gp, ph, pw):
    """Adjoint of mirror-without-edge reflect padding on the last two axes."""
    H = gp.shape[2] - 2 * ph
    W = gp.shape[3] - 2 * pw
    g = gp[:, :, ph : ph + H, :].copy()
    for k in range(ph):
        g[:, :, ph - k, :] += gp[:, :, k, :]
        g[:, :, H - 2 - k, :] += gp[:, :, ph + H + k, :]
    out = g[:, :, :, pw : pw + W].copy()
    for k in range(pw):
        out[:, :, :, pw - k] += g[:, :, :, k]
        out[:, :, :, W - 2 - k] += g[:, :, :, pw + W + k]
    return out


# cap on the materialized patch matrix per slab (bytes)
_COL_BYTES_LIMIT = 128 * 2**20


def _im2col(xp, kh, kw):
    """(B,C,Hp,Wp) padded input -> (B*H*W, C*kh*kw) patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,H,W,kh,kw
    b, c, h, w = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kh * kw)


def conv2d(x, weight, bias):
    """2-D convolution (cross-correlation), stride 1, spatial size preserved.

    Padding mirrors the interior without repeating the edge row/column, so a
    pad of p on an axis of length L requires p <= L-1.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (B,C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (Cout,Cin,kh,kw), got {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = weight.shape
    if Cw != Cin:
        raise ShapeError(f"conv2d: input has {Cin} channels but weight expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sizes must be odd, got {kh}x{kw}")
    if bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    ph, pw = kh // 2, kw // 2
    if H <= ph or W <= pw:
        raise ShapeError(
            f"conv2d: input {H}x{W} too small to reflect-pad by {ph}x{pw}"
        )

    xp = _reflect_pad(x.data, ph, pw)
    wmat = weight.data.reshape(Cout, -1)
    # Row slabs keep the patch matrix bounded for large images; slab results
    # are identical to the one-shot computation (convolution is row-local).
    rows_per = max(1, int(_COL_BYTES_LIMIT // (B * W * Cin * kh * kw * 8)))

    out = np.empty((B, Cout, H, W))
    for r0 in range(0, H, rows_per):
        r1 = min(r0 + rows_per, H)
        col = _im2col(xp[:, :, r0 : r1 + 2 * ph, :], kh, kw)
        slab = (col @ wmat.T).reshape(B, r1 - r0, W, Cout)
        out[:, :, r0:r1, :] = slab.transpose(0, 3, 1, 2)
    out += bias.data[None, :, None, None]

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gw = np.zeros((Cout, Cin * kh * kw))
        gp = np.zeros_like(xp)
        for r0 in range(0, H, rows_per):
            r1 = min(r0 + rows_per, H)
            hh = r1 - r0
            gm = g[:, :, r0:r1, :].transpose(0, 2, 3, 1).reshape(B * hh * W, Cout)
            col = _im2col(xp[:, :, r0 : r1 + 2 * ph, :], kh, kw)
            gw += gm.T @ col
            gcol = (gm @ wmat).reshape(B, hh, W, Cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, r0 + i : r0 + i + hh, j : j + W] += gcol[:, :, :, :, i, j]
        return (_reflect_pad_adjoint(gp, ph, pw), gw.reshape(Cout, Cin, kh, kw), gb)

    return Tensor._make(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# initialization, optimization, gradient checking


def xavier_init(fan_in, fan_out, shape, rng):
    """Uniform Xavier/Glorot sample on [-sqrt(6/(fan_in+fan_out)), +bound]."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"xavier_init: fans must be positive, got {fan_in}, {fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adam_step(params, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place, using each param's .grad.

    Params with no gradient buffer are left untouched (their moments still
    exist but stay zero until they first receive a gradient).
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for key, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def grad_check(op_closure, input_tensor, eps=1e-5, probes=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``op_closure`` maps a Tensor to a scalar Tensor. The relative error per
    coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    ``probes`` limits the check to a random coordinate subset (for closures
    that are expensive to evaluate).
    """
    x = Tensor(input_tensor.data.copy(), requires_grad=True)
    out = op_closure(x)
    if out.size != 1:
        raise GraphError("grad_check: closure must produce a scalar")
    out.backward()
    analytic_full = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = analytic_full.reshape(-1)

    n = x.data.size
    if probes is not None and probes < n:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=probes, replace=False)
    else:
        coords = np.arange(n)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(op_closure(Tensor(x.data.copy())).data)
        flat[i] = orig - eps
        lo = float(op_closure(Tensor(x.data.copy())).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        denom = max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
