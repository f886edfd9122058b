"""Minimal deterministic reverse-mode differentiation over float64 arrays.

Tensors wrap numpy arrays; operators record a backward closure and parent
links, and `backward()` walks the graph once in reverse topological order.
Sequence tensors are laid out (batch, channels, time). Everything is 64-bit
and single-threaded per graph, so losses are bit-identical across runs.
"""

import numpy as np


class GradError(ValueError):
    pass


_DEBUG_FINITE = False


def set_debug_checks(enabled):
    """When on, every forward/backward buffer is checked for NaN/Inf."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def _check(name, arr):
    if _DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise GradError(f"{name}: non-finite buffer")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise GradError(f"backward needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                _check(f"{node.op} backward", node.grad)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])


def _tensor(data, parents, backward, op):
    return Tensor(_check(op, data), parents=parents, backward=backward, op=op)


def _want_seq(name, x, arity=3):
    if x.data.ndim != arity:
        raise GradError(f"{name}: expected {arity}-d tensor, got shape {x.shape}")


def linear(x, weight, bias):
    """Channelwise affine map: (B, Ci, T) x (Co, Ci) + (Co,) -> (B, Co, T)."""
    _want_seq("linear", x)
    co, ci = weight.shape
    if x.shape[1] != ci or bias.shape != (co,):
        raise GradError(
            f"linear: weight {weight.shape} / bias {bias.shape} do not fit input {x.shape}"
        )
    b, _, t = x.shape
    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(ci, b * t)
    out = (weight.data @ x2).reshape(co, b, t).transpose(1, 0, 2)
    out = out + bias.data[None, :, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(co, b * t)
        gx = (weight.data.T @ g2).reshape(ci, b, t).transpose(1, 0, 2)
        x._accumulate(gx)
        weight._accumulate(g2 @ x2.T)
        bias._accumulate(g2.sum(axis=1))

    return _tensor(out, (x, weight, bias), backward, "linear")


def conv1d(x, weight, bias, stride=1, padding="same"):
    """1-D convolution over time: (B, Ci, T) x (Co, Ci, K) -> (B, Co, T_out)."""
    _want_seq("conv1d", x)
    if stride not in (1, 2):
        raise GradError(f"conv1d: stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise GradError(f"conv1d: padding must be same or valid, got {padding!r}")
    co, ci, k = weight.shape
    b, xc, t = x.shape
    if xc != ci or bias.shape != (co,):
        raise GradError(
            f"conv1d: weight {weight.shape} / bias {bias.shape} do not fit input {x.shape}"
        )
    if padding == "same":
        t_out = -(-t // stride)
        pad_total = max((t_out - 1) * stride + k - t, 0)
        pad_left = pad_total // 2
        pad_right = pad_total - pad_left
    else:
        if t < k:
            raise GradError(f"conv1d: input time {t} shorter than kernel {k}")
        t_out = (t - k) // stride + 1
        pad_left = pad_right = 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right)))
    starts = np.arange(t_out) * stride
    # im2col: one (Co, Ci*K) x (Ci*K, B*T_out) matmul instead of an einsum,
    # so the contraction lands in BLAS (training cost is dominated by these)
    cols = xp[:, :, starts[:, None] + np.arange(k)]  # (B, Ci, T_out, K)
    cols2 = np.ascontiguousarray(cols.transpose(1, 3, 0, 2)).reshape(ci * k, b * t_out)
    w2 = weight.data.reshape(co, ci * k)
    out = (w2 @ cols2).reshape(co, b, t_out).transpose(1, 0, 2)
    out = out + bias.data[None, :, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(co, b * t_out)
        gcols = (w2.T @ g2).reshape(ci, k, b, t_out).transpose(2, 0, 3, 1)
        gxp = np.zeros_like(xp)
        for kk in range(k):  # starts are distinct per kk, so += cannot collide
            gxp[:, :, starts + kk] += gcols[:, :, :, kk]
        gx = gxp[:, :, pad_left : pad_left + t]
        x._accumulate(gx)
        weight._accumulate((g2 @ cols2.T).reshape(co, ci, k))
        bias._accumulate(g2.sum(axis=1))

    return _tensor(out, (x, weight, bias), backward, "conv1d")


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        x._accumulate(g * mask)

    return _tensor(out, (x,), backward, "relu")


def instance_norm(x, gamma, beta, eps=1e-5):
    """Normalize each (batch, channel) row over time, then affine per channel."""
    _want_seq("instance_norm", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise GradError(
            f"instance_norm: affine shapes {gamma.shape}/{beta.shape} do not fit {x.shape}"
        )
    if x.shape[2] < 2:
        raise GradError(f"instance_norm: need at least 2 time steps, got {x.shape}")
    mu = x.data.mean(axis=2, keepdims=True)
    var = x.data.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        gamma._accumulate(np.sum(g * xhat, axis=(0, 2)))
        beta._accumulate(np.sum(g, axis=(0, 2)))
        gxh = g * gamma.data[None, :, None]
        m1 = gxh.mean(axis=2, keepdims=True)
        m2 = (gxh * xhat).mean(axis=2, keepdims=True)
        x._accumulate(inv * (gxh - m1 - xhat * m2))

    return _tensor(out, (x, gamma, beta), backward, "instance_norm")


def embedding_lookup(table, ids):
    """Rows of a (V, D) table selected by integer ids -> (B, D)."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise GradError(f"embedding_lookup: ids must be a 1-d int array, got {ids.dtype}")
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= table.shape[0]:
        raise GradError(
            f"embedding_lookup: ids out of range for table {table.shape}"
        )
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return _tensor(out, (table,), backward, "embedding_lookup")


def broadcast_time(x, t):
    """Tile a (B, C) tensor along a new time axis -> (B, C, T)."""
    if x.data.ndim != 2:
        raise GradError(f"broadcast_time: expected (B, C), got {x.shape}")
    out = np.repeat(x.data[:, :, None], t, axis=2)

    def backward(g):
        x._accumulate(g.sum(axis=2))

    return _tensor(out, (x,), backward, "broadcast_time")


def repeat_time(x):
    """Nearest-neighbor x2 upsample along time: (B, C, T) -> (B, C, 2T)."""
    _want_seq("repeat_time", x)
    out = np.repeat(x.data, 2, axis=2)

    def backward(g):
        b, c, t2 = g.shape
        x._accumulate(g.reshape(b, c, t2 // 2, 2).sum(axis=3))

    return _tensor(out, (x,), backward, "repeat_time")


def crop_time(x, t_out):
    """Trim to the first t_out steps: (B, C, T) -> (B, C, t_out)."""
    _want_seq("crop_time", x)
    if not 1 <= t_out <= x.shape[2]:
        raise GradError(f"crop_time: cannot crop {x.shape} to {t_out}")
    out = x.data[:, :, :t_out].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :t_out] = g
        x._accumulate(gx)

    return _tensor(out, (x,), backward, "crop_time")


def concat(a, b):
    """Concatenate along channels: (B, Ca, T) + (B, Cb, T) -> (B, Ca+Cb, T)."""
    _want_seq("concat", a)
    _want_seq("concat", b)
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise GradError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        a._accumulate(g[:, :ca])
        b._accumulate(g[:, ca:])

    return _tensor(out, (a, b), backward, "concat")


def add(a, b):
    if a.shape != b.shape:
        raise GradError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _tensor(out, (a, b), backward, "add")


def scale(x, s):
    s = float(s)
    out = x.data * s

    def backward(g):
        x._accumulate(g * s)

    return _tensor(out, (x,), backward, "scale")


def mse_loss(pred, target):
    """Mean squared error over every element; returns a scalar tensor."""
    if pred.shape != target.shape:
        raise GradError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.array(np.mean(diff * diff))

    def backward(g):
        gg = (2.0 / diff.size) * diff * g
        pred._accumulate(gg)
        target._accumulate(-gg)

    return _tensor(out, (pred, target), backward, "mse_loss")


class Adam:
    """Standard bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise GradError(f"lr must be > 0, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise GradError("NaN/Inf gradient: aborting optimizer step")
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1**t
        bc2 = 1 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            p.data -= (self.lr / bc1) * (m / denom)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
