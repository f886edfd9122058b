"""Shared test apparatus: finite-difference gradient checks.

Each entry in OP_CASES builds a random small instance of one operator and a
scalar loss over it; fd_check_op compares the backward pass against central
differences and returns the worst relative error over all inputs.
"""

import numpy as np

from revoicer import grad


def numeric_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        gf[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def fd_check_op(build, seed, h=1e-5):
    """Worst relative error between backward() and central differences.

    `build(rng)` returns (inputs, forward) where forward maps fresh Tensors
    with the same data to a scalar-loss Tensor. The forward closure must be
    pure so it can be re-evaluated at perturbed points.
    """
    rng = np.random.default_rng(seed)
    inputs, forward = build(rng)
    loss = forward(*inputs)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(inputs):
        def f(arr, i=i):
            fresh = [
                grad.Tensor(arr if j == i else p.data)
                for j, p in enumerate(inputs)
            ]
            return forward(*fresh).item()

        worst = max(worst, rel_err(t.grad, numeric_grad(f, t.data, h=h)))
    return worst


def _t(rng, *shape):
    return grad.Tensor(rng.standard_normal(shape), requires_grad=True)


def _target(rng, out):
    return grad.Tensor(rng.standard_normal(out.shape))


def _build_linear(rng):
    x = _t(rng, 2, 3, 5)
    w = _t(rng, 4, 3)
    b = _t(rng, 4)
    tgt = rng.standard_normal((2, 4, 5))

    def forward(x, w, b):
        return grad.mse_loss(grad.linear(x, w, b), grad.Tensor(tgt))

    return [x, w, b], forward


def _build_conv(stride, padding):
    def build(rng):
        t = 7 if padding == "valid" else 6
        x = _t(rng, 2, 3, t)
        w = _t(rng, 4, 3, 3)
        b = _t(rng, 4)
        probe = grad.conv1d(
            grad.Tensor(x.data), grad.Tensor(w.data), grad.Tensor(b.data),
            stride=stride, padding=padding,
        )
        tgt = rng.standard_normal(probe.shape)

        def forward(x, w, b):
            y = grad.conv1d(x, w, b, stride=stride, padding=padding)
            return grad.mse_loss(y, grad.Tensor(tgt))

        return [x, w, b], forward

    return build


def _build_relu(rng):
    # keep pre-activations away from the kink so FD stays two-sided
    raw = rng.standard_normal((2, 3, 6))
    raw = np.where(np.abs(raw) < 0.1, 0.3 * np.sign(raw) + raw, raw)
    x = grad.Tensor(raw, requires_grad=True)
    tgt = rng.standard_normal(raw.shape)

    def forward(x):
        return grad.mse_loss(grad.relu(x), grad.Tensor(tgt))

    return [x], forward


def _build_instance_norm(rng):
    x = _t(rng, 2, 3, 8)
    gamma = grad.Tensor(1.0 + 0.3 * rng.standard_normal(3), requires_grad=True)
    beta = _t(rng, 3)
    tgt = rng.standard_normal((2, 3, 8))

    def forward(x, gamma, beta):
        return grad.mse_loss(grad.instance_norm(x, gamma, beta), grad.Tensor(tgt))

    return [x, gamma, beta], forward


def _build_embedding(rng):
    table = _t(rng, 5, 4)
    ids = rng.integers(0, 5, size=3)
    tgt = rng.standard_normal((3, 4))

    def forward(table):
        return grad.mse_loss(grad.embedding_lookup(table, ids), grad.Tensor(tgt))

    return [table], forward


def _build_broadcast_time(rng):
    x = _t(rng, 2, 3)
    tgt = rng.standard_normal((2, 3, 5))

    def forward(x):
        return grad.mse_loss(grad.broadcast_time(x, 5), grad.Tensor(tgt))

    return [x], forward


def _build_repeat_time(rng):
    x = _t(rng, 2, 3, 4)
    tgt = rng.standard_normal((2, 3, 8))

    def forward(x):
        return grad.mse_loss(grad.repeat_time(x), grad.Tensor(tgt))

    return [x], forward


def _build_crop_time(rng):
    x = _t(rng, 2, 3, 7)
    tgt = rng.standard_normal((2, 3, 4))

    def forward(x):
        return grad.mse_loss(grad.crop_time(x, 4), grad.Tensor(tgt))

    return [x], forward


def _build_concat(rng):
    a = _t(rng, 2, 3, 5)
    b = _t(rng, 2, 2, 5)
    tgt = rng.standard_normal((2, 5, 5))

    def forward(a, b):
        return grad.mse_loss(grad.concat(a, b), grad.Tensor(tgt))

    return [a, b], forward


def _build_add_scale(rng):
    a = _t(rng, 2, 3, 4)
    b = _t(rng, 2, 3, 4)
    tgt = rng.standard_normal((2, 3, 4))

    def forward(a, b):
        return grad.mse_loss(grad.add(grad.scale(a, 0.25), b), grad.Tensor(tgt))

    return [a, b], forward


def _build_mse(rng):
    a = _t(rng, 2, 3, 4)
    b = _t(rng, 2, 3, 4)

    def forward(a, b):
        return grad.mse_loss(a, b)

    return [a, b], forward


OP_CASES = {
    "linear": _build_linear,
    "conv1d_s1_same": _build_conv(1, "same"),
    "conv1d_s2_same": _build_conv(2, "same"),
    "conv1d_s1_valid": _build_conv(1, "valid"),
    "conv1d_s2_valid": _build_conv(2, "valid"),
    "relu": _build_relu,
    "instance_norm": _build_instance_norm,
    "embedding_lookup": _build_embedding,
    "broadcast_time": _build_broadcast_time,
    "repeat_time": _build_repeat_time,
    "crop_time": _build_crop_time,
    "concat": _build_concat,
    "add_scale": _build_add_scale,
    "mse_loss": _build_mse,
}
