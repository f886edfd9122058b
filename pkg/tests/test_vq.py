import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_err
from revoicer import grad, vq
from revoicer.vq import Codebook, VqError


def make_cb(vectors, decay=0.999, epsilon=1e-5):
    v = np.asarray(vectors, dtype=np.float64)
    return Codebook(
        vectors=v.copy(),
        ema_counts=np.ones(v.shape[0]),
        ema_sums=v.copy(),
        decay=decay,
        epsilon=epsilon,
    ).validate()


def test_quantize_two_row_example():
    cb = make_cb([[0.0, 0.0], [1.0, 1.0]])
    res = vq.quantize(np.array([[0.2, 0.1]]), cb)
    assert res.indices.tolist() == [0]
    assert np.array_equal(res.quantized, [[0.0, 0.0]])
    # distances 0.05 vs 1.45, so commitment sum is 0.05
    assert abs(res.commit_loss - 0.05) < 1e-12


def test_quantize_exact_row_is_fixed_point():
    rng = np.random.default_rng(3)
    cb = make_cb(rng.standard_normal((7, 4)))
    res = vq.quantize(cb.vectors[[5, 2]], cb)
    assert res.indices.tolist() == [5, 2]
    assert res.commit_loss == 0.0


def test_quantize_tie_breaks_to_lowest_index():
    cb = make_cb([[1.0, 0.0], [-1.0, 0.0]])
    res = vq.quantize(np.array([[0.0, 0.0]]), cb)
    assert res.indices.tolist() == [0]
    # duplicated rows are the hardest tie: exact same distance everywhere
    cb2 = make_cb([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    res2 = vq.quantize(np.array([[0.4, 0.9], [0.5, 0.5]]), cb2)
    assert res2.indices.tolist() == [0, 0]


def test_quantize_dimension_mismatch():
    cb = make_cb(np.zeros((4, 3)))
    with pytest.raises(VqError, match="dimension mismatch"):
        vq.quantize(np.zeros((2, 5)), cb)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_quantize_idempotent_and_shift_invariant(data):
    # dyadic grids keep every distance exact, so indices must match exactly
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31 - 1)))
    n_codes = data.draw(st.integers(1, 6))
    d = data.draw(st.integers(1, 4))
    grid = lambda *s: rng.integers(-32, 33, size=s) / 8.0
    cb = make_cb(grid(n_codes, d))
    z = grid(5, d)
    res = vq.quantize(z, cb)
    again = vq.quantize(res.quantized, cb)
    assert np.array_equal(again.indices, res.indices)
    assert again.commit_loss == 0.0
    c = grid(d)
    shifted = vq.quantize(z + c, make_cb(cb.vectors + c))
    assert np.array_equal(shifted.indices, res.indices)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_commit_nonnegative_zero_iff_rows(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31 - 1)))
    d = data.draw(st.integers(1, 3))
    cb = make_cb(rng.integers(-8, 9, size=(4, d)) / 4.0)
    z = rng.integers(-8, 9, size=(6, d)) / 4.0
    res = vq.quantize(z, cb)
    assert res.commit_loss >= 0.0
    all_rows = all(any(np.array_equal(r, v) for v in cb.vectors) for r in z)
    assert (res.commit_loss == 0.0) == all_rows


def test_vq_st_pass_through_when_beta_zero():
    rng = np.random.default_rng(5)
    cb = make_cb(rng.standard_normal((8, 3)))
    z = grad.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    tgt = grad.Tensor(rng.standard_normal((2, 3, 4)))
    zq, commit, idx = vq.vq_st(z, cb)
    assert idx.shape == (2, 4)
    loss = grad.add(grad.mse_loss(zq, tgt), grad.scale(commit, 0.0))
    loss.backward()
    # beta = 0: encoder grad equals the decoder grad on zq, copied verbatim
    expected = (2.0 / zq.data.size) * (zq.data - tgt.data)
    assert np.array_equal(z.grad, expected)


def test_vq_st_commit_only_when_decoder_detached():
    rng = np.random.default_rng(6)
    cb = make_cb(rng.standard_normal((8, 3)))
    z = grad.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    zq, commit, idx = vq.vq_st(z, cb)
    beta = 0.25
    grad.scale(commit, beta).backward()
    rows = z.data.transpose(0, 2, 1).reshape(-1, 3)
    diff = (rows - cb.vectors[idx.reshape(-1)]).reshape(2, 4, 3).transpose(0, 2, 1)
    assert np.allclose(z.grad, beta * (2.0 / 8) * diff, rtol=0, atol=1e-15)


def vq_end_to_end_fd(seed, beta=0.25):
    """Relative FD error of the straight-through encoder gradient.

    The estimator differentiates the pass-through extension of the loss: with
    assignments fixed, the quantization residual (zq - z) is a constant, so
    the decoder effectively sees z + residual and the commitment term sees a
    frozen zq. The numeric side mirrors that function in plain numpy; the
    analytic side is the real graph."""
    rng = np.random.default_rng(seed)
    b, d, t = 2, 3, 4
    cb = make_cb(rng.standard_normal((6, d)))
    z0 = rng.standard_normal((b, d, t))
    w = rng.standard_normal((2, d))
    bias = rng.standard_normal(2)
    tgt = rng.standard_normal((b, 2, t))
    idx0 = vq.quantize(z0.transpose(0, 2, 1).reshape(-1, d), cb).indices
    zq0 = cb.vectors[idx0].reshape(b, t, d).transpose(0, 2, 1)
    offset = zq0 - z0

    z = grad.Tensor(z0, requires_grad=True)
    zq, commit, _ = vq.vq_st(z, cb, indices=idx0)
    y = grad.linear(zq, grad.Tensor(w), grad.Tensor(bias))
    loss = grad.add(grad.mse_loss(y, grad.Tensor(tgt)), grad.scale(commit, beta))
    loss.backward()
    analytic = z.grad

    def f(zdata):
        dec_in = zdata + offset
        y = np.einsum("oi,bit->bot", w, dec_in) + bias[None, :, None]
        mse = np.mean((y - tgt) ** 2)
        disp = zdata - zq0
        return mse + beta * np.mean(np.sum(disp * disp, axis=1))

    h = 1e-5
    numeric = np.zeros_like(z0)
    flat = z0.reshape(-1)
    nf = numeric.reshape(-1)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        dn = flat.copy()
        dn[i] -= h
        nf[i] = (f(up.reshape(z0.shape)) - f(dn.reshape(z0.shape))) / (2 * h)
    return rel_err(analytic, numeric)


def test_vq_st_finite_difference_fixed_assignments():
    for seed in (21, 22, 23, 24, 25):
        assert vq_end_to_end_fd(seed) <= 1e-4


def test_ema_decay_zero_gives_batch_mean():
    rng = np.random.default_rng(9)
    cb = make_cb(rng.standard_normal((3, 2)), decay=0.0)
    z = np.array([[1.0, 1.0], [3.0, 1.0], [0.0, 10.0]])
    idx = np.array([1, 1, 2])
    vq.ema_update(cb, z, idx)
    assert np.allclose(cb.vectors[1], [2.0, 1.0], rtol=1e-3)
    assert np.allclose(cb.vectors[2], [0.0, 10.0], rtol=1e-3)


def test_ema_unused_row_barely_drifts():
    rng = np.random.default_rng(10)
    cb = make_cb(rng.standard_normal((4, 3)))
    before = cb.vectors[3].copy()
    z = rng.standard_normal((20, 3))
    for _ in range(50):
        vq.ema_update(cb, z, np.zeros(20, dtype=int))  # row 3 never assigned
    # only the epsilon smoothing can move an unused row
    assert rel_err(cb.vectors[3], before) < 1e-3


def test_ema_constant_z_matches_geometric_series():
    target = np.array([0.5, -1.5, 2.0])
    cb = make_cb(np.zeros((2, 3)))
    zbatch = np.tile(target, (4, 1))
    idx = np.zeros(4, dtype=int)
    d, eps, i_codes = cb.decay, cb.epsilon, 2
    counts = np.array([1.0, 1.0])
    sums = np.stack([cb.vectors[0].copy(), cb.vectors[1].copy()])
    checkpoints = {1, 10, 100}
    for t in range(1, 101):
        vq.ema_update(cb, zbatch, idx)
        # closed form: geometric decay toward the per-step batch statistics
        counts = d * counts + (1 - d) * np.array([4.0, 0.0])
        sums = d * sums + (1 - d) * np.array([4.0 * target, np.zeros(3)])
        if t in checkpoints:
            total = counts.sum()
            smoothed = (counts + eps) / (total + i_codes * eps) * total
            expect = sums / smoothed[:, None]
            assert rel_err(cb.vectors, expect) < 1e-9


def test_ema_converges_to_constant_input():
    target = np.array([0.5, -1.5, 2.0])
    cb = make_cb(np.zeros((2, 3)))
    zbatch = np.tile(target, (1, 1))
    idx = np.zeros(1, dtype=int)
    for _ in range(10_000):
        vq.ema_update(cb, zbatch, idx)
    assert np.max(np.abs(cb.vectors[0] - target)) < 1e-3


def test_reseed_dead_rows_respects_warmup():
    rng = np.random.default_rng(11)
    cb = make_cb(rng.standard_normal((4, 2)))
    cb.ema_counts[2] = 1e-6
    rows = rng.standard_normal((10, 2))
    assert vq.reseed_dead(cb, rows, np.random.default_rng(0), step=100) == 0
    assert cb.ema_counts[2] == 1e-6
    n = vq.reseed_dead(cb, rows, np.random.default_rng(0), step=600)
    assert n == 1
    assert cb.ema_counts[2] == 1.0
    assert any(np.array_equal(cb.vectors[2], r) for r in rows)
    assert np.array_equal(cb.ema_sums[2], cb.vectors[2])


def test_new_codebook_samples_batch_rows():
    rng = np.random.default_rng(12)
    rows = rng.standard_normal((40, 5))
    cb = vq.new_codebook(rows, n_codes=16, rng=np.random.default_rng(1))
    assert cb.vectors.shape == (16, 5)
    assert np.array_equal(cb.ema_counts, np.ones(16))
    assert np.array_equal(cb.ema_sums, cb.vectors)
    for v in cb.vectors:
        assert any(np.array_equal(v, r) for r in rows)
    again = vq.new_codebook(rows, n_codes=16, rng=np.random.default_rng(1))
    assert np.array_equal(again.vectors, cb.vectors)


def test_codebook_validate_rejects_bad_state():
    with pytest.raises(VqError, match="decay"):
        make_cb(np.zeros((2, 2)), decay=1.0)
    cb = make_cb(np.zeros((2, 2)))
    cb.ema_counts = -np.ones(2)
    with pytest.raises(VqError, match="ema_counts"):
        cb.validate()
