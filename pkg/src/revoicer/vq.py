"""Vector-quantized bottleneck: nearest-row codebook lookup, commitment
loss, straight-through gradient routing, and EMA codebook updates.

The codebook is not trained by gradient descent; `ema_update` moves each
row toward the running mean of the latents assigned to it, with Laplace
smoothing of the counts so rarely-used rows stay finite.
"""

from dataclasses import dataclass

import numpy as np

from . import grad

VQ_CODES = 512
VQ_DIM = 64
COMMIT_BETA = 0.25
RESEED_THRESHOLD = 1e-3
RESEED_WARMUP_STEPS = 500


class VqError(ValueError):
    pass


@dataclass
class Codebook:
    vectors: np.ndarray  # (I, d)
    ema_counts: np.ndarray  # (I,)
    ema_sums: np.ndarray  # (I, d)
    decay: float = 0.999
    epsilon: float = 1e-5

    def validate(self):
        i, d = self.vectors.shape
        if self.ema_counts.shape != (i,) or self.ema_sums.shape != (i, d):
            raise VqError(
                f"codebook state shapes disagree: vectors {self.vectors.shape}, "
                f"counts {self.ema_counts.shape}, sums {self.ema_sums.shape}"
            )
        if not (np.all(np.isfinite(self.vectors)) and np.all(np.isfinite(self.ema_sums))):
            raise VqError("codebook contains non-finite values")
        if np.any(self.ema_counts < 0) or not np.all(np.isfinite(self.ema_counts)):
            raise VqError("ema_counts must be finite and >= 0")
        if not 0.0 <= self.decay < 1.0:
            raise VqError(f"decay must be in [0, 1), got {self.decay}")
        if self.epsilon <= 0:
            raise VqError(f"epsilon must be > 0, got {self.epsilon}")
        return self


def new_codebook(rows, n_codes=VQ_CODES, decay=0.999, epsilon=1e-5, rng=None):
    """Initialize by sampling rows uniformly (with replacement) from a batch
    of encoder outputs; counts start at 1 so vectors == sums exactly."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise VqError(f"need a non-empty (N, d) batch to initialize, got {rows.shape}")
    if rng is None:
        rng = np.random.default_rng(0)
    picks = rng.integers(0, rows.shape[0], size=n_codes)
    vectors = rows[picks].copy()
    return Codebook(
        vectors=vectors,
        ema_counts=np.ones(n_codes),
        ema_sums=vectors.copy(),
        decay=decay,
        epsilon=epsilon,
    ).validate()


@dataclass
class QuantizeResult:
    quantized: np.ndarray  # (N, d), exact codebook rows
    indices: np.ndarray  # (N,) ints
    commit_loss: float


def _nearest(rows, vectors, chunk=8192):
    """Nearest codebook row per input row; ties broken by lowest index.

    Distances come from the expanded-form matmul for speed, but any rows
    whose top candidates sit within float noise of each other are re-scored
    with exact differences, so equal true distances always resolve to the
    lowest index and a row that *is* a codebook entry maps to itself.
    """
    e2 = np.einsum("id,id->i", vectors, vectors)
    out = np.empty(rows.shape[0], dtype=np.int64)
    for lo in range(0, rows.shape[0], chunk):
        z = rows[lo : lo + chunk]
        z2 = np.einsum("nd,nd->n", z, z)
        d2 = z2[:, None] - 2.0 * (z @ vectors.T) + e2[None, :]
        idx = d2.argmin(axis=1)
        best = d2[np.arange(len(z)), idx]
        tol = 1e-9 * (z2 + e2.max() + 1.0)
        near = d2 <= (best + tol)[:, None]
        for n in np.flatnonzero(near.sum(axis=1) > 1):
            cand = np.flatnonzero(near[n])
            diff = z[n][None, :] - vectors[cand]
            exact = np.einsum("cd,cd->c", diff, diff)
            idx[n] = cand[exact.argmin()]
        out[lo : lo + chunk] = idx
    return out


def quantize(z, cb):
    """Map each row of z to its nearest codebook row (squared Euclidean)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise VqError(f"quantize: expected (N, d) rows, got shape {z.shape}")
    if z.shape[1] != cb.vectors.shape[1]:
        raise VqError(
            f"quantize: dimension mismatch (z d={z.shape[1]}, "
            f"codebook d={cb.vectors.shape[1]})"
        )
    idx = _nearest(z, cb.vectors)
    zq = cb.vectors[idx]
    diff = z - zq
    commit = float(np.mean(np.einsum("nd,nd->n", diff, diff))) if len(z) else 0.0
    return QuantizeResult(quantized=zq, indices=idx, commit_loss=commit)


def vq_st(z, cb, indices=None):
    """Straight-through bottleneck over a (B, d, T) latent tensor.

    Returns (quantized tensor, commitment-loss tensor, indices (B, T)).
    Downstream gradients on the quantized tensor are copied to z unchanged;
    the commitment scalar is (1/N)*sum ||z_j - sg(zq_j)||^2 over the N = B*T
    latent vectors, so beta*commit contributes (2*beta/N)(z - zq) to z.
    Passing `indices` pins the assignments (used by gradient checks).
    """
    if z.data.ndim != 3:
        raise VqError(f"vq_st: expected (B, d, T) latents, got shape {z.shape}")
    b, d, t = z.shape
    if d != cb.vectors.shape[1]:
        raise VqError(
            f"vq_st: dimension mismatch (latent d={d}, codebook d={cb.vectors.shape[1]})"
        )
    rows = np.ascontiguousarray(z.data.transpose(0, 2, 1)).reshape(b * t, d)
    if indices is None:
        idx = _nearest(rows, cb.vectors)
    else:
        idx = np.asarray(indices).reshape(-1)
        if idx.shape != (b * t,):
            raise VqError(f"vq_st: {b * t} latents but {idx.size} fixed indices")
        if idx.min(initial=0) < 0 or idx.max(initial=-1) >= cb.vectors.shape[0]:
            raise VqError("vq_st: fixed indices out of codebook range")
    zq_rows = cb.vectors[idx]
    diff_rows = rows - zq_rows
    commit_val = np.array(np.mean(np.einsum("nd,nd->n", diff_rows, diff_rows)))
    zq_data = zq_rows.reshape(b, t, d).transpose(0, 2, 1)

    def backward_st(g):
        z._accumulate(g)

    zq = grad.Tensor(zq_data, parents=(z,), backward=backward_st, op="vq_st")

    commit_grad = (2.0 / (b * t)) * diff_rows.reshape(b, t, d).transpose(0, 2, 1)

    def backward_commit(g):
        z._accumulate(g.reshape(-1)[0] * commit_grad)

    commit = grad.Tensor(
        commit_val, parents=(z,), backward=backward_commit, op="vq_commit"
    )
    return zq, commit, idx.reshape(b, t)


def ema_update(cb, z, indices):
    """Exponential-moving-average codebook update (in place; returns cb).

    counts_i <- decay*counts_i + (1-decay)*n_i, sums likewise with the
    assigned-row sums; vectors_i = sums_i / Laplace-smoothed counts_i.
    """
    z = np.asarray(z, dtype=np.float64)
    idx = np.asarray(indices).reshape(-1)
    if z.ndim != 2 or z.shape[0] != idx.shape[0]:
        raise VqError(f"ema_update: rows {z.shape} do not match {idx.shape} indices")
    if z.shape[1] != cb.vectors.shape[1]:
        raise VqError(
            f"ema_update: dimension mismatch (z d={z.shape[1]}, "
            f"codebook d={cb.vectors.shape[1]})"
        )
    n_codes = cb.vectors.shape[0]
    n = np.bincount(idx, minlength=n_codes).astype(np.float64)
    sums = np.zeros_like(cb.ema_sums)
    np.add.at(sums, idx, z)
    d = cb.decay
    cb.ema_counts *= d
    cb.ema_counts += (1.0 - d) * n
    cb.ema_sums *= d
    cb.ema_sums += (1.0 - d) * sums
    total = cb.ema_counts.sum()
    if total > 0.0:
        smoothed = (cb.ema_counts + cb.epsilon) / (total + n_codes * cb.epsilon) * total
        cb.vectors = cb.ema_sums / smoothed[:, None]
    return cb


def reseed_dead(cb, rows, rng, step, threshold=RESEED_THRESHOLD,
                warmup=RESEED_WARMUP_STEPS):
    """Re-seed rows whose EMA count decayed below threshold from the current
    batch. Inactive during the first `warmup` steps. Returns rows reseeded."""
    if step < warmup:
        return 0
    rows = np.asarray(rows, dtype=np.float64)
    dead = np.flatnonzero(cb.ema_counts < threshold)
    if dead.size == 0 or rows.shape[0] == 0:
        return 0
    picks = rng.integers(0, rows.shape[0], size=dead.size)
    fresh = rows[picks]
    cb.vectors[dead] = fresh
    cb.ema_counts[dead] = 1.0
    cb.ema_sums[dead] = fresh
    return int(dead.size)
