"""Weighted prediction error dereverberation for single-channel spectrograms.

Per frequency bin, a delayed linear predictor is fit by iteratively reweighted
least squares: frame weights come from the current dereverberated power
estimate, the tap vector solves a ridge-loaded Hermitian normal equation, and
the predicted late reverberation is subtracted from the observation. Bins are
processed independently; the first delay + taps - 1 frames pass through
untouched because their regressors would reach before the start of the signal.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import dsp


class WpeError(ValueError):
    pass


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    variance_floor: float = 1e-8
    regularization: float = 1e-6

    def validate(self):
        if self.taps < 1:
            raise WpeError(f"taps must be >= 1, got {self.taps}")
        if self.delay < 1:
            raise WpeError(f"delay must be >= 1, got {self.delay}")
        if self.iterations < 1:
            raise WpeError(f"iterations must be >= 1, got {self.iterations}")
        if self.variance_floor <= 0 or self.regularization < 0:
            raise WpeError("variance_floor must be > 0 and regularization >= 0")


def _solve_taps(R, p):
    """Per-bin Hermitian solve: Cholesky first, pseudo-inverse on failure."""
    taps = np.empty_like(p)
    for f in range(R.shape[0]):
        try:
            c = scipy.linalg.cho_factor(R[f], check_finite=False)
            taps[f] = scipy.linalg.cho_solve(c, p[f], check_finite=False)
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
            try:
                taps[f] = np.linalg.pinv(R[f]) @ p[f]
            except np.linalg.LinAlgError as exc:
                raise WpeError(f"tap solve failed at frequency bin {f}") from exc
        if not np.all(np.isfinite(taps[f].view(np.float64))):
            raise WpeError(f"tap solve failed at frequency bin {f}")
    return taps


def wpe_dereverb(spec, config=WpeConfig()):
    """Dereverberate a Spectrogram, returning a new Spectrogram."""
    config.validate()
    K, D = config.taps, config.delay
    X = np.ascontiguousarray(spec.frames.T)  # (F, T)
    if not np.all(np.isfinite(X.view(np.float64))):
        raise WpeError("spectrogram contains NaN or Inf")
    F, T = X.shape
    start = D + K - 1
    if T - start < K:
        raise WpeError(
            f"too few frames for taps={K} delay={D}: have {T}, need > {start + K}"
        )
    M = T - start
    # regressor tensor: tilde[f, k, m] = X[f, start + m - D - k]
    tilde = np.stack([X[:, start - D - k : start - D - k + M] for k in range(K)], axis=1)
    tilde_h = tilde.conj().transpose(0, 2, 1)
    ridge = config.regularization * np.eye(K)
    d = X.copy()
    for _ in range(config.iterations):
        lam = np.maximum(np.abs(d[:, start:]) ** 2, config.variance_floor)
        weighted = tilde / lam[:, None, :]
        R = weighted @ tilde_h + ridge
        p = np.einsum("fkm,fm->fk", weighted, X[:, start:].conj())
        g = _solve_taps(R, p)
        pred = np.einsum("fk,fkm->fm", g.conj(), tilde)
        d = X.copy()
        d[:, start:] -= pred
    return dsp.Spectrogram(d.T, spec.config, spec.sample_rate, spec.original_len)


def wpe_waveform(waveform, config=WpeConfig(), stft_config=dsp.ENHANCE_STFT):
    """STFT -> WPE -> ISTFT round trip; output length equals input length."""
    spec = dsp.stft(waveform, stft_config)
    out = dsp.istft(wpe_dereverb(spec, config))
    assert len(out.samples) == len(waveform.samples)
    return out
