"""Waveform containers, STFT analysis/synthesis, mel features, resampling.

All audio is mono float64 throughout. The STFT uses a periodic Hann window,
reflect center-padding, and overlap-add synthesis normalized by the squared
window sum, so istft(stft(x)) reproduces x to float64 rounding as long as the
window/hop pair satisfies the nonzero-overlap-add condition.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.signal

MEL_HIGH_Q = 2595.0
MEL_BREAK_HZ = 700.0
LOG_FLOOR = 1e-10


class DspError(ValueError):
    pass


def _check_samples(samples):
    a = np.asarray(samples, dtype=np.float64)
    if a.ndim != 1:
        raise DspError(f"expected mono 1-D samples, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DspError("samples contain NaN or Inf")
    return a


@dataclass
class Waveform:
    """Mono audio buffer. samples: float64 1-D, sample_rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = _check_samples(self.samples)
        if int(self.sample_rate) <= 0:
            raise DspError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def copy(self):
        return Waveform(self.samples.copy(), self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 20.0
    hop_ms: float = 5.0
    fft_len: int = 1024
    window: str = "hann"

    def win_length(self, sample_rate):
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate):
        return int(round(self.hop_ms * sample_rate / 1000.0))


# Enhancement stages analyze at a coarser resolution than the VC features.
ENHANCE_STFT = StftConfig(window_ms=32.0, hop_ms=8.0, fft_len=256)
VC_STFT = StftConfig(window_ms=20.0, hop_ms=5.0, fft_len=1024)


@dataclass
class Spectrogram:
    """Complex STFT frames, shape (T, fft_len//2 + 1)."""

    frames: np.ndarray
    config: StftConfig
    sample_rate: int
    original_len: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.complex128)
        if self.frames.ndim != 2:
            raise DspError(f"expected (T, F) frames, got shape {self.frames.shape}")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def num_bins(self):
        return self.frames.shape[1]


@dataclass
class MelFrames:
    """Log mel-band energies, shape (T, n_mels), natural log with 1e-10 floor."""

    frames: np.ndarray
    config: StftConfig
    sample_rate: int
    n_mels: int
    f_min: float
    f_max: float


@dataclass
class CepstraSeq:
    """Mel-cepstral frames from an orthonormal DCT-II, c0 in column 0."""

    frames: np.ndarray
    c0_included: bool = True


def _window_and_sizes(config, sample_rate):
    win = config.win_length(sample_rate)
    hop = config.hop_length(sample_rate)
    if win <= 0 or hop <= 0:
        raise DspError(f"window/hop must be positive samples, got win={win} hop={hop}")
    if hop > win:
        raise DspError(f"hop ({hop}) exceeds window ({win})")
    if config.fft_len < win:
        raise DspError(f"fft_len ({config.fft_len}) shorter than window ({win})")
    if config.window != "hann":
        raise DspError(f"unsupported window {config.window!r}")
    w = scipy.signal.get_window("hann", win, fftbins=True)
    return w, win, hop


def stft(waveform, config=VC_STFT):
    """Center-padded STFT. Frame t is centered on sample t*hop."""
    x = waveform.samples
    if len(x) == 0:
        raise DspError("cannot STFT an empty signal")
    w, win, hop = _window_and_sizes(config, waveform.sample_rate)
    if not scipy.signal.check_NOLA(w, win, win - hop):
        raise DspError(
            f"window/hop pair fails the overlap-add condition: win={win} hop={hop}"
        )
    pad_left = win // 2
    n_frames = 1 + len(x) // hop
    need = (n_frames - 1) * hop + win
    pad_right = need - len(x) - pad_left
    if pad_left >= len(x) or pad_right >= len(x):
        raise DspError(
            f"signal too short to reflect-pad: {len(x)} samples, window {win}"
        )
    xp = np.pad(x, (pad_left, max(0, pad_right)), mode="reflect")
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = np.fft.rfft(xp[idx] * w[None, :], n=config.fft_len, axis=1)
    return Spectrogram(frames, config, waveform.sample_rate, len(x))


def istft(spec):
    """Overlap-add inverse of `stft`, truncated to the recorded original length."""
    w, win, hop = _window_and_sizes(spec.config, spec.sample_rate)
    if not scipy.signal.check_NOLA(w, win, win - hop):
        raise DspError(
            f"window/hop pair fails the overlap-add condition: win={win} hop={hop}"
        )
    n_frames = spec.num_frames
    if n_frames == 0:
        raise DspError("cannot invert an empty spectrogram")
    expected_bins = spec.config.fft_len // 2 + 1
    if spec.num_bins != expected_bins:
        raise DspError(f"expected {expected_bins} bins, got {spec.num_bins}")
    frames = np.fft.irfft(spec.frames, n=spec.config.fft_len, axis=1)[:, :win]
    total = (n_frames - 1) * hop + win
    out = np.zeros(total)
    den = np.zeros(total)
    wsq = w * w
    for t in range(n_frames):
        out[t * hop : t * hop + win] += frames[t] * w
        den[t * hop : t * hop + win] += wsq
    pad_left = win // 2
    lo = pad_left
    hi = pad_left + spec.original_len
    if hi > total:
        raise DspError("spectrogram too short for its recorded original length")
    seg = out[lo:hi]
    d = den[lo:hi]
    if np.any(d < 1e-10):
        raise DspError("overlap-add normalization degenerate for this config")
    return Waveform(seg / d, spec.sample_rate)


def hz_to_mel(f):
    return MEL_HIGH_Q * np.log10(1.0 + np.asarray(f, dtype=np.float64) / MEL_BREAK_HZ)


def mel_to_hz(m):
    return MEL_BREAK_HZ * (10.0 ** (np.asarray(m, dtype=np.float64) / MEL_HIGH_Q) - 1.0)


def mel_filterbank(sample_rate, fft_len, n_mels, f_min=0.0, f_max=None):
    """Triangular mel filterbank, each row normalized to unit sum.

    Rows are triangles between successive mel-spaced corner frequencies
    evaluated at the rfft bin centers.
    """
    if f_max is None:
        f_max = sample_rate / 2.0
    if not (0.0 <= f_min < f_max <= sample_rate / 2.0 + 1e-9):
        raise DspError(f"bad mel range [{f_min}, {f_max}] at fs={sample_rate}")
    if n_mels < 1:
        raise DspError("need at least one mel band")
    n_bins = fft_len // 2 + 1
    bin_hz = np.arange(n_bins) * (sample_rate / fft_len)
    corners = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = corners[i], corners[i + 1], corners[i + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        s = fb[i].sum()
        if s <= 0.0:
            raise DspError(
                f"mel band {i} covers no FFT bins (fft_len={fft_len}, fs={sample_rate})"
            )
        fb[i] /= s
    return fb


def log_mel(spec, n_mels=80, f_min=0.0, f_max=None):
    """Natural-log mel band energies of a power spectrogram."""
    if f_max is None:
        f_max = spec.sample_rate / 2.0
    fb = mel_filterbank(spec.sample_rate, spec.config.fft_len, n_mels, f_min, f_max)
    power = np.abs(spec.frames) ** 2
    bands = power @ fb.T
    frames = np.log(np.maximum(bands, LOG_FLOOR))
    return MelFrames(frames, spec.config, spec.sample_rate, n_mels, f_min, f_max)


def mel_cepstra(mel, n_coeffs=25):
    """Orthonormal DCT-II of each log-mel frame, first n_coeffs kept."""
    if n_coeffs < 1 or n_coeffs > mel.n_mels:
        raise DspError(f"n_coeffs must be in [1, {mel.n_mels}], got {n_coeffs}")
    ceps = scipy.fft.dct(mel.frames, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    return CepstraSeq(np.ascontiguousarray(ceps), c0_included=True)


_SINC_HALF = 32


def resample(waveform, target_hz):
    """Weight-normalized windowed-sinc resampling.

    Identity rates return a copy. Output length is round(n * target/source);
    per-output-sample weight normalization keeps DC exact, including at the
    edges where the kernel is truncated.
    """
    if int(target_hz) <= 0:
        raise DspError(f"target rate must be positive, got {target_hz}")
    target_hz = int(target_hz)
    src = waveform.sample_rate
    if target_hz == src:
        return waveform.copy()
    x = waveform.samples
    if len(x) == 0:
        raise DspError("cannot resample an empty signal")
    ratio = target_hz / src
    out_len = max(1, int(round(len(x) * ratio)))
    # cutoff relative to the source Nyquist; back off slightly for the window
    fc = 0.98 * min(1.0, ratio)
    pos = np.arange(out_len) / ratio
    n0 = np.floor(pos).astype(np.int64)
    offs = np.arange(-_SINC_HALF + 1, _SINC_HALF + 1)
    idx = n0[:, None] + offs[None, :]
    t = pos[:, None] - idx
    taper = 0.5 + 0.5 * np.cos(np.pi * t / _SINC_HALF)
    taper[np.abs(t) >= _SINC_HALF] = 0.0
    weights = fc * np.sinc(fc * t) * taper
    valid = (idx >= 0) & (idx < len(x))
    weights = np.where(valid, weights, 0.0)
    norms = weights.sum(axis=1, keepdims=True)
    if np.any(np.abs(norms) < 1e-12):
        raise DspError("resampling kernel degenerate (signal too short)")
    weights /= norms
    y = np.einsum("ok,ok->o", weights, x[np.clip(idx, 0, len(x) - 1)])
    return Waveform(y, target_hz)
