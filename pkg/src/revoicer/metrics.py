"""Objective evaluation: SI-SDR, SD-SDR, STOI, zero-lag SAR, DTW-aligned MCD.

dB-ratio metrics cap at +-100 dB so reports stay finite; caps are applied when
the numerator or denominator energy falls below 1e-20. SAR deliberately uses a
zero-lag projection onto the two references (no allpass-y filtered projection),
so its absolute values are comparable within this toolkit only.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import audio_io, dsp
from .util import worker_count


class MetricError(ValueError):
    pass


DB_CAP = 100.0
_TINY = 1e-20
_EPS = np.finfo(np.float64).eps

MCD_N_MELS = 80
MCD_N_COEFFS = 13


def _pair(est, ref):
    if est.sample_rate != ref.sample_rate:
        raise MetricError(
            f"sample rate mismatch: {est.sample_rate} vs {ref.sample_rate}"
        )
    if len(est.samples) != len(ref.samples):
        raise MetricError(
            f"length mismatch: {len(est.samples)} vs {len(ref.samples)}"
        )
    return est.samples, ref.samples


def _ratio_db(num, den):
    if den < _TINY:
        return DB_CAP
    if num < _TINY:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def si_sdr(est, ref):
    """Scale-invariant SDR in dB; the reference is rescaled to the estimate."""
    e, r = _pair(est, ref)
    ref_energy = np.dot(r, r)
    if ref_energy < _TINY:
        raise MetricError("silent reference")
    alpha = np.dot(e, r) / ref_energy
    target = alpha * r
    err = e - target
    return _ratio_db(np.dot(target, target), np.dot(err, err))


def sd_sdr(est, ref):
    """Scale-dependent SDR: projected target energy over unscaled error."""
    e, r = _pair(est, ref)
    ref_energy = np.dot(r, r)
    if ref_energy < _TINY:
        raise MetricError("silent reference")
    alpha = np.dot(e, r) / ref_energy
    target = alpha * r
    err = e - r
    return _ratio_db(np.dot(target, target), np.dot(err, err))


def sar_zero_lag(est, s_ref, n_ref):
    """Artifact ratio: energy in span{s_ref, n_ref} over energy outside it."""
    e, s = _pair(est, s_ref)
    _, n = _pair(est, n_ref)
    A = np.stack([s, n], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(A, e, rcond=None)
    if rank < 2:
        raise MetricError("degenerate span: references are linearly dependent")
    proj = A @ coef
    err = e - proj
    return _ratio_db(np.dot(proj, proj), np.dot(err, err))


# --- STOI ------------------------------------------------------------------

_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_FFT = 512
_STOI_N_BANDS = 15
_STOI_MIN_FREQ = 150.0
_STOI_SEG = 30
_STOI_DYN_RANGE = 40.0
_STOI_CLIP = 10.0 ** (15.0 / 20.0)  # -15 dB SDR lower bound on the fit


def _stoi_frames(x, window):
    starts = np.arange(0, len(x) - _STOI_FRAME + 1, _STOI_HOP)
    return window * x[starts[:, None] + np.arange(_STOI_FRAME)]


def _remove_silent_frames(ref, est, window):
    rf = _stoi_frames(ref, window)
    ef = _stoi_frames(est, window)
    energies = 20 * np.log10(np.linalg.norm(rf, axis=1) + _EPS)
    mask = energies > energies.max() - _STOI_DYN_RANGE
    rf, ef = rf[mask], ef[mask]
    out_len = (len(rf) - 1) * _STOI_HOP + _STOI_FRAME
    r_out = np.zeros(out_len)
    e_out = np.zeros(out_len)
    for i in range(len(rf)):  # 50%-overlap Hann: OLA reconstructs to ~unity
        r_out[i * _STOI_HOP : i * _STOI_HOP + _STOI_FRAME] += rf[i]
        e_out[i * _STOI_HOP : i * _STOI_HOP + _STOI_FRAME] += ef[i]
    return r_out, e_out


def _third_octave_bands():
    freqs = np.linspace(0, _STOI_FS / 2, _STOI_FFT // 2 + 1)
    obm = np.zeros((_STOI_N_BANDS, len(freqs)))
    for k in range(_STOI_N_BANDS):
        cf = _STOI_MIN_FREQ * 2.0 ** (k / 3.0)
        lo, hi = cf * 2.0 ** (-1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)
        obm[k, (freqs >= lo) & (freqs < hi)] = 1.0
    return obm


def _band_envelopes(x, window):
    frames = _stoi_frames(x, window)
    spec = np.fft.rfft(frames, n=_STOI_FFT, axis=1)
    return np.sqrt(_third_octave_bands() @ (np.abs(spec.T) ** 2))  # (bands, T)


def stoi(est, ref):
    """Short-time objective intelligibility of est against the clean ref."""
    e, r = _pair(est, ref)
    if len(r) < ref.sample_rate // 2:
        raise MetricError("stoi needs at least 0.5 s of signal")
    r10 = dsp.resample(ref, _STOI_FS).samples
    e10 = dsp.resample(est, _STOI_FS).samples
    window = np.hanning(_STOI_FRAME + 2)[1:-1]
    r_act, e_act = _remove_silent_frames(r10, e10, window)
    X = _band_envelopes(r_act, window)
    Y = _band_envelopes(e_act, window)
    if X.shape[1] < _STOI_SEG:
        raise MetricError("signal too short after silent-frame removal")
    total = 0.0
    count = 0
    for m in range(_STOI_SEG, X.shape[1] + 1):
        x_seg = X[:, m - _STOI_SEG : m]
        y_seg = Y[:, m - _STOI_SEG : m]
        alpha = np.linalg.norm(x_seg, axis=1, keepdims=True) / (
            np.linalg.norm(y_seg, axis=1, keepdims=True) + _EPS
        )
        y_fit = np.minimum(alpha * y_seg, x_seg * (1 + _STOI_CLIP))
        xc = x_seg - x_seg.mean(axis=1, keepdims=True)
        yc = y_fit - y_fit.mean(axis=1, keepdims=True)
        num = np.sum(xc * yc, axis=1)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + _EPS
        total += float(np.sum(num / den))
        count += _STOI_N_BANDS
    return total / count


# --- DTW / MCD ---------------------------------------------------------------

_MCD_SCALE = 10.0 / math.log(10.0)


def _distance_coeffs(seq):
    frames = np.asarray(seq.frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise MetricError("cepstra must be a non-empty (frames, coeffs) array")
    out = frames[:, 1:] if seq.c0_included else frames
    if out.shape[1] < 1:
        raise MetricError("no coefficients left after excluding c0")
    return out


def dtw_align(a, b):
    """Optimal monotone alignment path between two cepstral sequences.

    Euclidean frame distance over the energy-excluded coefficients; steps
    (1,1), (1,0), (0,1) with ties preferring the diagonal, then advancing a.
    Returns the path as a list of (i, j) pairs from (0, 0) to (n-1, m-1).
    """
    fa, fb = _distance_coeffs(a), _distance_coeffs(b)
    if fa.shape[1] != fb.shape[1]:
        raise MetricError(f"coefficient dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    diff = fa[:, None, :] - fb[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    n, m = dist.shape
    cost = np.full((n, m), np.inf)
    step = np.zeros((n, m), dtype=np.int8)  # 1=(1,1) 2=(1,0) 3=(0,1)
    cost[0, 0] = dist[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best, which = np.inf, 0
            if i > 0 and j > 0 and cost[i - 1, j - 1] < best:
                best, which = cost[i - 1, j - 1], 1
            if i > 0 and cost[i - 1, j] < best:
                best, which = cost[i - 1, j], 2
            if j > 0 and cost[i, j - 1] < best:
                best, which = cost[i, j - 1], 3
            cost[i, j] = dist[i, j] + best
            step[i, j] = which
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        which = step[i, j]
        if which == 1:
            i, j = i - 1, j - 1
        elif which == 2:
            i -= 1
        else:
            j -= 1
        path.append((i, j))
    return path[::-1]


def mcd(a, b, align=True):
    """Mel-cepstral distortion in dB, mean over (aligned) frame pairs."""
    fa, fb = _distance_coeffs(a), _distance_coeffs(b)
    if fa.shape[1] != fb.shape[1]:
        raise MetricError(f"coefficient dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    if align:
        pairs = dtw_align(a, b)
    else:
        if fa.shape[0] != fb.shape[0]:
            raise MetricError(
                f"align=False needs equal lengths, got {fa.shape[0]} vs {fb.shape[0]}"
            )
        pairs = list(zip(range(fa.shape[0]), range(fb.shape[0])))
    total = 0.0
    for i, j in pairs:
        d2 = np.sum((fa[i] - fb[j]) ** 2)
        total += _MCD_SCALE * math.sqrt(2.0 * d2)
    return total / len(pairs)


def waveform_cepstra(waveform, stft_config=dsp.VC_STFT, n_mels=MCD_N_MELS, n_coeffs=MCD_N_COEFFS):
    """The cepstral extractor every MCD comparison in this toolkit uses."""
    spec = dsp.stft(waveform, stft_config)
    return dsp.mel_cepstra(dsp.log_mel(spec, n_mels=n_mels), n_coeffs=n_coeffs)


# --- reporting ---------------------------------------------------------------

METRIC_NAMES = ("si_sdr", "sd_sdr", "stoi", "sar", "mcd")


@dataclass
class MetricReport:
    condition: str
    utt_ids: list = field(default_factory=list)
    values: dict = field(default_factory=dict)  # metric -> [float] per utt_id
    failures: dict = field(default_factory=dict)  # utt_id -> message

    def validate(self):
        for metric, vals in self.values.items():
            if len(vals) != len(self.utt_ids):
                raise MetricError(f"{metric}: {len(vals)} values for {len(self.utt_ids)} utts")
            if not np.all(np.isfinite(vals)):
                raise MetricError(f"{metric}: non-finite cell")

    def summary(self):
        self.validate()
        out = {}
        for metric, vals in sorted(self.values.items()):
            arr = np.asarray(vals, dtype=np.float64)
            out[metric] = {
                "mean": float(arr.mean()),
                "std": float(arr.std()),
                "count": int(arr.size),
            }
        return out

    def to_json(self):
        return {
            "condition": self.condition,
            "utt_ids": list(self.utt_ids),
            "values": {k: list(map(float, v)) for k, v in self.values.items()},
            "failures": dict(self.failures),
            "summary": self.summary(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            condition=obj["condition"],
            utt_ids=list(obj["utt_ids"]),
            values={k: list(v) for k, v in obj["values"].items()},
            failures=dict(obj.get("failures", {})),
        )


def _entry_wav(base, entry, key):
    if key not in entry.paths:
        raise MetricError(f"{entry.utt_id}: no '{key}' path in manifest")
    return audio_io.read_wav(os.path.join(base, entry.paths[key]))


def metric_table(est_manifest, est_key, ref_manifest, ref_key, names, condition=""):
    """Per-utterance metrics of est_key WAVs against ref_key WAVs.

    Utterances are matched by utt_id; a failing utterance is dropped from the
    value arrays and recorded under failures instead of poisoning the table.
    `sar` additionally reads the reference manifest's `noise` WAV.
    """
    for name in names:
        if name not in METRIC_NAMES:
            raise MetricError(f"unknown metric: {name!r}")
    est_entries = audio_io.read_manifest(est_manifest)
    ref_entries = {e.utt_id: e for e in audio_io.read_manifest(ref_manifest)}
    est_base = os.path.dirname(os.path.abspath(est_manifest))
    ref_base = os.path.dirname(os.path.abspath(ref_manifest))
    missing = [e.utt_id for e in est_entries if e.utt_id not in ref_entries]
    if missing:
        raise MetricError(f"reference manifest missing utt_ids (first: {missing[:3]})")

    def job(entry):
        est = _entry_wav(est_base, entry, est_key)
        ref_entry = ref_entries[entry.utt_id]
        ref = _entry_wav(ref_base, ref_entry, ref_key)
        row = {}
        for name in names:
            if name == "si_sdr":
                row[name] = si_sdr(est, ref)
            elif name == "sd_sdr":
                row[name] = sd_sdr(est, ref)
            elif name == "stoi":
                row[name] = stoi(est, ref)
            elif name == "sar":
                noise = _entry_wav(ref_base, ref_entry, "noise")
                row[name] = sar_zero_lag(est, ref, noise)
            else:
                row[name] = mcd(waveform_cepstra(est), waveform_cepstra(ref))
        return row

    report = MetricReport(condition=condition, values={n: [] for n in names})
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(lambda e: _try(job, e), est_entries))
    for entry, outcome in zip(est_entries, results):
        row, err = outcome
        if err is not None:
            report.failures[entry.utt_id] = err
            continue
        report.utt_ids.append(entry.utt_id)
        for name in names:
            report.values[name].append(row[name])
    report.validate()
    return report


def _try(fn, arg):
    try:
        return fn(arg), None
    except Exception as exc:  # per-utterance fault isolation
        return None, f"{type(exc).__name__}: {exc}"
