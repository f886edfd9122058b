"""Spectral-gating denoiser and the generic enhancement-stage chain.

The denoiser estimates a per-bin noise PSD (from leading frames by default,
since corpus mixtures start with a noise-only leader), turns it into
Wiener-style gains clamped to [gain_floor, 1], smooths the gains over time,
and resynthesizes. `apply_stage_chain` runs any 0-2 stage combination of
{denoise, wpe, external} over a manifest, writing one WAV tree per cumulative
stage key ("dn", "dn-dr", ...) with PCM16 quantization between stages so a
chained run is bit-identical to applying the stages one file at a time.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import audio_io, dsp, wpe
from .util import worker_count


class DenoiseError(ValueError):
    pass


# 50% overlap: the classic OLA configuration for spectral gating. The
# prediction stage keeps its finer 8 ms hop; gating gains gain nothing from
# it, and less inter-frame correlation makes the gain smoother more effective.
DENOISE_STFT = dsp.StftConfig(window_ms=32, hop_ms=16, fft_len=256)

NOISE_ESTIMATORS = ("leading_frames", "minimum_statistics")


@dataclass(frozen=True)
class DenoiseConfig:
    noise_est: str = "leading_frames"
    leading_n: int = 16
    min_stats_window: int = 64
    gain_floor: float = 0.1
    oversubtraction: float = 1.0
    smoothing: float = 0.7

    def validate(self):
        if self.noise_est not in NOISE_ESTIMATORS:
            raise DenoiseError(f"unknown noise estimator: {self.noise_est!r}")
        if self.leading_n < 1 or self.min_stats_window < 1:
            raise DenoiseError("estimator frame counts must be >= 1")
        if not 0 < self.gain_floor <= 1:
            raise DenoiseError(f"gain_floor must be in (0, 1], got {self.gain_floor}")
        if self.oversubtraction <= 0:
            raise DenoiseError(f"oversubtraction must be > 0, got {self.oversubtraction}")
        if not 0 <= self.smoothing < 1:
            raise DenoiseError(f"smoothing must be in [0, 1), got {self.smoothing}")


def estimate_noise_psd(spec, config=DenoiseConfig()):
    """Per-bin noise power estimate, shape (n_bins,)."""
    config.validate()
    power = np.abs(spec.frames) ** 2  # (T, F)
    if config.noise_est == "leading_frames":
        n = config.leading_n
        if power.shape[0] < n:
            raise DenoiseError(
                f"too few frames for leading_frames estimate: {power.shape[0]} < {n}"
            )
        return power[:n].mean(axis=0)
    # minimum statistics: smooth the periodogram, track the trailing-window
    # minimum per bin, compensate the low bias of the minimum
    smoothed = np.empty_like(power)
    smoothed[0] = power[0]
    for t in range(1, power.shape[0]):
        smoothed[t] = 0.8 * smoothed[t - 1] + 0.2 * power[t]
    w = min(config.min_stats_window, smoothed.shape[0])
    padded = np.pad(smoothed, ((w - 1, 0), (0, 0)), constant_values=np.inf)
    track = np.lib.stride_tricks.sliding_window_view(padded, w, axis=0).min(axis=-1)
    return 1.5 * track.mean(axis=0)


def spectral_gains(spec, config=DenoiseConfig()):
    """Smoothed per-frame, per-bin gain matrix in [gain_floor, 1]."""
    psd = estimate_noise_psd(spec, config)
    power = np.abs(spec.frames) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = psd[None, :] / power
    # silent bins: nothing to subtract from -> pin the formula's limits
    ratio = np.where(power > 0, ratio, np.where(psd[None, :] > 0, np.inf, 0.0))
    raw = np.maximum(0.0, 1.0 - config.oversubtraction * ratio)
    gains = np.maximum(config.gain_floor, raw)
    a = config.smoothing
    if a > 0:
        for t in range(1, gains.shape[0]):
            gains[t] = a * gains[t - 1] + (1 - a) * gains[t]
    return gains


def denoise(waveform, config=DenoiseConfig(), stft_config=DENOISE_STFT):
    """Spectral gating; output has the input's exact length."""
    spec = dsp.stft(waveform, stft_config)
    gains = spectral_gains(spec, config)
    out = dsp.istft(
        dsp.Spectrogram(gains * spec.frames, spec.config, spec.sample_rate, spec.original_len)
    )
    assert len(out.samples) == len(waveform.samples)
    return out


STAGE_KINDS = ("denoise", "wpe", "external")
STAGE_KEYS = {"denoise": "dn", "wpe": "dr", "external": "ext"}


@dataclass(frozen=True)
class StageSpec:
    kind: str
    denoise_config: DenoiseConfig = None
    wpe_config: wpe.WpeConfig = None
    stft_config: dsp.StftConfig = None
    external_dir: str = None

    @property
    def key(self):
        return STAGE_KEYS[self.kind]

    def validate(self):
        if self.kind not in STAGE_KINDS:
            raise DenoiseError(f"unknown stage kind: {self.kind!r}")
        if self.kind == "external" and not self.external_dir:
            raise DenoiseError("external stage needs a directory of processed WAVs")
        if self.kind != "external" and self.external_dir:
            raise DenoiseError(f"{self.kind} stage does not take a directory")
        if self.kind == "denoise":
            (self.denoise_config or DenoiseConfig()).validate()
        if self.kind == "wpe":
            (self.wpe_config or wpe.WpeConfig()).validate()


def parse_chain(text):
    """Parse a CLI chain string like "dn,dr" or "ext:/dir" into StageSpecs."""
    tokens = [t.strip() for t in text.split(",") if t.strip()] if text else []
    if len(tokens) > 2:
        raise DenoiseError(f"stage chains are limited to 2 stages, got {len(tokens)}")
    chain = []
    for tok in tokens:
        if tok == "dn":
            chain.append(StageSpec(kind="denoise"))
        elif tok == "dr":
            chain.append(StageSpec(kind="wpe"))
        elif tok.startswith("ext:"):
            chain.append(StageSpec(kind="external", external_dir=tok[4:]))
        else:
            raise DenoiseError(f"unknown stage token: {tok!r}")
    return chain


def _describe(stage):
    if stage.kind == "denoise":
        c = stage.denoise_config or DenoiseConfig()
        return (
            f"dn(noise_est={c.noise_est},os={c.oversubtraction},"
            f"floor={c.gain_floor},alpha={c.smoothing})"
        )
    if stage.kind == "wpe":
        c = stage.wpe_config or wpe.WpeConfig()
        return f"dr(taps={c.taps},delay={c.delay},iterations={c.iterations})"
    return f"ext({os.path.abspath(stage.external_dir)})"


def _run_stage(stage, waveform):
    if stage.kind == "denoise":
        return denoise(
            waveform,
            stage.denoise_config or DenoiseConfig(),
            stage.stft_config or DENOISE_STFT,
        )
    return wpe.wpe_waveform(
        waveform,
        stage.wpe_config or wpe.WpeConfig(),
        stage.stft_config or dsp.ENHANCE_STFT,
    )


def apply_stage_chain(manifest_path, chain, out_dir):
    """Enhance every entry's mixture through `chain`; returns the new entries.

    Writes out_dir/<cumulative-key>/<utt_id>.wav per stage and
    out_dir/manifest.jsonl with every path field rewritten relative to
    out_dir. Stages see exactly what a reader of the previous stage's WAV
    would see (PCM16-quantized), so chained and file-by-file sequential
    application agree bit for bit.
    """
    if len(chain) > 2:
        raise DenoiseError(f"stage chains are limited to 2 stages, got {len(chain)}")
    for stage in chain:
        stage.validate()
    entries = audio_io.read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    out_abs = os.path.abspath(out_dir)
    out_manifest = os.path.join(out_abs, "manifest.jsonl")
    if out_manifest == os.path.abspath(manifest_path):
        raise DenoiseError(f"refusing to overwrite the input manifest: {manifest_path}")

    for stage in chain:
        if stage.kind == "external":
            missing = [
                e.utt_id
                for e in entries
                if not os.path.exists(os.path.join(stage.external_dir, e.utt_id + ".wav"))
            ]
            if missing:
                raise DenoiseError(
                    f"external dir {stage.external_dir} is missing {len(missing)} "
                    f"utterances (first: {missing[:3]})"
                )

    summary = "enhance:" + ",".join(_describe(s) for s in chain)

    def job(entry):
        paths = {
            key: os.path.relpath(os.path.join(base, rel), out_abs)
            for key, rel in entry.paths.items()
        }
        current = audio_io.read_wav(os.path.join(base, entry.paths["mixed"]))
        key_parts = []
        for stage in chain:
            if stage.kind == "external":
                ext = audio_io.read_wav(os.path.join(stage.external_dir, entry.utt_id + ".wav"))
                if ext.sample_rate != current.sample_rate:
                    raise DenoiseError(
                        f"external WAV rate {ext.sample_rate} != {current.sample_rate} "
                        f"for {entry.utt_id}"
                    )
                if len(ext.samples) != len(current.samples):
                    raise DenoiseError(
                        f"external WAV length {len(ext.samples)} != {len(current.samples)} "
                        f"for {entry.utt_id}"
                    )
                current = ext
            else:
                current = _run_stage(stage, current)
            key_parts.append(stage.key)
            key = "-".join(key_parts)
            rel = os.path.join(key, entry.utt_id + ".wav")
            audio_io.write_wav(os.path.join(out_abs, rel), current)
            # hand the next stage exactly the samples now on disk
            current = dsp.Waveform(
                audio_io.pcm16_round_trip(current.samples), current.sample_rate
            )
            paths[key] = rel
        return replace(
            entry, paths=paths, provenance=list(entry.provenance) + [summary]
        )

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        new_entries = list(pool.map(job, entries))
    audio_io.write_manifest(out_manifest, new_entries)
    return new_entries
