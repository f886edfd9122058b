"""PCM16 WAV read/write and the JSONL manifest format.

One module owns the int16 <-> float64 convention so an in-memory
`quantize_pcm16` round-trip is bit-identical to a write-then-read through the
file system.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile

from .dsp import Waveform

PCM_SCALE = 32767.0


class AudioIoError(IOError):
    pass


def quantize_pcm16(samples):
    """float64 -> int16 with round-half-even and hard clipping at full scale."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


def pcm16_round_trip(samples):
    """The float64 samples a reader will see after a PCM16 write."""
    return quantize_pcm16(samples).astype(np.float64) / PCM_SCALE


def write_wav(path, waveform):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    scipy.io.wavfile.write(path, waveform.sample_rate, quantize_pcm16(waveform.samples))


def read_wav(path):
    if not os.path.exists(path):
        raise AudioIoError(f"missing WAV file: {path}")
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise AudioIoError(f"expected mono WAV, got shape {data.shape}: {path}")
    if data.dtype != np.int16:
        raise AudioIoError(f"expected PCM16 WAV, got dtype {data.dtype}: {path}")
    return Waveform(data.astype(np.float64) / PCM_SCALE, int(rate))


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    split: str
    snr_db: float
    t60: float
    paths: dict
    scale: float
    peak_gain: float = 1.0
    duration: float = 0.0
    content_seed: int = 0
    noise_lead_s: float = 0.0
    snr_reference: str = "whole_file_rms"
    provenance: list = field(default_factory=list)

    def to_json(self):
        return {
            "utt_id": self.utt_id,
            "speaker_id": self.speaker_id,
            "split": self.split,
            "snr_db": self.snr_db,
            "t60": self.t60,
            "paths": dict(self.paths),
            "scale": self.scale,
            "peak_gain": self.peak_gain,
            "duration": self.duration,
            "content_seed": self.content_seed,
            "noise_lead_s": self.noise_lead_s,
            "snr_reference": self.snr_reference,
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_json(cls, obj):
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in obj.items() if k in known}
        missing = {"utt_id", "speaker_id", "split", "paths"} - set(kwargs)
        if missing:
            raise AudioIoError(f"manifest entry missing fields: {sorted(missing)}")
        kwargs.setdefault("snr_db", float("nan"))
        kwargs.setdefault("t60", 0.0)
        kwargs.setdefault("scale", 1.0)
        return cls(**kwargs)


def write_manifest(path, entries):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def read_manifest(path):
    if not os.path.exists(path):
        raise AudioIoError(f"missing manifest: {path}")
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(ManifestEntry.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise AudioIoError(f"{path}:{lineno}: bad JSON: {exc}") from exc
    if not entries:
        raise AudioIoError(f"manifest is empty: {path}")
    return entries
