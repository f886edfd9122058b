"""Synthetic noisy-reverberant corpus: y(t) = s(t) * h_s(t) + scale * (n(t) * h_n(t)).

Speech is a seeded formant-resonator synthesizer, noise is filtered colored
noise with a slow burst envelope, and rooms are exponential-decay Gaussian
impulse responses. Every utterance is fully determined by (master_seed,
utt_id), train and eval RIR seeds come from disjoint pools, and a short
noise-only leader is prepended to each mixture so downstream noise estimators
have clean context.
"""

import concurrent.futures
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from . import audio_io
from .dsp import DspError, Waveform
from .util import derive_seed, worker_count


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# room impulse responses


@dataclass(frozen=True)
class RirSpec:
    t60: float
    direct_delay: int = 0
    drr_db: float = 3.0
    length: int = 4096
    seed: int = 0
    sample_rate: int = 8000


def gen_rir(spec):
    """Exponential-decay Gaussian RIR, normalized to unit total energy.

    The direct path is a single impulse at `direct_delay`; the tail is white
    Gaussian noise under an energy envelope that drops 60 dB at t60. The
    direct/tail energy ratio is set by drr_db.
    """
    if spec.t60 <= 0:
        raise CorpusError(f"t60 must be positive, got {spec.t60}")
    if spec.direct_delay < 0 or spec.length < spec.direct_delay + 2:
        raise CorpusError(
            f"need length >= direct_delay + 2, got length={spec.length} "
            f"delay={spec.direct_delay}"
        )
    rng = np.random.default_rng(spec.seed)
    h = np.zeros(spec.length)
    n_tail = spec.length - spec.direct_delay - 1
    t = np.arange(1, n_tail + 1) / spec.sample_rate
    # energy envelope exp(-6 ln10 t / t60) => amplitude is its square root
    envelope = np.exp(-3.0 * np.log(10.0) * t / spec.t60)
    tail = rng.standard_normal(n_tail) * envelope
    tail_energy = float(np.sum(tail**2))
    if tail_energy <= 0.0:
        tail_energy = 1e-30
    direct = np.sqrt(10.0 ** (spec.drr_db / 10.0) * tail_energy)
    h[spec.direct_delay] = direct
    h[spec.direct_delay + 1 :] = tail
    h /= np.sqrt(np.sum(h**2))
    return Waveform(h, spec.sample_rate)


def convolve_rir(speech, rir):
    """FFT convolution truncated to len(speech) + direct-path delay.

    The direct-path delay is taken as the position of the RIR's largest
    magnitude, so a unit impulse leaves the signal untouched and a delayed
    impulse shifts it.
    """
    if speech.sample_rate != rir.sample_rate:
        raise CorpusError("speech and RIR sample rates differ")
    if len(speech.samples) == 0 or len(rir.samples) == 0:
        raise CorpusError("cannot convolve empty signals")
    full = scipy.signal.fftconvolve(speech.samples, rir.samples)
    delay = int(np.argmax(np.abs(rir.samples)))
    out = full[: len(speech.samples) + delay]
    return Waveform(out, speech.sample_rate)


# ---------------------------------------------------------------------------
# mixing


@dataclass
class MixResult:
    y: Waveform
    scale: float
    peak_gain: float


def mix_at_snr(speech, noise, snr_db):
    """Mix to a target SNR using whole-file RMS levels.

    Noise is tiled or cropped to the speech length first. If the raw mixture
    would clip full scale, the whole mixture is peak-normalized to 0.95 and the
    applied gain is reported in the result.
    """
    if speech.sample_rate != noise.sample_rate:
        raise CorpusError("speech and noise sample rates differ")
    if abs(snr_db) > 60.0:
        raise CorpusError(f"snr_db out of range [-60, 60]: {snr_db}")
    s = speech.samples
    n = noise.samples
    if len(s) == 0 or len(n) == 0:
        raise CorpusError("cannot mix empty signals")
    if len(n) < len(s):
        reps = int(np.ceil(len(s) / len(n)))
        n = np.tile(n, reps)
    n = n[: len(s)]
    rms_s = float(np.sqrt(np.mean(s**2)))
    rms_n = float(np.sqrt(np.mean(n**2)))
    if rms_s <= 0.0:
        raise CorpusError("speech is silent; SNR undefined")
    if rms_n <= 0.0:
        raise CorpusError("noise is silent; SNR undefined")
    scale = rms_s / rms_n * 10.0 ** (-snr_db / 20.0)
    y = s + scale * n
    peak = float(np.max(np.abs(y)))
    peak_gain = 1.0
    if peak > 1.0:
        peak_gain = 0.95 / peak
        y = y * peak_gain
    return MixResult(Waveform(y, speech.sample_rate), scale, peak_gain)


# ---------------------------------------------------------------------------
# synthetic speech and noise


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: str
    formants: tuple = (730.0, 1090.0, 2440.0)
    pitch_range: tuple = (90.0, 130.0)
    bandwidths: tuple = (60.0, 90.0, 120.0)

    def to_json(self):
        return {
            "speaker_id": self.speaker_id,
            "formants": list(self.formants),
            "pitch_range": list(self.pitch_range),
            "bandwidths": list(self.bandwidths),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            speaker_id=obj["speaker_id"],
            formants=tuple(obj.get("formants", (730.0, 1090.0, 2440.0))),
            pitch_range=tuple(obj.get("pitch_range", (90.0, 130.0))),
            bandwidths=tuple(obj.get("bandwidths", (60.0, 90.0, 120.0))),
        )


def _smooth_contour(rng, n, n_points, lo, hi):
    pts = rng.uniform(lo, hi, size=n_points)
    xs = np.linspace(0, n - 1, n_points)
    return np.interp(np.arange(n), xs, pts)


def synth_utterance(speaker, duration, seed, sample_rate=8000):
    """Seeded formant-resonator syllable stream.

    The seed controls the content (relative pitch contour, syllable rhythm and
    voicing pattern, pulse jitter); the speaker controls the voice (formants,
    absolute pitch range). Two speakers given the same seed produce parallel
    renditions. Syllables are separated by near-silent gaps and a fraction are
    unvoiced noise bursts, so utterances are not long-term predictable.
    """
    if not (1.0 <= duration <= 10.0):
        raise CorpusError(f"duration must be in [1, 10] s, got {duration}")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng(seed)

    # content: normalized pitch contour, syllable layout, voicing pattern
    rel_pitch = _smooth_contour(rng, n, max(4, int(duration * 3)), 0.0, 1.0)
    syll_rate = rng.uniform(2.5, 4.5)
    n_syll = max(1, int(round(duration * syll_rate)))
    edges = np.linspace(0, n, n_syll + 1).astype(int)
    env = np.zeros(n)
    voiced_mask = np.zeros(n, dtype=bool)
    for a, b in zip(edges[:-1], edges[1:]):
        seg = b - a
        if seg < 16:
            continue
        # leave a gap at the tail of each syllable slot
        gap = int(seg * rng.uniform(0.2, 0.4))
        body = seg - gap
        amp = rng.uniform(0.6, 1.0)
        env[a : a + body] = amp * np.sin(np.pi * np.arange(body) / body) ** 2
        if rng.uniform() < 0.75:
            voiced_mask[a : a + body] = True
        else:
            env[a : a + body] *= 0.5  # unvoiced bursts sit lower

    lo, hi = speaker.pitch_range
    f0 = lo + rel_pitch * (hi - lo)
    # jittered pulse train: accumulate phase, perturb each period slightly
    phase = np.cumsum(f0 / sample_rate)
    pulses = np.zeros(n)
    marks = np.nonzero(np.diff(np.floor(phase)) > 0)[0] + 1
    jitter = np.clip(rng.standard_normal(len(marks)) * 2.0, -6.0, 6.0).astype(int)
    marks = np.clip(marks + jitter, 0, n - 1)
    shimmer = 1.0 + 0.12 * rng.standard_normal(len(marks))
    pulses[marks] = shimmer
    noise_src = rng.standard_normal(n) * 0.25
    source = np.where(voiced_mask, pulses, noise_src)

    x = source
    for freq, bw in zip(speaker.formants, speaker.bandwidths):
        r = np.exp(-np.pi * bw / sample_rate)
        theta = 2.0 * np.pi * freq / sample_rate
        b = [1.0 - r]
        a = [1.0, -2.0 * r * np.cos(theta), r * r]
        x = scipy.signal.lfilter(b, a, x)
    # envelope applied after filtering so inter-syllable gaps stay silent
    x = x * env
    x = x + 0.002 * np.max(np.abs(x)) * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.25 * x / peak
    return Waveform(x, sample_rate)


def synth_noise(duration, seed, sample_rate=8000):
    """Band-limited colored noise with a slow burst envelope, unit RMS."""
    n = int(round(duration * sample_rate))
    if n < 64:
        raise CorpusError("noise segment too short")
    rng = np.random.default_rng(seed)
    lo = rng.uniform(80.0, 300.0)
    hi = rng.uniform(1500.0, 3600.0)
    sos = scipy.signal.butter(4, [lo, hi], btype="band", fs=sample_rate, output="sos")
    x = scipy.signal.sosfilt(sos, rng.standard_normal(n))
    env = _smooth_contour(rng, n, max(4, int(duration * 2)), 0.6, 1.0)
    x = x * env
    rms = np.sqrt(np.mean(x**2))
    return Waveform(x / rms, sample_rate)


# ---------------------------------------------------------------------------
# corpus builder


@dataclass
class SplitSpec:
    name: str
    utts_per_speaker: int
    snr_levels: list
    t60_range: tuple

    def to_json(self):
        return {
            "name": self.name,
            "utts_per_speaker": self.utts_per_speaker,
            "snr_levels": list(self.snr_levels),
            "t60_range": list(self.t60_range),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            name=obj["name"],
            utts_per_speaker=int(obj["utts_per_speaker"]),
            snr_levels=list(obj["snr_levels"]),
            t60_range=tuple(obj["t60_range"]),
        )


def default_speakers():
    return [
        SpeakerSpec("spk_a", (730.0, 1090.0, 2440.0), (85.0, 115.0)),
        SpeakerSpec("spk_b", (310.0, 2020.0, 2960.0), (165.0, 215.0)),
        SpeakerSpec("spk_c", (570.0, 1540.0, 2700.0), (120.0, 160.0)),
        SpeakerSpec("spk_d", (440.0, 1220.0, 2230.0), (200.0, 255.0)),
    ]


@dataclass
class CorpusConfig:
    speakers: list = field(default_factory=default_speakers)
    train: SplitSpec = field(
        default_factory=lambda: SplitSpec(
            "train", 10, [6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0], (0.25, 0.7)
        )
    )
    eval: SplitSpec = field(
        default_factory=lambda: SplitSpec("eval", 3, [7.0, 11.0, 15.0, 19.0], (0.3, 0.6))
    )
    sample_rate: int = 8000
    duration_range: tuple = (1.2, 2.2)
    noise_lead_s: float = 0.3
    drr_db_range: tuple = (1.0, 6.0)
    master_seed: int = 0

    def to_json(self):
        return {
            "speakers": [s.to_json() for s in self.speakers],
            "train": self.train.to_json(),
            "eval": self.eval.to_json(),
            "sample_rate": self.sample_rate,
            "duration_range": list(self.duration_range),
            "noise_lead_s": self.noise_lead_s,
            "drr_db_range": list(self.drr_db_range),
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_json(cls, obj):
        cfg = cls()
        if "speakers" in obj:
            cfg.speakers = [SpeakerSpec.from_json(s) for s in obj["speakers"]]
        if "train" in obj:
            cfg.train = SplitSpec.from_json(obj["train"])
        if "eval" in obj:
            cfg.eval = SplitSpec.from_json(obj["eval"])
        cfg.sample_rate = int(obj.get("sample_rate", cfg.sample_rate))
        if "duration_range" in obj:
            cfg.duration_range = tuple(obj["duration_range"])
        cfg.noise_lead_s = float(obj.get("noise_lead_s", cfg.noise_lead_s))
        if "drr_db_range" in obj:
            cfg.drr_db_range = tuple(obj["drr_db_range"])
        cfg.master_seed = int(obj.get("master_seed", cfg.master_seed))
        return cfg

    def speaker(self, speaker_id):
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise CorpusError(f"unknown speaker {speaker_id!r}")


def rir_seed(config, split_name, utt_index, role):
    # split name is part of the hash, so train and eval pools are disjoint
    return derive_seed(config.master_seed, "rir", split_name, utt_index, role)


def content_seed_for(config, split_name, utt_index):
    # shared across speakers: utterance i is a parallel rendition per speaker
    return derive_seed(config.master_seed, "content", split_name, utt_index)


def plan_utterance(config, split, speaker, utt_index):
    """All derived parameters for one utterance, with no synthesis."""
    cseed = content_seed_for(config, split.name, utt_index)
    crng = np.random.default_rng(derive_seed(cseed, "duration"))
    duration = float(crng.uniform(*config.duration_range))
    utt_id = f"{split.name}_{speaker.speaker_id}_{utt_index:04d}"
    urng = np.random.default_rng(
        derive_seed(config.master_seed, "utt", split.name, speaker.speaker_id, utt_index)
    )
    snr_db = float(urng.choice(np.asarray(split.snr_levels, dtype=np.float64)))
    t60 = float(urng.uniform(*split.t60_range))
    drr_db = float(urng.uniform(*config.drr_db_range))
    return {
        "utt_id": utt_id,
        "speaker_id": speaker.speaker_id,
        "split": split.name,
        "utt_index": utt_index,
        "content_seed": cseed,
        "duration": duration,
        "snr_db": snr_db,
        "t60": t60,
        "drr_db": drr_db,
        "seed_rir_speech": rir_seed(config, split.name, utt_index, "speech"),
        "seed_rir_noise": rir_seed(config, split.name, utt_index, "noise"),
        "seed_noise": derive_seed(config.master_seed, "noise", split.name, utt_id),
    }


def render_utterance(config, plan):
    """Synthesize every component for a planned utterance, in memory.

    Returns dict with clean (leader-padded dry speech), rir_speech, rir_noise,
    noise_raw, reverberant speech/noise, and the MixResult. The mixture is
    computed as s_rev + scale * n_rev in that exact operation order.
    """
    fs = config.sample_rate
    speaker = config.speaker(plan["speaker_id"])
    dry = synth_utterance(speaker, plan["duration"], plan["content_seed"], fs)
    lead = int(round(config.noise_lead_s * fs))
    clean = Waveform(np.concatenate([np.zeros(lead), dry.samples]), fs)

    rir_len = max(256, int(round(plan["t60"] * 1.25 * fs)))
    h_s = gen_rir(
        RirSpec(plan["t60"], 0, plan["drr_db"], rir_len, plan["seed_rir_speech"], fs)
    )
    h_n = gen_rir(
        RirSpec(plan["t60"], 0, plan["drr_db"], rir_len, plan["seed_rir_noise"], fs)
    )
    s_rev = convolve_rir(clean, h_s)
    noise_dur = (len(s_rev.samples) + rir_len) / fs
    noise_raw = synth_noise(noise_dur, plan["seed_noise"], fs)
    n_rev = convolve_rir(noise_raw, h_n)
    mix = mix_at_snr(s_rev, n_rev, plan["snr_db"])
    return {
        "clean": clean,
        "rir_speech": h_s,
        "rir_noise": h_n,
        "noise_raw": noise_raw,
        "s_rev": s_rev,
        "n_rev": Waveform(n_rev.samples[: len(s_rev.samples)], fs),
        "mix": mix,
    }


def _write_utterance(config, out_dir, plan):
    rend = render_utterance(config, plan)
    utt_id = plan["utt_id"]
    paths = {}
    for key, wav in [
        ("clean", rend["clean"]),
        ("rir_speech", rend["rir_speech"]),
        ("rir_noise", rend["rir_noise"]),
        ("mixed", rend["mix"].y),
    ]:
        rel = os.path.join(key, f"{utt_id}.wav")
        audio_io.write_wav(os.path.join(out_dir, rel), wav)
        paths[key] = rel
    # the exact additive noise term of the mixture, after any peak gain
    noise_term = Waveform(
        rend["n_rev"].samples * rend["mix"].scale * rend["mix"].peak_gain,
        config.sample_rate,
    )
    rel = os.path.join("noise", f"{utt_id}.wav")
    audio_io.write_wav(os.path.join(out_dir, rel), noise_term)
    paths["noise"] = rel
    return audio_io.ManifestEntry(
        utt_id=utt_id,
        speaker_id=plan["speaker_id"],
        split=plan["split"],
        snr_db=plan["snr_db"],
        t60=plan["t60"],
        paths=paths,
        scale=rend["mix"].scale,
        peak_gain=rend["mix"].peak_gain,
        duration=plan["duration"],
        content_seed=plan["content_seed"],
        noise_lead_s=config.noise_lead_s,
    )


def plan_corpus(config):
    plans = []
    for split in [config.train, config.eval]:
        for utt_index in range(split.utts_per_speaker):
            for speaker in config.speakers:
                plans.append(plan_utterance(config, split, speaker, utt_index))
    return plans


def build_corpus(config, out_dir, force=False):
    """Render the full corpus to out_dir and return the manifest entries."""
    if len(config.speakers) < 2:
        raise CorpusError("need at least two speakers")
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    if os.path.exists(manifest_path) and not force:
        raise CorpusError(
            f"output manifest already exists (pass force=True / --force): {manifest_path}"
        )
    plans = plan_corpus(config)
    entries = [None] * len(plans)
    with concurrent.futures.ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futs = {
            pool.submit(_write_utterance, config, out_dir, plan): i
            for i, plan in enumerate(plans)
        }
        for fut in concurrent.futures.as_completed(futs):
            entries[futs[fut]] = fut.result()
    audio_io.write_manifest(manifest_path, entries)
    return entries


def reference_rendition(config, entry, target_speaker_id):
    """The target speaker's clean rendition of an utterance's content."""
    speaker = config.speaker(target_speaker_id)
    return synth_utterance(
        speaker, entry.duration, entry.content_seed, config.sample_rate
    )
