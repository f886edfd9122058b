"""Desk-scale VQ-VAE voice conversion over log-mel frames.

Encoder: five same-padded conv1d blocks (80->256->256->256->256->64, the
second block stride 2), instance norm + relu on all but the last. The 64-dim
latents pass through a 512-row VQ bottleneck; the decoder upsamples the
quantized sequence x2 by repetition, concatenates a 32-dim speaker code per
frame, applies three conv blocks and a linear head back to 80 mel bins.

Training minimizes mse(decoded, input) + beta * commitment on random crops;
the codebook itself is updated by EMA, not gradients. Conversion renders
decoded mels to a waveform with a filterbank pseudo-inverse and Griffin-Lim.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import audio_io, dsp, grad, vq

VC_SAMPLE_RATE = 8000
N_MELS = 80
LATENT_DIM = 64
SPEAKER_DIM = 32
HIDDEN = 256
GRIFFIN_LIM_ITERS = 60

MODEL_MAGIC = b"RVC1"
MODEL_VERSION = 1


class VcError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 10_000
    batch_utts: int = 8
    crop_frames: int = 48
    beta: float = 0.25
    lr: float = 2e-4
    seed: int = 0

    def validate(self):
        if self.steps <= 0:
            raise VcError(f"steps must be > 0, got {self.steps}")
        if self.batch_utts < 1:
            raise VcError(f"batch_utts must be >= 1, got {self.batch_utts}")
        if self.crop_frames < 4:
            raise VcError(f"crop_frames must be >= 4, got {self.crop_frames}")
        if self.lr <= 0:
            raise VcError(f"lr must be > 0, got {self.lr}")
        if self.beta < 0:
            raise VcError(f"beta must be >= 0, got {self.beta}")
        return self

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text) if isinstance(text, str) else dict(text)
        known = {f for f in cls.__dataclass_fields__}
        bad = set(raw) - known
        if bad:
            raise VcError(f"unknown train config fields: {sorted(bad)}")
        return cls(**raw).validate()


@dataclass
class ConversionRequest:
    source_path: str
    target_speaker: str
    output_path: str


@dataclass
class VcModel:
    params: dict  # name -> grad.Tensor
    codebook: vq.Codebook
    speaker_ids: list
    mel_mean: np.ndarray  # (N_MELS,)
    mel_std: np.ndarray  # (N_MELS,)
    sample_rate: int = VC_SAMPLE_RATE
    n_mels: int = N_MELS

    def speaker_row(self, speaker_id):
        try:
            return self.speaker_ids.index(speaker_id)
        except ValueError:
            raise VcError(
                f"unknown speaker id {speaker_id!r} (model has: {self.speaker_ids})"
            ) from None

    def trainable_params(self):
        return [self.params[k] for k in sorted(self.params)]


def _conv_block_params(rng, c_in, c_out, with_norm=True):
    w = grad.Tensor(
        rng.standard_normal((c_out, c_in, 3)) * np.sqrt(2.0 / (c_in * 3)),
        requires_grad=True,
    )
    b = grad.Tensor(np.zeros(c_out), requires_grad=True)
    if not with_norm:
        return {"w": w, "b": b}
    return {
        "w": w,
        "b": b,
        "gamma": grad.Tensor(np.ones(c_out), requires_grad=True),
        "beta": grad.Tensor(np.zeros(c_out), requires_grad=True),
    }


def init_params(rng, n_speakers):
    params = {}
    enc_channels = [(N_MELS, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, HIDDEN),
                    (HIDDEN, HIDDEN), (HIDDEN, LATENT_DIM)]
    for i, (ci, co) in enumerate(enc_channels):
        blk = _conv_block_params(rng, ci, co, with_norm=(i < 4))
        for k, v in blk.items():
            params[f"enc{i}.{k}"] = v
    dec_channels = [(LATENT_DIM + SPEAKER_DIM, HIDDEN), (HIDDEN, HIDDEN),
                    (HIDDEN, HIDDEN)]
    for i, (ci, co) in enumerate(dec_channels):
        blk = _conv_block_params(rng, ci, co)
        for k, v in blk.items():
            params[f"dec{i}.{k}"] = v
    params["head.w"] = grad.Tensor(
        rng.standard_normal((N_MELS, HIDDEN)) * np.sqrt(1.0 / HIDDEN),
        requires_grad=True,
    )
    params["head.b"] = grad.Tensor(np.zeros(N_MELS), requires_grad=True)
    params["spk.table"] = grad.Tensor(
        0.1 * rng.standard_normal((n_speakers, SPEAKER_DIM)), requires_grad=True
    )
    return params


def _encode_graph(params, x):
    h = x
    for i in range(5):
        h = grad.conv1d(
            h, params[f"enc{i}.w"], params[f"enc{i}.b"],
            stride=2 if i == 1 else 1, padding="same",
        )
        if i < 4:
            h = grad.relu(
                grad.instance_norm(h, params[f"enc{i}.gamma"], params[f"enc{i}.beta"])
            )
    return h


def _decode_graph(params, zq, speaker_rows, t_out):
    up = grad.crop_time(grad.repeat_time(zq), t_out)
    emb = grad.broadcast_time(grad.embedding_lookup(params["spk.table"], speaker_rows),
                              t_out)
    h = grad.concat(up, emb)
    for i in range(3):
        h = grad.conv1d(h, params[f"dec{i}.w"], params[f"dec{i}.b"])
        h = grad.relu(
            grad.instance_norm(h, params[f"dec{i}.gamma"], params[f"dec{i}.beta"])
        )
    return grad.linear(h, params["head.w"], params["head.b"])


def normalize_mel(model, frames):
    return (frames - model.mel_mean[None, :]) / model.mel_std[None, :]


def denormalize_mel(model, frames):
    return frames * model.mel_std[None, :] + model.mel_mean[None, :]


def encode(model, mel):
    """Latent rows (N, 64) for one utterance's MelFrames; N = ceil(T/2)."""
    if mel.n_mels != model.n_mels:
        raise VcError(f"model expects {model.n_mels} mel bins, got {mel.n_mels}")
    t = mel.frames.shape[0]
    if t < 4:
        raise VcError(f"input too short: {t} frames, need at least 4")
    x = normalize_mel(model, mel.frames).T[None, :, :]
    z = _encode_graph(model.params, grad.Tensor(x))
    return np.ascontiguousarray(z.data[0].T)


def _mel_frames_for(waveform, n_mels=N_MELS):
    return dsp.log_mel(dsp.stft(waveform, dsp.VC_STFT), n_mels=n_mels)


def _speaker_histogram(entries):
    counts = {}
    for e in entries:
        counts[e.speaker_id] = counts.get(e.speaker_id, 0) + 1
    return counts


def train(manifest_path, key, cfg):
    """Train on the `key` audio of a manifest's train split.

    Returns (VcModel, loss_curve) where loss_curve rows are dicts with
    step/recon/commit/total. Total = recon + beta*commit exactly as summed
    in the graph.
    """
    cfg.validate()
    entries = [e for e in audio_io.read_manifest(manifest_path) if e.split == "train"]
    if not entries:
        raise VcError(f"no train-split utterances in {manifest_path}")
    counts = _speaker_histogram(entries)
    weak = {s: c for s, c in counts.items() if c < 10}
    if len(counts) < 2 or weak:
        raise VcError(
            "insufficient speakers: need >= 2 speakers with >= 10 train "
            f"utterances each, got {counts}"
        )
    base = os.path.dirname(os.path.abspath(manifest_path))
    mels = []
    speakers = []
    for e in entries:
        if key not in e.paths:
            raise VcError(f"{e.utt_id}: no {key!r} path in manifest")
        wav = audio_io.read_wav(os.path.join(base, e.paths[key]))
        mels.append(_mel_frames_for(wav).frames)
        speakers.append(e.speaker_id)
    sample_rate = wav.sample_rate
    stacked = np.concatenate(mels, axis=0)
    mel_mean = stacked.mean(axis=0)
    mel_std = np.maximum(stacked.std(axis=0), 1e-3)

    speaker_ids = sorted(counts)
    spk_rows = np.array([speaker_ids.index(s) for s in speakers])
    short = min(m.shape[0] for m in mels)
    if short < cfg.crop_frames:
        raise VcError(
            f"crop_frames={cfg.crop_frames} exceeds shortest utterance ({short} frames)"
        )
    norm = [(m - mel_mean[None, :]) / mel_std[None, :] for m in mels]

    rng = np.random.default_rng(cfg.seed)
    params = init_params(rng, len(speaker_ids))
    model = VcModel(
        params=params,
        codebook=None,  # filled from the first batch below
        speaker_ids=speaker_ids,
        mel_mean=mel_mean,
        mel_std=mel_std,
        sample_rate=sample_rate,
    )
    opt = grad.Adam(model.trainable_params(), lr=cfg.lr)

    def sample_batch():
        picks = rng.integers(0, len(norm), size=cfg.batch_utts)
        xs = np.empty((cfg.batch_utts, N_MELS, cfg.crop_frames))
        for j, u in enumerate(picks):
            start = rng.integers(0, norm[u].shape[0] - cfg.crop_frames + 1)
            xs[j] = norm[u][start : start + cfg.crop_frames].T
        return xs, spk_rows[picks]

    first_x, _ = sample_batch()
    z0 = _encode_graph(params, grad.Tensor(first_x))
    rows0 = np.ascontiguousarray(z0.data.transpose(0, 2, 1)).reshape(-1, LATENT_DIM)
    model.codebook = vq.new_codebook(rows0, rng=rng)

    curve = []
    half = cfg.steps // 2
    for step in range(1, cfg.steps + 1):
        opt.lr = cfg.lr if step <= half or half == 0 else cfg.lr / 2
        xs, spk = sample_batch()
        x = grad.Tensor(xs)
        z = _encode_graph(params, x)
        zq, commit, idx = vq.vq_st(z, model.codebook)
        y = _decode_graph(params, zq, spk, cfg.crop_frames)
        recon = grad.mse_loss(y, grad.Tensor(xs))
        total = grad.add(recon, grad.scale(commit, cfg.beta))
        if not np.isfinite(total.item()):
            raise VcError(
                f"non-finite loss at step {step}: recon={recon.item()!r}, "
                f"commit={commit.item()!r}"
            )
        opt.zero_grad()
        total.backward()
        opt.step()
        z_rows = np.ascontiguousarray(z.data.transpose(0, 2, 1)).reshape(-1, LATENT_DIM)
        vq.ema_update(model.codebook, z_rows, idx.reshape(-1))
        vq.reseed_dead(model.codebook, z_rows, rng, step)
        curve.append(
            {
                "step": step,
                "recon": recon.item(),
                "commit": commit.item(),
                "total": total.item(),
            }
        )
    return model, curve


def griffin_lim(magnitude, config, sample_rate, iterations=GRIFFIN_LIM_ITERS):
    """Zero-phase-initialized Griffin-Lim over a (T, F) magnitude array."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    t = magnitude.shape[0]
    hop = config.hop_length(sample_rate)
    length = max((t - 1) * hop, hop)
    spec = dsp.Spectrogram(
        magnitude.astype(np.complex128), config, sample_rate, length
    )
    x = dsp.istft(spec)
    for _ in range(iterations):
        rebuilt = dsp.stft(x, config)
        phase = rebuilt.frames / np.maximum(np.abs(rebuilt.frames), 1e-12)
        spec = dsp.Spectrogram(magnitude * phase, config, sample_rate, length)
        x = dsp.istft(spec)
    return x


def mel_to_magnitude(mel_power, sample_rate, fft_len, f_min=0.0, f_max=None):
    """Linear-frequency magnitudes from mel powers via the filterbank
    pseudo-inverse, clipped at zero (non-negative least squares surrogate)."""
    fb = dsp.mel_filterbank(sample_rate, fft_len, mel_power.shape[1], f_min, f_max)
    linear_power = np.clip(mel_power @ np.linalg.pinv(fb).T, 0.0, None)
    return np.sqrt(linear_power)


def convert_waveform(model, waveform, target_speaker):
    """Convert one utterance to the target speaker's voice."""
    if waveform.sample_rate != model.sample_rate:
        raise VcError(
            f"model was trained at {model.sample_rate} Hz, "
            f"input is {waveform.sample_rate} Hz"
        )
    row = model.speaker_row(target_speaker)
    mel = _mel_frames_for(waveform, n_mels=model.n_mels)
    t = mel.frames.shape[0]
    if t < 4:
        raise VcError(f"input too short: {t} frames, need at least 4")
    x = normalize_mel(model, mel.frames).T[None, :, :]
    z = _encode_graph(model.params, grad.Tensor(x))
    zq, _, _ = vq.vq_st(z, model.codebook)
    decoded = _decode_graph(
        model.params, zq, np.array([row]), t
    )
    logmel = denormalize_mel(model, decoded.data[0].T)
    magnitude = mel_to_magnitude(
        np.exp(logmel), model.sample_rate, dsp.VC_STFT.fft_len
    )
    out = griffin_lim(magnitude, dsp.VC_STFT, model.sample_rate)
    return out


def convert_request(model, req):
    wav = audio_io.read_wav(req.source_path)
    out = convert_waveform(model, wav, req.target_speaker)
    audio_io.write_wav(req.output_path, out)
    return out


# ---------------------------------------------------------------- model file


def _named_tensors(model):
    out = {}
    for name, p in model.params.items():
        out[f"param.{name}"] = p.data
    out["cb.vectors"] = model.codebook.vectors
    out["cb.ema_counts"] = model.codebook.ema_counts
    out["cb.ema_sums"] = model.codebook.ema_sums
    out["cb.decay"] = np.array(model.codebook.decay)
    out["cb.epsilon"] = np.array(model.codebook.epsilon)
    out["mel.mean"] = model.mel_mean
    out["mel.std"] = model.mel_std
    out["meta.sample_rate"] = np.array(float(model.sample_rate))
    out["meta.n_mels"] = np.array(float(model.n_mels))
    ids_bytes = json.dumps(model.speaker_ids).encode("utf-8")
    out["meta.speaker_ids_json"] = np.frombuffer(ids_bytes, dtype=np.uint8).astype(
        np.float64
    )
    return out


def save_model(model, path):
    tensors = _named_tensors(model)
    blob = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION),
            struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        blob.append(struct.pack("<I", len(raw)))
        blob.append(raw)
        blob.append(struct.pack("<I", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.astype("<f8").tobytes())
    data = b"".join(blob)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise VcError(f"truncated model file: {self.path}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_model(path):
    if not os.path.exists(path):
        raise VcError(f"model file not found: {path}")
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(4) != MODEL_MAGIC:
        raise VcError(f"not a model file (bad magic): {path}")
    version = rd.u32()
    if version != MODEL_VERSION:
        raise VcError(f"unsupported model version {version} (expected {MODEL_VERSION})")
    tensors = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        shape = tuple(rd.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(rd.take(8 * n), dtype="<f8").reshape(shape)
        tensors[name] = arr.copy()
    if rd.pos != len(rd.data):
        raise VcError(f"trailing bytes after model payload: {path}")
    try:
        params = {
            name[len("param.") :]: grad.Tensor(arr, requires_grad=True)
            for name, arr in tensors.items()
            if name.startswith("param.")
        }
        codebook = vq.Codebook(
            vectors=tensors["cb.vectors"],
            ema_counts=tensors["cb.ema_counts"],
            ema_sums=tensors["cb.ema_sums"],
            decay=float(tensors["cb.decay"].reshape(-1)[0]),
            epsilon=float(tensors["cb.epsilon"].reshape(-1)[0]),
        ).validate()
        ids_raw = tensors["meta.speaker_ids_json"].astype(np.uint8).tobytes()
        speaker_ids = json.loads(ids_raw.decode("utf-8"))
        model = VcModel(
            params=params,
            codebook=codebook,
            speaker_ids=list(speaker_ids),
            mel_mean=tensors["mel.mean"],
            mel_std=tensors["mel.std"],
            sample_rate=int(tensors["meta.sample_rate"].reshape(-1)[0]),
            n_mels=int(tensors["meta.n_mels"].reshape(-1)[0]),
        )
    except KeyError as exc:
        raise VcError(f"model file missing tensor {exc.args[0]!r}: {path}") from None
    return model
