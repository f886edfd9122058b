import os

import numpy as np
import pytest

from revoicer import audio_io, corpus, dsp, vc, vq
from revoicer.vc import TrainConfig, VcError


@pytest.fixture(scope="module")
def vc_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("vc_corpus")
    cfg = corpus.CorpusConfig(
        speakers=corpus.default_speakers()[:2],
        train=corpus.SplitSpec("train", 10, [12.0], (0.3, 0.5)),
        eval=corpus.SplitSpec("eval", 1, [12.0], (0.3, 0.5)),
        duration_range=(1.0, 1.3),
        master_seed=37,
    )
    corpus.build_corpus(cfg, str(root))
    return cfg, str(root), os.path.join(str(root), "manifest.jsonl")


@pytest.fixture(scope="module")
def trained(vc_corpus):
    _, _, manifest = vc_corpus
    cfg = TrainConfig(steps=200, batch_utts=4, crop_frames=32, seed=11)
    model, curve = vc.train(manifest, "clean", cfg)
    return model, curve, cfg


def mel_of(frames):
    return dsp.MelFrames(
        np.asarray(frames, dtype=np.float64), dsp.VC_STFT, 8000, vc.N_MELS, 0.0, 4000.0
    )


def test_encode_shape_chain(trained):
    model = trained[0]
    # conv arithmetic: same-pad stride 1 keeps T, the stride-2 block gives
    # ceil(T/2), later blocks keep it
    for t, want in [(4, 2), (5, 3), (6, 3), (7, 4), (48, 24)]:
        z = vc.encode(model, mel_of(np.zeros((t, vc.N_MELS))))
        assert z.shape == (want, vc.LATENT_DIM)


def test_encode_doubling_doubles_latents(trained):
    model = trained[0]
    rng = np.random.default_rng(0)
    base = rng.standard_normal((24, vc.N_MELS))
    n1 = vc.encode(model, mel_of(base)).shape[0]
    n2 = vc.encode(model, mel_of(np.concatenate([base, base]))).shape[0]
    assert (n1, n2) == (12, 24)


def test_encode_zero_input_is_finite(trained):
    z = vc.encode(trained[0], mel_of(np.zeros((16, vc.N_MELS))))
    assert np.all(np.isfinite(z))


def test_encode_rejects_short_and_wrong_bins(trained):
    model = trained[0]
    with pytest.raises(VcError, match="too short"):
        vc.encode(model, mel_of(np.zeros((3, vc.N_MELS))))
    bad = dsp.MelFrames(np.zeros((16, 40)), dsp.VC_STFT, 8000, 40, 0.0, 4000.0)
    with pytest.raises(VcError, match="mel bins"):
        vc.encode(model, bad)


def test_train_config_validation():
    with pytest.raises(VcError):
        TrainConfig(steps=0).validate()
    with pytest.raises(VcError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(VcError):
        TrainConfig(crop_frames=2).validate()
    with pytest.raises(VcError, match="unknown train config"):
        TrainConfig.from_json('{"stepz": 5}')
    assert TrainConfig.from_json('{"steps": 5}').steps == 5


def test_train_rejects_thin_manifests(vc_corpus, tmp_path):
    _, root, manifest = vc_corpus
    entries = audio_io.read_manifest(manifest)

    one_speaker = [e for e in entries if e.speaker_id == entries[0].speaker_id]
    p = os.path.join(root, "one_speaker.jsonl")
    audio_io.write_manifest(p, one_speaker)
    with pytest.raises(VcError, match="insufficient speakers"):
        vc.train(p, "clean", TrainConfig(steps=1))

    import dataclasses

    no_train = [dataclasses.replace(e, split="eval") for e in entries]
    p2 = os.path.join(root, "no_train.jsonl")
    audio_io.write_manifest(p2, no_train)
    with pytest.raises(VcError, match="no train-split"):
        vc.train(p2, "clean", TrainConfig(steps=1))

    with pytest.raises(VcError, match="no 'bogus' path"):
        vc.train(manifest, "bogus", TrainConfig(steps=1))


def test_loss_decomposition_exact(trained):
    _, curve, cfg = trained
    assert len(curve) == cfg.steps
    for row in curve:
        assert row["total"] == row["recon"] + cfg.beta * row["commit"]
        assert row["commit"] >= 0.0


def test_training_reduces_loss(trained):
    _, curve, _ = trained
    first = np.mean([r["total"] for r in curve[:20]])
    last = np.mean([r["total"] for r in curve[-20:]])
    assert last < first


def test_training_deterministic(vc_corpus):
    _, _, manifest = vc_corpus
    cfg = TrainConfig(steps=40, batch_utts=4, crop_frames=32, seed=5)
    _, c1 = vc.train(manifest, "clean", cfg)
    _, c2 = vc.train(manifest, "clean", cfg)
    assert c1 == c2  # bit-identical losses, not merely close


def test_beta_zero_still_reports_commit(vc_corpus):
    _, _, manifest = vc_corpus
    cfg = TrainConfig(steps=5, batch_utts=2, crop_frames=32, seed=3, beta=0.0)
    _, curve = vc.train(manifest, "clean", cfg)
    assert all(r["commit"] > 0.0 for r in curve)
    assert all(r["total"] == r["recon"] for r in curve)


def test_trained_codebook_state(trained):
    model = trained[0]
    model.codebook.validate()
    # quantized rows handed to the decoder are exact codebook rows
    z = vc.encode(model, mel_of(np.random.default_rng(1).standard_normal((32, 80))))
    res = vq.quantize(z, model.codebook)
    for row, k in zip(res.quantized, res.indices):
        assert np.array_equal(row, model.codebook.vectors[k])


def test_latents_independent_of_target_speaker(trained, vc_corpus):
    model = trained[0]
    _, root, manifest = vc_corpus
    entry = next(e for e in audio_io.read_manifest(manifest) if e.split == "eval")
    wav = audio_io.read_wav(os.path.join(root, entry.paths["clean"]))
    mel = vc._mel_frames_for(wav)
    idx = vq.quantize(vc.encode(model, mel), model.codebook).indices
    again = vq.quantize(vc.encode(model, mel), model.codebook).indices
    assert np.array_equal(idx, again)  # no hidden state; nothing speaker-dependent


def test_convert_deterministic_and_speaker_sensitive(trained, vc_corpus):
    model = trained[0]
    _, root, manifest = vc_corpus
    entry = next(e for e in audio_io.read_manifest(manifest) if e.split == "eval")
    wav = audio_io.read_wav(os.path.join(root, entry.paths["clean"]))
    spk_a, spk_b = model.speaker_ids
    out1 = vc.convert_waveform(model, wav, spk_a)
    out2 = vc.convert_waveform(model, wav, spk_a)
    assert np.array_equal(out1.samples, out2.samples)
    assert out1.sample_rate == 8000
    assert np.all(np.isfinite(out1.samples))
    other = vc.convert_waveform(model, wav, spk_b)
    assert not np.array_equal(out1.samples, other.samples)


def test_convert_error_paths(trained):
    model = trained[0]
    with pytest.raises(VcError, match="unknown speaker"):
        vc.convert_waveform(model, dsp.Waveform(np.zeros(8000), 8000), "nobody")
    with pytest.raises(VcError, match="8000 Hz"):
        vc.convert_waveform(model, dsp.Waveform(np.zeros(16000), 16000),
                            model.speaker_ids[0])


def test_griffin_lim_spectral_convergence():
    t = np.arange(8000) / 8000.0
    x = dsp.Waveform(0.3 * np.sin(2 * np.pi * 440 * t), 8000)
    target = np.abs(dsp.stft(x, dsp.VC_STFT).frames)
    y = vc.griffin_lim(target, dsp.VC_STFT, 8000)
    got = np.abs(dsp.stft(y, dsp.VC_STFT).frames)
    err = np.linalg.norm(got - target) / np.linalg.norm(target)
    assert err < 0.15
    y2 = vc.griffin_lim(target, dsp.VC_STFT, 8000)
    assert np.array_equal(y.samples, y2.samples)


def test_mel_to_magnitude_shapes():
    mel_power = np.zeros((7, vc.N_MELS))
    mag = vc.mel_to_magnitude(mel_power, 8000, dsp.VC_STFT.fft_len)
    assert mag.shape == (7, dsp.VC_STFT.fft_len // 2 + 1)
    assert np.array_equal(mag, np.zeros_like(mag))
    rng = np.random.default_rng(2)
    mag2 = vc.mel_to_magnitude(np.exp(rng.standard_normal((5, vc.N_MELS))),
                               8000, dsp.VC_STFT.fft_len)
    assert np.all(mag2 >= 0.0) and np.all(np.isfinite(mag2))


def test_model_roundtrip_bit_exact(trained, tmp_path):
    model = trained[0]
    p1 = str(tmp_path / "m.rvc1")
    p2 = str(tmp_path / "m2.rvc1")
    vc.save_model(model, p1)
    loaded = vc.load_model(p1)
    assert loaded.speaker_ids == model.speaker_ids
    assert loaded.sample_rate == model.sample_rate
    assert np.array_equal(loaded.mel_mean, model.mel_mean)
    assert np.array_equal(loaded.mel_std, model.mel_std)
    assert sorted(loaded.params) == sorted(model.params)
    for k in model.params:
        assert np.array_equal(loaded.params[k].data, model.params[k].data)
    assert np.array_equal(loaded.codebook.vectors, model.codebook.vectors)
    assert np.array_equal(loaded.codebook.ema_counts, model.codebook.ema_counts)
    assert np.array_equal(loaded.codebook.ema_sums, model.codebook.ema_sums)
    assert loaded.codebook.decay == model.codebook.decay
    vc.save_model(loaded, p2)
    with open(p1, "rb") as a, open(p2, "rb") as b:
        assert a.read() == b.read()


def test_model_file_rejects_corruption(trained, tmp_path):
    model = trained[0]
    p = str(tmp_path / "m.rvc1")
    vc.save_model(model, p)
    raw = open(p, "rb").read()

    bad_magic = str(tmp_path / "magic.rvc1")
    with open(bad_magic, "wb") as fh:
        fh.write(b"XXXX" + raw[4:])
    with pytest.raises(VcError, match="bad magic"):
        vc.load_model(bad_magic)

    bad_version = str(tmp_path / "ver.rvc1")
    import struct

    with open(bad_version, "wb") as fh:
        fh.write(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VcError, match="unsupported model version"):
        vc.load_model(bad_version)

    shorted = str(tmp_path / "short.rvc1")
    with open(shorted, "wb") as fh:
        fh.write(raw[:-100])
    with pytest.raises(VcError, match="truncated"):
        vc.load_model(shorted)

    with pytest.raises(VcError, match="not found"):
        vc.load_model(str(tmp_path / "missing.rvc1"))
