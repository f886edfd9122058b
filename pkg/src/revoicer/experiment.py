"""Stage-ordering experiment: corpus -> enhancement -> VC -> report.

One run builds a synthetic noisy-reverberant corpus, then walks a list of
named conditions. Each condition picks a starting signal ("clean" or the
"mixed" recording) and an optional enhancement chain, scores the processed
audio against the clean references, trains a voice-conversion model on the
processed train split, converts the (identically processed) eval split to
every other speaker, and scores the conversions with DTW-aligned MCD against
clean target-speaker renditions of the same content.

Every stage checkpoints into its own directory, so an interrupted run can be
resumed and deleting one condition's directory regenerates only that
condition. The report body is a pure function of (config, master seed);
timestamps live outside the hashed body.
"""

# lazy annotations: the `corpus` field would otherwise shadow the corpus
# module inside the ExperimentConfig class body
from __future__ import annotations

import json
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
import scipy

from . import __version__, audio_io, corpus, denoise, dsp, vc, vq
from .metrics import METRIC_NAMES, mcd, metric_table, waveform_cepstra
from .util import body_hash, derive_seed, worker_count


class ExperimentError(ValueError):
    pass


DEFAULT_METRICS = ("si_sdr", "sd_sdr", "stoi", "sar")

# The corpus is synthetic and parallel by construction (utterance index i is
# the same content for every speaker), so conversion references are clean
# target-speaker renditions of the converted content. Natural corpora would
# need recorded parallel sentences here.
MCD_REFERENCE_NOTE = (
    "conversion MCD reference: clean target-speaker rendition of the same "
    "synthetic content (parallel by construction)"
)


@dataclass(frozen=True)
class Condition:
    """One pipeline variant: a starting signal plus an enhancement chain.

    `source_key` names the corpus path the condition starts from; a non-empty
    `chain` (e.g. "dn,dr") always starts from the mixed recording. The VC
    model trains on the chain's final output (or on `source_key` directly
    when there is no chain).
    """

    name: str
    source_key: str = "mixed"
    chain: str = ""

    def validate(self):
        if not self.name or self.name != self.name.strip() or "/" in self.name:
            raise ExperimentError(f"bad condition name: {self.name!r}")
        stages = denoise.parse_chain(self.chain)
        for s in stages:
            s.validate()
        if stages and self.source_key != "mixed":
            raise ExperimentError(
                f"{self.name}: enhancement chains process the 'mixed' signal, "
                f"so source_key must be 'mixed', not {self.source_key!r}"
            )
        if not self.source_key:
            raise ExperimentError(f"{self.name}: empty source_key")
        return self

    @property
    def train_key(self):
        """Manifest path key the VC model trains and converts from."""
        stages = denoise.parse_chain(self.chain)
        if not stages:
            return self.source_key
        return "-".join(s.key for s in stages)

    def to_json(self):
        return {"name": self.name, "source_key": self.source_key, "chain": self.chain}

    @classmethod
    def from_json(cls, obj):
        bad = set(obj) - {"name", "source_key", "chain"}
        if bad:
            raise ExperimentError(f"unknown condition fields: {sorted(bad)}")
        return cls(
            name=obj["name"],
            source_key=obj.get("source_key", "mixed"),
            chain=obj.get("chain", ""),
        )


def default_conditions():
    """C plus the noisy-reverberant family with every one/two-stage chain."""
    return [
        Condition("C", source_key="clean"),
        Condition("NR"),
        Condition("NR-dn", chain="dn"),
        Condition("NR-dr", chain="dr"),
        Condition("NR-dn-dr", chain="dn,dr"),
        Condition("NR-dr-dn", chain="dr,dn"),
    ]


def headline_config():
    """The stage-ordering comparison at its intended desk scale.

    Four synthetic speakers, 40 train / 3 eval utterances each, moderate
    noise (5-15 dB SNR) and reverberation (T60 0.3-0.6 s), all six
    conditions, one 10k-step model per condition. About 1.5 h on one core.
    """
    cfg = ExperimentConfig()
    cfg.corpus = corpus.CorpusConfig(
        train=corpus.SplitSpec("train", 40, [5.0, 10.0, 15.0], (0.3, 0.6)),
        eval=corpus.SplitSpec("eval", 3, [5.0, 10.0, 15.0], (0.3, 0.6)),
    )
    return cfg


@dataclass
class ExperimentConfig:
    """Everything a run needs. `master_seed` drives the per-condition
    training seeds; the corpus keeps its own seed so the same corpus can be
    reused across training-variance studies. `out_dir` says where outputs
    go and is deliberately excluded from the hashed config."""

    corpus: corpus.CorpusConfig = field(default_factory=corpus.CorpusConfig)
    conditions: list = field(default_factory=default_conditions)
    train: vc.TrainConfig = field(default_factory=vc.TrainConfig)
    metrics: list = field(default_factory=lambda: list(DEFAULT_METRICS))
    out_dir: str = ""
    master_seed: int = 0

    def validate(self):
        if not self.conditions:
            raise ExperimentError("no conditions configured")
        names = [c.name for c in self.conditions]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ExperimentError(f"duplicate condition names: {dupes}")
        for c in self.conditions:
            c.validate()
        for m in self.metrics:
            if m not in METRIC_NAMES:
                raise ExperimentError(f"unknown metric: {m!r}")
        self.train.validate()
        for split in (self.corpus.train, self.corpus.eval):
            if split.utts_per_speaker < 1:
                raise ExperimentError(f"{split.name} split has no utterances")
        return self

    def to_json(self):
        # out_dir is location, not science: leave it out so the report body
        # hash is identical wherever the run lands on disk.
        return {
            "corpus": self.corpus.to_json(),
            "conditions": [c.to_json() for c in self.conditions],
            "train": {
                f: getattr(self.train, f) for f in vc.TrainConfig.__dataclass_fields__
            },
            "metrics": list(self.metrics),
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        known = {"corpus", "conditions", "train", "metrics", "out_dir", "master_seed"}
        bad = set(obj) - known
        if bad:
            raise ExperimentError(f"unknown experiment config fields: {sorted(bad)}")
        cfg = cls()
        if "corpus" in obj:
            cfg.corpus = corpus.CorpusConfig.from_json(obj["corpus"])
        if "conditions" in obj:
            cfg.conditions = [Condition.from_json(c) for c in obj["conditions"]]
        if "train" in obj:
            cfg.train = vc.TrainConfig.from_json(obj["train"])
        if "metrics" in obj:
            cfg.metrics = list(obj["metrics"])
        cfg.out_dir = obj.get("out_dir", cfg.out_dir)
        cfg.master_seed = int(obj.get("master_seed", cfg.master_seed))
        return cfg.validate()


@dataclass
class ExperimentReport:
    body: dict
    body_sha256: str
    created_at: str

    def validate(self):
        if body_hash(self.body) != self.body_sha256:
            raise ExperimentError("report body does not match its hash")
        for name, row in self.body["conditions"].items():
            if row.get("error") is None and not ("enhancement" in row and "vc" in row):
                raise ExperimentError(f"condition {name}: neither result nor failure")
        return self

    def to_json(self):
        return {
            "body": self.body,
            "body_sha256": self.body_sha256,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(
            body=obj["body"],
            body_sha256=obj["body_sha256"],
            created_at=obj["created_at"],
        ).validate()


def load_report(path):
    with open(path) as f:
        return ExperimentReport.from_json(json.load(f))


# ------------------------------------------------------------- checkpoints
# Each directory that owns work keeps a stages.json ledger mapping stage name
# to {config_sha256, data}. A stage is reused only when its recorded config
# hash matches the current run's, so editing the config invalidates exactly
# the work it changes (everything, since the hash covers the whole config).


def _stages_path(dirpath):
    return os.path.join(dirpath, "stages.json")


def _load_stages(dirpath):
    p = _stages_path(dirpath)
    if not os.path.exists(p):
        return {}
    with open(p) as f:
        return json.load(f)


def _load_stage(dirpath, stage, chash):
    rec = _load_stages(dirpath).get(stage)
    if rec is not None and rec.get("config_sha256") == chash:
        return rec["data"]
    return None


def _save_stage(dirpath, stage, chash, data):
    os.makedirs(dirpath, exist_ok=True)
    stages = _load_stages(dirpath)
    stages[stage] = {"config_sha256": chash, "data": data}
    p = _stages_path(dirpath)
    tmp = p + ".tmp"
    with open(tmp, "w") as f:
        json.dump(stages, f, indent=2, sort_keys=True)
    os.replace(tmp, p)


def _split_manifest(manifest_path, split):
    return os.path.join(
        os.path.dirname(os.path.abspath(manifest_path)), f"manifest-{split}.jsonl"
    )


def _write_split_manifests(manifest_path):
    # filtered copies live next to the full manifest so relative paths hold
    entries = audio_io.read_manifest(manifest_path)
    for split in ("train", "eval"):
        subset = [e for e in entries if e.split == split]
        if subset:
            audio_io.write_manifest(_split_manifest(manifest_path, split), subset)


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


# ------------------------------------------------------------------ stages


def _stage_enhance(cond, cdir, corpus_manifest, chash):
    chain = denoise.parse_chain(cond.chain)
    if not chain:
        return corpus_manifest
    enh_manifest = os.path.join(cdir, "enhanced", "manifest.jsonl")
    done = _load_stage(cdir, "enhance", chash)
    if done is None or not os.path.exists(enh_manifest):
        denoise.apply_stage_chain(corpus_manifest, chain, os.path.join(cdir, "enhanced"))
        _write_split_manifests(enh_manifest)
        _save_stage(cdir, "enhance", chash, {"manifest": "enhanced/manifest.jsonl"})
    return enh_manifest


def _stage_metrics(cfg, cond, cdir, enh_manifest, corpus_manifest, chash):
    done = _load_stage(cdir, "metrics", chash)
    if done is not None:
        return done
    out = {}
    for split in ("train", "eval"):
        report = metric_table(
            _split_manifest(enh_manifest, split),
            cond.train_key,
            _split_manifest(corpus_manifest, split),
            "clean",
            cfg.metrics,
            condition=f"{cond.name}/{split}",
        )
        _write_json(os.path.join(cdir, f"metrics-{split}.json"), report.to_json())
        cell = report.summary()
        cell["n_failed"] = len(report.failures)
        out[split] = cell
    _save_stage(cdir, "metrics", chash, out)
    return out


def _codebook_usage(model, manifest_path, key):
    """Distinct codebook rows selected over the whole train split."""
    entries = [e for e in audio_io.read_manifest(manifest_path) if e.split == "train"]
    base = os.path.dirname(os.path.abspath(manifest_path))
    used = set()
    for e in entries:
        wav = audio_io.read_wav(os.path.join(base, e.paths[key]))
        z = vc.encode(model, vc._mel_frames_for(wav, n_mels=model.n_mels))
        used.update(vq.quantize(z, model.codebook).indices.tolist())
    return len(used), len(used) / model.codebook.vectors.shape[0]


def _stage_train(cfg, cond, cdir, enh_manifest, chash):
    model_path = os.path.join(cdir, "model.rvc1")
    done = _load_stage(cdir, "train", chash)
    if done is not None and os.path.exists(model_path):
        return model_path, done
    tcfg = replace(cfg.train, seed=derive_seed(cfg.master_seed, "train", cond.name))
    model, curve = vc.train(enh_manifest, cond.train_key, tcfg)
    vc.save_model(model, model_path)
    with open(os.path.join(cdir, "losses.jsonl"), "w") as f:
        for row in curve:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    tail = curve[-min(50, len(curve)):]
    rows_used, usage = _codebook_usage(model, enh_manifest, cond.train_key)
    data = {
        "seed": tcfg.seed,
        "steps": tcfg.steps,
        "final_loss": float(np.mean([r["total"] for r in tail])),
        "codebook_rows_used": rows_used,
        "codebook_usage": usage,
    }
    _save_stage(cdir, "train", chash, data)
    return model_path, data


def _stage_convert(cond, cdir, enh_manifest, model_path, chash):
    index_path = os.path.join(cdir, "conversions.jsonl")
    done = _load_stage(cdir, "convert", chash)
    if done is not None and os.path.exists(index_path):
        return index_path
    model = vc.load_model(model_path)
    entries = [e for e in audio_io.read_manifest(enh_manifest) if e.split == "eval"]
    if not entries:
        raise ExperimentError(f"{cond.name}: no eval-split utterances to convert")
    base = os.path.dirname(os.path.abspath(enh_manifest))
    key = cond.train_key
    jobs = [
        (entry, target)
        for entry in entries
        for target in model.speaker_ids
        if target != entry.speaker_id
    ]

    def run(job):
        entry, target = job
        wav = audio_io.read_wav(os.path.join(base, entry.paths[key]))
        # drop the silent noise leader so content lines up with renditions
        lead = int(round(entry.noise_lead_s * wav.sample_rate))
        src = dsp.Waveform(wav.samples[lead:], wav.sample_rate)
        out = vc.convert_waveform(model, src, target)
        rel = os.path.join("converted", f"{entry.utt_id}__to__{target}.wav")
        audio_io.write_wav(os.path.join(cdir, rel), out)
        return {
            "utt_id": entry.utt_id,
            "source_speaker": entry.speaker_id,
            "target_speaker": target,
            "source_key": key,
            "wav": rel,
        }

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(run, jobs))
    with open(index_path + ".tmp", "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    os.replace(index_path + ".tmp", index_path)
    _save_stage(cdir, "convert", chash, {"count": len(rows)})
    return index_path


def _stage_score(cfg, cond, cdir, index_path, corpus_manifest, chash):
    done = _load_stage(cdir, "score", chash)
    if done is not None:
        return done
    by_id = {e.utt_id: e for e in audio_io.read_manifest(corpus_manifest)}
    with open(index_path) as f:
        rows = [json.loads(line) for line in f if line.strip()]

    def score(row):
        conv = audio_io.read_wav(os.path.join(cdir, row["wav"]))
        ref = corpus.reference_rendition(
            cfg.corpus, by_id[row["utt_id"]], row["target_speaker"]
        )
        return mcd(waveform_cepstra(conv), waveform_cepstra(ref))

    pairs, failures = {}, {}
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        outcomes = list(pool.map(lambda r: _try(score, r), rows))
    for row, (val, err) in zip(rows, outcomes):
        label = f"{row['utt_id']}__to__{row['target_speaker']}"
        if err is not None:
            failures[label] = err
        else:
            pairs[label] = val
    if not pairs:
        raise ExperimentError(f"{cond.name}: every conversion failed to score")
    vals = np.array(sorted(pairs.values()))
    data = {
        "mcd": {
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals)),
            "count": int(vals.size),
        },
        "n_failed": len(failures),
    }
    _write_json(
        os.path.join(cdir, "vc_mcd.json"),
        {"condition": cond.name, "pairs": pairs, "failures": failures, **data},
    )
    _save_stage(cdir, "score", chash, data)
    return data


def _try(fn, arg):
    try:
        return fn(arg), None
    except Exception as exc:  # per-utterance fault isolation
        return None, f"{type(exc).__name__}: {exc}"


def _tagged(stage, fn, *args):
    try:
        return fn(*args)
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(f"{stage}: {type(exc).__name__}: {exc}") from exc


def _run_condition(cfg, cond, cdir, corpus_manifest, chash):
    os.makedirs(cdir, exist_ok=True)
    result = {
        "source_key": cond.source_key,
        "chain": cond.chain,
        "train_key": cond.train_key,
        "error": None,
    }
    enh_manifest = _tagged("enhance", _stage_enhance, cond, cdir, corpus_manifest, chash)
    result["enhancement"] = _tagged(
        "metrics", _stage_metrics, cfg, cond, cdir, enh_manifest, corpus_manifest, chash
    )
    model_path, train_info = _tagged(
        "train", _stage_train, cfg, cond, cdir, enh_manifest, chash
    )
    result["vc"] = dict(train_info)
    index_path = _tagged(
        "convert", _stage_convert, cond, cdir, enh_manifest, model_path, chash
    )
    result["vc"].update(_tagged(
        "score", _stage_score, cfg, cond, cdir, index_path, corpus_manifest, chash
    ))
    return result


def run_experiment(cfg, resume=False):
    """Execute every condition and write (and return) the report.

    A fresh run wants an absent or empty output directory; `resume=True`
    reuses any stage whose checkpoint matches the current config hash, so
    interrupted runs continue where they stopped.
    """
    cfg.validate()
    if not cfg.out_dir:
        raise ExperimentError("config has no out_dir")
    out = os.path.abspath(cfg.out_dir)
    if not resume and os.path.isdir(out) and os.listdir(out):
        raise ExperimentError(
            f"output dir is not empty: {out} (resume a previous run with "
            "--resume, or point at a fresh directory)"
        )
    os.makedirs(out, exist_ok=True)
    chash = body_hash(cfg.to_json())

    corpus_dir = os.path.join(out, "corpus")
    corpus_manifest = os.path.join(corpus_dir, "manifest.jsonl")
    done = _load_stage(corpus_dir, "corpus", chash)
    if done is None or not os.path.exists(corpus_manifest):
        entries = corpus.build_corpus(cfg.corpus, corpus_dir, force=True)
        _write_split_manifests(corpus_manifest)
        splits = {e.split for e in entries}
        if {"train", "eval"} - splits:
            raise ExperimentError(f"corpus needs train and eval splits, got {splits}")
        _save_stage(corpus_dir, "corpus", chash, {"n_utterances": len(entries)})

    results = {}
    for cond in cfg.conditions:
        cdir = os.path.join(out, "conditions", cond.name)
        try:
            results[cond.name] = _run_condition(cfg, cond, cdir, corpus_manifest, chash)
        except Exception as exc:
            results[cond.name] = {
                "source_key": cond.source_key,
                "chain": cond.chain,
                "train_key": cond.train_key,
                "error": f"{type(exc).__name__}: {exc}",
            }

    body = {
        "schema": "revoicer-experiment-v1",
        "config": cfg.to_json(),
        "config_sha256": chash,
        "seed": cfg.master_seed,
        "versions": {
            "revoicer": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "notes": [MCD_REFERENCE_NOTE],
        "conditions": {name: results[name] for name in sorted(results)},
    }
    report = ExperimentReport(
        body=body,
        body_sha256=body_hash(body),
        created_at=datetime.now(timezone.utc).isoformat(),
    ).validate()
    _write_json(os.path.join(out, "report.json"), report.to_json())
    return report
