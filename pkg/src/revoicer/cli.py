"""Command-line front end.

Every subcommand exits 0 on success. Failures print one JSON object to
stderr ({"error": <type>, "message": <what happened>}) and exit nonzero, so
shell pipelines and CI wrappers can parse errors without scraping tracebacks.
"""

import argparse
import json
import sys
from dataclasses import replace

from . import audio_io, corpus, denoise, vc, wpe
from .experiment import ExperimentConfig, run_experiment
from .metrics import metric_table


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # route argparse's own complaints (unknown flags, missing args) through
    # the same JSON error channel instead of bare usage text + exit 2
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _read_text(path):
    try:
        with open(path) as f:
            return f.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _manifest_key(text, flag):
    head, sep, key = text.rpartition(":")
    if not sep or not head or not key:
        raise CliError(f"{flag} wants <manifest>:<path-key>, got {text!r}")
    return head, key


def _cmd_synth_corpus(args):
    cfg = corpus.CorpusConfig.from_json(json.loads(_read_text(args.config)))
    if args.seed is not None:
        cfg.master_seed = args.seed
    entries = corpus.build_corpus(cfg, args.out, force=args.force)
    print(f"wrote {len(entries)} utterances -> {args.out}/manifest.jsonl")


def _cmd_enhance(args):
    chain = denoise.parse_chain(args.chain)
    if not chain:
        raise CliError(f"--chain parsed to no stages: {args.chain!r}")
    overrides = {
        k: v
        for k, v in [
            ("taps", args.wpe_taps),
            ("delay", args.wpe_delay),
            ("iterations", args.wpe_iters),
        ]
        if v is not None
    }
    if overrides:
        wcfg = replace(wpe.WpeConfig(), **overrides)
        chain = [
            replace(s, wpe_config=wcfg) if s.kind == "wpe" else s for s in chain
        ]
    entries = denoise.apply_stage_chain(args.manifest, chain, args.out)
    key = "-".join(s.key for s in chain)
    print(f"enhanced {len(entries)} utterances (key {key!r}) -> {args.out}/manifest.jsonl")


def _cmd_metrics(args):
    est_manifest, est_key = _manifest_key(args.est, "--est")
    ref_manifest, ref_key = _manifest_key(args.ref, "--ref")
    names = [t.strip() for t in args.metrics.split(",") if t.strip()]
    if not names:
        raise CliError(f"--metrics parsed to no names: {args.metrics!r}")
    report = metric_table(est_manifest, est_key, ref_manifest, ref_key, names)
    with open(args.out, "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
    for name, cell in report.summary().items():
        print(f"{name}: mean {cell['mean']:.4f} over {cell['count']} utts")
    if report.failures:
        print(f"{len(report.failures)} utterances failed; see {args.out}")


def _cmd_train(args):
    cfg = vc.TrainConfig.from_json(_read_text(args.config))
    model, curve = vc.train(args.manifest, args.key, cfg)
    vc.save_model(model, args.out)
    losses = args.out + ".losses.jsonl"
    with open(losses, "w") as f:
        for row in curve:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"model -> {args.out} (final loss {curve[-1]['total']:.4f}, curve -> {losses})")


def _cmd_convert(args):
    model = vc.load_model(args.model)
    vc.convert_request(
        model, vc.ConversionRequest(args.source, args.speaker, args.out)
    )
    print(f"converted {args.source} -> {args.out} as {args.speaker}")


def _cmd_experiment(args):
    cfg = ExperimentConfig.from_json(json.loads(_read_text(args.config)))
    cfg.out_dir = args.out
    report = run_experiment(cfg, resume=args.resume)
    for name in sorted(report.body["conditions"]):
        row = report.body["conditions"][name]
        if row.get("error"):
            print(f"{name}: FAILED ({row['error']})")
            continue
        mcd_mean = row["vc"]["mcd"]["mean"]
        print(f"{name}: key {row['train_key']!r}, conversion MCD {mcd_mean:.3f} dB")
    print(f"report -> {args.out}/report.json (body sha256 {report.body_sha256[:16]}...)")


def _build_parser():
    parser = _Parser(prog="revoicer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-corpus", help="render a synthetic corpus")
    p.add_argument("--config", required=True, help="corpus config JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override master seed")
    p.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    p.set_defaults(fn=_cmd_synth_corpus)

    p = sub.add_parser("enhance", help="run an enhancement chain over a manifest")
    p.add_argument("--manifest", required=True, help="input manifest.jsonl")
    p.add_argument("--chain", required=True, help="dn | dr | dn,dr | dr,dn | ext:<dir>")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--wpe-taps", type=int, default=None)
    p.add_argument("--wpe-delay", type=int, default=None)
    p.add_argument("--wpe-iters", type=int, default=None)
    p.set_defaults(fn=_cmd_enhance)

    p = sub.add_parser("metrics", help="score one manifest key against another")
    p.add_argument("--est", required=True, metavar="MANIFEST:KEY")
    p.add_argument("--ref", required=True, metavar="MANIFEST:KEY")
    p.add_argument("--metrics", required=True, help="comma-separated metric names")
    p.add_argument("--out", required=True, help="output report JSON")
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("train", help="train a voice-conversion model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--key", required=True, help="manifest path key to train on")
    p.add_argument("--config", required=True, help="train config JSON file")
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("convert", help="convert one utterance to a target speaker")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="source", required=True, help="input WAV")
    p.add_argument("--speaker", required=True, help="target speaker id")
    p.add_argument("--out", required=True, help="output WAV")
    p.set_defaults(fn=_cmd_convert)

    p = sub.add_parser("experiment", help="run the full multi-condition experiment")
    p.add_argument("--config", required=True, help="experiment config JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", action="store_true", help="reuse finished stages")
    p.set_defaults(fn=_cmd_experiment)
    return parser


def _fail(exc, code):
    json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except CliError as exc:
        return _fail(exc, 2)
    try:
        args.fn(args)
        return 0
    except CliError as exc:
        return _fail(exc, 2)
    except Exception as exc:  # uniform machine-readable failure contract
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
