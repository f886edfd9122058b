#!/usr/bin/env python3
"""Run the stage-ordering experiment and print the two headline orderings.

Default scale reproduces the full comparison (four speakers, six conditions,
10k steps per model; ~1.5 h single-core). --smoke shrinks everything to a
couple of minutes for a pipeline shakedown. Use --config to run an arbitrary
experiment config JSON instead.
"""

import argparse
import json
import sys

from revoicer import corpus, vc
from revoicer.experiment import ExperimentConfig, headline_config, run_experiment


def smoke_config():
    cfg = headline_config()
    cfg.corpus = corpus.CorpusConfig(
        train=corpus.SplitSpec("train", 10, [5.0, 10.0, 15.0], (0.3, 0.6)),
        eval=corpus.SplitSpec("eval", 1, [5.0, 15.0], (0.3, 0.6)),
        duration_range=(1.0, 1.4),
    )
    cfg.train = vc.TrainConfig(steps=300, batch_utts=4, crop_frames=32)
    return cfg


def mean_of(report, name, table, metric):
    row = report.body["conditions"][name]
    if row.get("error"):
        return None
    if table == "enhancement":
        return row["enhancement"]["eval"][metric]["mean"]
    return row["vc"]["mcd"]["mean"]


def verdicts(report):
    si = {n: mean_of(report, n, "enhancement", "si_sdr")
          for n in ("NR", "NR-dn", "NR-dr", "NR-dn-dr", "NR-dr-dn")}
    mc = {n: mean_of(report, n, "vc", None)
          for n in ("C", "NR", "NR-dn", "NR-dr", "NR-dn-dr", "NR-dr-dn")}
    lines = []
    if all(v is not None for v in si.values()):
        single = max(si["NR-dn"], si["NR-dr"])
        two = max(si["NR-dn-dr"], si["NR-dr-dn"])
        ok = si["NR"] < single <= two
        lines.append(
            f"eval SI-SDR: none {si['NR']:.2f} < best single {single:.2f} "
            f"<= best two-stage {two:.2f} dB -> {'holds' if ok else 'VIOLATED'}"
        )
    if all(v is not None for v in mc.values()):
        best = min(v for n, v in mc.items() if n not in ("C", "NR"))
        ok = mc["C"] < best < mc["NR"]
        lines.append(
            f"conversion MCD: clean {mc['C']:.3f} < best processed {best:.3f} "
            f"< unprocessed {mc['NR']:.3f} dB -> {'holds' if ok else 'VIOLATED'}"
        )
    return lines


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=0, help="master seed")
    ap.add_argument("--smoke", action="store_true", help="minutes-scale shakedown")
    ap.add_argument("--config", default=None, help="experiment config JSON (overrides --smoke)")
    ap.add_argument("--resume", action="store_true", help="reuse finished stages")
    args = ap.parse_args()

    if args.config:
        with open(args.config) as f:
            cfg = ExperimentConfig.from_json(json.load(f))
    else:
        cfg = smoke_config() if args.smoke else headline_config()
    cfg.out_dir = args.out
    cfg.master_seed = args.seed

    report = run_experiment(cfg, resume=args.resume)
    failed = []
    for name in sorted(report.body["conditions"]):
        row = report.body["conditions"][name]
        if row.get("error"):
            failed.append(name)
            print(f"{name:9s} FAILED: {row['error']}")
            continue
        print(
            f"{name:9s} eval si_sdr {row['enhancement']['eval']['si_sdr']['mean']:7.2f} dB   "
            f"conversion mcd {row['vc']['mcd']['mean']:7.3f} dB   "
            f"codebook usage {row['vc']['codebook_usage']:.0%}"
        )
    for line in verdicts(report):
        print(line)
    print(f"report: {args.out}/report.json (body sha256 {report.body_sha256})")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
