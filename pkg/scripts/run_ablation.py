"""Train every ablation variant on one benchmark and write the report files.

    python scripts/run_ablation.py --out runs/ablation
    python scripts/run_ablation.py --set training.steps=500 --seed 3
"""

import argparse
import json
import logging
from pathlib import Path

from dsaa import config as configmod
from dsaa.analysis import PromptGroupSpec, emit_report, separation_stats, suppression_metric
from dsaa.experiment import ABLATION, BASELINE, FULL, Experiment
from dsaa.training import windowed_means


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    overrides = args.set + ([f"seed={args.seed}"] if args.seed is not None else [])
    cfg = configmod.load(args.config, overrides)
    exp = Experiment.build(cfg)
    for v in ABLATION:
        exp.run(v)

    # the plain encoder is the frozen reference; identity-init adapters are the training start point
    analysed = {"Frozen": exp.world.pipeline(), **{v.name: exp.results[v.name].pipeline for v in (BASELINE, FULL)}}
    out = Path(args.out)
    emit_report(
        out,
        eval_reports=exp.reports(),
        suppression={k: suppression_metric(p, PromptGroupSpec()) for k, p in analysed.items()},
        separation={k: separation_stats(p, exp.world, exp.data["eval"]) for k, p in analysed.items()},
        manifest={"seed": cfg.seed, "config_digest": cfg.digest(), "config": cfg.to_dict()},
    )
    curves = {k: windowed_means([h["total"] for h in r.history], 50) for k, r in exp.results.items() if r.history}
    (out / "loss_windows.json").write_text(json.dumps(curves, indent=1))
    for name, r in exp.results.items():
        print(f"{name:14s} average {100 * r.report.average:6.2f}  hard {100 * r.report.columns['Hard']:6.2f}  {r.seconds:5.0f}s")
    print(f"reports in {out}")


if __name__ == "__main__":
    main()
