"""Command-line interface.

Subcommands: gen-data, train, attack, detect, report. Exit codes from
detect: 0 clean, 2 attacked, 3 inconclusive, 1 error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pcbdet.config import default_config, load_config, save_config
from pcbdet import pipeline
from pcbdet.inference import VERDICT_ATTACKED, VERDICT_CLEAN, VERDICT_INCONCLUSIVE
from pcbdet.report import read_statistics_csv

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_ATTACKED = 2
EXIT_INCONCLUSIVE = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcbdet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run-config file")
        sp.add_argument("--out", default=None, help="output directory (overrides config out_dir)")
        sp.add_argument("--seed", type=int, default=None, help="override the stage's seed")

    sp = sub.add_parser("init-config", help="write a default config file")
    sp.add_argument("--config", required=True)

    sp = sub.add_parser("gen-data", help="generate train/test/clean/reserve splits")
    common(sp)

    sp = sub.add_parser("train", help="train the clean classifier")
    common(sp)

    sp = sub.add_parser("attack", help="poison the training set and train the attacked classifier")
    common(sp)
    sp.add_argument("--weights", default=None, help="clean weights for the accuracy-delta reference")

    sp = sub.add_parser("detect", help="run backdoor detection on a weights file")
    common(sp)
    sp.add_argument("--weights", required=True, help="classifier weights to inspect")
    sp.add_argument("--phi", type=float, default=None, help="override detection threshold")
    sp.add_argument("--prefix", default="detect", help="output file prefix")

    sp = sub.add_parser("report", help="re-render statistics CSV into SVG and a summary")
    sp.add_argument("--stats", required=True, help="statistics CSV from detect")
    sp.add_argument("--report", required=True, help="report JSON from detect")
    sp.add_argument("--out", required=True, help="output SVG path")
    return p


def _load(args):
    cfg = load_config(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "init-config":
            save_config(default_config(), args.config)
            print(f"wrote {args.config}")
            return EXIT_CLEAN

        if args.command == "gen-data":
            cfg = _load(args)
            if args.seed is not None:
                cfg.data.seed = args.seed
            manifest = pipeline.gen_data_stage(cfg, cfg.out_dir)
            print(f"splits written to {cfg.out_dir}: totals {manifest['totals']}")
            return EXIT_CLEAN

        if args.command == "train":
            cfg = _load(args)
            if args.seed is not None:
                cfg.train.seed = args.seed
            metrics = pipeline.train_stage(cfg, cfg.out_dir)
            print(f"trained; test accuracy {metrics['test_accuracy']:.4f}")
            return EXIT_CLEAN

        if args.command == "attack":
            cfg = _load(args)
            if args.seed is not None:
                cfg.attack.seed = args.seed
            metrics = pipeline.attack_stage(cfg, cfg.out_dir, clean_weights=args.weights)
            print(
                f"attack {metrics['source']}->{metrics['target']}: "
                f"asr {metrics['attack_success_rate']:.3f}, "
                f"clean accuracy delta {metrics['clean_accuracy_delta']:.4f}"
            )
            return EXIT_CLEAN

        if args.command == "detect":
            cfg = _load(args)
            if args.seed is not None:
                cfg.detect_seed = args.seed
            if args.phi is not None:
                cfg.phi = args.phi
            report = pipeline.detect_stage(cfg, args.weights, cfg.out_dir, prefix=args.prefix)
            pv = "n/a" if report.pvalue is None else report.pvalue.display()
            print(f"verdict: {report.verdict} (pv {pv}, phi {report.phi})")
            if report.verdict == VERDICT_ATTACKED:
                print(f"inferred target class: {report.inferred_target}")
                return EXIT_ATTACKED
            if report.verdict == VERDICT_INCONCLUSIVE:
                return EXIT_INCONCLUSIVE
            return EXIT_CLEAN

        if args.command == "report":
            rows = read_statistics_csv(args.stats)
            with open(args.report, "r", encoding="ascii") as fh:
                rep = json.load(fh)
            print(f"verdict {rep['verdict']}  pv {rep['pv_display']}  K {rep['K']}  J {rep['J']}")
            for row in rows:
                mark = " *" if row["excluded"] else ""
                print(
                    f"  class {row['class']}: t_hat {row['t_hat']} r_s {row['r_s']:.4f} "
                    f"r_t {row['r_t']:.4f} z {row['z']:.3f} w {row['w']:.3f} r {row['r']:.4f}{mark}"
                )
            _render_svg_from_rows(rows, rep, args.out)
            print(f"histogram written to {args.out}")
            return EXIT_CLEAN
    except BrokenPipeError:
        raise
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


def _render_svg_from_rows(rows, rep, out_path) -> None:
    from pcbdet.inference import ClassStatistics, DetectionReport, NullFit, PValue
    import numpy as np

    stats = [
        ClassStatistics(
            source=row["class"],
            t_hat=None if row["t_hat"] < 0 else row["t_hat"],
            r_s=row["r_s"],
            r_t=row["r_t"],
            z=row["z"],
            w=row["w"],
            r=row["r"],
        )
        for row in rows
    ]
    excluded = tuple(sorted(row["class"] for row in rows if row["excluded"]))
    fit = None
    if rep.get("gamma_shape") is not None:
        fit = NullFit(shape=rep["gamma_shape"], scale=rep["gamma_scale"], excluded=excluded, values=np.array([]))
    pvalue = None
    if rep.get("pv") is not None:
        pvalue = PValue(pv=rep["pv"], log_pv=rep["log_pv"], underflow=rep["pv_display"] == "u.f.")
    report = DetectionReport(
        stats=stats,
        fit=fit,
        s_max=rep["s_max"],
        pvalue=pvalue,
        phi=rep["phi"],
        verdict=rep["verdict"],
        inferred_target=rep.get("inferred_target"),
        num_classes=rep["K"],
        num_excluded=rep["J"],
    )
    from pcbdet.report import write_histogram_svg

    write_histogram_svg(report, out_path)


if __name__ == "__main__":
    sys.exit(main())
