"""Command line entry point: run experiments, post-process traces, emit figure data."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from safempc.harness.config import ExperimentConfig
from safempc.harness.figures import emit_figures
from safempc.harness.report import stability_report, write_report
from safempc.harness.trace import RunTrace
from safempc.safety import SafetyViolation, empirical_nonblocking_check

log = logging.getLogger("safempc")


def _run(args):
    overrides = {"which": args.experiment, "gate": args.gate, "seed": args.seed, "out": args.out}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.steps is not None:
        overrides["scalar_steps"] = args.steps
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    if cfg.which == "scalar":
        from safempc.harness.scalar_run import run_scalar_experiment as run
    else:
        from safempc.harness.tube_run import run_tube_experiment as run
    log.info("running %s experiment, gate %s, seed %d", cfg.which, cfg.gate, cfg.seed)
    try:
        trace = run(cfg)
    except SafetyViolation as exc:
        log.error("safety violation: %s", exc)
        return 3
    trace.write(cfg.out)
    log.info("trace written to %s (%d steps, %d epochs)", cfg.out, len(trace.steps), len(trace.epochs))
    return 0


def _report(args):
    trace = RunTrace.read(args.trace)
    if trace.header.get("experiment") == "scalar":
        rep = empirical_nonblocking_check(trace.decisions())
        body = dict(rep.as_dict(), all_applied=rep.all_applied, alpha_sequences=rep.alpha_sequences)
        out = os.path.join(args.out or args.trace, "nonblocking.json")
        os.makedirs(os.path.dirname(out), exist_ok=True)
        with open(out, "w") as fh:
            json.dump(body, fh, indent=1, sort_keys=True)
            fh.write("\n")
        print(json.dumps({"proposals": rep.proposals, "applied": rep.applied, "unresolved": rep.unresolved}))
        return 0
    rep = stability_report(trace, zeta=args.zeta, n_samples=args.samples, max_pairs=args.pairs)
    paths = write_report(rep, args.out or args.trace)
    summary = {"w_violations": len(rep["w_decrease"]["violations"]),
               "v_violations": len(rep["v_decrease"]["violations"]),
               "iss_ok": rep["iss"]["distance_to_star"]["ok"], "rates": rep["rates"]}
    print(json.dumps(summary, indent=1, sort_keys=True, default=str))
    log.info("wrote %s", ", ".join(paths))
    return 0


def _figures(args):
    trace = RunTrace.read(args.trace)
    paths = emit_figures(trace, args.out or args.trace)
    log.info("wrote %d files", len(paths))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="safempc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one experiment and write its trace")
    r.add_argument("--experiment", choices=["scalar", "tube"], required=True)
    r.add_argument("--gate", choices=["backtracking", "feasibility", "feasibility-constrained"], default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--config", default=None, help="key = value configuration file")
    r.add_argument("--out", default=None, help="output directory for the trace")
    r.add_argument("--epochs", type=int, default=None, help="tube epochs (overrides the config)")
    r.add_argument("--steps", type=int, default=None, help="scalar steps (overrides the config)")
    r.set_defaults(func=_run)

    s = sub.add_parser("report", help="stability post-processing of a tube trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--zeta", type=float, default=None)
    s.add_argument("--samples", type=int, default=200, help="states per update for the value sensitivity")
    s.add_argument("--pairs", type=int, default=20, help="updates sampled for the value sensitivity")
    s.set_defaults(func=_report)

    f = sub.add_parser("figures", help="write CSV series and a gnuplot stub")
    f.add_argument("--trace", required=True)
    f.add_argument("--out", default=None)
    f.set_defaults(func=_figures)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
