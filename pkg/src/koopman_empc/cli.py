"""Command-line entry point: ``koopman-empc {gen-data,identify,simulate,report}``.

Paths in the config are relative to the workspace root (``--out``, default
the current directory). Failures print one JSON object on stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .pipeline import RunConfig

log = logging.getLogger("koopman_empc")


def _workspace(args, cfg: RunConfig):
    root = Path(args.out) if args.out else Path.cwd()
    p = cfg.paths
    return root / p.data_dir, root / p.model_dir, root / p.out_dir


def _load(args) -> RunConfig:
    cfg = pipeline.load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_gen_data(args, cfg):
    data_dir, _, _ = _workspace(args, cfg)
    out = pipeline.gen_data(cfg, data_dir)
    for name, path in out.items():
        print(f"{name}: {path}")
    return 0


def cmd_identify(args, cfg):
    data_dir, model_dir, out_dir = _workspace(args, cfg)
    train, test = pipeline.load_datasets(data_dir)
    models, rep = pipeline.identify_models(train, test, cfg)
    pipeline.save_models(models, model_dir)
    pipeline.write_identification_report(rep, out_dir)
    print(pipeline.format_identification(rep))
    print(f"models written to {model_dir}")
    return 0


def _progress(label, total):
    start = time.perf_counter()

    def report(k):
        if (k + 1) % 144 == 0 or k + 1 == total:
            log.info("%s: step %d/%d (%.0f s)", label, k + 1, total, time.perf_counter() - start)
    return report


def cmd_simulate(args, cfg):
    _, model_dir, out_dir = _workspace(args, cfg)
    controllers = ("subspace", "koopman") if args.both else (args.model,)
    for controller in controllers:
        label = f"{controller} controller, {args.plant} plant"
        traj, ledger = pipeline.simulate(cfg, model_dir, controller, args.plant,
                                         progress=_progress(label, cfg.scenario.total_steps))
        run = pipeline.write_simulation(traj, ledger, cfg, pipeline.run_dir(out_dir, controller, args.plant),
                                        label)
        statuses = traj.array("status")
        n_opt = int(sum(s == "optimal" for s in statuses))
        print(f"{label}: total cost {ledger.total:.6g}, {n_opt}/{len(statuses)} optimal, written to {run}")
    return 0


def cmd_report(args, cfg):
    _, _, out_dir = _workspace(args, cfg)
    base = Path(args.baseline) if args.baseline else pipeline.run_dir(out_dir, "subspace", args.plant) / "ledger.json"
    koop = Path(args.koopman) if args.koopman else pipeline.run_dir(out_dir, "koopman", args.plant) / "ledger.json"
    for p in (base, koop):
        if not p.exists():
            raise FileNotFoundError(f"ledger not found: {p}")
    rows = pipeline.report(base, koop, out_dir / f"report_{args.plant}")
    print(pipeline.format_report(rows))
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="workspace root holding data/, models/ and results/ (default: cwd)")

    parser = argparse.ArgumentParser(prog="koopman-empc",
                                     description="Koopman-model economic MPC pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate train/test excitation datasets")
    sub.add_parser("identify", parents=[common], help="identify subspace and Koopman models")
    sim = sub.add_parser("simulate", parents=[common], help="run the closed-loop scenario")
    sim.add_argument("--model", choices=sorted(pipeline.CONTROLLERS), default="koopman",
                     help="controller model (default: koopman)")
    sim.add_argument("--plant", choices=sorted(pipeline.PLANTS), default="surrogate",
                     help="plant backend (default: surrogate)")
    sim.add_argument("--both", action="store_true", help="run both controllers, one after the other")
    rep = sub.add_parser("report", parents=[common], help="compare baseline and Koopman ledgers")
    rep.add_argument("--plant", choices=sorted(pipeline.PLANTS), default="surrogate",
                     help="plant backend whose default ledgers are compared")
    rep.add_argument("--baseline", help="baseline ledger.json (default: results/subspace_<plant>)")
    rep.add_argument("--koopman", help="Koopman ledger.json (default: results/koopman_<plant>)")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "identify": cmd_identify, "simulate": cmd_simulate, "report": cmd_report}


def _setup_logging():
    level = os.environ.get("KOOPMAN_EMPC_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        cfg = _load(args)
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - reported as JSON
        log.debug("command failed", exc_info=True)
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
