"""Command-line entry point: ``fedpt {pretrain,run,eval,decode,partition-inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import FedPTError
from .experiment import (cmd_decode, cmd_eval, cmd_partition_inspect, cmd_pretrain, cmd_run,
                         format_partition, format_report, load_manifest, run_dir)
from .federation import MODES

OUT_ENV = "FEDPT_OUT"
DEFAULT_OUT = "fedpt-out"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (or a run manifest)")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--alpha", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--rounds", type=int)
    common.add_argument("--out", type=Path,
                        help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--workers", type=int, help="concurrent local updates (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedpt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the small and large bases")
    sub.add_parser("run", parents=[common], help="run one federated experiment")
    ev = sub.add_parser("eval", parents=[common], help="score a run's saved checkpoints")
    ev.add_argument("--manifest", type=Path)
    ev.add_argument("--round", help="round number or 'all' (default: last saved)")
    ev.add_argument("--dataset", help="corpus split to score (default: from config)")
    ev.add_argument("--alpha-sweep", help="comma-separated alphas, e.g. 1.0,1.3,1.5,1.8,2.0")
    de = sub.add_parser("decode", parents=[common], help="generate for one prompt")
    de.add_argument("--manifest", type=Path)
    de.add_argument("--prompt", required=True, help="instruction text")
    de.add_argument("--input", default="", help="optional task input")
    de.add_argument("--round", type=int)
    de.add_argument("--side-by-side", action="store_true",
                    help="also print the large-base and small-tuned generations")
    pi = sub.add_parser("partition-inspect", parents=[common],
                        help="per-device category histograms")
    pi.add_argument("--json", action="store_true")
    return p


def _out(args) -> Path:
    return args.out or Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(mode=args.mode, alpha=args.alpha, seed=args.seed,
                              rounds=args.rounds, workers=args.workers or os.cpu_count() or 1)


def _manifest(args):
    if args.manifest:
        return load_manifest(args.manifest)
    return load_manifest(run_dir(_config(args), _out(args)) / "manifest.json")


def main(argv=None) -> int:
    p = _parser()
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "decode" and not args.prompt.strip():
        p.error("--prompt must not be empty")
    try:
        if args.command == "pretrain":
            r = cmd_pretrain(_config(args), _out(args))
            print(json.dumps({"held_out_loss": {"small": r.small_loss, "large": r.large_loss},
                              "checkpoints": r.paths}, indent=2))
        elif args.command == "run":
            m = cmd_run(_config(args), _out(args))
            print(Path(m.metrics_log).parent / "manifest.json")
        elif args.command == "eval":
            m = _manifest(args)
            sweep = ([float(a) for a in args.alpha_sweep.split(",")] if args.alpha_sweep
                     else None)
            if args.alpha is not None and sweep is None:
                sweep = [args.alpha]
            rounds = (sorted(m.round_checkpoints) if args.round == "all"
                      else [int(args.round) if args.round else None])
            out = Path(m.metrics_log).parent / "eval"
            for t in rounds:
                res = cmd_eval(m, t, args.dataset, sweep, out=out)
                if len(rounds) > 1:
                    print(f"round {t}")
                print(format_report(res))
        elif args.command == "decode":
            gens = cmd_decode(_manifest(args), args.prompt, args.input, args.alpha, args.round,
                              args.side_by_side)
            for name, text in gens.items():
                print(f"[{name}]\n{text}\n" if args.side_by_side else text)
        elif args.command == "partition-inspect":
            part = cmd_partition_inspect(_config(args))
            print(json.dumps(part.to_dict()) if args.json else format_partition(part))
    except FedPTError as exc:
        print(f"fedpt: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"fedpt: input error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
