"""``loralens`` command-line entry point."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

from . import pipeline
from .config import RunConfig
from .errors import LLTD_ERROR_CODES, LoralensError

EXIT_CODES = """\
exit codes:
  0  success
  1  unexpected internal error
  2  command-line usage error
  3  missing or corrupt input file (LLTD detail codes: {lltd})
  4  configuration validation failure
  5  analysis precondition failure (shapes, pairing, sample size, degenerate input)
  6  training diverged (non-finite loss)

Failures print one JSON line on stderr: {{"error": <category>, "message": ..., "code": <LLTD code>}}.
LORALENS_THREADS caps the BLAS thread pool.
""".format(lltd=", ".join(f"{k}={v}" for k, v in LLTD_ERROR_CODES.items()))


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def build_parser():
    p = argparse.ArgumentParser(prog="loralens", description="LoRA mechanistic-analysis pipeline",
                                epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, epilog=EXIT_CODES,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
        sp.add_argument("--out", required=True, help="output file or directory")
        return sp

    sp = add("pretrain", "pretrain the backbone on the source task (--out: checkpoint file)")
    sp.add_argument("--seed", type=int)

    sp = add("adapt", "train head (frozen) or head+LoRA (adapted) on the target task (--out: directory)")
    sp.add_argument("--backbone", required=True)
    sp.add_argument("--mode", choices=("frozen", "adapted"), default="adapted")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--rank", type=int)

    sp = add("trace", "capture residual-stream traces on the analysis sample (--out: trace file)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("frozen", "adapted"), required=True)
    sp.add_argument("--dataset", help="LLTD dataset to trace instead of the configured sample")

    sp = add("analyze", "run one analysis (--out: directory)")
    sp.add_argument("kind", choices=pipeline.ANALYSES)
    sp.add_argument("--checkpoint")
    sp.add_argument("--backbone")
    sp.add_argument("--trace")
    sp.add_argument("--frozen-trace")
    sp.add_argument("--adapted-trace")
    sp.add_argument("--gradients")
    sp.add_argument("--dataset")
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("report", help="consolidate analysis outputs into summary.json and figure CSVs",
                        epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    sp.add_argument("--out", required=True, help="directory holding analysis outputs")
    return p


def _need(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise _UsageError("missing required option(s): " + ", ".join(f"--{n}" for n in missing))


class _UsageError(Exception):
    pass


def _dispatch(args):
    if args.command == "report":
        return pipeline.build_report(args.out)
    cfg = _config(args)
    if args.command == "pretrain":
        pipeline.run_pretrain(cfg, args.out, seed=args.seed)
    elif args.command == "adapt":
        pipeline.run_adapt(cfg, args.backbone, args.out, mode=args.mode, seed=args.seed, rank=args.rank)
    elif args.command == "trace":
        pipeline.run_trace(cfg, args.checkpoint, args.mode, args.out, dataset_path=args.dataset)
    elif args.kind == "contribution":
        _need(args, "frozen-trace", "adapted-trace")
        pipeline.analyze_contribution(args.frozen_trace, args.adapted_trace, args.out)
    elif args.kind == "lens":
        _need(args, "checkpoint", "trace")
        pipeline.analyze_lens(args.checkpoint, args.trace, args.out)
    elif args.kind == "svd":
        _need(args, "checkpoint")
        pipeline.analyze_svd(cfg, args.checkpoint, args.out, dataset_path=args.dataset)
    elif args.kind == "cka":
        _need(args, "trace", "gradients")
        pipeline.analyze_cka(args.trace, args.gradients, args.out)
    elif args.kind == "ranksweep":
        _need(args, "backbone")
        pipeline.analyze_ranksweep(cfg, args.backbone, args.out, seed=args.seed)
    return None


def _thread_limit():
    n = os.environ.get("LORALENS_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _fail(category, message, code, detail=None):
    payload = {"error": category, "message": message}
    if detail is not None:
        payload["code"] = detail
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            _dispatch(args)
    except _UsageError as exc:
        parser.error(str(exc))
    except LoralensError as exc:
        code = getattr(exc, "code", None)
        category = f"{exc.category}:{code}" if code else exc.category
        return _fail(category, str(exc), exc.exit_code, LLTD_ERROR_CODES.get(code))
    except (FileNotFoundError, IsADirectoryError) as exc:
        return _fail("file", str(exc), 3)
    except (KeyError, json.JSONDecodeError) as exc:
        return _fail("file", f"malformed input: {exc}", 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
