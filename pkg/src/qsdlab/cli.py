"""Command-line entry point: ``qsdlab <command> [model source] [options]``."""

from __future__ import annotations

import argparse
import csv
import io as _stringio
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import IoError
from .io import dumps_result
from .pipeline import COMMANDS, EXIT_ERROR, RunConfig, run

FAMILY_CHOICES = ("feedback-chain", "bd-halfline", "bd-line")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", dest="model_path", help="triplet file or JSON manifest")
    src.add_argument("--family", choices=FAMILY_CHOICES, help="builtin model family")
    common.add_argument("--p", type=float, help="family parameter p")
    common.add_argument("--r", type=float, help="feedback-chain holding weight (default 1 - p - w)")
    common.add_argument("--w", type=float, help="feedback-chain killing weight")
    common.add_argument("--c", type=float, default=1.0, help="birth-death clock rate")
    common.add_argument("--trunc", type=int, help="truncation level N")
    common.add_argument("--tol", type=float, default=1e-10, help="decay-parameter tolerance")
    common.add_argument("--series-tol", type=float, default=1e-12)
    common.add_argument("--classify-tol", type=float, default=1e-3)
    common.add_argument("--residual-gate", type=float, default=1e-8, help="relative to max q_i")
    common.add_argument("--k", type=int, help="anchor state (1-based index)")
    common.add_argument("--out", help="write the result here instead of stdout")
    common.add_argument("--format", dest="fmt", choices=("json", "csv"), default="json")
    common.add_argument("--timing", action="store_true", help="record wall time (breaks byte-identity)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qsdlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qsdlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("compute", parents=[common], help="decay parameter, classification and QSD")
    sub.add_parser("classify", parents=[common], help="lambda-recurrence verdict with diagnostics")
    sub.add_parser("bound", parents=[common], help="h-transform moment bound")
    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo estimator suite")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--paths", type=int, default=100_000)
    sim.add_argument("--t", type=float, default=20.0, help="simulation horizon")
    sim.add_argument("--yaglom-t", type=float, help="time for conditional-law checks (default t/2)")
    sim.add_argument("--start", choices=("state", "qsd"), default="state")
    sim.add_argument("--workers", type=int, default=1)
    ver = sub.add_parser("verify", parents=[common], help="residual report for a supplied u")
    ver.add_argument("--u", dest="u_path", required=True, help="JSON list, result document, or one value per line")
    ver.add_argument("--lambda", dest="lam", type=float, help="decay parameter to test (default: computed)")
    return parser


def _csv_text(doc: dict) -> str:
    buf = _stringio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    out = doc.get("outputs")
    if out is None:
        w.writerow(["key", "value"])
        err = doc.get("error", {})
        w.writerows([["error_code", err.get("code")], ["error_message", err.get("message")]])
        return buf.getvalue()
    vectors = [k for k in ("u", "x", "h") if out.get(k) is not None]
    if vectors:
        w.writerow(["state"] + vectors)
        cols = [np.asarray(out[k], dtype=float) for k in vectors]
        for i in range(len(cols[0])):
            w.writerow([i + 1] + [repr(float(c[i])) for c in cols])
    elif "lambda0" in out and isinstance(out["lambda0"], dict) and "times" in out["lambda0"]:
        w.writerow(["time", "survival"])
        for t, s in zip(out["lambda0"]["times"], out["lambda0"]["survival"]):
            w.writerow([repr(float(t)), repr(float(s))])
    else:
        w.writerow(["key", "value"])
        for k in sorted(out):
            v = out[k]
            if isinstance(v, (int, float, str, bool)) or v is None:
                w.writerow([k, v])
    return buf.getvalue()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    fields = {f for f in RunConfig.__dataclass_fields__}
    cfg = RunConfig(**{k: v for k, v in vars(args).items() if k in fields})
    doc, status = run(cfg)
    text = dumps_result(doc) if cfg.fmt == "json" else _csv_text(doc)
    if cfg.out:
        try:
            with open(cfg.out, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            print(f"error: {IoError(f'cannot write {cfg.out}: {exc.strerror}')}", file=sys.stderr)
            return EXIT_ERROR
    else:
        try:
            sys.stdout.write(text)
            sys.stdout.flush()
        except BrokenPipeError:
            # reader closed early (e.g. piped into head); silence the flush at exit
            os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
    if "error" in doc:
        print(f"error [{doc['error']['code']}]: {doc['error']['message']}", file=sys.stderr)
    return status


__all__ = ["main", "build_parser", "COMMANDS"]
