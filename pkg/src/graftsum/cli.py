"""Command-line pipeline.

Exit codes: 0 success, 2 config/manifest error, 3 data or artifact error,
4 numeric failure (non-finite loss or failed gradient check).

Heavy imports happen after argument parsing so --threads can pin the BLAS
thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _common(sub: argparse.ArgumentParser, data: bool = True) -> None:
    sub.add_argument("--config", default=None,
                     help="JSON config file (defaults used when omitted)")
    sub.add_argument("--seed", type=int, default=None,
                     help="override train.seed from the config")
    sub.add_argument("--out", required=True, help="output directory")
    if data:
        sub.add_argument("--data", required=True,
                         help="corpus directory from gen-data")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="graftsum",
        description="Pre-train text and video-text components on synthetic "
                    "corpora, graft them into one multimodal headline "
                    "generator, fine-tune, decode, and score.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP thread pools (set before numpy loads)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write synthetic corpora and vocabulary")
    _common(s, data=False)

    s = sub.add_parser("pretrain-nlg",
                       help="train the text seq2seq stage, emit encoder/decoder bundles")
    _common(s)

    s = sub.add_parser("pretrain-match",
                       help="train video-text matching, emit the video-encoder bundle")
    _common(s)

    s = sub.add_parser("graft", help="validate a graft manifest and report the assembly")
    _common(s)
    s.add_argument("--manifest", required=True, help="graft manifest JSON")

    s = sub.add_parser("finetune", help="graft per manifest and fine-tune on triplets")
    _common(s)
    s.add_argument("--manifest", required=True, help="graft manifest JSON")
    s.add_argument("--fusion-mode", default="joint",
                   choices=("joint", "concat", "crossattn", "text-only"))
    s.add_argument("--dfs", default="stochastic",
                   choices=("stochastic", "deterministic"),
                   help="frame sampling during fine-tuning")

    s = sub.add_parser("evaluate", help="beam-decode a split and write metric reports")
    _common(s)
    s.add_argument("--model", required=True, help="fine-tuned model directory")
    s.add_argument("--split", default="test")
    s.add_argument("--beam", type=int, default=None,
                   help="override train.beam_size")

    s = sub.add_parser("retrieve", help="score video/text retrieval with the matching model")
    _common(s)
    s.add_argument("--model", required=True, help="pretrain-match output directory")
    s.add_argument("--split", default="test")

    s = sub.add_parser("grad-check", help="finite-difference check of every op and the full model")
    s.add_argument("--seeds", default="0,1,2",
                   help="comma-separated seeds for the battery")
    s.add_argument("--max-entries", type=int, default=40,
                   help="probed entries per parameter")
    return p


def _load_config(args):
    from .config import load_config
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.train.validate()
    return cfg


def _dispatch(args) -> int:
    from . import pipeline

    if args.command == "grad-check":
        try:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        except ValueError:
            print(f"bad --seeds value {args.seeds!r}", file=sys.stderr)
            return 2
        results = pipeline.gradient_battery(seeds or (0,), args.max_entries)
        failures = [r for r in results if not r["ok"]]
        for r in results:
            marker = "ok " if r["ok"] else "FAIL"
            print(f"{marker} seed={r['seed']} {r['case']}: {r['summary']}")
        print(f"{len(results) - len(failures)}/{len(results)} gradient checks passed")
        return 4 if failures else 0

    cfg = _load_config(args)
    if args.command == "gen-data":
        pipeline.stage_gen_data(cfg, args.out)
    elif args.command == "pretrain-nlg":
        pipeline.stage_pretrain_nlg(cfg, args.data, args.out)
    elif args.command == "pretrain-match":
        pipeline.stage_pretrain_match(cfg, args.data, args.out)
    elif args.command == "graft":
        path = pipeline.stage_graft_summary(cfg, args.data, args.manifest,
                                            args.out)
        print(path.read_text(), end="")
    elif args.command == "finetune":
        pipeline.stage_finetune(cfg, args.data, args.manifest, args.out,
                                fusion_mode=args.fusion_mode,
                                dfs_mode=args.dfs)
    elif args.command == "evaluate":
        if args.beam is not None:
            cfg.train.beam_size = args.beam
            cfg.train.validate()
        corpus = pipeline.stage_evaluate(cfg, args.data, args.model, args.out,
                                         split=args.split)
        for key in sorted(corpus):
            print(f"{key}: {corpus[key]:.4f}")
    elif args.command == "retrieve":
        report = pipeline.stage_retrieve(cfg, args.data, args.model, args.out,
                                         split=args.split)
        for direction in ("video_to_text", "text_to_video"):
            row = " ".join(f"{k}={v:.3f}" for k, v in
                           sorted(report[direction].items()))
            print(f"{direction}: {row}")
    else:  # pragma: no cover - argparse enforces the choices
        raise AssertionError(args.command)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")

    from .checkpoint import BundleError, GraftError
    from .config import ConfigError
    from .data import DataError
    from .pipeline import NonFiniteLossError

    try:
        return _dispatch(args)
    except (ConfigError, GraftError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, BundleError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
