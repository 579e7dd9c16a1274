"""Command-line entry point: ``mfdistill <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from . import complexity as C
from . import experiment as E
from . import verify as V
from .config import ExperimentConfig, default_config, from_dict, load_config
from .data import generate_dataset
from .errors import MfDistillError
from .objective import evaluate
from .vit import load_checkpoint


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    raw = config.to_dict()
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if getattr(args, "run_id", None):
        raw["run_id"] = args.run_id
    if getattr(args, "output_dir", None):
        raw["output_dir"] = args.output_dir
    if getattr(args, "teacher", None):
        raw["teacher_checkpoint"] = args.teacher
    return from_dict(raw)


def _emit(payload, as_json: bool, text: str):
    print(json.dumps(payload, indent=2, sort_keys=True) if as_json else text)


def cmd_train_teacher(args) -> int:
    info = E.train_teacher(_load(args))
    print(f"teacher eval accuracy {info['eval_accuracy']:.4f}; checkpoint {info['checkpoint']}")
    return 0


def cmd_distill(args) -> int:
    summary = E.run_experiment(_load(args))
    print(f"teacher eval accuracy {summary['teacher']['eval_accuracy']:.4f}")
    for arm in E.ARMS:
        print(f"{arm:<10}mean eval accuracy {summary['arms'][arm]['mean_eval_accuracy']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load(args)
    model = load_checkpoint(args.checkpoint)
    data = generate_dataset(config.dataset)
    acc = evaluate(model, data.eval_images, data.eval_labels)
    _emit({"checkpoint": args.checkpoint, "eval_accuracy": acc}, args.json, f"eval accuracy {acc:.4f}")
    return 0


def cmd_audit(args) -> int:
    result = C.audit(args.B, args.N, args.D, args.K, args.bytes)
    _emit(C.audit_to_dict(result), args.json, C.format_audit(result))
    return 0


def cmd_bench(args) -> int:
    rows = C.bench_losses(args.B, args.N, args.D, args.K, args.repetitions, args.seed or 0)
    _emit(rows, args.json, C.format_bench(rows))
    return 0


def cmd_verify(args) -> int:
    results = V.verify(args.suite or V.SUITES, seed=args.seed or 0)
    print(V.format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_sweep(args) -> int:
    config = _load(args)
    fn = E.ablation_sweep if args.kind == "ablation" else E.scheme_sweep
    summary = fn(config, workers=args.workers)
    for row in summary["runs"]:
        if row["status"] == "ok":
            print(f"{row['name']:<28}eval accuracy {row['eval_accuracy']:.4f}")
        else:
            print(f"{row['name']:<28}{row['status']} at step {row['step']} ({row['term']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfdistill", description="Patch-level manifold distillation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run=True):
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the seed list with a single seed")
        if run:
            p.add_argument("--run-id")
            p.add_argument("--output-dir")
            p.add_argument("--teacher", help="teacher checkpoint to load instead of training one")

    def sizes(p, b, n, d, k):
        p.add_argument("--B", type=int, default=b)
        p.add_argument("--N", type=int, default=n)
        p.add_argument("--D", type=int, default=d)
        p.add_argument("--K", type=int, default=k)
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("train-teacher", help="train the teacher only")
    common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="teacher plus none/kd/manifold student arms")
    common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="eval accuracy of a checkpoint on the configured dataset")
    common(p, run=False)
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit-flops", help="analytical FLOPs and map memory")
    sizes(p, 128, 196, 192, 192)
    p.add_argument("--bytes", type=int, default=4, help="bytes per element")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("bench", help="wall-clock of each loss")
    sizes(p, 8, 64, 32, 64)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", action="append", choices=V.SUITES)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="ablation grid or layer-scheme sweep")
    common(p)
    p.add_argument("--kind", choices=("ablation", "schemes"), required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except E.StageError as exc:
        print(f"error in stage {exc.stage}: {exc}", file=sys.stderr)
        return 2
    except MfDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
