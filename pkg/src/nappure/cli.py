"""Command-line entry point: ``nappure <subcommand> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from nappure import pipeline as P

log = logging.getLogger("nappure")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _names(text: str | None):
    return None if text is None else [t for t in text.split(",") if t.strip()]


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # the subcommand copy must not reset flags given before the subcommand
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="experiment JSON merged over the defaults")
    p.add_argument("--seed", type=int, default=d(None), help="experiment seed (overrides the config)")
    p.add_argument("--out", type=Path, default=d(Path("nappure-out")), help="output directory")
    p.add_argument("--export-ppm", action="store_true", default=d(False),
                   help="write clean/adv/purified PPM strips")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(False)
    ap = argparse.ArgumentParser(prog="nappure", description=__doc__, parents=[_global_flags(True)])
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="sample the data splits from the mixture prior")
    sub.add_parser("train-clf", parents=[common], help="train the softmax classifier on the train split")
    p = sub.add_parser("attack", parents=[common], help="attack the eval split")
    p.add_argument("--attack", help="comma-separated attack names (default: all)")
    p = sub.add_parser("purify", parents=[common], help="purify clean and attacked eval images")
    p.add_argument("--attack", help="comma-separated attack names (default: all)")
    p.add_argument("--defense", help="comma-separated defenses (default: all)")
    sub.add_parser("eval", parents=[common], help="accuracy table from the stored tensors")
    sub.add_parser("run", parents=[common], help="all stages end to end")

    p = sub.add_parser("grid", parents=[common], help="lambda grid search on the attacked validation split")
    p.add_argument("--attack", default="flow")
    p.add_argument("--lambda1", type=_floats, default=[0.0, 0.001, 0.01, 0.1])
    p.add_argument("--lambda2", type=_floats, default=[0.0, 1.0, 5.0, 10.0])
    p.add_argument("--validation", type=Path, help="manifest of pre-attacked validation images")

    p = sub.add_parser("sweep-iters", parents=[common], help="robust accuracy against iteration count")
    p.add_argument("--attack", default="patch")
    p.add_argument("--iters", type=_ints, default=[0, 100, 200, 500])

    p = sub.add_parser("mismatch", parents=[common], help="fixed defense against varied attack geometry")
    p.add_argument("--attack", default="conv")
    p.add_argument("--defense-spec", type=json.loads, default={"kind": "conv", "kernel_size": 5})
    p.add_argument("--variants", type=json.loads,
                   default={"k3": {"spec": {"kind": "conv", "kernel_size": 3}},
                            "k5": {"spec": {"kind": "conv", "kernel_size": 5}}},
                   help="JSON object: variant name -> attack config override")

    sub.add_parser("composite", parents=[common], help="composite attack against every defense")
    return ap


def _config(args) -> dict:
    cfg = P.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.export_ppm:
        cfg["export_ppm"] = True
    return cfg


def _print_table(rows, keys):
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def dispatch(args) -> int:
    cfg = _config(args)
    out = args.out
    cmd = args.command
    if cmd == "gen-data":
        _, data = P.stage_gen(cfg, out)
        for split, (_, y) in data.items():
            print(f"{split}: {len(y)} images -> {out / 'data' / split}")
    elif cmd == "train-clf":
        _, acc = P.stage_train(cfg, out)
        print(f"train accuracy {acc:.4f}")
    elif cmd == "attack":
        for name, m in P.stage_attack(cfg, out, _names(args.attack)).items():
            print(f"{name}: {len(m.entries)} images -> {m.root}")
    elif cmd == "purify":
        P.stage_purify(cfg, out, _names(args.defense), _names(args.attack))
    elif cmd in ("eval", "run"):
        report = P.stage_eval(cfg, out) if cmd == "eval" else P.run_pipeline(cfg, out)
        print(f"clean accuracy {report.clean_accuracy:.4f}")
        _print_table(report.rows, ["defense", "attack", "clean_acc", "robust_acc"])
    elif cmd == "grid":
        best, table = P.grid_search(cfg, args.lambda1, args.lambda2, out, args.attack, args.validation)
        _print_table(table, ["lambda1", "lambda2", "accuracy"])
        print(f"best lambda1={best[0]} lambda2={best[1]}")
    elif cmd == "sweep-iters":
        _print_table(P.iteration_sweep(cfg, args.iters, out, args.attack), ["iterations", "robust_acc"])
    elif cmd == "mismatch":
        table = P.mismatch_eval(cfg, args.defense_spec, args.variants, out, args.attack)
        _print_table(table, ["variant", "undefended", "purified"])
    elif cmd == "composite":
        for k, v in P.composite_eval(cfg, out).items():
            print(f"{k}\t{v:.4f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return dispatch(args)
    except P.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
