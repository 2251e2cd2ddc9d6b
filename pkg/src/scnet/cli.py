"""``scnet`` command line: train, eval, gradcheck, synth, ablate.

Exit codes: 0 success, 1 usage error, 2 tolerance failure, 3 IO or schema error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config, replace
from .data import DatasetError, load_dataset, reachability, save_dataset
from .features import WordVectorError
from .params import CheckpointError
from .train import (
    TrainingAborted,
    ablate,
    build_model,
    evaluate,
    format_table,
    load_model,
    run_gradcheck,
    save_run_files,
    synthetic_splits,
    train,
    word_table,
)

EXIT_OK, EXIT_USAGE, EXIT_TOLERANCE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("scnet")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=["paper", "toy"])
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--no-sct", action="store_true", help="baseline concat layout")
    common.add_argument("--no-icsp", action="store_true", help="drop semantic prediction")
    p = argparse.ArgumentParser(prog="scnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="train a model")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", help="JSONL dataset (defaults to eval_path)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check")
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("ablate", parents=[common], help="SCT x ICSP grid")
    return p


def _config(args):
    over = {"seed": args.seed, "preset": args.preset, "out_dir": args.out}
    if args.no_sct:
        over["use_sct"] = False
    if args.no_icsp:
        over["use_icsp"] = False
    try:
        return load_config(args.config, **over)
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read config {args.config}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _datasets(cfg):
    """(train, eval) instance lists from files, or synthesised when no path is set."""
    table = word_table(cfg)
    if cfg.train_path:
        tr = load_dataset(cfg.train_path)
        ev = load_dataset(cfg.eval_path) if cfg.eval_path else []
        return tr, ev, table
    tr, ev, _, _ = synthetic_splits(cfg, table=table)
    return tr, ev, table


def cmd_train(cfg) -> int:
    tr, ev, table = _datasets(cfg)
    res = train(cfg, tr, ev or None, out_dir=cfg.out_dir, table=table)
    summary = {"iterations": res.iterations, "initial_loss": res.initial_loss,
               "final_loss": res.final_loss, "tf_accuracy": res.tf_accuracy,
               "metrics": res.metrics}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg, checkpoint, dataset) -> int:
    path = dataset or cfg.eval_path
    if not path:
        raise UsageError("eval needs --dataset or eval_path in the config")
    instances = load_dataset(path)
    ckpt = Path(checkpoint)
    model = load_model(cfg, ckpt.parent, ckpt)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, instances, cfg, out / "predictions.jsonl")
    (out / "metrics.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    tr, _, table = _datasets(cfg)
    run = run_gradcheck(cfg, tr, build_model(cfg, tr, table))
    rep = run.report
    for name in sorted(rep.max_rel_err):
        print(f"{name:<48} {rep.max_rel_err[name]:.3e}  ({rep.checked[name]}/{rep.sizes[name]})")
    print(f"max_rel_err={rep.worst:.3e} coverage={run.coverage:.0%} "
          f"clamped={run.clamped} seconds={run.seconds:.1f}")
    if not run.passed:
        worst = rep.failing(run.tol)[:10]
        print("FAIL: parameters above tolerance " + ", ".join(f"{n}={e:.2e}" for n, e in worst),
              file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_synth(cfg) -> int:
    tr, ev, _, _ = synthetic_splits(cfg, table=word_table(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.jsonl", tr)
    if ev:
        save_dataset(out / "eval.jsonl", ev)
    model = build_model(cfg, tr, word_table(cfg))
    save_run_files(out, cfg, model)
    print(json.dumps({"train": len(tr), "eval": len(ev),
                      "reachability": reachability(tr, model.vocab)}, sort_keys=True))
    return EXIT_OK


def cmd_ablate(cfg) -> int:
    out = Path(cfg.out_dir)
    all_rows = []
    for seed in cfg.ablation_seeds:
        scfg = replace(cfg, seed=seed)
        tr, ev, table = _datasets(scfg)
        rows = ablate(scfg, tr, ev, out_dir=out / f"seed{seed}", table=table)
        print(f"seed {seed}")
        print(format_table(rows))
        all_rows.extend(dict(r, seed=seed) for r in rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(all_rows, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = _config(args)
        if args.verb == "train":
            return cmd_train(cfg)
        if args.verb == "eval":
            return cmd_eval(cfg, args.checkpoint, args.dataset)
        if args.verb == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.verb == "synth":
            return cmd_synth(cfg)
        return cmd_ablate(cfg)
    except UsageError as exc:
        print(f"scnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"scnet: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except (OSError, DatasetError, CheckpointError, WordVectorError) as exc:
        print(f"scnet: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
