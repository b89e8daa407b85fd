"""Command line entry point: ``seqground {gen,train,eval,ablate,audit}``.

Failures exit nonzero and print one JSON object on stderr::

    {"error": "ConfigError", "message": "..."}
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import taskgen
from .grounder import GrounderParams
from .harness.ablation import DEFAULT_SEEDS, run_ablation_grid
from .harness.config import ConfigError, ExperimentConfig, load_mapping
from .harness.metrics import evaluate
from .harness.report import report_emit
from .harness.training import train

log = logging.getLogger("seqground")


def _load_tasks(path) -> tuple[list, taskgen.Vocab]:
    tasks, vocab = taskgen.loads(Path(path).read_text())
    if vocab is None:
        raise taskgen.DatasetFormatError(f"{path}: header carries no vocabulary")
    return tasks, vocab


def cmd_gen(args) -> int:
    spec = taskgen.GenSpec.from_dict(load_mapping(args.spec))
    tasks = taskgen.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr, ev = taskgen.split(tasks, spec.seed, args.train_fraction)
    taskgen.serialize(tr, out / "train.jsonl", spec.vocab)
    taskgen.serialize(ev, out / "eval.jsonl", spec.vocab)
    print(json.dumps({"train": str(out / "train.jsonl"), "eval": str(out / "eval.jsonl"),
                      "n_train": len(tr), "n_eval": len(ev)}, sort_keys=True))
    return 0


def cmd_audit(args) -> int:
    tasks, vocab = _load_tasks(args.data)
    rep = taskgen.solvability_audit(tasks, vocab, args.distractors)
    doc = rep.to_dict()
    doc.pop("seconds")
    print(json.dumps(doc, sort_keys=True))
    return 0 if rep.ok else 1


def _config(path, overrides) -> ExperimentConfig:
    d = load_mapping(path)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        d[key] = yaml.safe_load(value)
    return ExperimentConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = _config(args.config, args.set)
    if not cfg.train_path or not cfg.output_dir:
        raise ConfigError("train needs train_path and output_dir")
    tasks, vocab = _load_tasks(cfg.train_path)
    result = train(cfg, tasks, vocab)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.params.save(out / "checkpoint.json")
    (out / "loss_curve.json").write_text(json.dumps({"config_hash": cfg.hash(), "seed": cfg.seed,
                                                     "loss_curve": result.loss_curve}, sort_keys=True) + "\n")
    print(json.dumps({"checkpoint": str(out / "checkpoint.json"), "final_loss":
                      result.loss_curve[-1] if result.loss_curve else None}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    params = GrounderParams.load(args.checkpoint)
    tasks, _ = _load_tasks(args.data)
    rep = evaluate(params, tasks)
    written = report_emit(rep, args.out, config={"checkpoint_digest": params.digest(), "data": Path(args.data).name})
    print(json.dumps({"s_acc": rep.s_acc, "t_acc": rep.t_acc, "files": [str(p) for p in written]}, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    grid = load_mapping(args.grid)
    base = dict(grid.get("base", {}))
    variants = grid.get("variants")
    if not variants:
        raise ConfigError("grid needs a non-empty 'variants' list")
    configs = [ExperimentConfig.from_dict({**base, **(v if isinstance(v, dict) else {"variant": v})})
               for v in variants]
    train_path, eval_path = configs[0].train_path, configs[0].eval_path
    if not train_path or not eval_path:
        raise ConfigError("grid base needs train_path and eval_path")
    train_set, vocab = _load_tasks(train_path)
    eval_set, _ = _load_tasks(eval_path)
    table = run_ablation_grid(configs, train_set, eval_set, vocab, grid.get("seeds", list(DEFAULT_SEEDS)),
                              grid.get("baseline"))
    out = args.out or configs[0].output_dir or "."
    written = report_emit(table, out)
    print(Path(out, "comparison.txt").read_text(), end="")
    log.info("wrote %s", ", ".join(str(p) for p in written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqground", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset from a GenSpec file")
    g.add_argument("spec")
    g.add_argument("--out", required=True)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model from an experiment config")
    t.add_argument("config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a variant x seed grid and emit a comparison table")
    a.add_argument("grid")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    u = sub.add_parser("audit", help="check a dataset's solvability invariants")
    u.add_argument("data")
    u.add_argument("--distractors", type=int, default=3)
    u.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, taskgen.SpecError, taskgen.DatasetFormatError, ValueError, OSError, KeyError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
