"""Command-line entry point: ``kernmix {split,train,grid,eval,gain}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import tomli

from . import backbone, data, harness
from .kernel_classifier import CenterBank


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _config(args) -> harness.TrainConfig:
    cfg = harness.TrainConfig.load(args.config) if args.config else harness.TrainConfig()
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = _parse_value(value.strip())
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_split(args) -> dict:
    cfg = _config(args)
    train, _ = harness.load_datasets(cfg)
    if args.folds:
        plan = data.folds(train, args.folds, cfg.split_seed, cfg.fold_mode)
        data.write_manifest(args.out, plan, dataset=cfg.dataset, n=len(train))
        return {"manifest": str(args.out), "folds": [len(f) for f in plan.folds]}
    labelled, pool = data.stratified_subsample(train, cfg.labeled_fraction, cfg.split_seed)
    data.write_manifest(args.out, dataset=cfg.dataset, n=len(train), seed=cfg.split_seed,
                        fraction=cfg.labeled_fraction, labeled=labelled.tolist(),
                        unlabeled=pool.tolist())
    return {"manifest": str(args.out), "labeled": len(labelled), "unlabeled": len(pool)}


def cmd_train(args) -> dict:
    cfg = _config(args)
    result = harness.train(cfg, return_artifacts=True)
    out = Path(args.out)
    result.record.save(out)
    (out / "config.toml").write_text(cfg.to_toml())
    backbone.save_checkpoint(result.net, out / "model.ckpt", {"config_hash": cfg.config_hash()})
    if result.bank is not None:
        result.bank.save(out / "bank.kmgk", cfg.kernel)
    return {"out": str(out), "final_accuracy": result.record.final_accuracy,
            "config_hash": cfg.config_hash()}


def cmd_grid(args) -> dict:
    sweep = harness.sweep_from_toml(Path(args.sweep).read_text())
    runs, rows = harness.grid(sweep, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, run in enumerate(runs):
        if run["record"] is not None:
            run["record"].save(out / f"run_{i:03d}")
    index = [{k: v for k, v in r.items() if k != "record"} for r in runs]
    (out / "runs.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    (out / "summary.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    for row in rows:
        print(f"{json.dumps(row['cell'], sort_keys=True)}\t{row.get('display', 'failed')}")
    return {"out": str(out), "runs": len(runs), "failed": sum(r["error"] is not None for r in runs)}


def cmd_eval(args) -> dict:
    cfg = _config(args)
    net, _ = backbone.load_checkpoint(args.checkpoint)
    _, test = harness.load_datasets(cfg)
    if args.bank:
        bank, kcfg = CenterBank.load(args.bank)
        acc = harness.evaluate(net, bank, kcfg or cfg.kernel, test)
    else:
        acc = harness.evaluate(net, None, cfg.kernel, test, use_logits=True)
    return {"accuracy": acc}


def cmd_gain(args) -> dict:
    gain = harness.relative_gain(args.baseline, args.new)
    print(f"{gain:.2f}")
    return {"gain": round(gain, 2)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kernmix", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="TOML training config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. kernel.sigma=10")
        return sp

    sp = with_config(sub.add_parser("split", help="write a labelled/unlabelled split manifest"))
    sp.add_argument("--folds", type=int, default=0, help="emit stratified folds instead")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = with_config(sub.add_parser("train", help="run one experiment"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grid", help="run a sweep")
    sp.add_argument("--sweep", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_grid)

    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint on the test set"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bank", help="center bank file; omit to use the logit head")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gain", help="relative gain of NEW over BASELINE accuracy")
    sp.add_argument("baseline", type=float)
    sp.add_argument("new", type=float)
    sp.set_defaults(func=cmd_gain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    if args.command != "gain":
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
