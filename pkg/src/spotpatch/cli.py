"""Command-line entry point: ``spotpatch <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .estimator import evaluate_map
from .exceptions import SpotPatchError
from .model import SourceModel
from .patch_format import FILE_EXTENSION, DeployedPatch, footprint, inspect
from .patching import PatchMode, forward_deployed

log = logging.getLogger("spotpatch")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, mode=args.mode, lambda_sps=args.lambda_sps,
                              lambda_adp=args.lambda_adp, bit_mode=args.bit_mode)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


def _load_source(args, cfg) -> SourceModel:
    path = Path(args.source) if args.source else Path(args.out_dir) / harness.SOURCE_NAME
    if path.exists():
        return SourceModel.load(path)
    log.info("no source model at %s; training one", path)
    model = harness.train_source(cfg)
    model.save(_out_dir(args) / harness.SOURCE_NAME)
    return model


def cmd_gen_data(args):
    cfg = _config(args)
    out = _out_dir(args)
    written = []
    for name, spec in [("source", harness.source_task(cfg))] + [
            (t.name, harness.task_spec(cfg, t)) for t in cfg.tasks]:
        if args.task and name not in args.task:
            continue
        for split in ("train", "eval"):
            path = out / f"{name}_{split}.npz"
            harness.gen_task(spec, split=split).save(path)
            written.append(str(path))
    _print_json({"written": written})


def cmd_train_source(args):
    cfg = _config(args)
    out = _out_dir(args)
    model = harness.train_source(cfg)
    model.save(out / harness.SOURCE_NAME)
    _print_json({"source": str(out / harness.SOURCE_NAME), "layers": len(model.layers),
                 "params": model.num_params()})


def cmd_train_patch(args):
    cfg = _config(args)
    out = _out_dir(args)
    model = _load_source(args, cfg)
    task = cfg.task(args.task) if args.task else cfg.tasks[0]
    est, result = harness.fit_task(model, task, cfg)
    report = harness.RunReport(cfg.to_dict(), [result], len(model.patchable_layers))
    if est.patch_ is not None:
        est.patch_.save(out / f"{task.name}{FILE_EXTENSION}")
    else:
        est.finetuned_.save(out / f"{task.name}_finetuned.npz")
    report.save(out / f"{task.name}_report.json")
    _print_json(result.to_dict())


def cmd_run_decathlon(args):
    cfg = _config(args)
    out = _out_dir(args)
    source = SourceModel.load(args.source) if args.source else None
    report = harness.run_decathlon(cfg, source, out)
    if args.sweep:
        model = source or SourceModel.load(out / harness.SOURCE_NAME)
        rows = harness.lambda_sweep(cfg, model)
        (out / harness.SWEEP_NAME).write_text(harness.sweep_csv(rows))
    summary = {"report": str(out / harness.REPORT_NAME), "total_footprint": report.total_footprint}
    if report.decathlon is not None:
        summary.update(score=report.decathlon.score,
                       score_per_footprint=report.decathlon.score_per_footprint)
    _print_json(summary)


def cmd_footprint(args):
    cfg = _config(args)
    if args.patch is None:
        raise SpotPatchError("footprint needs a patch file")
    model = _load_source(args, cfg)
    report = footprint(DeployedPatch.load(args.patch), model, cfg.footprint_mode)
    d = report.to_dict()
    d.update(mask_ratio=float(report.mask_ratio), float_ratio=float(report.float_ratio),
             ratio_exact=str(report.ratio_exact))
    _print_json(d)


def cmd_score(args):
    cfg = _config(args)
    if args.patch:
        model = _load_source(args, cfg)
        patch = DeployedPatch.load(args.patch)
        task = cfg.task(args.task) if args.task else cfg.tasks[0]
        _, ev = harness.task_data(cfg, task)
        m = evaluate_map(lambda xb: forward_deployed(model, patch, xb).data, ev.images,
                         ev.annotations, cfg.n_classes)
        _print_json({"task": task.name, "map50": m})
        return
    path = args.report or Path(args.out_dir) / harness.REPORT_NAME
    report = harness.RunReport.load(path)
    _print_json(harness.decathlon_score(report).to_dict())


def cmd_inspect_patch(args):
    if args.patch is None:
        raise SpotPatchError("inspect-patch needs a patch file")
    _print_json(inspect(DeployedPatch.load(args.patch)))


def cmd_dump_gates(args):
    path = args.report or Path(args.out_dir) / harness.REPORT_NAME
    report = harness.RunReport.load(path)
    target = Path(args.output) if args.output else _out_dir(args) / harness.GATES_NAME
    harness.dump_gates(report, target)
    print(target)


COMMANDS = {
    "gen-data": (cmd_gen_data, "write source and task datasets (.npz)"),
    "train-source": (cmd_train_source, "train the source detector"),
    "train-patch": (cmd_train_patch, "train one task patch against the source"),
    "run-decathlon": (cmd_run_decathlon, "patch every task and score against fine-tuning"),
    "footprint": (cmd_footprint, "relative footprint of a patch file"),
    "score": (cmd_score, "decathlon score of a report, or mAP of a patch on a task"),
    "inspect-patch": (cmd_inspect_patch, "print the layer table of a patch file"),
    "dump-gates": (cmd_dump_gates, "write the gate heatmap (PGM) of a report"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="runs")
    common.add_argument("--mode", choices=[m.value for m in PatchMode])
    common.add_argument("--lambda-sps", type=float)
    common.add_argument("--lambda-adp", type=float)
    common.add_argument("--bit-mode", type=int, choices=(32, 8))
    common.add_argument("--source", help="source model (.npz); defaults to OUT_DIR/source.npz")
    common.add_argument("--task", action="append", help="task name (repeatable for gen-data)")
    common.add_argument("--patch", help="patch file (.sptp)")
    common.add_argument("--report", help="run report (JSON)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="spotpatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn)
        if name == "run-decathlon":
            p.add_argument("--sweep", action="store_true", help="also run the lambda_sps sweep")
        if name == "dump-gates":
            p.add_argument("-o", "--output", help="PGM path; defaults to OUT_DIR/gates.pgm")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.task and args.command not in ("gen-data",):
        args.task = args.task[-1]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (SpotPatchError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
