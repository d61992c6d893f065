"""Command-line surface: data generation, the two training stages,
evaluation, the four experiment harnesses, the dialog REPL, and the
gradient checker.

Every run writes a manifest (config echo, seeds, file digests) beside its
outputs, carries no timestamps, and is a pure function of its inputs.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import nn
from .adapter import merged_forward, parameter_counts, trainable_params
from .chat import chat_repl
from .data import (DEFAULT_NOISE, fnv1a64, gen_task_data, make_instruction_pairs,
                   read_records, split_dataset, write_records, RecordFormatError)
from .encoders import DataError
from .experiments import (FEWSHOT_KS, MODALITY_LEVELS, SIZE_PRESETS, TASK_LEVELS,
                          ablate_modality_ratio, ablate_task_ratio, fewshot_eval,
                          mean_val_loss, scaling_run)
from .lm import LM_PRESETS
from .tasks import registry_by_name, registry_default, task_loss
from .train import (Checkpoint, NumericFailure, TrainConfig, checkpoint_load,
                    checkpoint_save, evaluate, instruct_tune, make_checkpoint,
                    model_from_checkpoint, model_from_config, pretrain_multitask)

SPLITS = ("train", "val", "test")
DEFAULT_SPLIT = (0.8, 0.1, 0.1)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _digest_file(path) -> str:
    with open(path, "rb") as fh:
        return fnv1a64(fh.read())


def _write_manifest(out_dir, command: str, config: dict, seeds, inputs: dict,
                    outputs) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "input_digests": inputs,
        "output_digests": {os.path.basename(p): _digest_file(p) for p in outputs},
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = TrainConfig.from_dict(json.load(fh))
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _task_names(arg: str, registry) -> list[str]:
    names = [s.name for s in registry]
    if arg == "all":
        return names
    chosen = [t.strip() for t in arg.split(",") if t.strip()]
    for t in chosen:
        if t not in names:
            raise UsageError(f"unknown task {t!r} (choose from {names})")
    return chosen


def _data_path(data_dir, task: str, split: str, instructions: bool = False) -> str:
    stem = f"{task}.instr.{split}.jsonl" if instructions else f"{task}.{split}.jsonl"
    return os.path.join(data_dir, stem)


def _load_split(data_dir, names, split: str, registry, instructions: bool = False):
    by_name = registry_by_name(registry)
    out = {}
    for name in names:
        path = _data_path(data_dir, name, split, instructions)
        if not os.path.exists(path):
            raise DataError(f"missing data file {path}; run gen-data first")
        out[by_name[name].task_id] = read_records(path, strip_latent=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    registry = registry_default()
    names = _task_names(args.tasks, registry)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    digests = {}
    for name in names:
        samples = gen_task_data(name, args.n, args.seed, args.noise, registry)
        parts = split_dataset(samples, DEFAULT_SPLIT, args.seed)
        for split, part in zip(SPLITS, parts):
            path = _data_path(args.out, name, split)
            man = write_records(path, part, seed=args.seed, noise_scale=args.noise)
            outputs.append(path)
            digests.update(man.digests)
            if part:
                pairs = make_instruction_pairs(part, template_seed=args.seed)
                ipath = _data_path(args.out, name, split, instructions=True)
                iman = write_records(ipath, pairs, seed=args.seed, noise_scale=args.noise)
                outputs.append(ipath)
                digests.update(iman.digests)
    _write_manifest(args.out, "gen-data",
                    {"tasks": names, "n": args.n, "noise": args.noise},
                    [args.seed], {}, outputs)
    print(f"wrote {len(outputs)} files for {len(names)} tasks to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    registry = registry_default()
    cfg = _load_config(args)
    datasets = _load_split(args.data, cfg.tasks, "train", registry)
    model = model_from_config(cfg, registry)
    state, log = pretrain_multitask(model, datasets, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "pretrained.ckpt")
    checkpoint_save(ckpt_path, make_checkpoint(model, state, cfg, log))
    log_path = os.path.join(args.out, "train_log.txt")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(log) + "\n")
    inputs = {os.path.basename(_data_path(args.data, t, "train")):
              _digest_file(_data_path(args.data, t, "train")) for t in cfg.tasks}
    _write_manifest(args.out, "pretrain", cfg.to_dict(), [cfg.seed], inputs,
                    [ckpt_path, log_path])
    print(f"pretrained {len(cfg.tasks)} tasks for {cfg.epochs} epochs -> {ckpt_path}")
    counts = parameter_counts(model)
    print(f"params: frozen={counts['frozen']} trainable={counts['trainable']}")
    return 0


def _cmd_tune(args) -> int:
    registry = registry_default()
    ckpt = checkpoint_load(args.checkpoint)
    model, state, cfg = model_from_checkpoint(ckpt, registry)
    if getattr(args, "config", None):
        cfg = _load_config(args)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    datasets = _load_split(args.data, cfg.tasks, "train", registry, instructions=True)
    state, log = instruct_tune(model, datasets, cfg)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "tuned.ckpt")
    checkpoint_save(out_path, make_checkpoint(model, state, cfg, log))
    inputs = {"checkpoint": _digest_file(args.checkpoint)}
    _write_manifest(args.out, "tune", cfg.to_dict(), [cfg.seed], inputs, [out_path])
    print(f"instruction-tuned -> {out_path}")
    return 0


def _cmd_eval(args) -> int:
    registry = registry_default()
    ckpt = checkpoint_load(args.checkpoint)
    model, _, cfg = model_from_checkpoint(ckpt, registry)
    names = _task_names(args.tasks, registry) if args.tasks else list(cfg.tasks)
    datasets = _load_split(args.data, names, args.split, registry)
    reports = evaluate(model, datasets)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "reports.jsonl")
    with open(report_path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json_line() + "\n")
            print(f"{r.task_name}: {r.metric}={r.value:.4f} {r.units} "
                  f"(n={r.sample_count})")
    inputs = {"checkpoint": _digest_file(args.checkpoint)}
    _write_manifest(args.out, "eval", cfg.to_dict(), [cfg.seed], inputs, [report_path])
    return 0


def _print_grid(result, error: bool = False) -> None:
    tasks_in_grid = sorted({c.task_name for c in result.cells})
    print(f"{result.axis:>16s} | " + " | ".join(f"{t:>10s}" for t in tasks_in_grid))
    for level in result.axis_values:
        row = []
        for t in tasks_in_grid:
            vals = result.cell_values(level, t, error=error)
            row.append(f"{np.mean(vals):10.4f}" if vals else " " * 10)
        print(f"{str(level):>16s} | " + " | ".join(row))


def _run_experiment(args, kind: str) -> int:
    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    registry = registry_default()
    if kind == "ablate-modality":
        result = ablate_modality_ratio(cfg, seeds=seeds, n_per_task=args.n,
                                       registry=registry)
    elif kind == "ablate-task":
        result = ablate_task_ratio(cfg, probe_task=args.probe, seeds=seeds,
                                   n_per_task=args.n, registry=registry)
    elif kind == "fewshot":
        targets = tuple(t.strip() for t in args.targets.split(","))
        source = tuple(t for t in cfg.tasks if t not in targets)
        cfg.tasks = source
        result = fewshot_eval(cfg, target_tasks=targets, seeds=seeds,
                              n_per_task=args.n, registry=registry)
    elif kind == "scale":
        result = scaling_run(cfg, seeds=seeds, n_per_task=args.n, registry=registry)
    else:
        raise UsageError(f"unknown experiment {kind!r}")
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"{result.kind}.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(result.to_json() + "\n")
    _print_grid(result)
    if kind == "scale":
        for preset in result.axis_values:
            print(f"val_loss[{preset}] = {mean_val_loss(result, preset):.4f}")
    _write_manifest(args.out, kind, cfg.to_dict(), seeds, {}, [out_path])
    return 0


def _cmd_chat(args) -> int:
    registry = registry_default()
    ckpt = checkpoint_load(args.checkpoint)
    model, _, _ = model_from_checkpoint(ckpt, registry)
    if args.script:
        with open(args.script, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        return chat_repl(model, lines, interactive=False)
    return chat_repl(model, sys.stdin, interactive=True)


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    ok = run_gradcheck(seed=args.seed if args.seed is not None else 0, out=print)
    return 0 if ok else 3


def build_parser() -> _Parser:
    parser = _Parser(prog="sensorlm", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", default=None, help="JSON file of TrainConfig fields")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("gen-data", help="generate synthetic task datasets")
    p.add_argument("--tasks", default="all")
    p.add_argument("--n", type=int, default=240)
    p.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out/data")

    p = sub.add_parser("pretrain", help="stage-one multitask pretraining")
    common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("tune", help="stage-two instruction tuning")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", default=None)
    p.add_argument("--split", default="test", choices=SPLITS)

    for kind in ("ablate-modality", "ablate-task", "fewshot", "scale"):
        p = sub.add_parser(kind)
        common(p)
        p.add_argument("--seeds", default="0,1,2")
        p.add_argument("--n", type=int, default=240)
        if kind == "ablate-task":
            p.add_argument("--probe", default="gaze")
        if kind == "fewshot":
            p.add_argument("--targets", default="gaze,touch")

    p = sub.add_parser("chat", help="sensor-grounded dialog")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--script", default=None, help="replay questions from a file")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage()
            return 1
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "tune":
            return _cmd_tune(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command in ("ablate-modality", "ablate-task", "fewshot", "scale"):
            return _run_experiment(args, args.command)
        if args.command == "chat":
            return _cmd_chat(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        parser.print_usage()
        return 1
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (nn.ContractError, json.JSONDecodeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (nn.FormatError, RecordFormatError, DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
