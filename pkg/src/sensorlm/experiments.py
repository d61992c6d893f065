"""Experiment harnesses: modality-ratio and task-ratio ablations, few-shot
transfer to held-out tasks, and the model-size scaling run.

Each harness trains one model per grid cell, evaluates deterministically,
and returns a grid of metric reports carrying the seeds and data digests
needed to reproduce any cell in isolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .adapter import parameter_counts
from .data import (apply_modality_ratio, fewshot_subset, gen_task_data, fnv1a64,
                   split_dataset)
from .tasks import error_form, registry_default, registry_by_name
from .train import (TrainConfig, evaluate, fork_model, model_from_config,
                    pretrain_multitask)

MODALITY_LEVELS = ("single", 0.25, 0.5, 1.0)
TASK_LEVELS = ("single", 0.25, 0.5, 1.0)
FEWSHOT_KS = (0, 5, 10, 20)
SIZE_PRESETS = ("tiny", "small", "medium")

SPLIT = (0.8, 0.0, 0.2)
SPLIT_WITH_VAL = (0.7, 0.15, 0.15)


@dataclass
class ExperimentCell:
    axis_value: object
    seed: int
    task_id: int
    task_name: str
    report: dict
    data_digest: str
    extra: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    kind: str
    axis: str
    axis_values: list
    seeds: list
    cells: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind, "axis": self.axis,
            "axis_values": list(self.axis_values), "seeds": list(self.seeds),
            "cells": [cell.__dict__ for cell in self.cells],
        }, sort_keys=True, indent=1)

    def cell_values(self, axis_value, task_name: str, error: bool = True,
                    registry=None) -> list:
        spec = registry_by_name(registry)[task_name]
        out = []
        for c in self.cells:
            if c.axis_value == axis_value and c.task_name == task_name:
                v = c.report["value"]
                out.append(error_form(spec, v) if error else v)
        return out

    def mean_error(self, axis_value, task_name: str, registry=None) -> float:
        vals = self.cell_values(axis_value, task_name, registry=registry)
        if not vals:
            raise nn.ContractError(f"no cells at {axis_value!r} for {task_name!r}")
        return float(np.mean(vals))


def _dataset_digest(samples) -> str:
    ids = ",".join(s.sample_id for s in samples)
    return fnv1a64(ids.encode("utf-8"))


def _gen_splits(task_names, n_per_task: int, seed: int, noise_scale: float,
                registry, fractions=SPLIT):
    by_name = registry_by_name(registry)
    train, val, test = {}, {}, {}
    for name in task_names:
        spec = by_name[name]
        samples = gen_task_data(name, n_per_task, seed, noise_scale, registry)
        tr, va, te = split_dataset(samples, fractions, seed)
        train[spec.task_id] = tr
        val[spec.task_id] = va
        test[spec.task_id] = te
    return train, val, test


def ablate_modality_ratio(base_config: TrainConfig, levels=MODALITY_LEVELS,
                          seeds=(0, 1, 2), n_per_task: int = 240,
                          noise_scale: float = 0.05, registry=None) -> ExperimentResult:
    """Train one model per (modality-ratio level, seed); identical seeds
    share identical base datasets across levels."""
    if len(levels) < 2:
        raise nn.ContractError("need at least two ratio levels")
    registry = registry if registry is not None else registry_default()
    result = ExperimentResult(kind="modality_ratio", axis="modality_ratio",
                              axis_values=list(levels), seeds=list(seeds))
    for seed in seeds:
        base_train, _, test = _gen_splits(base_config.tasks, n_per_task, seed,
                                          noise_scale, registry)
        base_digest = {tid: _dataset_digest(ds) for tid, ds in base_train.items()}
        for level in levels:
            cfg = replace(base_config, seed=seed, modality_ratio=level)
            train_sets = {tid: apply_modality_ratio(ds, level, seed, registry)
                          for tid, ds in base_train.items()}
            model = model_from_config(cfg, registry)
            pretrain_multitask(model, train_sets, cfg)
            for report in evaluate(model, test):
                result.cells.append(ExperimentCell(
                    axis_value=level, seed=seed, task_id=report.task_id,
                    task_name=report.task_name, report=report.__dict__,
                    data_digest=base_digest[report.task_id]))
    return result


def nested_task_sets(probe: str, levels=TASK_LEVELS, registry=None) -> dict:
    """Nested co-training sets per level: probe first, then tasks in name
    order; 25% = 2 of 8, 50% = 4, all = 8."""
    registry = registry if registry is not None else registry_default()
    names = [s.name for s in registry]
    if probe not in names:
        raise nn.ContractError(f"unknown probe task {probe!r}")
    order = [probe] + [n for n in names if n != probe]
    out = {}
    for level in levels:
        if level == "single":
            out[level] = tuple(order[:1])
        else:
            count = max(1, int(round(float(level) * len(order))))
            out[level] = tuple(order[:count])
    return out


def ablate_task_ratio(base_config: TrainConfig, probe_task: str = "gaze",
                      levels=TASK_LEVELS, seeds=(0, 1, 2), n_per_task: int = 240,
                      noise_scale: float = 0.05, registry=None) -> ExperimentResult:
    """Co-train nested task subsets and evaluate the probe task."""
    registry = registry if registry is not None else registry_default()
    task_sets = nested_task_sets(probe_task, levels, registry)
    probe_spec = registry_by_name(registry)[probe_task]
    result = ExperimentResult(kind="task_ratio", axis="task_ratio",
                              axis_values=list(levels), seeds=list(seeds))
    for seed in seeds:
        all_names = task_sets[levels[-1]]
        train, _, test = _gen_splits(all_names, n_per_task, seed, noise_scale, registry)
        for level in levels:
            names = task_sets[level]
            cfg = replace(base_config, seed=seed, tasks=names)
            model = model_from_config(cfg, registry)
            ids = [registry_by_name(registry)[n].task_id for n in names]
            pretrain_multitask(model, {tid: train[tid] for tid in ids}, cfg)
            report = evaluate(model, {probe_spec.task_id: test[probe_spec.task_id]})[0]
            result.cells.append(ExperimentCell(
                axis_value=level, seed=seed, task_id=report.task_id,
                task_name=report.task_name, report=report.__dict__,
                data_digest=_dataset_digest(train[probe_spec.task_id]),
                extra={"cotrained": list(names)}))
    return result


def fewshot_eval(base_config: TrainConfig, target_tasks=("gaze", "touch"),
                 k_levels=FEWSHOT_KS, seeds=(0, 1, 2), n_per_task: int = 240,
                 adapt_steps: int | None = None, noise_scale: float = 0.05,
                 registry=None) -> ExperimentResult:
    """Pretrain without the target tasks, then adapt a cloned model on k
    examples per target (k=0 evaluates the untouched zero-init head)."""
    registry = registry if registry is not None else registry_default()
    by_name = registry_by_name(registry)
    for t in target_tasks:
        if t in base_config.tasks:
            raise nn.ContractError(f"target task {t!r} leaked into the pretraining set")
    adapt_steps = base_config.adapt_steps if adapt_steps is None else adapt_steps
    result = ExperimentResult(kind="fewshot", axis="k", axis_values=list(k_levels),
                              seeds=list(seeds))
    for seed in seeds:
        cfg = replace(base_config, seed=seed)
        source_train, _, _ = _gen_splits(cfg.tasks, n_per_task, seed, noise_scale, registry)
        model = model_from_config(cfg, registry)
        pretrain_multitask(model, source_train, cfg)
        source_blob = nn.params_serialize(model.params)
        for target in target_tasks:
            spec = by_name[target]
            pool, _, test = _gen_splits([target], n_per_task, seed + 1000,
                                        noise_scale, registry)
            digest = _dataset_digest(pool[spec.task_id])
            for k in k_levels:
                adapted = fork_model(model)
                if k > 0:
                    shots = fewshot_subset(pool[spec.task_id], k, seed, registry)
                    batch = min(cfg.batch_size, k)
                    steps_per_epoch = -(-k // batch)
                    epochs = -(-adapt_steps // steps_per_epoch)
                    adapt_cfg = replace(cfg, epochs=epochs, batch_size=batch,
                                        tasks=(target,))
                    pretrain_multitask(adapted, {spec.task_id: shots}, adapt_cfg)
                report = evaluate(adapted, {spec.task_id: test[spec.task_id]})[0]
                result.cells.append(ExperimentCell(
                    axis_value=k, seed=seed, task_id=spec.task_id,
                    task_name=target, report=report.__dict__, data_digest=digest,
                    extra={"adapt_steps": 0 if k == 0 else adapt_steps}))
        if nn.params_serialize(model.params) != source_blob:
            raise nn.ContractError("few-shot adaptation mutated the source model")
    return result


def scaling_run(base_config: TrainConfig, presets=SIZE_PRESETS, seeds=(0, 1, 2),
                n_per_task: int = 120, noise_scale: float = 0.05,
                registry=None) -> ExperimentResult:
    """Identical data and schedule across the size ladder; reports include
    parameter counts and the mean validation loss."""
    registry = registry if registry is not None else registry_default()
    result = ExperimentResult(kind="scaling", axis="lm_preset",
                              axis_values=list(presets), seeds=list(seeds))
    for seed in seeds:
        train, val, test = _gen_splits(base_config.tasks, n_per_task, seed,
                                       noise_scale, registry, fractions=SPLIT_WITH_VAL)
        digestes = {tid: _dataset_digest(ds) for tid, ds in train.items()}
        for preset in presets:
            cfg = replace(base_config, seed=seed, lm_preset=preset)
            model = model_from_config(cfg, registry)
            counts = parameter_counts(model)
            pretrain_multitask(model, train, cfg)
            val_loss = validation_loss(model, val)
            for report in evaluate(model, test):
                result.cells.append(ExperimentCell(
                    axis_value=preset, seed=seed, task_id=report.task_id,
                    task_name=report.task_name, report=report.__dict__,
                    data_digest=digestes[report.task_id],
                    extra={"params_frozen": counts["frozen"],
                           "params_trainable": counts["trainable"],
                           "val_loss": val_loss}))
    return result


def validation_loss(model, datasets: dict) -> float:
    """Mean per-sample task loss across all validation sets."""
    from . import autodiff as ad
    from .adapter import merged_forward
    from .tasks import task_loss
    total, count = 0.0, 0
    with ad.no_grad():
        for task_id in sorted(datasets):
            spec = model.spec(task_id)
            for s in datasets[task_id]:
                out = merged_forward(model, s, task_id)
                total += task_loss(spec, out.head_output, s.label).item()
                count += 1
    return total / max(count, 1)


def scaling_param_counts(result: ExperimentResult) -> dict:
    counts = {}
    for c in result.cells:
        counts[c.axis_value] = c.extra["params_frozen"] + c.extra["params_trainable"]
    return counts


def mean_val_loss(result: ExperimentResult, preset: str) -> float:
    vals = [c.extra["val_loss"] for c in result.cells if c.axis_value == preset]
    seen = {}
    for c in result.cells:
        if c.axis_value == preset:
            seen[(c.seed,)] = c.extra["val_loss"]
    return float(np.mean(list(seen.values()))) if seen else float(np.mean(vals))
