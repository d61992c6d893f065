"""The eight-task registry, task heads, losses, and evaluation metrics.

Metric functions are pure numpy and deliberately direct, so the test
suite can pit them against independently written brute-force oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoders import ModalityKind

EVENT_THRESHOLD = 0.5

GESTURE_CLASSES = ("nod", "shake", "tilt", "lean", "roll")
TOUCH_CLASSES = ("palm", "fist", "thumb", "index", "middle", "ring", "pinky",
                 "edge", "knuckle", "swipe", "spread", "grab", "flat", "hover")
EVENT_CLASSES = ("knocking", "coughing", "typing", "alarm", "doorbell",
                 "water", "music", "other")
ACTIVITY_CLASSES = ("walking", "running", "jumping", "sitting", "dancing", "climbing")

DEPTH_GRID = (16, 16)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    modalities: tuple
    head: str                 # regression | classification | grid_regression
    out_dim: int
    metric: str
    units: str
    lower_better: bool
    classes: tuple = ()
    point_dim: int = 0        # grouping for euclidean metrics (2 or 3)
    grid_shape: tuple = ()
    label_note: str = ""

    @property
    def is_classification(self) -> bool:
        return self.head == "classification"


def _specs_unsorted():
    M = ModalityKind
    return [
        ("gaze", dict(modalities=(M.IMAGE, M.DEPTH, M.IMU), head="regression", out_dim=2,
                      metric="mean_euclidean", units="cm", lower_better=True, point_dim=2)),
        ("depth", dict(modalities=(M.IMAGE, M.GPS, M.IMU, M.CAMERA_META), head="grid_regression",
                       out_dim=DEPTH_GRID[0] * DEPTH_GRID[1], metric="mae", units="mm",
                       lower_better=True, grid_shape=DEPTH_GRID)),
        ("gesture", dict(modalities=(M.GAZE, M.IMU), head="classification",
                         out_dim=len(GESTURE_CLASSES), metric="accuracy", units="%",
                         lower_better=False, classes=GESTURE_CLASSES)),
        ("pose", dict(modalities=(M.IMAGE, M.IMU), head="regression", out_dim=72,
                      metric="mean_euclidean", units="cm", lower_better=True, point_dim=3,
                      label_note="joint-angle triplets treated as 3D points in label units")),
        ("touch", dict(modalities=(M.IMAGE, M.CAPACITANCE, M.DEPTH, M.POSE),
                       head="classification", out_dim=len(TOUCH_CLASSES), metric="accuracy",
                       units="%", lower_better=False, classes=TOUCH_CLASSES)),
        ("event", dict(modalities=(M.AUDIO, M.IMU), head="classification",
                       out_dim=len(EVENT_CLASSES), metric="event_f1", units="%",
                       lower_better=False, classes=EVENT_CLASSES)),
        ("activity", dict(modalities=(M.IMAGE, M.POSE, M.IMU), head="classification",
                          out_dim=len(ACTIVITY_CLASSES), metric="balanced_accuracy",
                          units="%", lower_better=False, classes=ACTIVITY_CLASSES)),
        ("recon3d", dict(modalities=(M.IMAGE, M.CAPACITANCE, M.DEPTH), head="regression",
                         out_dim=63, metric="epe", units="mm", lower_better=True, point_dim=3)),
    ]


def registry_default() -> list[TaskSpec]:
    """The eight tasks with stable ids assigned in sorted-by-name order."""
    specs = sorted(_specs_unsorted(), key=lambda item: item[0])
    return [TaskSpec(task_id=i, name=name, **kw) for i, (name, kw) in enumerate(specs)]


def registry_by_name(registry=None) -> dict:
    registry = registry if registry is not None else registry_default()
    return {s.name: s for s in registry}


# ---------------------------------------------------------------------------
# heads


def init_head_params(registry, d: int, params: nn.ParamSet) -> None:
    # zero-init so an untouched head is a well-defined zero predictor
    for spec in registry:
        params.add(f"heads.{spec.name}.w", nn.zeros_param((d, spec.out_dim)))
        params.add(f"heads.{spec.name}.b", nn.zeros_param(spec.out_dim))


def head_apply(params: nn.ParamSet, spec: TaskSpec, readout: Tensor) -> Tensor:
    """Linear map from the [1, d] readout row to the task's output row.
    Classification heads emit logits."""
    return nn.linear_apply(params[f"heads.{spec.name}.w"], params[f"heads.{spec.name}.b"], readout)


def task_loss(spec: TaskSpec, head_output: Tensor, label) -> Tensor:
    if spec.is_classification:
        return nn.cross_entropy(head_output, [int(label)])
    target = np.asarray(label, dtype=np.float32).reshape(1, spec.out_dim)
    return nn.mse_loss(head_output, Tensor(target))


# ---------------------------------------------------------------------------
# metrics


def _check_pair(preds, targets):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ad.ShapeError(f"metric shapes differ: {list(preds.shape)} vs {list(targets.shape)}")
    return preds, targets


def metric_mean_euclidean(preds, targets, point_dim: int) -> float:
    """Mean over samples of the mean per-point euclidean distance, with
    rows grouped into points of ``point_dim`` coordinates."""
    preds, targets = _check_pair(preds, targets)
    n, d = preds.shape
    if d % point_dim != 0:
        raise ad.ShapeError(f"dim {d} not divisible into points of {point_dim}")
    pts = d // point_dim
    diff = (preds - targets).reshape(n, pts, point_dim)
    return float(np.sqrt((diff ** 2).sum(axis=2)).mean())


def metric_mae(preds, targets) -> float:
    preds, targets = _check_pair(preds, targets)
    return float(np.abs(preds - targets).mean())


def metric_accuracy(pred_ids, target_ids) -> float:
    pred_ids = list(pred_ids)
    target_ids = list(target_ids)
    if not pred_ids or len(pred_ids) != len(target_ids):
        raise nn.ContractError("accuracy needs equal-length non-empty id lists")
    return sum(p == t for p, t in zip(pred_ids, target_ids)) / len(pred_ids)


def metric_balanced_accuracy(pred_ids, target_ids, classes: int) -> float:
    """Mean per-class recall over the classes that actually occur."""
    pred_ids = list(pred_ids)
    target_ids = list(target_ids)
    if not pred_ids or len(pred_ids) != len(target_ids):
        raise nn.ContractError("balanced accuracy needs equal-length non-empty id lists")
    recalls = []
    for c in range(classes):
        support = [i for i, t in enumerate(target_ids) if t == c]
        if not support:
            continue
        recalls.append(sum(pred_ids[i] == c for i in support) / len(support))
    return float(np.mean(recalls))


def metric_event_f1(probs, target_ids, threshold: float = EVENT_THRESHOLD,
                    other_id: int = len(EVENT_CLASSES) - 1) -> float:
    """Macro F1 over event classes with confidence gating.

    A row counts as a predicted event only when its argmax probability
    reaches the threshold and the argmax is not the Other class. Classes
    that never occur in targets or predictions are excluded from the mean.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target_ids = list(target_ids)
    if probs.ndim != 2 or probs.shape[0] != len(target_ids):
        raise nn.ContractError("probs must be [n, classes] aligned with targets")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise nn.ContractError("probability rows must sum to 1")
    n, n_classes = probs.shape
    arg = probs.argmax(axis=1)
    confident = (probs.max(axis=1) >= threshold) & (arg != other_id)
    f1s = []
    for c in range(n_classes):
        if c == other_id:
            continue
        tp = sum(1 for i in range(n) if confident[i] and arg[i] == c and target_ids[i] == c)
        fp = sum(1 for i in range(n) if confident[i] and arg[i] == c and target_ids[i] != c)
        fn = sum(1 for i in range(n) if target_ids[i] == c and not (confident[i] and arg[i] == c))
        if tp + fp + fn == 0:
            continue  # class never occurred
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(f1s)) if f1s else 0.0


def metric_epe(preds, targets) -> float:
    """Mean 3D end-point error over all joints and samples."""
    preds, targets = _check_pair(preds, targets)
    if preds.shape[1] % 3 != 0:
        raise ad.ShapeError("EPE needs coordinates in triplets")
    return metric_mean_euclidean(preds, targets, 3)


def compute_metric(spec: TaskSpec, preds, targets, probs=None) -> float:
    if spec.metric == "mean_euclidean":
        return metric_mean_euclidean(preds, targets, spec.point_dim)
    if spec.metric == "mae":
        return metric_mae(preds, targets)
    if spec.metric == "accuracy":
        return metric_accuracy(preds, targets)
    if spec.metric == "balanced_accuracy":
        return metric_balanced_accuracy(preds, targets, len(spec.classes))
    if spec.metric == "event_f1":
        return metric_event_f1(probs, targets, other_id=len(spec.classes) - 1)
    if spec.metric == "epe":
        return metric_epe(preds, targets)
    raise nn.ContractError(f"unknown metric {spec.metric!r}")


def error_form(spec: TaskSpec, value: float) -> float:
    """Lower-is-better form used by trend comparisons (1 - score for
    percentage metrics)."""
    return value if spec.lower_better else 1.0 - value


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    task_id: int
    task_name: str
    metric: str
    value: float
    units: str
    sample_count: int
    lower_better: bool
    per_class: dict = field(default_factory=dict)
    gate_weights: dict = field(default_factory=dict)
    note: str = ""

    def __post_init__(self):
        if self.sample_count <= 0:
            raise nn.ContractError("a metric report needs at least one sample")
        if not np.isfinite(self.value):
            raise nn.ContractError("metric value must be finite")

    def to_json_line(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "MetricReport":
        return cls(**json.loads(line))


def per_class_recall(pred_ids, target_ids, classes) -> dict:
    out = {}
    for c, name in enumerate(classes):
        support = [i for i, t in enumerate(target_ids) if t == c]
        if support:
            out[name] = sum(pred_ids[i] == c for i in support) / len(support)
    return out
