"""Gated late fusion of per-modality token blocks.

A shared gate network scores each present modality from its mean-pooled
features plus a per-task bias, softmax-normalizes over the present
modalities only, then scales each block by its weight before token-axis
concatenation in canonical order.
"""

from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoders import ModalityKind


class FusionMode(enum.Enum):
    EARLY = "early"
    LATE_GATED = "late_gated"
    MODEL_INTERNAL = "model_internal"


def check_fusion_mode(mode: str) -> FusionMode:
    m = FusionMode(mode)
    if m is not FusionMode.LATE_GATED:
        raise nn.ContractError(f"fusion mode {mode!r} is declared but not implemented")
    return m


def init_gate_params(n_tasks: int, d: int, params: nn.ParamSet) -> None:
    # zero-init final layer: gates start uniform over present modalities
    params.add("gate.weight", nn.zeros_param((len(ModalityKind), d)))
    params.add("gate.task_bias", nn.zeros_param((n_tasks, len(ModalityKind))))


def gate_weights(blocks, task_id: int, params: nn.ParamSet,
                 temperature: float = 1.0):
    """Softmax weights over the present modalities.

    Returns (list of scalar weight tensors aligned with ``blocks``, the
    weight row tensor for reporting).
    """
    if not blocks:
        raise nn.ContractError("gate_weights needs at least one modality block")
    w = params["gate.weight"]
    tb = ad.slice_rows(params["gate.task_bias"], task_id, task_id + 1)  # [1, K]
    logits = []
    for kind, block in blocks:
        pooled = ad.reshape(ad.reduce(block, "mean", axis=0), (1, block.shape[1]))
        wk = ad.slice_rows(w, kind.value, kind.value + 1)               # [1, d]
        score = ad.matmul(pooled, ad.transpose(wk))                     # [1, 1]
        bias = ad.slice_cols(tb, kind.value, kind.value + 1)            # [1, 1]
        logits.append(ad.add(score, bias))
    row = logits[0] if len(logits) == 1 else ad.concat_cols(logits)
    if temperature != 1.0:
        row = ad.scale(row, 1.0 / float(temperature))
    sm = ad.softmax(row, axis=1)
    weights = [ad.reshape(ad.slice_cols(sm, i, i + 1), ()) for i in range(len(blocks))]
    return weights, sm


def late_fuse(blocks, weights) -> Tensor:
    """Scale each block by its gate weight, then concatenate along the
    token axis in the given (canonical) order."""
    if len(blocks) != len(weights):
        raise nn.ContractError(f"{len(blocks)} blocks but {len(weights)} weights")
    scaled = [ad.mul(block, w) for (_, block), w in zip(blocks, weights)]
    return scaled[0] if len(scaled) == 1 else ad.concat_tokens(scaled)


def gate_weight_map(blocks, sm: Tensor) -> dict:
    """Plain-float weights keyed by modality name, for reports."""
    return {kind.key: float(sm.data[0, i]) for i, (kind, _) in enumerate(blocks)}
