"""The multisensory multitask adapter and the merged model it produces.

The adapter is a two-layer MLP from fused sensor tokens into the frozen
LM's embedding space, conditioned on the task through an additive learned
task embedding, resampled to a fixed prefix length. Its output projection
and the task embeddings start at zero, so the whole sensor stack
contributes exactly nothing until trained (safe start).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoders import EncoderConfig, encode_sample, init_encoder_params
from .fusion import gate_weight_map, gate_weights, init_gate_params, late_fuse
from .lm import CausalLM, LMConfig, build_frozen_lm
from .tasks import TaskSpec, head_apply, init_head_params

INSERTION_MODES = ("input_prefix", "per_layer_prefix")


class TaskConfigError(ValueError):
    """Sample/task/modality wiring is inconsistent."""


@dataclass(frozen=True)
class AdapterConfig:
    prefix_len: int = 24
    insertion_mode: str = "input_prefix"
    insertion_layers: tuple = ()   # per-layer mode only; empty = every layer
    hidden: int = 128

    def __post_init__(self):
        if self.prefix_len < 1:
            raise nn.ContractError("prefix length must be >= 1")
        if self.insertion_mode not in INSERTION_MODES:
            raise nn.ContractError(f"unknown insertion mode {self.insertion_mode!r}")

    def to_dict(self):
        return {"prefix_len": self.prefix_len, "insertion_mode": self.insertion_mode,
                "insertion_layers": list(self.insertion_layers), "hidden": self.hidden}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["insertion_layers"] = tuple(d.get("insertion_layers", ()))
        return cls(**d)


def init_adapter_params(config: AdapterConfig, d_enc: int, d_lm: int, n_layers: int,
                        n_tasks: int, params: nn.ParamSet, rng: np.random.Generator) -> None:
    params.add("adapter.w1", nn.normal_param(rng, (d_enc, config.hidden)))
    params.add("adapter.b1", nn.zeros_param(config.hidden))
    # zero-init output projection: the prefix starts exactly at zero
    params.add("adapter.w2", nn.zeros_param((config.hidden, d_lm)))
    params.add("adapter.b2", nn.zeros_param(d_lm))
    params.add("adapter.task_emb", nn.zeros_param((n_tasks, d_lm)))
    if config.insertion_mode == "per_layer_prefix":
        layers = config.insertion_layers or tuple(range(n_layers))
        for layer in layers:
            if not (0 <= layer < n_layers):
                raise nn.ContractError(f"insertion layer {layer} outside [0, {n_layers})")
            params.add(f"adapter.layer{layer}.w", nn.zeros_param((d_enc, d_lm)))
            params.add(f"adapter.layer{layer}.b", nn.zeros_param(d_lm))


def adapter_project(fused: Tensor, task_id: int, config: AdapterConfig,
                    params: nn.ParamSet) -> Tensor:
    """Fused tokens -> MLP -> + task embedding -> exactly prefix_len rows."""
    h = ad.gelu(nn.linear_apply(params["adapter.w1"], params["adapter.b1"], fused))
    out = nn.linear_apply(params["adapter.w2"], params["adapter.b2"], h)
    emb = ad.reshape(ad.gather_rows(params["adapter.task_emb"], [task_id]), (out.shape[1],))
    out = ad.add(out, emb)
    p = config.prefix_len
    n = out.shape[0]
    if n > p:
        return ad.slice_rows(out, 0, p)
    if n < p:
        return ad.concat_tokens([out, ad.zeros((p - n, out.shape[1]))])
    return out


@dataclass
class MergedModel:
    """Frozen LM plus the trainable sensor stack (encoders, gate, adapter,
    heads) sharing one ParamSet."""

    lm: CausalLM
    params: nn.ParamSet
    encoder_config: EncoderConfig
    adapter_config: AdapterConfig
    registry: list
    gate_temperature: float = 1.0
    direct_head: bool = False

    def spec(self, task_id: int) -> TaskSpec:
        for s in self.registry:
            if s.task_id == task_id:
                return s
        raise TaskConfigError(f"unknown task id {task_id}")

    def spec_by_name(self, name: str) -> TaskSpec:
        for s in self.registry:
            if s.name == name:
                return s
        raise TaskConfigError(f"unknown task {name!r}")


@dataclass
class MergedOutput:
    hidden: Tensor
    logits: Tensor | None
    readout: Tensor          # [1, d] row feeding the task heads
    gate_weights: dict = field(default_factory=dict)
    head_output: Tensor | None = None


def build_merged_model(lm_config: LMConfig, encoder_config: EncoderConfig,
                       adapter_config: AdapterConfig, registry, seed: int,
                       corpus=None, pretrain_steps: int = 600,
                       direct_head: bool = False) -> MergedModel:
    params = nn.ParamSet()
    # stub pretraining places text after a zero prefix of the same length
    # the adapter will occupy, so positions match between the two stages
    lm = build_frozen_lm(lm_config, corpus=corpus, seed=seed,
                         pretrain_steps=pretrain_steps, params=params,
                         text_offset=adapter_config.prefix_len if corpus else 0)
    rng = np.random.default_rng(seed + 1)
    init_encoder_params(encoder_config, params, rng)
    init_gate_params(len(registry), encoder_config.d, params)
    init_adapter_params(adapter_config, encoder_config.d, lm_config.d_model,
                        lm_config.n_layers, len(registry), params, rng)
    head_width = encoder_config.d if direct_head else lm_config.d_model
    init_head_params(registry, head_width, params)
    return MergedModel(lm=lm, params=params, encoder_config=encoder_config,
                       adapter_config=adapter_config, registry=list(registry),
                       direct_head=direct_head)


def _per_layer_additions(model: MergedModel, fused: Tensor):
    layers = model.adapter_config.insertion_layers or tuple(range(model.lm.config.n_layers))
    pooled = ad.reshape(ad.reduce(fused, "mean", axis=0), (1, fused.shape[1]))
    additions = {}
    ones = Tensor(np.ones((model.adapter_config.prefix_len, 1), dtype=np.float32))
    for layer in layers:
        vec = nn.linear_apply(model.params[f"adapter.layer{layer}.w"],
                              model.params[f"adapter.layer{layer}.b"], pooled)
        additions[layer] = ad.matmul(ones, vec)
    return additions


def merged_forward(model: MergedModel, sample, task_id: int, text_ids=None) -> MergedOutput:
    """Encode -> gate -> fuse -> adapter prefix -> frozen LM -> readout.

    The readout is the final hidden state at the last prefix position; in
    direct-head mode the LM is skipped and the readout is the mean fused
    token instead.
    """
    spec = model.spec(task_id)
    extra = [k.key for k in sample.payloads if k not in spec.modalities]
    if extra:
        raise TaskConfigError(f"sample carries {extra} outside task {spec.name!r} modalities")
    blocks = encode_sample(sample, model.encoder_config, model.params)
    if not blocks:
        raise TaskConfigError("sample has no payloads")
    weights, sm = gate_weights(blocks, task_id, model.params, model.gate_temperature)
    fused = late_fuse(blocks, weights)
    gates = gate_weight_map(blocks, sm)

    if model.direct_head:
        readout = ad.reshape(ad.reduce(fused, "mean", axis=0), (1, fused.shape[1]))
        head_out = head_apply(model.params, spec, readout)
        return MergedOutput(hidden=fused, logits=None, readout=readout,
                            gate_weights=gates, head_output=head_out)

    prefix = adapter_project(fused, task_id, model.adapter_config, model.params)
    per_layer = None
    if model.adapter_config.insertion_mode == "per_layer_prefix":
        per_layer = _per_layer_additions(model, fused)
    hidden, logits = model.lm.forward(prefix, text_ids or [], per_layer_additions=per_layer)
    p = model.adapter_config.prefix_len
    readout = ad.slice_rows(hidden, p - 1, p)
    head_out = head_apply(model.params, spec, readout)
    return MergedOutput(hidden=hidden, logits=logits, readout=readout,
                        gate_weights=gates, head_output=head_out)


def trainable_params(model: MergedModel) -> nn.ParamSet:
    """Everything except the frozen LM: encoders, gate, adapter, heads."""
    return model.params.subset(model.params.trainable_paths())


def parameter_counts(model: MergedModel) -> dict:
    frozen = [p for p in model.params.paths() if p in model.params.frozen_paths]
    trainable = model.params.trainable_paths()
    return {"frozen": model.params.n_values(frozen),
            "trainable": model.params.n_values(trainable)}
