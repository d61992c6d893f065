"""Two-stage training, evaluation, and the checkpoint container.

Multitask pretraining interleaves per-task batches round-robin and
minimizes the summed task losses; instruction tuning adds a text loss on
the answer tokens. Only non-frozen parameters are ever updated, and every
run is a pure function of (config, seed, data).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .adapter import (AdapterConfig, MergedModel, MergedOutput, build_merged_model,
                      merged_forward, trainable_params)
from .data import InstructionSample, build_template_corpus, fnv1a64
from .encoders import EncoderConfig
from .lm import BOS, EOS, SEP, ByteTokenizer, CausalLM, LMConfig, LM_PRESETS
from .tasks import (MetricReport, compute_metric, per_class_recall, registry_default,
                    task_loss)

MAGIC = b"IOTLM1\x00"
CHECKPOINT_VERSION = 1


class NumericFailure(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    loss_balancing: str = "uniform"          # uniform | grad_norm
    tasks: tuple = ("gaze", "depth", "gesture", "pose", "touch", "event",
                    "activity", "recon3d")
    modality_ratio: object = 1.0             # float in [0,1] or "single"
    lm_preset: str = "tiny"
    insertion_mode: str = "input_prefix"
    prefix_len: int = 24
    adapter_hidden: int = 128
    corpus: str = "none"                     # none | templates
    stub_pretrain_steps: int = 600
    text_loss_weight: float = 1.0
    adapt_steps: int = 200
    direct_head: bool = False
    gate_temperature: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise nn.ContractError("epochs and batch size must be >= 1")
        if self.loss_balancing not in ("uniform", "grad_norm"):
            raise nn.ContractError(f"unknown loss balancing {self.loss_balancing!r}")
        if self.lm_preset not in LM_PRESETS:
            raise nn.ContractError(f"unknown LM preset {self.lm_preset!r}")
        if self.corpus not in ("none", "templates"):
            raise nn.ContractError(f"unknown corpus choice {self.corpus!r}")
        self.tasks = tuple(self.tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["tasks"] = tuple(d.get("tasks", cls.tasks))
        return cls(**d)


# the two optimizer presets reported for the method and for the baselines
LR_PRESETS = {"paper-main": {"lr": 1e-4, "batch_size": 16},
              "paper-appendix": {"lr": 1e-3, "batch_size": 16}}


def model_from_config(config: TrainConfig, registry=None, seed=None) -> MergedModel:
    registry = registry if registry is not None else registry_default()
    seed = config.seed if seed is None else seed
    lm_config = LM_PRESETS[config.lm_preset]
    enc = EncoderConfig(d=lm_config.d_model)
    adp = AdapterConfig(prefix_len=config.prefix_len,
                        insertion_mode=config.insertion_mode,
                        hidden=config.adapter_hidden)
    corpus = build_template_corpus(registry) if config.corpus == "templates" else None
    model = build_merged_model(lm_config, enc, adp, registry, seed=seed, corpus=corpus,
                               pretrain_steps=config.stub_pretrain_steps,
                               direct_head=config.direct_head)
    model.gate_temperature = config.gate_temperature
    return model


def fork_model(model: MergedModel) -> MergedModel:
    """Copy with fresh trainable tensors; frozen tensors are shared."""
    params = nn.ParamSet()
    for path, t in model.params.items():
        if path in model.params.frozen_paths:
            params.add(path, t)
        else:
            params.add(path, ad.Tensor(t.data.copy(), requires_grad=True))
    params.frozen_paths = set(model.params.frozen_paths)
    return MergedModel(lm=CausalLM(model.lm.config, params), params=params,
                       encoder_config=model.encoder_config,
                       adapter_config=model.adapter_config,
                       registry=model.registry,
                       gate_temperature=model.gate_temperature,
                       direct_head=model.direct_head)


# ---------------------------------------------------------------------------
# loss balancing


class GradNormBalancer:
    """Rescales each task's loss so trainable gradient norms track the
    running cross-task mean (EMA, decay 0.9)."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.ema: dict = {}

    def scale(self, task_id: int) -> float:
        if task_id not in self.ema or not self.ema:
            return 1.0
        target = float(np.mean(list(self.ema.values())))
        return target / max(self.ema[task_id], 1e-8)

    def update(self, task_id: int, applied_norm: float, scale_used: float) -> None:
        raw = applied_norm / max(scale_used, 1e-8)
        if task_id in self.ema:
            self.ema[task_id] = self.decay * self.ema[task_id] + (1 - self.decay) * raw
        else:
            self.ema[task_id] = raw


def grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# core loops


def _interleaved_batches(datasets: dict, batch_size: int, seed: int, epoch: int):
    """Round-robin of per-task batches, deterministic in (seed, epoch)."""
    order = []
    per_task = {}
    for task_id in sorted(datasets):
        idx = np.random.default_rng([seed, epoch, task_id]).permutation(len(datasets[task_id]))
        batches = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
        per_task[task_id] = batches
    n_rounds = max((len(b) for b in per_task.values()), default=0)
    for r in range(n_rounds):
        for task_id in sorted(per_task):
            if r < len(per_task[task_id]):
                order.append((task_id, [datasets[task_id][int(i)]
                                        for i in per_task[task_id][r]]))
    return order


def _train_epochs(model: MergedModel, datasets: dict, config: TrainConfig,
                  sample_loss, epochs: int, state: nn.AdamState | None = None,
                  log: list | None = None):
    for task_id, ds in datasets.items():
        if not ds:
            raise nn.ContractError(f"task {task_id} has an empty dataset")
    view = trainable_params(model)
    state = state if state is not None else nn.AdamState(lr=config.lr)
    log = log if log is not None else []
    balancer = GradNormBalancer() if config.loss_balancing == "grad_norm" else None
    names = {s.task_id: s.name for s in model.registry}
    for epoch in range(epochs):
        epoch_losses: dict = {}
        for task_id, batch in _interleaved_batches(datasets, config.batch_size,
                                                   config.seed, epoch):
            losses = [sample_loss(model, s, task_id) for s in batch]
            total = losses[0]
            for extra in losses[1:]:
                total = ad.add(total, extra)
            total = ad.scale(total, 1.0 / len(losses))
            raw_loss = total.item()
            if not np.isfinite(raw_loss):
                raise NumericFailure(f"non-finite loss on task {names[task_id]} "
                                     f"epoch {epoch}")
            scale_used = balancer.scale(task_id) if balancer else 1.0
            if scale_used != 1.0:
                total = ad.scale(total, scale_used)
            ad.backward(total)
            grads = view.collect_grads()
            if balancer:
                balancer.update(task_id, grad_norm(grads), scale_used)
            nn.adam_update(view, state, grads)
            view.zero_grads()
            epoch_losses.setdefault(task_id, []).append(raw_loss)
        for task_id in sorted(epoch_losses):
            mean = float(np.mean(epoch_losses[task_id]))
            log.append(f"epoch={epoch} task={names[task_id]} loss={mean:.6f}")
    return state, log


def _pretrain_sample_loss(model: MergedModel, sample, task_id: int):
    out = merged_forward(model, sample, task_id)
    return task_loss(model.spec(task_id), out.head_output, sample.label)


def pretrain_multitask(model: MergedModel, datasets: dict, config: TrainConfig,
                       state: nn.AdamState | None = None):
    """Stage one: supervised multitask training of the sensor stack.

    ``datasets`` maps task_id -> list of SensorSample. Returns
    (AdamState, log lines)."""
    return _train_epochs(model, datasets, config, _pretrain_sample_loss,
                         config.epochs, state=state)


def instruction_prompt_ids(instruction: str, tokenizer: ByteTokenizer) -> list[int]:
    """Prompt encoding shared by tuning and generation: the instruction
    text plus the space that precedes the answer."""
    return [BOS] + tokenizer.tokenize(instruction + " ")


def instruction_token_ids(pair: InstructionSample, tokenizer: ByteTokenizer):
    """Token ids and CE targets for one instruction pair. Only positions
    whose target is an answer byte (or the closing EOS) contribute to the
    text loss; the instruction is context."""
    prompt = instruction_prompt_ids(pair.instruction, tokenizer)
    ids = prompt + tokenizer.tokenize(pair.answer_text) + [EOS]
    first_answer = len(prompt)  # index of the first answer byte in ids
    targets = [ids[i + 1] if i + 1 >= first_answer else -1 for i in range(len(ids) - 1)]
    return ids, targets


def _tune_sample_loss_factory(config: TrainConfig):
    tokenizer = ByteTokenizer()

    def sample_loss(model: MergedModel, pair: InstructionSample, task_id: int):
        ids, targets = instruction_token_ids(pair, tokenizer)
        out = merged_forward(model, pair.base, task_id, text_ids=ids)
        head = task_loss(model.spec(task_id), out.head_output, pair.base.label)
        pred = ad.slice_rows(out.logits, 0, len(ids) - 1)
        text = nn.cross_entropy(pred, targets, ignore_index=-1)
        return ad.add(head, ad.scale(text, config.text_loss_weight))

    return sample_loss


def instruct_tune(model: MergedModel, datasets: dict, config: TrainConfig,
                  state: nn.AdamState | None = None):
    """Stage two: instruction tuning on (sensor, instruction, answer)
    triples. ``datasets`` maps task_id -> list of InstructionSample."""
    if model.direct_head:
        raise nn.ContractError("instruction tuning needs the LM path")
    return _train_epochs(model, datasets, config, _tune_sample_loss_factory(config),
                         config.epochs, state=state)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: MergedModel, datasets: dict, task_ids=None) -> list[MetricReport]:
    """Deterministic batched inference producing one report per task."""
    task_ids = sorted(datasets) if task_ids is None else sorted(task_ids)
    reports = []
    with ad.no_grad():
        for task_id in task_ids:
            spec = model.spec(task_id)
            samples = datasets[task_id]
            if not samples:
                raise nn.ContractError(f"no evaluation samples for task {spec.name}")
            preds, targets, probs = [], [], []
            gate_sums: dict = {}
            for s in samples:
                base = s.base if isinstance(s, InstructionSample) else s
                out = merged_forward(model, base, task_id)
                row = out.head_output.data[0]
                for k, v in out.gate_weights.items():
                    gate_sums[k] = gate_sums.get(k, 0.0) + v
                if spec.is_classification:
                    preds.append(int(np.argmax(row)))
                    targets.append(int(base.label))
                    e = np.exp(row - row.max())
                    probs.append(e / e.sum())
                else:
                    preds.append(row.copy())
                    targets.append(np.asarray(base.label, dtype=np.float32))
            n = len(samples)
            value = compute_metric(spec, np.asarray(preds) if not spec.is_classification else preds,
                                   np.asarray(targets) if not spec.is_classification else targets,
                                   probs=np.asarray(probs) if probs else None)
            per_class = {}
            if spec.is_classification:
                per_class = per_class_recall(preds, targets, spec.classes)
            reports.append(MetricReport(
                task_id=task_id, task_name=spec.name, metric=spec.metric,
                value=float(value), units=spec.units, sample_count=n,
                lower_better=spec.lower_better, per_class=per_class,
                gate_weights={k: v / n for k, v in sorted(gate_sums.items())},
                note=spec.label_note))
    return reports


def constant_predictor_error(spec, samples) -> float:
    """Metric value of the train-mean (regression) or majority-class
    (classification) predictor; the floor the model has to beat."""
    if spec.is_classification:
        labels = [int(s.label) for s in samples]
        majority = max(set(labels), key=lambda c: (labels.count(c), -c))
        preds = [majority] * len(labels)
        probs = np.zeros((len(labels), len(spec.classes)))
        probs[:, majority] = 1.0
        return compute_metric(spec, preds, labels, probs=probs)
    targets = np.stack([np.asarray(s.label, dtype=np.float64) for s in samples])
    mean = targets.mean(axis=0, keepdims=True)
    preds = np.repeat(mean, len(samples), axis=0)
    return compute_metric(spec, preds, targets)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    frozen_blob: bytes
    trainable_blob: bytes
    optimizer_blob: bytes
    log_digest: str
    version: int = CHECKPOINT_VERSION

    def frozen_digest(self) -> str:
        return fnv1a64(self.frozen_blob)


def _optimizer_blob(state: nn.AdamState) -> bytes:
    entries = [("adam#meta", np.asarray([state.lr, state.beta1, state.beta2,
                                         state.eps, float(state.step)], dtype=np.float32))]
    for path in sorted(state.m):
        entries.append((f"{path}#m", state.m[path]))
        entries.append((f"{path}#v", state.v[path]))
    entries.sort(key=lambda kv: kv[0])
    return nn.write_array_table(entries)


def _optimizer_from_blob(blob: bytes) -> nn.AdamState:
    entries, off = nn.read_array_table(blob, 0)
    if off != len(blob):
        raise nn.FormatError("trailing bytes after optimizer table")
    table = dict(entries)
    meta = table.pop("adam#meta")
    state = nn.AdamState(lr=float(meta[0]), beta1=float(meta[1]), beta2=float(meta[2]),
                         eps=float(meta[3]), step=int(meta[4]))
    for key, arr in table.items():
        path, kind = key.rsplit("#", 1)
        (state.m if kind == "m" else state.v)[path] = arr
    return state


def make_checkpoint(model: MergedModel, state: nn.AdamState, config: TrainConfig,
                    log_lines) -> Checkpoint:
    frozen = model.params.subset([p for p in model.params.paths()
                                  if p in model.params.frozen_paths])
    trainable = trainable_params(model)
    log_text = "\n".join(log_lines)
    return Checkpoint(config=config.to_dict(),
                      frozen_blob=nn.params_serialize(frozen),
                      trainable_blob=nn.params_serialize(trainable),
                      optimizer_blob=_optimizer_blob(state),
                      log_digest=fnv1a64(log_text.encode("utf-8")))


def checkpoint_save(path, checkpoint: Checkpoint) -> None:
    cfg_raw = json.dumps(checkpoint.config, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += np.uint32(checkpoint.version).tobytes()
    out += np.uint32(len(cfg_raw)).tobytes()
    out += cfg_raw
    out += checkpoint.frozen_blob
    out += checkpoint.trainable_blob
    out += checkpoint.optimizer_blob
    digest_val = int(checkpoint.log_digest, 16)
    out += digest_val.to_bytes(8, "little")
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def checkpoint_load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise nn.FormatError("bad magic: not a checkpoint file")
    off = len(MAGIC)
    version, off = nn._read_u32(buf, off)
    if version != CHECKPOINT_VERSION:
        raise nn.FormatError(f"checkpoint version {version} unsupported "
                             f"(this build reads version {CHECKPOINT_VERSION})")
    cfg_len, off = nn._read_u32(buf, off)
    if off + cfg_len > len(buf):
        raise nn.FormatError("truncated checkpoint: config text missing")
    config = json.loads(buf[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    start = off
    _, off = nn.read_array_table(buf, off)
    frozen_blob = buf[start:off]
    start = off
    _, off = nn.read_array_table(buf, off)
    trainable_blob = buf[start:off]
    start = off
    _, off = nn.read_array_table(buf, off)
    optimizer_blob = buf[start:off]
    if off + 8 > len(buf):
        raise nn.FormatError("truncated checkpoint: log digest missing")
    digest = int.from_bytes(buf[off:off + 8], "little")
    off += 8
    if off != len(buf):
        raise nn.FormatError(f"{len(buf) - off} trailing bytes in checkpoint")
    return Checkpoint(config=config, frozen_blob=frozen_blob,
                      trainable_blob=trainable_blob, optimizer_blob=optimizer_blob,
                      log_digest=f"{digest:016x}", version=version)


def model_from_checkpoint(checkpoint: Checkpoint, registry=None):
    """Rebuild the merged model and optimizer exactly from stored bytes."""
    registry = registry if registry is not None else registry_default()
    config = TrainConfig.from_dict(checkpoint.config)
    lm_config = LM_PRESETS[config.lm_preset]
    params = nn.ParamSet()
    frozen_entries, _ = nn.read_array_table(checkpoint.frozen_blob, 0)
    for p, arr in frozen_entries:
        t = ad.Tensor(arr)
        t.requires_grad = False
        params.add(p, t)
    params.freeze([p for p, _ in frozen_entries])
    trainable_entries, _ = nn.read_array_table(checkpoint.trainable_blob, 0)
    for p, arr in trainable_entries:
        params.add(p, ad.Tensor(arr, requires_grad=True))
    model = MergedModel(
        lm=CausalLM(lm_config, params), params=params,
        encoder_config=EncoderConfig(d=lm_config.d_model),
        adapter_config=AdapterConfig(prefix_len=config.prefix_len,
                                     insertion_mode=config.insertion_mode,
                                     hidden=config.adapter_hidden),
        registry=list(registry), gate_temperature=config.gate_temperature,
        direct_head=config.direct_head)
    state = _optimizer_from_blob(checkpoint.optimizer_blob)
    return model, state, config
