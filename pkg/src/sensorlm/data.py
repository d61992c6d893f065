"""Synthetic cross-modally-consistent data for all eight tasks.

Every sample draws a low-dimensional latent; the label is a deterministic
function of the full latent, and each modality renders a noisy partial
view of it. The per-modality views are stored alongside the latent so
tests can verify the designed information structure (full latent beats
any single modality under least squares) without touching the model.

Also home to instruction-pair templating, the line-delimited record
format, splits, few-shot subsetting, and modality-ratio reduction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .encoders import (GridPayload, ModalityKind, PAYLOAD_SCHEMA, SeqPayload,
                       MODALITY_BY_KEY)
from .tasks import TaskSpec, registry_default

GENERATOR_VERSION = "1"
GAZE_SCREEN_CM = (12.8, 6.4)
DEFAULT_NOISE = 0.05
REDUNDANT_VIEW_NOISE = 0.08


class RecordFormatError(ValueError):
    """A data file line could not be parsed."""


@dataclass
class SensorSample:
    sample_id: str
    task_id: int
    payloads: dict                 # ModalityKind -> GridPayload | SeqPayload
    label: object                  # int class id or float vector
    latent: dict | None = None     # {"z": [...], "views": {key: [...]}}; oracle-only


@dataclass
class InstructionSample:
    base: SensorSample
    instruction: str
    answer: str                    # canonical answer (class name / numeric string)
    answer_text: str               # full templated answer used as the text target
    options: list | None = None


# ---------------------------------------------------------------------------
# rendering helpers


def _bump(n: int, center01: float, sigma: float = 1.2) -> np.ndarray:
    idx = np.arange(n, dtype=np.float32)
    return np.exp(-0.5 * ((idx - center01 * (n - 1)) / sigma) ** 2).astype(np.float32)


def _grid(kind: ModalityKind, values: np.ndarray, rng, noise: float) -> GridPayload:
    h, w, c = PAYLOAD_SCHEMA[kind].dims
    vals = values.astype(np.float32) + rng.normal(0.0, noise, size=(h, w, c)).astype(np.float32)
    return GridPayload(h, w, c, vals.reshape(-1))


def _grid_bump_col(kind: ModalityKind, u: float, rng, noise: float, amp: float = 1.0) -> GridPayload:
    h, w, c = PAYLOAD_SCHEMA[kind].dims
    img = np.tile(_bump(w, u)[None, :, None] * amp, (h, 1, c))
    return _grid(kind, img, rng, noise)


def _grid_bump_row(kind: ModalityKind, v: float, rng, noise: float, amp: float = 1.0) -> GridPayload:
    h, w, c = PAYLOAD_SCHEMA[kind].dims
    img = np.tile(_bump(h, v)[:, None, None] * amp, (1, w, c))
    return _grid(kind, img, rng, noise)


def _grid_two_bumps(kind: ModalityKind, u: float, v: float, rng, noise: float) -> GridPayload:
    h, w, c = PAYLOAD_SCHEMA[kind].dims
    img = (_bump(h, v)[:, None] + _bump(w, u)[None, :])[:, :, None] * np.ones((1, 1, c))
    return _grid(kind, img.astype(np.float32), rng, noise)


def _spectrogram_spikes(q: int, rng, noise: float) -> GridPayload:
    """Spike columns at a class-specific period inside a fixed band."""
    h, w, c = PAYLOAD_SCHEMA[ModalityKind.AUDIO].dims
    img = np.zeros((h, w, c), dtype=np.float32)
    period = q + 2
    img[4:12, ::period, 0] = 1.0
    return _grid(ModalityKind.AUDIO, img, rng, noise)


def _seq(kind: ModalityKind, arr: np.ndarray, rng, noise: float) -> SeqPayload:
    t, c = PAYLOAD_SCHEMA[kind].dims
    vals = arr.astype(np.float32) + rng.normal(0.0, noise, size=(t, c)).astype(np.float32)
    return SeqPayload(t, c, PAYLOAD_SCHEMA[kind].sample_rate_hz, vals.reshape(-1))


def _seq_ramps(kind: ModalityKind, group_values, rng, noise: float) -> SeqPayload:
    """Channels in groups of equal size; group g carries value * ramp."""
    t, c = PAYLOAD_SCHEMA[kind].dims
    ramp = np.linspace(0.0, 1.0, t, dtype=np.float32)
    arr = np.zeros((t, c), dtype=np.float32)
    per = max(1, c // len(group_values))
    for g, v in enumerate(group_values):
        for j in range(per):
            ch = g * per + j
            if ch < c:
                arr[:, ch] = v * ramp * (0.5 + 0.5 * (j + 1) / per)
    return _seq(kind, arr, rng, noise)


def _seq_wave(kind: ModalityKind, freq: float, amp: float, rng, noise: float,
              extra_groups=None) -> SeqPayload:
    t, c = PAYLOAD_SCHEMA[kind].dims
    ts = np.arange(t, dtype=np.float32)
    arr = np.zeros((t, c), dtype=np.float32)
    wave = amp * np.sin(2.0 * math.pi * freq * ts / t)
    half = c // 2 if extra_groups else c
    arr[:, :half] = wave[:, None]
    if extra_groups:
        ramp = np.linspace(0.0, 1.0, t, dtype=np.float32)
        per = max(1, (c - half) // len(extra_groups))
        for g, v in enumerate(extra_groups):
            for j in range(per):
                ch = half + g * per + j
                if ch < c:
                    arr[:, ch] = v * ramp
    return _seq(kind, arr, rng, noise)


def _camera_meta(a: float, rng, noise: float) -> SeqPayload:
    base = np.array([[1.0, 0.5, 0.25, 0.75, a, 0.0, 0.0, 0.0]], dtype=np.float32)
    return _seq(ModalityKind.CAMERA_META, base, rng, noise)


# fixed direction vectors for the linear regression labels
_POSE_RNG = np.random.default_rng(1234)
POSE_BASE = _POSE_RNG.uniform(-20.0, 20.0, size=72).astype(np.float32)
POSE_DIR_A = _POSE_RNG.normal(0.0, 1.0, size=72).astype(np.float32)
POSE_DIR_B = _POSE_RNG.normal(0.0, 1.0, size=72).astype(np.float32)
HAND_BASE = _POSE_RNG.uniform(20.0, 80.0, size=63).astype(np.float32)
HAND_DIR_A = _POSE_RNG.normal(0.0, 1.0, size=63).astype(np.float32)
HAND_DIR_B = _POSE_RNG.normal(0.0, 1.0, size=63).astype(np.float32)


def _depth_label(a: float, b: float) -> np.ndarray:
    h, w = 16, 16
    rows = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None]
    cols = np.linspace(0.0, 1.0, w, dtype=np.float32)[None, :]
    return (30.0 + 20.0 * a * rows + 20.0 * b * cols).reshape(-1).astype(np.float32)


# ---------------------------------------------------------------------------
# per-task generation

M = ModalityKind


def _gen_gaze(rng, noise):
    u, v = rng.uniform(0.0, 1.0, size=2)
    nu, nv = rng.normal(0.0, REDUNDANT_VIEW_NOISE, size=2)
    un, vn = u + nu, v + nv
    payloads = {
        M.IMAGE: _grid_bump_col(M.IMAGE, u, rng, noise),
        M.DEPTH: _grid_bump_row(M.DEPTH, v, rng, noise),
        M.IMU: _seq_ramps(M.IMU, [un, vn, 0.3], rng, noise),
    }
    label = np.array([GAZE_SCREEN_CM[0] * u, GAZE_SCREEN_CM[1] * v], dtype=np.float32)
    latent = {"z": [float(u), float(v)],
              "views": {"image": [float(u)], "depth": [float(v)], "imu": [float(un), float(vn)]}}
    return payloads, label, latent


def _gen_depth(rng, noise):
    a, b = rng.uniform(0.0, 1.0, size=2)
    na, nb, nc = rng.normal(0.0, REDUNDANT_VIEW_NOISE, size=3)
    an, bn, an2 = a + na, b + nb, a + nc
    payloads = {
        M.IMAGE: _grid_bump_col(M.IMAGE, a, rng, noise),
        M.GPS: _seq_ramps(M.GPS, [b, 0.5, 0.2], rng, noise),
        M.IMU: _seq_ramps(M.IMU, [an, bn, 0.3], rng, noise),
        M.CAMERA_META: _camera_meta(an2, rng, noise),
    }
    latent = {"z": [float(a), float(b)],
              "views": {"image": [float(a)], "gps": [float(b)],
                        "imu": [float(an), float(bn)], "camera_meta": [float(an2)]}}
    return payloads, _depth_label(a, b), latent


def _gen_gesture(rng, noise):
    c = int(rng.integers(0, 5))
    r, q = c // 2, c % 2
    nr = float(rng.normal(0.0, REDUNDANT_VIEW_NOISE))
    rn = r + nr
    payloads = {
        M.GAZE: _seq_wave(M.GAZE, freq=r + 1.0, amp=1.0, rng=rng, noise=noise),
        M.IMU: _seq_wave(M.IMU, freq=2.0 * (q + 1.0), amp=1.0, rng=rng, noise=noise,
                         extra_groups=[rn / 2.0]),
    }
    latent = {"z": [float(r), float(q)],
              "views": {"gaze": [float(r)], "imu": [float(q), float(rn)]}}
    return payloads, c, latent


def _gen_pose(rng, noise):
    a, b = rng.uniform(0.0, 1.0, size=2)
    na = float(rng.normal(0.0, REDUNDANT_VIEW_NOISE))
    an = a + na
    payloads = {
        M.IMAGE: _grid_bump_col(M.IMAGE, a, rng, noise),
        M.IMU: _seq_ramps(M.IMU, [b, an, 0.3], rng, noise),
    }
    label = (POSE_BASE + 20.0 * a * POSE_DIR_A + 20.0 * b * POSE_DIR_B).astype(np.float32)
    latent = {"z": [float(a), float(b)],
              "views": {"image": [float(a)], "imu": [float(b), float(an)]}}
    return payloads, label, latent


def _gen_touch(rng, noise):
    c = int(rng.integers(0, 14))
    r, q = c // 7, c % 7
    nq, nr, nq2 = rng.normal(0.0, REDUNDANT_VIEW_NOISE, size=3)
    qn, rn, qn2 = q + nq * 6.0, r + nr, q + nq2 * 6.0
    payloads = {
        M.CAPACITANCE: _grid_bump_col(M.CAPACITANCE, q / 6.0, rng, noise),
        M.POSE: _seq_ramps(M.POSE, [r + 0.5, 0.5], rng, noise),
        M.IMAGE: _grid_two_bumps(M.IMAGE, min(max(qn / 6.0, 0.0), 1.0),
                                 min(max((rn + 0.5) / 2.0, 0.0), 1.0), rng, noise),
        M.DEPTH: _grid_bump_row(M.DEPTH, min(max(qn2 / 6.0, 0.0), 1.0), rng, noise),
    }
    latent = {"z": [float(r), float(q)],
              "views": {"capacitance": [float(q)], "pose": [float(r)],
                        "image": [float(qn), float(rn)], "depth": [float(qn2)]}}
    return payloads, c, latent


def _gen_event(rng, noise):
    c = int(rng.integers(0, 8))
    q, r = c % 4, c // 4
    nq = float(rng.normal(0.0, REDUNDANT_VIEW_NOISE))
    qn = q + nq * 3.0
    payloads = {
        M.AUDIO: _spectrogram_spikes(q, rng, noise),
        M.IMU: _seq_wave(M.IMU, freq=3.0, amp=r + 0.5, rng=rng, noise=noise,
                         extra_groups=[qn / 3.0]),
    }
    latent = {"z": [float(r), float(q)],
              "views": {"audio": [float(q)], "imu": [float(r), float(qn)]}}
    return payloads, c, latent


def _gen_activity(rng, noise):
    c = int(rng.integers(0, 6))
    r, q = c // 3, c % 3
    nr, nq = rng.normal(0.0, REDUNDANT_VIEW_NOISE, size=2)
    rn, qn = r + nr, q + nq * 2.0
    payloads = {
        M.IMAGE: _grid_bump_col(M.IMAGE, 0.25 + 0.5 * r, rng, noise),
        M.POSE: _seq_wave(M.POSE, freq=q + 1.0, amp=1.0, rng=rng, noise=noise),
        M.IMU: _seq_ramps(M.IMU, [rn + 0.5, qn / 2.0, 0.3], rng, noise),
    }
    latent = {"z": [float(r), float(q)],
              "views": {"image": [float(r)], "pose": [float(q)],
                        "imu": [float(rn), float(qn)]}}
    return payloads, c, latent


def _gen_recon3d(rng, noise):
    a, b = rng.uniform(0.0, 1.0, size=2)
    na, nb = rng.normal(0.0, REDUNDANT_VIEW_NOISE, size=2)
    an, bn = a + na, b + nb
    payloads = {
        M.CAPACITANCE: _grid_bump_col(M.CAPACITANCE, a, rng, noise),
        M.DEPTH: _grid_bump_row(M.DEPTH, b, rng, noise),
        M.IMAGE: _grid_two_bumps(M.IMAGE, min(max(an, 0.0), 1.0),
                                 min(max(bn, 0.0), 1.0), rng, noise),
    }
    label = (HAND_BASE + 15.0 * a * HAND_DIR_A + 15.0 * b * HAND_DIR_B).astype(np.float32)
    latent = {"z": [float(a), float(b)],
              "views": {"capacitance": [float(a)], "depth": [float(b)],
                        "image": [float(an), float(bn)]}}
    return payloads, label, latent


_GENERATORS = {
    "gaze": _gen_gaze,
    "depth": _gen_depth,
    "gesture": _gen_gesture,
    "pose": _gen_pose,
    "touch": _gen_touch,
    "event": _gen_event,
    "activity": _gen_activity,
    "recon3d": _gen_recon3d,
}


def _resolve_spec(task, registry=None) -> TaskSpec:
    registry = registry if registry is not None else registry_default()
    for s in registry:
        if task == s.task_id or task == s.name:
            return s
    raise KeyError(f"unknown task {task!r}")


def gen_task_data(task, n: int, seed: int, noise_scale: float = DEFAULT_NOISE,
                  registry=None) -> list[SensorSample]:
    """Generate ``n`` samples for a task; pure function of (seed, index)."""
    spec = _resolve_spec(task, registry)
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = _GENERATORS[spec.name]
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, spec.task_id, i])
        payloads, label, latent = gen(rng, noise_scale)
        out.append(SensorSample(sample_id=f"{spec.name}-{seed}-{i}", task_id=spec.task_id,
                                payloads=payloads, label=label, latent=latent))
    return out


def primary_modality(spec: TaskSpec) -> ModalityKind:
    """The designated modality kept by single-modality reductions: first of
    the task's modalities in canonical order."""
    return sorted(spec.modalities, key=lambda k: k.value)[0]


def apply_modality_ratio(samples, ratio, seed: int, registry=None):
    """Keep all modalities for a ``ratio`` fraction of samples; reduce the
    rest (chosen deterministically by seed) to the task's primary modality.
    ``ratio="single"`` reduces every sample."""
    samples = list(samples)
    if not samples:
        return []
    spec = _resolve_spec(samples[0].task_id, registry)
    keep = primary_modality(spec)
    if ratio == "single":
        reduced_idx = set(range(len(samples)))
    else:
        ratio = float(ratio)
        if not (0.0 <= ratio <= 1.0):
            raise ValueError("modality ratio must be in [0, 1]")
        n_reduce = int(math.floor((1.0 - ratio) * len(samples)))
        order = np.random.default_rng(seed).permutation(len(samples))
        reduced_idx = set(int(i) for i in order[:n_reduce])
    out = []
    for i, s in enumerate(samples):
        if i in reduced_idx:
            out.append(SensorSample(s.sample_id, s.task_id, {keep: s.payloads[keep]},
                                    s.label, s.latent))
        else:
            out.append(s)
    return out


def split_dataset(samples, fractions, seed: int):
    """Deterministic shuffle, then contiguous split into train/val/test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    samples = list(samples)
    order = np.random.default_rng(seed).permutation(len(samples))
    shuffled = [samples[int(i)] for i in order]
    n = len(samples)
    n1 = int(round(fractions[0] * n))
    n2 = int(round((fractions[0] + fractions[1]) * n))
    return shuffled[:n1], shuffled[n1:n2], shuffled[n2:]


def fewshot_subset(train, k: int, seed: int, registry=None):
    """k adaptation samples: class-balanced round-robin draw for
    classification tasks, uniform draw for regression."""
    train = list(train)
    if k > len(train):
        raise ValueError(f"k={k} exceeds pool of {len(train)}")
    if k == 0:
        return []
    spec = _resolve_spec(train[0].task_id, registry)
    rng = np.random.default_rng(seed)
    if not spec.is_classification:
        order = rng.permutation(len(train))
        return [train[int(i)] for i in order[:k]]
    by_class = {}
    for s in train:
        by_class.setdefault(int(s.label), []).append(s)
    for group in by_class.values():
        rng.shuffle(group)
    out = []
    classes = sorted(by_class)
    round_i = 0
    while len(out) < k:
        progressed = False
        for c in classes:
            if len(out) >= k:
                break
            if round_i < len(by_class[c]):
                out.append(by_class[c][round_i])
                progressed = True
        if not progressed:
            break
        round_i += 1
    return out[:k]


# ---------------------------------------------------------------------------
# instruction templating

_CLS_NOUN = {"gesture": "head gesture", "touch": "touch pose",
             "event": "event", "activity": "activity"}

_CLS_TEMPLATES = (
    "Which {noun} best matches this recording? Options: {opts}. Answer:",
    "Classify the {noun} in this sample. Options: {opts}. Answer:",
    "From the options {opts}, pick the {noun}. Answer:",
)

_REG_TEMPLATES = {
    "gaze": ("Report the gaze location in centimeters as x,y. Answer:",
             "Where is the gaze on screen? Give x,y in centimeters. Answer:",
             "State the gaze point as x,y centimeters. Answer:"),
    "depth": ("Report the mean scene depth in millimeters. Answer:",
              "What is the average depth in millimeters? Answer:",
              "Give the mean depth value in millimeters. Answer:"),
    "pose": ("Report the mean joint angle in degrees. Answer:",
             "What is the average joint angle in degrees? Answer:",
             "Give the mean body joint angle in degrees. Answer:"),
    "recon3d": ("Report the mean joint coordinate in millimeters. Answer:",
                "What is the average hand joint coordinate in millimeters? Answer:",
                "Give the mean 3D joint coordinate in millimeters. Answer:"),
}


def regression_answer(spec: TaskSpec, label) -> str:
    label = np.asarray(label, dtype=np.float64).reshape(-1)
    if spec.name == "gaze":
        return f"{label[0]:.2f},{label[1]:.2f}"
    return f"{float(label.mean()):.2f}"


def _signal_stat(spec: TaskSpec, sample: SensorSample) -> str:
    """One templated rationale sentence tied to a statistic computed from
    the sample's own payloads."""
    if spec.name == "event":
        grid = sample.payloads[M.AUDIO].as_array()[:, :, 0]
        band = grid[4:12].mean(axis=0)
        active = np.flatnonzero(band > 0.5)
        gap = int(np.median(np.diff(active))) if active.size > 1 else 0
        return f"The spikes repeat about every {gap} columns."
    if spec.name == "activity":
        e = float(np.abs(sample.payloads[M.IMU].as_array()).mean())
        return f"Mean motion energy is {e:.1f}."
    if spec.name == "gesture":
        arr = sample.payloads[M.GAZE].as_array()[:, 0]
        sweeps = int(np.sum(np.diff(np.signbit(arr)) != 0) // 2 + 1)
        return f"The gaze path shows {sweeps} sweeps."
    if spec.name == "touch":
        grid = sample.payloads[M.CAPACITANCE].as_array()[:, :, 0]
        col = int(grid.mean(axis=0).argmax())
        return f"Peak capacitance sits near column {col}."
    return ""


def make_instruction_pairs(samples, template_seed: int, registry=None) -> list[InstructionSample]:
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to template")
    registry = registry if registry is not None else registry_default()
    out = []
    for i, s in enumerate(samples):
        spec = _resolve_spec(s.task_id, registry)
        rng = np.random.default_rng([template_seed, i])
        if spec.is_classification:
            tmpl = _CLS_TEMPLATES[int(rng.integers(0, len(_CLS_TEMPLATES)))]
            opts = ", ".join(spec.classes)
            instruction = tmpl.format(noun=_CLS_NOUN[spec.name], opts=opts)
            answer = spec.classes[int(s.label)]
            rationale = _signal_stat(spec, s)
            answer_text = f"{answer}. {rationale}" if rationale else answer
            options = list(spec.classes)
        else:
            templates = _REG_TEMPLATES[spec.name]
            instruction = templates[int(rng.integers(0, len(templates)))]
            answer = regression_answer(spec, s.label)
            answer_text = answer
            options = None
        out.append(InstructionSample(base=s, instruction=instruction, answer=answer,
                                     answer_text=answer_text, options=options))
    return out


_RATIONALE_SKELETONS = {
    "event": ["The spikes repeat about every {} columns.".format(k) for k in (0, 2, 3, 4, 5)],
    "activity": ["Mean motion energy is 0.{}.".format(k) for k in range(1, 8)],
    "gesture": ["The gaze path shows {} sweeps.".format(k) for k in (1, 2, 3, 4)],
    "touch": ["Peak capacitance sits near column {}.".format(k) for k in range(0, 16, 3)],
}


def build_template_corpus(registry=None) -> str:
    """Deterministic text corpus of instruction+answer lines (the same
    distribution instruction tuning trains on) plus a heavy dose of short
    answer-only continuations, for stub-pretraining the frozen LM."""
    registry = registry if registry is not None else registry_default()
    lines = []
    for spec in registry:
        if spec.is_classification:
            opts = ", ".join(spec.classes)
            skeletons = _RATIONALE_SKELETONS[spec.name]
            for ti, tmpl in enumerate(_CLS_TEMPLATES):
                q = tmpl.format(noun=_CLS_NOUN[spec.name], opts=opts)
                for ci, name in enumerate(spec.classes):
                    rationale = skeletons[(ti + ci) % len(skeletons)]
                    lines.append(f"{q} {name}. {rationale}")
            # short lines dominate the sampling so the answer segment
            # itself is learned solidly at this model size
            for name in spec.classes:
                for rationale in skeletons:
                    lines.append(f"Answer: {name}. {rationale}")
        else:
            for tmpl in _REG_TEMPLATES[spec.name]:
                for value in ("3.20", "6.40,3.20", "97.53", "12.07", "0.85", "45.00"):
                    lines.append(f"{tmpl} {value}")
            for value in ("1.23", "9.87", "5.50,2.75", "20.04", "77.31"):
                lines.append(f"Answer: {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# record format


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a digest rendered as 16 hex chars."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def _round9(values) -> list:
    # 9 significant decimal digits round-trip float32 exactly
    return [float(format(float(v), ".9g")) for v in np.asarray(values, dtype=np.float32).reshape(-1)]


def _payload_to_json(kind: ModalityKind, payload) -> dict:
    if isinstance(payload, GridPayload):
        return {"family": "grid", "height": payload.height, "width": payload.width,
                "channels": payload.channels, "values": _round9(payload.values)}
    return {"family": "seq", "steps": payload.steps, "channels": payload.channels,
            "sample_rate_hz": payload.sample_rate_hz, "values": _round9(payload.values)}


def _payload_from_json(obj: dict):
    if obj["family"] == "grid":
        return GridPayload(obj["height"], obj["width"], obj["channels"],
                           np.asarray(obj["values"], dtype=np.float32))
    return SeqPayload(obj["steps"], obj["channels"], obj["sample_rate_hz"],
                      np.asarray(obj["values"], dtype=np.float32))


def _sample_to_record(s) -> dict:
    base = s.base if isinstance(s, InstructionSample) else s
    label = int(base.label) if np.isscalar(base.label) or isinstance(base.label, int) \
        else _round9(base.label)
    rec = {
        "sample_id": base.sample_id,
        "task_id": base.task_id,
        "payloads": {k.key: _payload_to_json(k, p) for k, p in base.payloads.items()},
        "label": label,
        "latent": base.latent,
    }
    if isinstance(s, InstructionSample):
        rec["instruction"] = s.instruction
        rec["answer"] = s.answer
        rec["answer_text"] = s.answer_text
        rec["options"] = s.options
    return rec


def _sample_from_record(rec: dict, strip_latent: bool):
    label = rec["label"]
    label = int(label) if isinstance(label, int) else np.asarray(label, dtype=np.float32)
    base = SensorSample(
        sample_id=rec["sample_id"],
        task_id=rec["task_id"],
        payloads={MODALITY_BY_KEY[k]: _payload_from_json(p) for k, p in rec["payloads"].items()},
        label=label,
        latent=None if strip_latent else rec.get("latent"),
    )
    if "instruction" in rec:
        return InstructionSample(base=base, instruction=rec["instruction"],
                                 answer=rec["answer"], answer_text=rec["answer_text"],
                                 options=rec.get("options"))
    return base


@dataclass
class DatasetManifest:
    task_id: int
    generator_version: str
    seed: int
    counts: dict
    noise_scale: float
    modality_ratio: object
    digests: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


def write_records(path, samples, task_id=None, seed: int = 0,
                  noise_scale: float = DEFAULT_NOISE, modality_ratio=1.0) -> DatasetManifest:
    """One JSON record per line; returns a manifest with the file digest."""
    samples = list(samples)
    lines = [json.dumps(_sample_to_record(s), sort_keys=True) for s in samples]
    blob = ("\n".join(lines) + "\n" if lines else "").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
    if task_id is None and samples:
        base = samples[0].base if isinstance(samples[0], InstructionSample) else samples[0]
        task_id = base.task_id
    return DatasetManifest(task_id=-1 if task_id is None else int(task_id),
                           generator_version=GENERATOR_VERSION, seed=seed,
                           counts={"records": len(samples)}, noise_scale=noise_scale,
                           modality_ratio=modality_ratio,
                           digests={os.path.basename(str(path)): fnv1a64(blob)})


def read_records(path, strip_latent: bool = False):
    """Parse a record file; any malformed line fails the whole read with
    its line number and no partial result."""
    with open(path, "rb") as fh:
        raw = fh.read()
    out = []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(_sample_from_record(rec, strip_latent))
        except (ValueError, KeyError, TypeError) as exc:
            raise RecordFormatError(f"malformed record at line {lineno}: {exc}") from exc
    return out
