"""Per-modality encoders mapping raw sensor payloads onto token sequences.

Two families cover the twelve modality kinds: grids are cut into flat
patches, time series into flat strided windows; both are then linearly
projected to the shared feature width and tagged with a learned
per-modality type embedding.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


class DataError(ValueError):
    """Payload contents violate the payload schema."""


class ConfigError(ValueError):
    """Inconsistent encoder / model configuration."""


class ModalityKind(enum.Enum):
    # enumeration order is the canonical modality order everywhere
    IMU = 0
    AUDIO = 1
    IMAGE = 2
    DEPTH = 3
    CAPACITANCE = 4
    THERMAL = 5
    VIDEO = 6
    GAZE = 7
    POSE = 8
    GPS = 9
    LIDAR = 10
    CAMERA_META = 11

    @property
    def key(self) -> str:
        return self.name.lower()


MODALITY_BY_KEY = {k.key: k for k in ModalityKind}

GRID_KINDS = frozenset({ModalityKind.IMAGE, ModalityKind.DEPTH, ModalityKind.CAPACITANCE,
                        ModalityKind.THERMAL, ModalityKind.AUDIO, ModalityKind.VIDEO})
SEQ_KINDS = frozenset({ModalityKind.IMU, ModalityKind.GAZE, ModalityKind.POSE,
                       ModalityKind.GPS, ModalityKind.LIDAR, ModalityKind.CAMERA_META})


@dataclass
class GridPayload:
    height: int
    width: int
    channels: int
    values: np.ndarray  # flat, row-major (h, w, c)
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if self.values.size != self.height * self.width * self.channels:
            raise DataError(f"grid payload needs {self.height * self.width * self.channels} "
                            f"values, got {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("grid payload contains non-finite values")

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width, self.channels)


@dataclass
class SeqPayload:
    steps: int
    channels: int
    sample_rate_hz: float
    values: np.ndarray  # flat, row-major (t, c)

    def __post_init__(self):
        if self.steps < 1:
            raise DataError("sequence payload needs at least one step")
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if self.values.size != self.steps * self.channels:
            raise DataError(f"sequence payload needs {self.steps * self.channels} "
                            f"values, got {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("sequence payload contains non-finite values")

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.steps, self.channels)


# canonical payload geometry per modality: generators emit these shapes and
# encoder projections are sized from them
@dataclass(frozen=True)
class PayloadSchema:
    family: str  # "grid" | "seq"
    dims: tuple  # (h, w, c) or (t, c)
    sample_rate_hz: float = 0.0


PAYLOAD_SCHEMA = {
    ModalityKind.IMU: PayloadSchema("seq", (128, 9), 50.0),
    ModalityKind.AUDIO: PayloadSchema("grid", (16, 16, 1)),  # spectrogram (freq x time)
    ModalityKind.IMAGE: PayloadSchema("grid", (16, 16, 1)),
    ModalityKind.DEPTH: PayloadSchema("grid", (16, 16, 1)),
    ModalityKind.CAPACITANCE: PayloadSchema("grid", (16, 16, 1)),
    ModalityKind.THERMAL: PayloadSchema("grid", (16, 16, 1)),
    ModalityKind.VIDEO: PayloadSchema("grid", (16, 16, 2)),  # two stacked frames
    ModalityKind.GAZE: PayloadSchema("seq", (32, 2), 30.0),
    ModalityKind.POSE: PayloadSchema("seq", (16, 72), 30.0),
    ModalityKind.GPS: PayloadSchema("seq", (32, 3), 10.0),
    ModalityKind.LIDAR: PayloadSchema("seq", (64, 3), 10.0),
    ModalityKind.CAMERA_META: PayloadSchema("seq", (1, 8), 1.0),
}


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64          # shared feature width
    patch: int = 8       # grid patch edge
    window: int = 16     # sequence window length
    stride: int = 16     # sequence window stride
    cap: int = 8         # tokens emitted per modality

    def __post_init__(self):
        if self.cap < 1:
            raise ConfigError("tokens-per-modality cap must be >= 1")
        if self.patch < 1 or self.window < 1 or self.stride < 1:
            raise ConfigError("patch/window/stride must be >= 1")

    def to_dict(self):
        return {"d": self.d, "patch": self.patch, "window": self.window,
                "stride": self.stride, "cap": self.cap}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def input_width(self, kind: ModalityKind) -> int:
        schema = PAYLOAD_SCHEMA[kind]
        if schema.family == "grid":
            c = schema.dims[2]
            return self.patch * self.patch * c
        _, c = schema.dims
        return self.window * c


def patchify_grid(payload: GridPayload, patch: int) -> Tensor:
    """Cut a grid into non-overlapping flattened patches, row-major; the
    grid is zero-padded up to a patch multiple first."""
    arr = payload.as_array()
    h, w, c = arr.shape
    ph = -(-h // patch) * patch
    pw = -(-w // patch) * patch
    if (ph, pw) != (h, w):
        padded = np.zeros((ph, pw, c), dtype=np.float32)
        padded[:h, :w] = arr
        arr = padded
    nh, nw = ph // patch, pw // patch
    tiles = arr.reshape(nh, patch, nw, patch, c).transpose(0, 2, 1, 3, 4)
    return Tensor(tiles.reshape(nh * nw, patch * patch * c))


def window_sequence(payload: SeqPayload, window: int, stride: int) -> Tensor:
    """Slide flattened windows over the sequence; the final partial window
    is zero-padded. At least one window is always produced."""
    arr = payload.as_array()
    t, c = arr.shape
    starts = list(range(0, t, stride)) or [0]
    rows = np.zeros((len(starts), window * c), dtype=np.float32)
    for i, s in enumerate(starts):
        chunk = arr[s:s + window]
        rows[i, : chunk.size] = chunk.reshape(-1)
    return Tensor(rows)


def init_encoder_params(config: EncoderConfig, params: nn.ParamSet,
                        rng: np.random.Generator) -> None:
    for kind in ModalityKind:
        w_in = config.input_width(kind)
        params.add(f"encoder.{kind.key}.proj_w", nn.normal_param(rng, (w_in, config.d)))
        params.add(f"encoder.{kind.key}.proj_b", nn.zeros_param(config.d))
        # zero-init type embeddings so untrained encoders add nothing
        params.add(f"encoder.{kind.key}.type_emb", nn.zeros_param(config.d))


def encoder_param_paths() -> str:
    return "encoder."


def front_end(kind: ModalityKind, payload, config: EncoderConfig) -> Tensor:
    if kind in GRID_KINDS:
        if not isinstance(payload, GridPayload):
            raise ConfigError(f"{kind.key} expects a grid payload")
        return patchify_grid(payload, config.patch)
    if kind in SEQ_KINDS:
        if not isinstance(payload, SeqPayload):
            raise ConfigError(f"{kind.key} expects a sequence payload")
        return window_sequence(payload, config.window, config.stride)
    raise ConfigError(f"unknown modality kind {kind!r}")


def encode_modality(kind: ModalityKind, payload, config: EncoderConfig,
                    params: nn.ParamSet) -> Tensor:
    """Front-end -> linear projection to width d -> pad/truncate to the
    token cap -> add the modality's learned type embedding to every row."""
    raw = front_end(kind, payload, config)
    w = params[f"encoder.{kind.key}.proj_w"]
    b = params[f"encoder.{kind.key}.proj_b"]
    if raw.shape[1] != w.shape[0]:
        raise ConfigError(f"{kind.key} front-end width {raw.shape[1]} does not match "
                          f"projection input {w.shape[0]}")
    tokens = nn.linear_apply(w, b, raw)
    n = tokens.shape[0]
    if n > config.cap:
        tokens = ad.slice_rows(tokens, 0, config.cap)
    elif n < config.cap:
        tokens = ad.concat_tokens([tokens, ad.zeros((config.cap - n, config.d))])
    return ad.add(tokens, params[f"encoder.{kind.key}.type_emb"])


def encode_sample(sample, config: EncoderConfig, params: nn.ParamSet):
    """Encode every payload the sample carries, in canonical modality
    order. Missing modalities are simply omitted."""
    out = []
    for kind in ModalityKind:
        if kind in sample.payloads:
            out.append((kind, encode_modality(kind, sample.payloads[kind], config, params)))
    return out
