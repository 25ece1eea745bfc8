"""Bit-exact checkpoint persistence and the validated run-config schema.

Checkpoint layout: 8-byte magic ``MIMFORG1``, 4-byte little-endian header
length, UTF-8 JSON header (kind, config, seed, step, tensor directory with
byte offsets), then concatenated little-endian float32 payloads.

Configs are strict JSON documents; unknown keys and constraint violations are
rejected with the offending dotted key named.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import types
import typing
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MIMFORG1"

CHECKPOINT_KINDS = ("tokenizer", "backbone-mim", "backbone-classify", "backbone-segment")


class StoreError(ValueError):
    """Raised for malformed checkpoint files."""


class ConfigError(ValueError):
    """Raised for invalid config documents; message names the dotted key."""


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    seed: int
    step: int

    def __post_init__(self):
        if self.kind not in CHECKPOINT_KINDS:
            raise StoreError(f"unknown checkpoint kind {self.kind!r}")


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    directory = []
    payloads = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f4", "offset": offset, "nbytes": len(buf)}
        )
        payloads.append(buf)
        offset += len(buf)
    header = json.dumps(
        {
            "kind": ckpt.kind,
            "config": ckpt.config,
            "seed": ckpt.seed,
            "step": ckpt.step,
            "tensors": directory,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for buf in payloads:
            f.write(buf)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise StoreError(f"{path}: bad magic (expected {MAGIC!r})")
    (header_len,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    if len(raw) < header_start + header_len:
        raise StoreError(f"{path}: truncated header ({len(raw)} bytes, need {header_start + header_len})")
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreError(f"{path}: unparseable header: {exc}") from exc
    payload = raw[header_start + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if entry["nbytes"] != expected:
            raise StoreError(
                f"{path}: tensor {entry['name']!r} shape {shape} needs {expected} bytes "
                f"but directory records {entry['nbytes']}"
            )
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise StoreError(
                f"{path}: truncated payload for tensor {entry['name']!r} "
                f"(need {end} payload bytes, have {len(payload)})"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=expected // 4, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        tensors=tensors,
        seed=int(header["seed"]),
        step=int(header["step"]),
    )


# ---------------------------------------------------------------------------
# run config schema
# ---------------------------------------------------------------------------


@dataclass
class DataSection:
    source: str = "shapes"
    path: str | None = None  # binary dataset file (source = "binary")
    count: int = 512
    eval_count: int = 128
    size: int = 32
    channels: int = 3
    num_classes: int = 3

    def validate(self, path: str) -> None:
        if self.source not in ("shapes", "binary"):
            raise ConfigError(f"{path}.source: expected 'shapes' or 'binary', got {self.source!r}")
        if self.source == "binary" and not self.path:
            raise ConfigError(f"{path}.path: required when source is 'binary'")
        for key in ("count", "eval_count", "size", "channels", "num_classes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{path}.{key}: must be positive")


@dataclass
class AugmentSection:
    crop_scale: tuple[float, float] = (0.4, 1.0)
    crop_aspect: tuple[float, float] = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5
    jitter: float = 0.4

    def validate(self, path: str) -> None:
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"{path}.crop_scale: need 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"{path}.flip_prob: must be in [0, 1], got {self.flip_prob}")
        if self.jitter < 0:
            raise ConfigError(f"{path}.jitter: must be non-negative, got {self.jitter}")


@dataclass
class MaskSection:
    strategy: str = "blockwise"
    ratio: float = 0.4
    min_block: int = 16
    aspect: tuple[float, float] = (0.3, 1.0 / 0.3)
    cap: int | None = None

    def validate(self, path: str) -> None:
        if self.strategy not in ("blockwise", "random"):
            raise ConfigError(f"{path}.strategy: expected 'blockwise' or 'random', got {self.strategy!r}")
        if not 0 < self.ratio < 1:
            raise ConfigError(f"{path}.ratio: must be in (0, 1), got {self.ratio}")
        if self.min_block < 1:
            raise ConfigError(f"{path}.min_block: must be >= 1, got {self.min_block}")
        if not math.isclose(self.aspect[0] * self.aspect[1], 1.0, rel_tol=1e-6):
            raise ConfigError(f"{path}.aspect: bounds must be reciprocal-symmetric, got {self.aspect}")
        if self.cap is not None and self.cap < 1:
            raise ConfigError(f"{path}.cap: must be >= 1 when set, got {self.cap}")


@dataclass
class TokenizerSection:
    vocab_size: int = 128
    code_dim: int = 64
    channels: tuple[int, int] = (32, 64)
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    kl_weight: float = 0.01
    kl_ramp_frac: float = 0.1
    tau_start: float = 1.0
    tau_end: float = 0.0625

    def validate(self, path: str) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"{path}.vocab_size: must be >= 2, got {self.vocab_size}")
        if self.code_dim < 1:
            raise ConfigError(f"{path}.code_dim: must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"{path}.steps/batch_size: must be non-negative/positive")
        if self.lr < 0:
            raise ConfigError(f"{path}.lr: must be non-negative, got {self.lr}")
        if not 0 < self.tau_end <= self.tau_start:
            raise ConfigError(f"{path}.tau_end: need tau_start >= tau_end > 0")
        if not 0 <= self.kl_ramp_frac <= 1:
            raise ConfigError(f"{path}.kl_ramp_frac: must be in [0, 1]")


@dataclass
class BackboneSection:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn: int = 512
    patch: int = 4
    drop_path: float = 0.1
    resolution: int = 32

    def validate(self, path: str) -> None:
        if self.layers < 1:
            raise ConfigError(f"{path}.layers: must be >= 1, got {self.layers}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"{path}.hidden: {self.hidden} not divisible by {self.heads} heads")
        if self.resolution % self.patch != 0:
            raise ConfigError(
                f"{path}.resolution: {self.resolution} not divisible by patch size {self.patch}"
            )
        if not 0 <= self.drop_path < 1:
            raise ConfigError(f"{path}.drop_path: must be in [0, 1), got {self.drop_path}")


@dataclass
class PretrainSection:
    objective: str = "mim"  # mim | pixel | mim_all_positions
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 1.5e-3
    min_lr: float = 1e-5
    warmup_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    clip: float | None = 3.0
    tokenizer_checkpoint: str | None = None

    def validate(self, path: str) -> None:
        if self.objective not in ("mim", "pixel", "mim_all_positions"):
            raise ConfigError(f"{path}.objective: unknown objective {self.objective!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"{path}.steps/batch_size: must be non-negative/positive")
        if not 0 < self.min_lr <= self.peak_lr:
            raise ConfigError(f"{path}.peak_lr: need peak_lr >= min_lr > 0")
        if not 0 < self.warmup_frac < 1:
            raise ConfigError(f"{path}.warmup_frac: must be in (0, 1), got {self.warmup_frac}")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError(f"{path}.clip: must be positive when set, got {self.clip}")


@dataclass
class FinetuneSection:
    task: str = "classify"  # classify | segment
    init_checkpoint: str | None = None  # None trains from random initialization
    epochs: int = 12
    batch_size: int = 32
    peak_lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_epochs: int = 1
    layer_decay: float = 0.65
    label_smoothing: float = 0.1
    weight_decay: float = 0.05

    def validate(self, path: str) -> None:
        if self.task not in ("classify", "segment"):
            raise ConfigError(f"{path}.task: expected 'classify' or 'segment', got {self.task!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"{path}.epochs/batch_size: must be non-negative/positive")
        if not 0 < self.layer_decay <= 1:
            raise ConfigError(f"{path}.layer_decay: must be in (0, 1], got {self.layer_decay}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"{path}.label_smoothing: must be in [0, 1)")
        if self.warmup_epochs < 0:
            raise ConfigError(f"{path}.warmup_epochs: must be non-negative")


@dataclass
class EvalSection:
    checkpoint: str | None = None
    task: str | None = None  # None: infer from the checkpoint kind
    split: str = "eval"

    def validate(self, path: str) -> None:
        if self.task is not None and self.task not in ("classify", "segment"):
            raise ConfigError(f"{path}.task: expected 'classify' or 'segment', got {self.task!r}")
        if self.split not in ("train", "eval"):
            raise ConfigError(f"{path}.split: expected 'train' or 'eval', got {self.split!r}")


@dataclass
class ElboSection:
    checkpoint: str | None = None
    tokenizer_checkpoint: str | None = None
    batch_size: int = 32

    def validate(self, path: str) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size: must be positive")


@dataclass
class AblateSection:
    steps: int = 200
    finetune_epochs: int = 3

    def validate(self, path: str) -> None:
        if self.steps < 1 or self.finetune_epochs < 1:
            raise ConfigError(f"{path}.steps/finetune_epochs: must be positive")


@dataclass
class AttendSection:
    checkpoint: str | None = None
    image_index: int = 0
    layer: int | None = None  # None: last layer
    reference: int | str = "all"  # "all" or a patch index

    def validate(self, path: str) -> None:
        if self.image_index < 0:
            raise ConfigError(f"{path}.image_index: must be non-negative")
        if isinstance(self.reference, str) and self.reference != "all":
            try:
                int(self.reference)
            except ValueError:
                raise ConfigError(
                    f"{path}.reference: expected 'all' or a patch index, got {self.reference!r}"
                ) from None


@dataclass
class ReportSection:
    inputs: tuple[str, ...] = ()
    metric: str = "accuracy"
    split: str = "eval"
    threshold: float = 0.9

    def validate(self, path: str) -> None:
        if not 0 < self.threshold <= 1:
            raise ConfigError(f"{path}.threshold: must be in (0, 1], got {self.threshold}")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    mask: MaskSection = field(default_factory=MaskSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    elbo: ElboSection = field(default_factory=ElboSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    attend: AttendSection = field(default_factory=AttendSection)
    report: ReportSection = field(default_factory=ReportSection)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "validate"):
                section.validate(f.name)

    def to_dict(self) -> dict:
        return _as_plain(self)


def _as_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_as_plain(v) for v in obj]
    return obj


def _coerce(value, annotation, path: str):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):  # e.g. str | None, int | str
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        last_error = None
        for arg in args:
            try:
                return _coerce(value, arg, path)
            except ConfigError as exc:
                last_error = exc
        raise last_error
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected an array, got {type(value).__name__}")
        args = typing.get_args(annotation)
        if args and args[-1] is not Ellipsis and len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        inner = args[0] if args else float
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _build_section(cls, values, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected an object, got {type(values).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"unknown key {path}.{key}" if path else f"unknown key {key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        sub_path = f"{path}.{f.name}" if path else f.name
        annotation = hints[f.name]
        if dataclasses.is_dataclass(annotation):
            kwargs[f.name] = _build_section(annotation, values[f.name], sub_path)
        else:
            kwargs[f.name] = _coerce(values[f.name], annotation, sub_path)
    return cls(**kwargs)


def config_from_dict(document: dict) -> RunConfig:
    cfg = _build_section(RunConfig, document, "")
    cfg.validate()
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    """Parse and fully validate a strict-JSON run config; empty document = all defaults."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not text.strip():
        document = {}
    else:
        try:
            document = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(document)


def apply_overrides(document: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value overrides (values parsed as JSON, falling back to strings)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = document
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return document
