"""Run configuration, presets, and the key/value config file format."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import ConfigError
from ..multimodal import CrossDecoderConfig, TextEncoderConfig
from ..student import StudentConfig
from ..teacher import TeacherConfig


@dataclass(frozen=True)
class DataConfig:
    frames: int = 4
    image_size: int = 32
    patch_size: int = 8
    source_frames: int = 16
    sampling: str = "sparse"  # sparse | dense
    dense_stride: int = 2
    corpus_size: int = 64
    vocab_size: int = 64
    text_len: int = 8
    pixel_mean: float = 0.5
    pixel_std: float = 0.5
    interleave_images: bool = True  # stage 2: alternate video and image batches


@dataclass(frozen=True)
class MaskConfig:
    type: str = "semantic"  # semantic | random | tube
    video: float = 0.8
    image: float = 0.5
    text: float = 0.5


@dataclass(frozen=True)
class LossConfig:
    enabled: tuple = ("uta",)
    uta: float = 1.0
    vtc: float = 1.0
    vtm: float = 1.0
    mlm: float = 1.0

    def weights(self) -> dict:
        return {k: getattr(self, k) for k in self.enabled}


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_steps: int = 20
    total_steps: int = 500
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 2
    clip_grad: float = 0.0  # 0 disables


@dataclass(frozen=True)
class RunConfig:
    stage: int = 1
    preset: str = "desk-tiny"
    seed: int = 0
    dtype: str = "float32"
    one_stage: bool = False
    init_checkpoint: str = ""
    embed_dim: int = 32
    temperature: float = 0.07
    eval_every: int = 50
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    decoder: CrossDecoderConfig = field(default_factory=CrossDecoderConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> "RunConfig":
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        o = self.optim
        if o.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= o.warmup_steps <= o.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        unknown = set(self.loss.enabled) - {"uta", "vtc", "vtm", "mlm"}
        if unknown:
            raise ConfigError(f"unknown objectives {sorted(unknown)}")
        if self.stage == 1 and set(self.loss.enabled) != {"uta"}:
            raise ConfigError("stage 1 trains the unmasked token alignment objective only")
        if not self.loss.enabled:
            raise ConfigError("no objective enabled")
        if self.student.temporal_patch > 1 and (
                "uta" in self.loss.enabled or self.mask.type == "semantic"):
            raise ConfigError("temporal downsampling breaks frame-wise teacher alignment; "
                              "disable uta and semantic masking to use it")
        if self.mask.type not in ("semantic", "random", "tube"):
            raise ConfigError(f"unknown mask type {self.mask.type!r}")
        if self.data.sampling not in ("sparse", "dense"):
            raise ConfigError(f"unknown sampling {self.data.sampling!r}")
        if self.student.k_align > self.teacher.depth:
            raise ConfigError("teacher must be at least as deep as the number of aligned layers")
        d, s, t = self.data, self.student, self.teacher
        if (s.patch_size, s.image_size) != (d.patch_size, d.image_size) or \
                (t.patch_size, t.image_size) != (d.patch_size, d.image_size):
            raise ConfigError("teacher, student and data must agree on patch and image size")
        if s.frames < d.frames:
            raise ConfigError("student position table shorter than the clip")
        if self.text.vocab_size != d.vocab_size:
            raise ConfigError("text.vocab_size must equal data.vocab_size")
        if self.decoder.width != self.text.width:
            raise ConfigError("decoder width must equal text width")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    def student_config(self) -> StudentConfig:
        """Student config with alignment head widths matched to the teacher targets."""
        k = self.student.k_align
        dims = (self.teacher.width,) * (k - 1) + (self.teacher.proj_dim,)
        return dataclasses.replace(self.student, align_dims=dims)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


SECTIONS = ("data", "teacher", "student", "text", "decoder", "mask", "loss", "optim")


def _coerce(value, typ):
    # field types are strings under postponed annotations
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if value is None:
        return None
    if name == "bool":
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if name == "int":
        return int(value)
    if name == "float":
        return float(value)
    if "tuple" in name:
        if isinstance(value, str):
            value = [v.strip() for v in value.replace("+", ",").split(",") if v.strip()]
        return tuple(value)
    if name == "str":
        return str(value)
    return value


def _replace(obj, values: dict):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown} for {type(obj).__name__}")
    try:
        return dataclasses.replace(obj, **{k: _coerce(v, fields[k].type) for k, v in values.items()})
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad value in {type(obj).__name__}: {e}") from e


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply flat dotted keys (``mask.video``) or nested sections to a config.

    All keys of one section are applied together, so cross-field checks see
    the final values.
    """
    top, grouped = {}, {}
    for key, value in overrides.items():
        if key in SECTIONS and isinstance(value, dict):
            grouped.setdefault(key, {}).update(value)
        elif "." in key:
            section, sub = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            grouped.setdefault(section, {})[sub] = value
        else:
            top[key] = value
    if top:
        cfg = _replace(cfg, top)
    for section, values in grouped.items():
        cfg = dataclasses.replace(cfg, **{section: _replace(getattr(cfg, section), values)})
    return cfg


def from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict``."""
    return apply_overrides(RunConfig(), d).validate()


def load_config_file(path) -> dict:
    """Read a YAML key/value file; keys may be nested sections or dotted paths."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected key/value pairs")
    return data


# ---------------------------------------------------------------------------
# presets

def _epochs_to_steps(epochs: float, corpus: int, batch: int) -> int:
    return int(round(epochs * corpus / batch))


# Approximate corpus sizes used only for epoch -> step conversion.
K710_VIDEOS = 660_000
CORPUS_5M = 5_000_000


def _b16_stage1() -> dict:
    batch = 2048
    return {
        "stage": 1, "preset": "paper-b16-stage1", "embed_dim": 512,
        "data": {"frames": 8, "image_size": 224, "patch_size": 16, "source_frames": 300,
                 "corpus_size": K710_VIDEOS},
        "teacher": {"depth": 12, "width": 768, "heads": 12, "proj_dim": 512, "patch_size": 16,
                    "image_size": 224},
        "student": {"depth": 12, "width": 768, "heads": 12, "k_align": 6, "proj_dim": 512,
                    "drop_path_rate": 0.1, "patch_size": 16, "image_size": 224, "frames": 8},
        "mask": {"type": "semantic", "video": 0.8},
        "loss": {"enabled": ("uta",)},
        "optim": {"lr": 1.2e-3, "weight_decay": 0.05, "beta1": 0.9, "beta2": 0.95,
                  "batch_size": batch,
                  "warmup_steps": _epochs_to_steps(40, K710_VIDEOS, batch),
                  "total_steps": _epochs_to_steps(200, K710_VIDEOS, batch)},
    }


def _b16_stage2() -> dict:
    batch = 4096
    d = _b16_stage1()
    d.update({"stage": 2, "preset": "paper-stage2-5m"})
    d["data"] = {**d["data"], "frames": 4, "corpus_size": CORPUS_5M, "vocab_size": 30522, "text_len": 32}
    d["text"] = {"depth": 9, "width": 768, "heads": 12, "vocab_size": 30522, "max_len": 32}
    d["decoder"] = {"depth": 3, "width": 768, "heads": 12}
    d["mask"] = {"type": "semantic", "video": 0.8, "image": 0.5, "text": 0.5}
    d["loss"] = {"enabled": ("uta", "vtc", "vtm", "mlm")}
    d["optim"] = {"lr": 1e-4, "weight_decay": 0.02, "beta1": 0.9, "beta2": 0.999, "batch_size": batch,
                  "warmup_steps": _epochs_to_steps(1, CORPUS_5M, batch),
                  "total_steps": _epochs_to_steps(10, CORPUS_5M, batch)}
    return d


def _desk_tiny() -> dict:
    return {"preset": "desk-tiny"}


PRESETS = {
    "paper-b16-stage1": _b16_stage1,
    "paper-stage2-5m": _b16_stage2,
    "desk-tiny": _desk_tiny,
}


def desk_tiny_stage2(**overrides) -> RunConfig:
    cfg = apply_overrides(RunConfig(), {
        "stage": 2, "loss.enabled": ("uta", "vtc", "vtm", "mlm"), "optim.batch_size": 4,
        "optim.lr": 5e-4, "optim.total_steps": 2000, "optim.warmup_steps": 50,
        "optim.weight_decay": 0.02, "optim.beta2": 0.999})
    return apply_overrides(cfg, overrides).validate()


def build_config(preset: str = "desk-tiny", stage: int | None = None, overrides: dict | None = None,
                 seed: int | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if preset == "desk-tiny" and stage == 2:
        cfg = desk_tiny_stage2()
    else:
        cfg = apply_overrides(RunConfig(), PRESETS[preset]())
        if stage is not None and stage != cfg.stage:
            raise ConfigError(f"preset {preset} is a stage-{cfg.stage} preset")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg.validate()
