"""Flat run configuration shared by every command.

Every tunable is a field of :class:`RunConfig` declared with its type, default
and help text; command-line options and the ``key = value`` file format are
both generated from these declarations.  Precedence: defaults, then preset,
then config file, then explicit overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .loss import LossConfig
from .posenet import PoseConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or inconsistent settings."""


def _key(default, help: str, group: str):
    return field(default=default, metadata={"help": help, "group": group})


@dataclass(frozen=True)
class RunConfig:
    # run
    seed: int = _key(0, "seed of the single generator behind init, shuffling and tie-break noise", "run")
    precision: str = _key("float32", "training dtype: float32 or float64", "run")
    threads: int = _key(0, "BLAS threads (0 = library default; SWINDEPTH_THREADS overrides)", "run")
    # data
    height: int = _key(64, "network input height", "data")
    width: int = _key(192, "network input width", "data")
    holdout: int = _key(20, "trailing frames per scene kept out of training for evaluation", "data")
    frames: int = _key(200, "synth: frames per scene", "data")
    scenes: int = _key(1, "synth: number of scenes", "data")
    synth_step: float = _key(0.1, "synth: forward camera motion per frame (scene units)", "data")
    near: float = _key(2.0, "synth: nearest scene depth", "data")
    far: float = _key(50.0, "synth: farthest scene depth", "data")
    rects: int = _key(6, "synth: fronto-parallel rectangles per scene", "data")
    # schedule
    batch_size: int = _key(12, "triplets per optimization step", "schedule")
    epochs: int = _key(40, "training epochs (ignored when steps > 0)", "schedule")
    steps: int = _key(0, "total optimization steps; 0 trains for 'epochs'", "schedule")
    lr: float = _key(1e-4, "initial learning rate", "schedule")
    lr_decay_epoch: int = _key(15, "epoch from which the learning rate is multiplied by lr_decay", "schedule")
    lr_decay: float = _key(0.1, "learning-rate decay factor", "schedule")
    beta1: float = _key(0.9, "Adam first-moment decay", "schedule")
    beta2: float = _key(0.999, "Adam second-moment decay", "schedule")
    adam_eps: float = _key(1e-8, "Adam denominator epsilon", "schedule")
    grad_clip: float = _key(0.0, "global gradient-norm clip (0 = off)", "schedule")
    checkpoint_every: int = _key(500, "steps between checkpoints (also written at each epoch end)", "schedule")
    # encoder
    embed_dim: int = _key(64, "encoder base channels C", "encoder")
    window: int = _key(4, "attention window size", "encoder")
    depths: tuple = _key((2, 2, 6, 2), "transformer blocks per stage", "encoder")
    heads: tuple = _key((2, 4, 8, 16), "attention heads per stage", "encoder")
    mlp_ratio: float = _key(4.0, "MLP hidden expansion", "encoder")
    rel_pos_bias: bool = _key(True, "learned relative position bias in attention", "encoder")
    shifted: bool = _key(True, "alternate W-MSA and SW-MSA blocks", "encoder")
    # decoder
    proj_dim: int = _key(128, "decoder projected dimension C'", "decoder")
    ppm: bool = _key(True, "pyramid pooling at the first cascade stage", "decoder")
    topdown_add: bool = _key(True, "top-down cascade addition", "decoder")
    dense_concat: bool = _key(True, "dense concatenation into every depth head", "decoder")
    ppm_sizes: tuple = _key((1, 2, 3, 6), "pyramid pooling grid sizes", "decoder")
    dec_activation: str = _key("elu", "decoder nonlinearity: elu or relu", "decoder")
    head_convs: int = _key(2, "3x3 convolutions per depth head", "decoder")
    # pose
    pose_arch: str = _key("basic", "pose network: basic or resnet18", "pose")
    pose_widths: tuple = _key((16, 32, 64, 128, 256), "basic pose network stage widths", "pose")
    pose_scale: float = _key(0.01, "scale applied to the six pose outputs", "pose")
    # loss
    ssim_weight: float = _key(0.85, "SSIM share of the photometric error", "loss")
    smooth_weight: float = _key(1e-3, "smoothness weight at full resolution (halved per scale)", "loss")
    min_depth: float = _key(0.1, "depth at disparity 1", "loss")
    max_depth: float = _key(100.0, "depth at disparity 0", "loss")
    automask: bool = _key(True, "mask pixels where the unwarped source already matches", "loss")
    automask_noise: float = _key(1e-5, "tie-break noise added to identity errors (0 = off)", "loss")
    full_res_loss: bool = _key(False, "upsample disparities to input size instead of resizing images", "loss")
    # evaluation
    cap: float = _key(80.0, "evaluation depth cap", "eval")
    cap_min: float = _key(1e-3, "evaluation lower clamp of predictions", "eval")
    median_scale: bool = _key(True, "per-image median scaling before evaluation", "eval")

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("batch_size", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        try:
            self.encoder_config()
            self.decoder_config()
            self.pose_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived module configs -------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.embed_dim, self.window, tuple(self.depths), tuple(self.heads),
                             self.mlp_ratio, self.rel_pos_bias, self.shifted)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(self.proj_dim, self.ppm, self.topdown_add, self.dense_concat,
                             tuple(self.ppm_sizes), self.dec_activation, self.head_convs)

    def pose_config(self) -> PoseConfig:
        return PoseConfig(self.pose_arch, tuple(self.pose_widths), "relu", self.pose_scale)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.ssim_weight, self.smooth_weight, self.min_depth, self.max_depth,
                          automask=self.automask, automask_noise=self.automask_noise,
                          full_res=self.full_res_loss)

    def encoder_channels(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * 2 ** i for i in range(4))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


PRESETS: dict[str, dict[str, Any]] = {
    "desk": dict(height=64, width=192, batch_size=4, embed_dim=32, depths=(2, 2, 2, 2), heads=(1, 2, 4, 8),
                 proj_dim=32, steps=1000, checkpoint_every=500),
    "paper": dict(height=192, width=640, batch_size=12, embed_dim=64, depths=(2, 2, 6, 2), heads=(2, 4, 8, 16),
                  proj_dim=128, epochs=40, steps=0, pose_arch="resnet18"),
}

# keys that may differ between a checkpoint and the run resuming it
RESUMABLE_KEYS = frozenset({"steps", "epochs", "checkpoint_every", "threads", "holdout"})


def key_fields() -> list[dataclasses.Field]:
    return list(fields(RunConfig))


def _field_type(f: dataclasses.Field) -> type:
    return type(f.default)


def parse_value(f: dataclasses.Field, text: str) -> Any:
    kind = _field_type(f)
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(int(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {kind.__name__} for key {f.name!r}") from None


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment."""
    by_name = {f.name: f for f in key_fields()}
    out: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in by_name:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        out[key] = parse_value(by_name[key], value)
    return out


def load_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        return parse_text(path.read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc


def resolve(preset: Optional[str] = None, file: Optional[str | Path] = None,
            overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    values: dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if file:
        values.update(load_file(file))
    by_name = {f.name: f for f in key_fields()}
    for k, v in (overrides or {}).items():
        if k not in by_name:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = parse_value(by_name[k], v) if isinstance(v, str) else v
    return RunConfig(**values)


def dump(cfg: RunConfig) -> str:
    lines = []
    group = None
    for f in key_fields():
        if f.metadata["group"] != group:
            group = f.metadata["group"]
            lines.append(f"# {group}")
        lines.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def diff(saved: Mapping[str, Any], current: Mapping[str, Any], ignore=frozenset()) -> list[str]:
    """Human-readable differences between two config mappings."""
    out = []
    for k in sorted(set(saved) | set(current)):
        if k in ignore:
            continue
        if k not in current:
            out.append(f"{k}: only in checkpoint ({format_value(saved[k])})")
        elif k not in saved:
            out.append(f"{k}: not in checkpoint (current {format_value(current[k])})")
        elif saved[k] != current[k]:
            out.append(f"{k}: checkpoint {format_value(saved[k])} != current {format_value(current[k])}")
    return out
