"""Layered run configuration: named presets plus JSON/key=value overrides,
validated against every module invariant before a run starts.

The resolved snapshot is what gets digested and stamped onto all outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigValidationError
from .losses import DiscriminatorConfig, LossWeights
from .nets import FRAME_RATE_PRESETS, DecoderConfig, EncoderConfig, FrameRateConfig

DISTILL_MODES = ("recon", "feature")
AUX_MODES = ("decoupled", "shared", "frozen")
DECODER_KINDS = ("vocos", "mirrored")
ENCODER_KINDS = ("dual", "single")

# Paper-scale codebook sizes per frame rate, enforced for full presets.
PAPER_CODEBOOK_SIZES = {25.0: 1024, 12.5: 2048, 6.25: 4096}


@dataclass(frozen=True)
class QuantizerConfig:
    semantic_size: int = 1024
    acoustic_sizes: tuple[int, ...] = (1024,) * 7
    dim: int = 256
    decay: float = 0.99
    dead_code_interval: int = 64


@dataclass(frozen=True)
class TeacherConfig:
    backend: str = "standin"
    path: str | None = None
    feature_dim: int = 384
    seed: int = 1337
    frame_rate: float = 50.0
    normalize: bool = False


@dataclass(frozen=True)
class TrainingConfig:
    segment_seconds: float = 6.0
    batch_size: int = 8
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.0
    epochs: int = 20
    grad_clip: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    preset: str
    frame_rate: FrameRateConfig
    encoder: EncoderConfig
    decoder: DecoderConfig
    aux_decoder: DecoderConfig
    quantizer: QuantizerConfig
    teacher: TeacherConfig
    weights: LossWeights
    training: TrainingConfig
    discriminator: DiscriminatorConfig
    distill_mode: str = "recon"
    aux_mode: str = "decoupled"
    decoder_kind: str = "vocos"
    encoder_kind: str = "dual"
    enforce_paper_sizes: bool = True

    def to_dict(self) -> dict:
        return _asdict(self)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    return obj


def _full_preset(rate_name: str, segment_seconds: float, epochs: int) -> RunConfig:
    fr = FRAME_RATE_PRESETS[rate_name]
    size = PAPER_CODEBOOK_SIZES[fr.frame_rate]
    return RunConfig(
        preset=rate_name,
        frame_rate=fr,
        encoder=EncoderConfig(conv_strides=fr.conv_strides),
        decoder=DecoderConfig(upsample_factor=fr.upsample_factor),
        aux_decoder=DecoderConfig(
            hidden_dim=384, intermediate_dim=1152, num_layers=1, upsample_factor=fr.upsample_factor
        ),
        quantizer=QuantizerConfig(semantic_size=size, acoustic_sizes=(size,) * 7),
        teacher=TeacherConfig(),
        weights=LossWeights(),
        training=TrainingConfig(segment_seconds=segment_seconds, epochs=epochs, batch_size=8),
        discriminator=DiscriminatorConfig(),
    )


def _toy_preset() -> RunConfig:
    fr = FRAME_RATE_PRESETS["25hz"]
    return RunConfig(
        preset="toy",
        frame_rate=fr,
        encoder=EncoderConfig(
            conv_strides=fr.conv_strides,
            base_channels=8,
            feature_dim=128,
            transformer_layers=2,
            transformer_heads=4,
            transformer_ffn=256,
            output_dim=64,
        ),
        decoder=DecoderConfig(input_dim=64, hidden_dim=192, intermediate_dim=512, num_layers=2, upsample_factor=2),
        aux_decoder=DecoderConfig(input_dim=64, hidden_dim=128, intermediate_dim=384, num_layers=1, upsample_factor=2),
        quantizer=QuantizerConfig(semantic_size=64, acoustic_sizes=(64,) * 7, dim=64, dead_code_interval=128),
        teacher=TeacherConfig(),
        weights=LossWeights(),
        training=TrainingConfig(segment_seconds=0.8, batch_size=2, epochs=1),
        discriminator=DiscriminatorConfig(
            stft_fft_sizes=(512, 256),
            periods=(2, 3),
            scale_downsamples=(1, 2),
            stft_channels=8,
            period_channels=8,
            scale_channels=8,
        ),
        enforce_paper_sizes=False,
    )


def build_preset(name: str) -> RunConfig:
    if name == "25hz":
        return _full_preset("25hz", 6.0, 20)
    if name == "12.5hz":
        return _full_preset("12.5hz", 6.0, 20)
    if name == "6.25hz":
        return _full_preset("6.25hz", 5.6, 25)
    if name == "toy":
        return _toy_preset()
    raise ConfigValidationError([f"unknown preset '{name}' (expected 25hz, 12.5hz, 6.25hz, or toy)"])


_NESTED = {
    "frame_rate": FrameRateConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "aux_decoder": DecoderConfig,
    "quantizer": QuantizerConfig,
    "teacher": TeacherConfig,
    "weights": LossWeights,
    "training": TrainingConfig,
    "discriminator": DiscriminatorConfig,
}

_TUPLE_FIELDS = {"conv_strides", "acoustic_sizes", "betas", "stft_fft_sizes", "periods", "scale_downsamples"}


def _rebuild(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    kwargs = dict(data)
    for key, cls in _NESTED.items():
        if key in kwargs and isinstance(kwargs[key], dict):
            kwargs[key] = _rebuild(cls, kwargs[key])
    return _rebuild(RunConfig, kwargs)


def _apply_override(tree: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigValidationError([f"unknown config path '{dotted}'"])
        node = node[key]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigValidationError([f"unknown config key '{dotted}'"])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[leaf] = value


def load_config(preset: str = "toy", overrides_path=None, set_overrides=None) -> RunConfig:
    """Compose preset + JSON overrides file + dotted key=value overrides."""
    tree = build_preset(preset).to_dict()
    if overrides_path is not None:
        with open(overrides_path) as f:
            patch = json.load(f)
        _merge(tree, patch)
    for item in set_overrides or []:
        if "=" not in item:
            raise ConfigValidationError([f"override '{item}' is not of the form key=value"])
        dotted, raw = item.split("=", 1)
        _apply_override(tree, dotted, raw)
    cfg = config_from_dict(tree)
    validate_config(cfg)
    return cfg


def _merge(base: dict, patch: dict) -> None:
    for key, value in patch.items():
        if key in base and isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value)
        else:
            base[key] = value


def validate_config(cfg: RunConfig) -> None:
    """Collect every violated invariant; raise with the full list."""
    problems: list[str] = []
    problems += cfg.frame_rate.validate()
    problems += cfg.weights.validate()

    if tuple(cfg.encoder.conv_strides) != tuple(cfg.frame_rate.conv_strides):
        problems.append("encoder strides must match the frame-rate preset strides")
    if cfg.encoder.transformer_downsample != cfg.frame_rate.transformer_downsample:
        problems.append("encoder transformer downsample must match the frame-rate preset")
    if cfg.encoder.output_dim != cfg.quantizer.dim:
        problems.append(
            f"encoder output dim {cfg.encoder.output_dim} must equal quantizer dim {cfg.quantizer.dim}"
        )
    for name, dec in (("decoder", cfg.decoder), ("aux_decoder", cfg.aux_decoder)):
        if dec.input_dim != cfg.quantizer.dim:
            problems.append(f"{name} input dim {dec.input_dim} must equal quantizer dim {cfg.quantizer.dim}")
        if dec.upsample_factor != cfg.frame_rate.upsample_factor:
            problems.append(f"{name} upsample factor must match the frame-rate preset")
        if dec.istft_fft != cfg.frame_rate.istft_fft or dec.istft_hop != cfg.frame_rate.istft_hop:
            problems.append(f"{name} iSTFT parameters must match the frame-rate preset")
    if not (
        cfg.aux_decoder.num_layers < cfg.decoder.num_layers
        and cfg.aux_decoder.hidden_dim <= cfg.decoder.hidden_dim
    ):
        problems.append("aux decoder must be strictly smaller than the main decoder")

    if len(cfg.quantizer.acoustic_sizes) != 7:
        problems.append(f"expected 7 acoustic quantizers, got {len(cfg.quantizer.acoustic_sizes)}")
    if cfg.enforce_paper_sizes:
        expected = PAPER_CODEBOOK_SIZES.get(cfg.frame_rate.frame_rate)
        if expected is not None:
            sizes = {cfg.quantizer.semantic_size, *cfg.quantizer.acoustic_sizes}
            if sizes != {expected}:
                problems.append(
                    f"codebook size must be {expected} at {cfg.frame_rate.frame_rate} Hz, got {sorted(sizes)}"
                )

    segment_samples = cfg.training.segment_seconds * cfg.frame_rate.sample_rate
    if abs(segment_samples - round(segment_samples)) > 1e-9:
        problems.append("segment_seconds x sample_rate must be an integer sample count")
    elif round(segment_samples) % cfg.frame_rate.hop_total:
        problems.append(
            f"segment of {round(segment_samples)} samples is not divisible by the frame hop {cfg.frame_rate.hop_total}"
        )
    if cfg.training.batch_size < 1 or cfg.training.learning_rate <= 0:
        problems.append("batch_size must be >= 1 and learning_rate positive")

    ratio = Fraction(cfg.teacher.frame_rate) / Fraction(cfg.frame_rate.frame_rate)
    if cfg.distill_mode == "feature" and ratio.denominator != 1:
        problems.append(
            f"feature distillation requires the teacher rate {cfg.teacher.frame_rate} to be an "
            f"integer multiple of the token rate {cfg.frame_rate.frame_rate}"
        )

    if cfg.distill_mode not in DISTILL_MODES:
        problems.append(f"distill_mode must be one of {DISTILL_MODES}")
    if cfg.aux_mode not in AUX_MODES:
        problems.append(f"aux_mode must be one of {AUX_MODES}")
    if cfg.decoder_kind not in DECODER_KINDS:
        problems.append(f"decoder_kind must be one of {DECODER_KINDS}")
    if cfg.encoder_kind not in ENCODER_KINDS:
        problems.append(f"encoder_kind must be one of {ENCODER_KINDS}")

    if problems:
        raise ConfigValidationError(problems)
