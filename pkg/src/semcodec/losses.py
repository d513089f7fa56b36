"""Distillation losses, the adversarial stack, feature matching, and the
weighted generator objective.

The ensemble bundles three discriminator families: multi-scale STFT, multi-period,
and multi-scale waveform. Every sub-discriminator yields a logit map plus
per-layer features whose time resolution strictly decreases layer to layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import torch
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .errors import ConfigurationError, TrainingDiverged
from .signal import Waveform
from .teacher import Teacher, align_truncate


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the generator objective.

    The frequency term carries a separate weight for its L1 and L2 mel
    components (45 and 1 by default).
    """

    time: float = 500.0
    mel_l1: float = 45.0
    mel_l2: float = 1.0
    adversarial: float = 1.0
    feature_matching: float = 1.0
    commitment: float = 10.0
    distill: float = 100.0

    def validate(self) -> list[str]:
        problems = []
        for name, value in self.__dict__.items():
            if not math.isfinite(value) or value < 0:
                problems.append(f"loss weight '{name}' must be finite and >= 0, got {value}")
        return problems


@dataclass
class DiscriminatorOutputs:
    """Logit maps and per-layer features for each sub-discriminator."""

    logits: list[torch.Tensor]
    features: list[list[torch.Tensor]]

    def __len__(self):
        return len(self.logits)


def _leaky():
    return nn.LeakyReLU(0.1)


class StftDiscriminator(nn.Module):
    """2-D convs over the complex STFT (real/imag channels) at one scale."""

    def __init__(self, fft_size: int, channels: int = 32):
        super().__init__()
        self.fft_size = fft_size
        self.hop = fft_size // 4
        self.register_buffer("window", torch.hann_window(fft_size), persistent=False)
        ch = channels
        self.layers = nn.ModuleList(
            [
                nn.Sequential(weight_norm(nn.Conv2d(2, ch, (3, 9), stride=(1, 2), padding=(1, 4))), _leaky()),
                nn.Sequential(weight_norm(nn.Conv2d(ch, ch, (3, 9), stride=(1, 2), padding=(1, 4))), _leaky()),
                nn.Sequential(weight_norm(nn.Conv2d(ch, ch, (3, 9), stride=(1, 2), padding=(1, 4))), _leaky()),
                nn.Sequential(weight_norm(nn.Conv2d(ch, ch, (3, 9), stride=(1, 2), padding=(1, 4))), _leaky()),
            ]
        )
        self.logit_conv = weight_norm(nn.Conv2d(ch, 1, (3, 3), padding=(1, 1)))

    def forward(self, wave: torch.Tensor):
        spec = torch.stft(
            wave,
            n_fft=self.fft_size,
            hop_length=self.hop,
            window=self.window,
            center=True,
            pad_mode="constant",
            return_complex=True,
        )
        x = torch.stack([spec.real, spec.imag], dim=1)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.logit_conv(x), feats


class PeriodDiscriminator(nn.Module):
    """2-D convs over the waveform folded at a fixed period."""

    def __init__(self, period: int, channels: int = 32, max_channels: int = 256):
        super().__init__()
        self.period = period
        chs = [channels, min(channels * 4, max_channels), min(channels * 16, max_channels), min(channels * 16, max_channels)]
        layers = []
        in_ch = 1
        for ch in chs:
            layers.append(nn.Sequential(weight_norm(nn.Conv2d(in_ch, ch, (5, 1), stride=(3, 1), padding=(2, 0))), _leaky()))
            in_ch = ch
        self.layers = nn.ModuleList(layers)
        self.logit_conv = weight_norm(nn.Conv2d(in_ch, 1, (3, 1), padding=(1, 0)))

    def forward(self, wave: torch.Tensor):
        b, t = wave.shape
        if t % self.period:
            wave = nn.functional.pad(wave, (0, self.period - t % self.period), mode="reflect")
        x = wave.view(b, 1, -1, self.period)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.logit_conv(x), feats


class ScaleDiscriminator(nn.Module):
    """1-D convs over an average-pooled copy of the waveform."""

    def __init__(self, downsample: int = 1, channels: int = 16, max_channels: int = 512):
        super().__init__()
        self.downsample = downsample
        chs = [channels, min(channels * 4, max_channels), min(channels * 16, max_channels), min(channels * 16, max_channels)]
        specs = [(15, 2, 1), (41, 4, 4), (41, 4, 16), (5, 2, 1)]
        layers = []
        in_ch = 1
        for ch, (kernel, stride, groups) in zip(chs, specs):
            groups = min(groups, in_ch)
            layers.append(
                nn.Sequential(
                    weight_norm(nn.Conv1d(in_ch, ch, kernel, stride=stride, padding=kernel // 2, groups=groups)),
                    _leaky(),
                )
            )
            in_ch = ch
        self.layers = nn.ModuleList(layers)
        self.logit_conv = weight_norm(nn.Conv1d(in_ch, 1, 3, padding=1))

    def forward(self, wave: torch.Tensor):
        x = wave.unsqueeze(1)
        if self.downsample > 1:
            x = nn.functional.avg_pool1d(x, self.downsample * 2, stride=self.downsample, padding=self.downsample)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.logit_conv(x), feats


@dataclass(frozen=True)
class DiscriminatorConfig:
    stft_fft_sizes: tuple[int, ...] = (2048, 1024, 512, 256, 128)
    periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    scale_downsamples: tuple[int, ...] = (1, 2, 4)
    stft_channels: int = 32
    period_channels: int = 32
    scale_channels: int = 16


class DiscriminatorEnsemble(nn.Module):
    """All sub-discriminators behind one forward: waveform -> DiscriminatorOutputs."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        subs: list[nn.Module] = []
        subs += [StftDiscriminator(n, cfg.stft_channels) for n in cfg.stft_fft_sizes]
        subs += [PeriodDiscriminator(p, cfg.period_channels) for p in cfg.periods]
        subs += [ScaleDiscriminator(d, cfg.scale_channels) for d in cfg.scale_downsamples]
        self.subs = nn.ModuleList(subs)

    def __len__(self):
        return len(self.subs)

    def forward(self, wave: torch.Tensor) -> DiscriminatorOutputs:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        logits, features = [], []
        for sub in self.subs:
            logit, feats = sub(wave)
            logits.append(logit)
            features.append(feats)
        return DiscriminatorOutputs(logits, features)


def gen_hinge_loss(fake: DiscriminatorOutputs) -> torch.Tensor:
    """(1/K) sum_k mean(max(1 - D_k(fake), 0))."""
    total = fake.logits[0].new_zeros(())
    for logit in fake.logits:
        total = total + torch.relu(1.0 - logit).mean()
    return total / len(fake.logits)


def disc_hinge_loss(real: DiscriminatorOutputs, fake: DiscriminatorOutputs) -> torch.Tensor:
    """(1/K) sum_k mean(max(1 - D_k(real), 0)) + mean(max(1 + D_k(fake), 0))."""
    if len(real) != len(fake):
        raise ValueError("real/fake discriminator outputs differ in count")
    total = real.logits[0].new_zeros(())
    for r, f in zip(real.logits, fake.logits):
        total = total + torch.relu(1.0 - r).mean() + torch.relu(1.0 + f).mean()
    return total / len(real.logits)


def feature_matching_loss(real: DiscriminatorOutputs, fake: DiscriminatorOutputs, eps: float = 1e-8) -> torch.Tensor:
    """Mean-normalized L1 between real and fake features, averaged over all layers."""
    if len(real) != len(fake):
        raise ValueError("real/fake discriminator outputs differ in count")
    total = real.logits[0].new_zeros(())
    count = 0
    for r_feats, f_feats in zip(real.features, fake.features):
        if len(r_feats) != len(f_feats):
            raise ValueError("real/fake layer structures differ")
        for r, f in zip(r_feats, f_feats):
            denom = r.abs().mean().clamp(min=eps)
            total = total + (r - f).abs().mean() / denom
            count += 1
    return total / count


def distill_recon(x: Waveform | torch.Tensor, x_hat_sem: torch.Tensor, teacher: Teacher) -> torch.Tensor:
    """MSE between teacher features of the original and the semantic-only
    reconstruction; gradients flow only through the reconstruction."""
    samples = x.samples if isinstance(x, Waveform) else x
    if samples.dim() == 1:
        samples = samples.unsqueeze(0)
    if x_hat_sem.dim() == 1:
        x_hat_sem = x_hat_sem.unsqueeze(0)
    with torch.no_grad():
        ref = teacher.features(samples)
    student = teacher.features(x_hat_sem)
    ref, student = align_truncate(ref, student)
    return (ref - student).pow(2).mean()


def pool_teacher_features(feats: torch.Tensor, teacher_rate: float, pool_to: float) -> torch.Tensor:
    """Average-pool [..., T, d] features from teacher_rate down to pool_to."""
    ratio = Fraction(teacher_rate) / Fraction(pool_to)
    if ratio.denominator != 1 or ratio.numerator < 1:
        raise ConfigurationError(f"teacher rate {teacher_rate} is not an integer multiple of {pool_to}")
    factor = ratio.numerator
    if factor == 1:
        return feats
    t = feats.shape[-2] // factor * factor
    trimmed = feats[..., :t, :]
    shape = trimmed.shape[:-2] + (t // factor, factor, feats.shape[-1])
    return trimmed.reshape(shape).mean(dim=-2)


def distill_feature(student_frames: torch.Tensor, teacher_feats: torch.Tensor, teacher_rate: float, pool_to: float) -> torch.Tensor:
    """Negative mean cosine similarity against the pooled teacher features."""
    pooled = pool_teacher_features(teacher_feats, teacher_rate, pool_to)
    student, pooled = align_truncate(student_frames, pooled)
    cos = nn.functional.cosine_similarity(student, pooled, dim=-1)
    return -cos.mean()


@dataclass
class GeneratorLossParts:
    """Undamped component losses of one generator step."""

    time: torch.Tensor
    mel_l1: torch.Tensor
    mel_l2: torch.Tensor
    adversarial: torch.Tensor
    feature_matching: torch.Tensor
    commitment: torch.Tensor
    distill: torch.Tensor

    def as_dict(self) -> dict:
        return {name: value for name, value in self.__dict__.items()}


def total_generator_loss(parts: GeneratorLossParts, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the generator components; aborts on non-finite parts."""
    for name, value in parts.as_dict().items():
        if not torch.isfinite(value):
            raise TrainingDiverged(f"non-finite generator loss component '{name}': {value.item()}")
    return (
        weights.time * parts.time
        + weights.mel_l1 * parts.mel_l1
        + weights.mel_l2 * parts.mel_l2
        + weights.adversarial * parts.adversarial
        + weights.feature_matching * parts.feature_matching
        + weights.commitment * parts.commitment
        + weights.distill * parts.distill
    )
