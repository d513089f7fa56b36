"""Encoders and decoders: conv front-end + transformer bottleneck encoders,
the iSTFT-head main decoder, its 1-layer auxiliary sibling, and the
transposed-convolution baseline decoder.

Length contracts are exact: an encoder emits floor(samples / hop_total) frames,
the iSTFT-head decoder emits T * upsample_factor * istft_hop samples, and the
mirrored decoder emits T * hop_total samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import torch
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .errors import ConfigurationError


@dataclass(frozen=True)
class FrameRateConfig:
    """Exact arithmetic tying sample rate, encoder strides, and the decode path."""

    name: str
    sample_rate: int
    conv_strides: tuple[int, ...]
    transformer_downsample: int
    frame_rate: float
    upsample_factor: int
    istft_fft: int
    istft_hop: int

    @property
    def hop_total(self) -> int:
        return math.prod(self.conv_strides) * self.transformer_downsample

    def validate(self) -> list[str]:
        problems = []
        if Fraction(self.sample_rate, self.hop_total) != Fraction(self.frame_rate):
            problems.append(
                f"{self.name}: product(strides) x downsample x frame_rate != sample_rate "
                f"({self.hop_total} x {self.frame_rate} != {self.sample_rate})"
            )
        if self.frame_rate * self.upsample_factor * self.istft_hop != self.sample_rate:
            problems.append(
                f"{self.name}: frame_rate x upsample x istft_hop != sample_rate "
                f"({self.frame_rate} x {self.upsample_factor} x {self.istft_hop} != {self.sample_rate})"
            )
        if self.istft_hop > self.istft_fft:
            problems.append(f"{self.name}: istft hop exceeds fft size")
        return problems


FRAME_RATE_PRESETS = {
    "25hz": FrameRateConfig("25hz", 16000, (8, 5, 4, 2), 2, 25.0, 2, 1280, 320),
    "12.5hz": FrameRateConfig("12.5hz", 16000, (8, 5, 4, 4), 2, 12.5, 4, 1280, 320),
    "6.25hz": FrameRateConfig("6.25hz", 16000, (8, 8, 5, 4), 2, 6.25, 8, 1280, 320),
}


def derive_frame_rate(conv_strides, transformer_downsample: int, sample_rate: int) -> float:
    """Token frames per second implied by the encoder's total stride.

    The result must be exactly representable (a dyadic rational) so the config
    identities can hold without rounding; anything else is a configuration error.
    """
    if not conv_strides:
        raise ConfigurationError("conv_strides must be non-empty")
    hop = math.prod(conv_strides) * transformer_downsample
    rate = Fraction(sample_rate, hop)
    if rate.denominator & (rate.denominator - 1):
        raise ConfigurationError(
            f"frame rate {sample_rate}/{hop} is not exactly representable; "
            "choose strides dividing the sample rate to a dyadic rational"
        )
    return float(rate)


@dataclass(frozen=True)
class EncoderConfig:
    conv_strides: tuple[int, ...] = (8, 5, 4, 2)
    base_channels: int = 32
    feature_dim: int = 512
    transformer_downsample: int = 2
    transformer_layers: int = 8
    transformer_heads: int = 8
    transformer_ffn: int = 2048
    output_dim: int = 256

    @property
    def hop_total(self) -> int:
        return math.prod(self.conv_strides) * self.transformer_downsample


@dataclass(frozen=True)
class DecoderConfig:
    input_dim: int = 256
    hidden_dim: int = 768
    intermediate_dim: int = 2034
    num_layers: int = 12
    upsample_factor: int = 2
    istft_fft: int = 1280
    istft_hop: int = 320


def _strided_conv(in_ch: int, out_ch: int, stride: int) -> nn.Module:
    """Downsampling conv with kernel 2*stride and asymmetric padding so an input
    divisible by the stride shrinks exactly by it (floor division otherwise)."""
    return _AsymmetricConv(in_ch, out_ch, stride)


class _AsymmetricConv(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        kernel = 2 * stride
        pad_total = kernel - stride
        self.pad = (pad_total - pad_total // 2, pad_total // 2)
        self.conv = weight_norm(nn.Conv1d(in_ch, out_ch, kernel, stride=stride))

    def forward(self, x):
        return self.conv(nn.functional.pad(x, self.pad))


class ResidualUnit(nn.Module):
    """Dilated conv + 1x1 conv with an additive skip, ELU activations."""

    def __init__(self, channels: int, dilation: int = 1, kernel: int = 3):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.block = nn.Sequential(
            nn.ELU(),
            weight_norm(nn.Conv1d(channels, channels, kernel, dilation=dilation, padding=pad)),
            nn.ELU(),
            weight_norm(nn.Conv1d(channels, channels, 1)),
        )

    def forward(self, x):
        return x + self.block(x)


class SinusoidalPositions(nn.Module):
    def __init__(self, dim: int, max_len: int = 8192):
        super().__init__()
        position = torch.arange(max_len).unsqueeze(1)
        div = torch.exp(torch.arange(0, dim, 2) * (-math.log(10000.0) / dim))
        pe = torch.zeros(max_len, dim)
        pe[:, 0::2] = torch.sin(position * div)
        pe[:, 1::2] = torch.cos(position * div)
        self.register_buffer("pe", pe, persistent=False)

    def forward(self, x):
        return x + self.pe[: x.shape[1]].to(x.dtype)


class SpeechEncoder(nn.Module):
    """Residual conv front-end, stride-2 conv downsample, transformer bottleneck.

    Input [B, samples] -> features [B, T, output_dim] with
    T == floor(samples / (prod(strides) * transformer_downsample)).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.base_channels
        layers: list[nn.Module] = [weight_norm(nn.Conv1d(1, channels, 7, padding=3))]
        for stride in cfg.conv_strides:
            out_ch = min(channels * 2, cfg.feature_dim)
            layers.append(ResidualUnit(channels))
            layers.append(nn.ELU())
            layers.append(_strided_conv(channels, out_ch, stride))
            channels = out_ch
        self.frontend = nn.Sequential(*layers)
        self.downsample = _strided_conv(channels, cfg.feature_dim, cfg.transformer_downsample)
        self.positions = SinusoidalPositions(cfg.feature_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.feature_dim,
            nhead=cfg.transformer_heads,
            dim_feedforward=cfg.transformer_ffn,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, cfg.transformer_layers, enable_nested_tensor=False)
        self.out_proj = nn.Linear(cfg.feature_dim, cfg.output_dim)

    @property
    def hop_total(self) -> int:
        return self.cfg.hop_total

    def output_length(self, samples: int) -> int:
        return samples // self.hop_total

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        if wave.shape[-1] < self.hop_total:
            raise ValueError(
                f"input of {wave.shape[-1]} samples is shorter than one frame ({self.hop_total} samples)"
            )
        h = self.frontend(wave.unsqueeze(1))
        h = self.downsample(h).transpose(1, 2)
        h = self.transformer(self.positions(h))
        return self.out_proj(h)


class ConvNeXtBlock(nn.Module):
    """Depthwise conv + pointwise MLP with layer scale, operating on [B, C, T]."""

    def __init__(self, dim: int, intermediate_dim: int, layer_scale: float = 1e-6):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pwconv1 = nn.Linear(dim, intermediate_dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(intermediate_dim, dim)
        self.gamma = nn.Parameter(layer_scale * torch.ones(dim))

    def forward(self, x):
        res = x
        x = self.dwconv(x).transpose(1, 2)
        x = self.pwconv2(self.act(self.pwconv1(self.norm(x))))
        return res + (self.gamma * x).transpose(1, 2)


class IstftHead(nn.Module):
    """Predicts log-magnitude and a (cos, sin) phase pair per bin, then inverts.

    The inverse transform uses "same" overlap-add so N spectral frames produce
    exactly N * hop samples.
    """

    def __init__(self, dim: int, fft_size: int, hop: int):
        super().__init__()
        self.fft_size = fft_size
        self.hop = hop
        self.n_bins = fft_size // 2 + 1
        self.out = nn.Conv1d(dim, 3 * self.n_bins, 1)
        self.register_buffer("window", torch.hann_window(fft_size), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spec = self.out(x)
        log_mag, re, im = spec.split(self.n_bins, dim=1)
        mag = torch.exp(log_mag).clamp(max=1e2)
        norm = torch.sqrt(re.pow(2) + im.pow(2)).clamp(min=1e-8)
        stft = torch.complex(mag * re / norm, mag * im / norm)
        return self._istft_same(stft)

    def _istft_same(self, stft: torch.Tensor) -> torch.Tensor:
        batch, _, frames = stft.shape
        ifft = torch.fft.irfft(stft.transpose(1, 2), n=self.fft_size, dim=-1)
        ifft = ifft * self.window
        full = (frames - 1) * self.hop + self.fft_size
        wave = torch.nn.functional.fold(
            ifft.transpose(1, 2),
            output_size=(1, full),
            kernel_size=(1, self.fft_size),
            stride=(1, self.hop),
        ).reshape(batch, full)
        env = torch.nn.functional.fold(
            (self.window.pow(2)).expand(frames, -1).t().unsqueeze(0),
            output_size=(1, full),
            kernel_size=(1, self.fft_size),
            stride=(1, self.hop),
        ).reshape(full)
        pad = (self.fft_size - self.hop) // 2
        wave = wave[:, pad : full - pad]
        env = env[pad : full - pad].clamp(min=1e-11)
        return wave / env


class VocosDecoder(nn.Module):
    """Deconvolution upsample, ConvNeXt backbone, iSTFT head.

    Input [B, T, input_dim] -> waveform [B, T * upsample_factor * istft_hop].
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.upsample_factor
        if f % 2:
            raise ConfigurationError("upsample_factor must be even")
        self.upsample = nn.ConvTranspose1d(cfg.input_dim, cfg.input_dim, 2 * f, stride=f, padding=f // 2)
        self.embed = nn.Conv1d(cfg.input_dim, cfg.hidden_dim, 7, padding=3)
        self.blocks = nn.ModuleList(
            ConvNeXtBlock(cfg.hidden_dim, cfg.intermediate_dim) for _ in range(cfg.num_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.hidden_dim)
        self.head = IstftHead(cfg.hidden_dim, cfg.istft_fft, cfg.istft_hop)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 3:
            raise ValueError("decoder expects [B, T, dim] features")
        if z.shape[1] == 0:
            raise ValueError("cannot decode an empty frame sequence")
        x = self.upsample(z.transpose(1, 2))
        x = self.embed(x)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x.transpose(1, 2)).transpose(1, 2)
        return self.head(x)


class _TrimmedConvTranspose(nn.Module):
    """Transposed conv whose output is center-trimmed to exactly in_len * stride."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.stride = stride
        kernel = 2 * stride
        self.trim = kernel - stride
        self.conv = weight_norm(nn.ConvTranspose1d(in_ch, out_ch, kernel, stride=stride))

    def forward(self, x):
        y = self.conv(x)
        left = self.trim - self.trim // 2
        return y[..., left : left + x.shape[-1] * self.stride]


class MirroredDecoder(nn.Module):
    """Transposed-convolution stack mirroring the encoder strides.

    Input [B, T, input_dim] -> waveform [B, T * prod(strides) * downsample].
    """

    def __init__(self, encoder_cfg: EncoderConfig, input_dim: int = 256):
        super().__init__()
        feat = encoder_cfg.feature_dim
        self.in_proj = nn.Conv1d(input_dim, feat, 1)
        self.up_transformer = _TrimmedConvTranspose(feat, feat, encoder_cfg.transformer_downsample)
        layers: list[nn.Module] = []
        channels = feat
        for stride in reversed(encoder_cfg.conv_strides):
            out_ch = max(channels // 2, encoder_cfg.base_channels)
            layers.append(nn.ELU())
            layers.append(_TrimmedConvTranspose(channels, out_ch, stride))
            layers.append(ResidualUnit(out_ch))
            channels = out_ch
        layers.append(nn.ELU())
        layers.append(weight_norm(nn.Conv1d(channels, 1, 7, padding=3)))
        self.stack = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 3:
            raise ValueError("decoder expects [B, T, dim] features")
        if z.shape[1] == 0:
            raise ValueError("cannot decode an empty frame sequence")
        x = self.in_proj(z.transpose(1, 2))
        x = self.up_transformer(x)
        return self.stack(x).squeeze(1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
