"""Audio I/O, STFT/iSTFT, mel filterbanks, and the waveform reconstruction losses.

Everything here is a pure function on immutable inputs. Losses are differentiable
torch expressions so gradients reach the generator; file I/O goes through scipy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

from .errors import AudioFormatError, ConfigurationError

# Mel-loss conventions, fixed once: log(clamp(mel, MEL_LOG_FLOOR)) compression,
# scales i in MEL_SCALES with window 2**i and hop 2**(i-2), 64 bands over 0-8 kHz.
MEL_LOG_FLOOR = 1e-5
MEL_SCALES = tuple(range(5, 12))
MEL_BANDS = 64


@dataclass(frozen=True)
class Waveform:
    """Mono audio: 1-D sample tensor in [-1, 1] plus its sample rate."""

    samples: torch.Tensor
    sample_rate: int

    def __post_init__(self):
        if self.samples.dim() != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {tuple(self.samples.shape)}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not torch.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided complex STFT: bins[freq, frames] with the analysis parameters."""

    bins: torch.Tensor
    fft_size: int
    hop: int
    window: tuple[str, int]
    sample_rate: int

    def __post_init__(self):
        if self.bins.shape[0] != self.fft_size // 2 + 1:
            raise ValueError("freq_bins must equal fft_size/2 + 1")
        if self.hop > self.window[1]:
            raise ValueError("hop must not exceed window length")


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-magnitude mel bands: bands[n_mels, frames]."""

    bands: torch.Tensor
    n_mels: int
    window: int
    hop: int


def load_audio(path) -> Waveform:
    """Read a PCM16 or float32 WAV file as a mono waveform scaled to [-1, 1].

    Stereo files are downmixed by channel averaging.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        rate, data = scipy.io.wavfile.read(str(path))
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data.copy()
    else:
        raise AudioFormatError(f"{path}: unsupported sample encoding {data.dtype} (expect PCM16 or float32)")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim != 1:
        raise AudioFormatError(f"{path}: unsupported channel layout with shape {samples.shape}")
    return Waveform(torch.from_numpy(np.ascontiguousarray(samples)), int(rate))


def save_audio(wave: Waveform, path, encoding: str = "pcm16") -> None:
    """Write a waveform as PCM16 (clipped) or float32 WAV."""
    samples = wave.samples.detach().cpu().numpy()
    if encoding == "pcm16":
        clipped = np.clip(samples, -1.0, 1.0)
        scipy.io.wavfile.write(str(path), wave.sample_rate, np.round(clipped * 32767.0).astype(np.int16))
    elif encoding == "float32":
        scipy.io.wavfile.write(str(path), wave.sample_rate, samples.astype(np.float32))
    else:
        raise AudioFormatError(f"unsupported encoding '{encoding}'")


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling to target_rate.

    Output length is round(len * target / source); the identity case returns
    the samples untouched.
    """
    if target_rate <= 0:
        raise ConfigurationError(f"target_rate must be positive, got {target_rate}")
    if target_rate == wave.sample_rate:
        return Waveform(wave.samples.clone(), target_rate)
    frac = Fraction(target_rate, wave.sample_rate)
    out = scipy.signal.resample_poly(wave.samples.numpy().astype(np.float64), frac.numerator, frac.denominator)
    expected = round(len(wave) * target_rate / wave.sample_rate)
    if len(out) > expected:
        out = out[:expected]
    elif len(out) < expected:
        out = np.pad(out, (0, expected - len(out)))
    return Waveform(torch.from_numpy(out).to(wave.samples.dtype), target_rate)


def check_cola(fft_size: int, hop: int, window: str = "hann") -> None:
    """Raise ConfigurationError unless (window, hop) satisfies constant overlap-add."""
    if window != "hann":
        raise ConfigurationError(f"unsupported window '{window}'")
    if hop > fft_size:
        raise ConfigurationError(f"hop {hop} exceeds window length {fft_size}")
    win = scipy.signal.windows.hann(fft_size, sym=False)
    if not scipy.signal.check_COLA(win, fft_size, fft_size - hop):
        raise ConfigurationError(f"window/hop pair ({fft_size}, {hop}) does not satisfy COLA")


def stft(wave: Waveform, fft_size: int, hop: int) -> ComplexSpectrogram:
    """Center-padded Hann STFT with window length == fft_size."""
    check_cola(fft_size, hop)
    win = torch.hann_window(fft_size, dtype=wave.samples.dtype)
    bins = torch.stft(
        wave.samples,
        n_fft=fft_size,
        hop_length=hop,
        window=win,
        center=True,
        pad_mode="constant",
        return_complex=True,
    )
    return ComplexSpectrogram(bins, fft_size, hop, ("hann", fft_size), wave.sample_rate)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Invert a center-padded Hann STFT.

    Interior samples reproduce the analyzed signal; `length` crops or
    zero-extends the tail (samples past the last full hop are not recoverable).
    """
    check_cola(spec.fft_size, spec.hop)
    real_dtype = torch.empty(0, dtype=spec.bins.dtype).real.dtype
    win = torch.hann_window(spec.fft_size, dtype=real_dtype)
    natural = (spec.bins.shape[1] - 1) * spec.hop
    samples = torch.istft(
        spec.bins,
        n_fft=spec.fft_size,
        hop_length=spec.hop,
        window=win,
        center=True,
        length=natural,
    )
    if length is not None:
        if length <= natural:
            samples = samples[:length]
        else:
            samples = torch.nn.functional.pad(samples, (0, length - natural))
    return Waveform(samples, spec.sample_rate)


def hz_to_mel(freq):
    return 2595.0 * math.log10(1.0 + freq / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def mel_filterbank(
    sample_rate: int,
    n_fft: int,
    n_mels: int,
    fmin: float = 0.0,
    fmax: float | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Triangular mel filterbank [n_mels, n_fft//2 + 1], HTK scale, peak-normalized.

    Each filter with nonempty FFT-bin support has unit peak. At very small FFT
    sizes narrow filters may cover no bin and stay zero.
    """
    if fmax is None:
        fmax = sample_rate / 2
    n_freqs = n_fft // 2 + 1
    freqs = torch.linspace(0, sample_rate / 2, n_freqs, dtype=torch.float64)
    mel_pts = torch.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2, dtype=torch.float64)
    hz_pts = 700.0 * (10.0 ** (mel_pts / 2595.0) - 1.0)
    lo, ctr, hi = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo).clamp(min=1e-9)
    down = (hi - freqs[None, :]) / (hi - ctr).clamp(min=1e-9)
    fb = torch.minimum(up, down).clamp(min=0.0)
    peak = fb.max(dim=1, keepdim=True).values
    fb = torch.where(peak > 0, fb / peak.clamp(min=1e-12), fb)
    return fb.to(dtype)


def log_mel(
    samples: torch.Tensor,
    sample_rate: int,
    n_mels: int,
    window: int,
    hop: int,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> torch.Tensor:
    """Differentiable log-mel magnitudes for [..., n] sample tensors."""
    if window < hop:
        raise ConfigurationError(f"window {window} shorter than hop {hop}")
    if samples.shape[-1] == 0:
        raise ValueError("empty signal")
    shape = samples.shape
    flat = samples.reshape(-1, shape[-1])
    win = torch.hann_window(window, dtype=flat.dtype, device=flat.device)
    spec = torch.stft(
        flat,
        n_fft=window,
        hop_length=hop,
        window=win,
        center=True,
        pad_mode="constant",
        return_complex=True,
    )
    fb = mel_filterbank(sample_rate, window, n_mels, fmin, fmax, dtype=flat.dtype).to(flat.device)
    mel = torch.matmul(fb, spec.abs())
    out = torch.log(mel.clamp(min=MEL_LOG_FLOOR))
    return out.reshape(*shape[:-1], n_mels, -1)


def mel_spectrogram(wave: Waveform, n_mels: int = MEL_BANDS, window: int = 1024, hop: int = 256) -> MelSpectrogram:
    """64-band style log-mel spectrogram of a waveform (0-8 kHz at 16 kHz)."""
    bands = log_mel(wave.samples, wave.sample_rate, n_mels, window, hop, fmax=min(8000.0, wave.sample_rate / 2))
    return MelSpectrogram(bands, n_mels, window, hop)


def _as_samples(x) -> torch.Tensor:
    return x.samples if isinstance(x, Waveform) else x


def _truncate_pair(x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    n = min(x.shape[-1], y.shape[-1])
    if n == 0:
        raise ValueError("empty overlap between signals")
    return x[..., :n], y[..., :n]


def time_loss(x, x_hat) -> torch.Tensor:
    """Mean absolute sample difference after truncating both to the shorter length."""
    a, b = _truncate_pair(_as_samples(x), _as_samples(x_hat))
    return (a - b).abs().mean()


def mel_loss_components(
    x,
    x_hat,
    sample_rate: int | None = None,
    scales=MEL_SCALES,
    n_mels: int = MEL_BANDS,
) -> tuple[torch.Tensor, torch.Tensor]:
    """L1 and L2 multiscale mel terms, summed over scales.

    Per scale i the loss compares log-mels at window 2**i, hop 2**(i-2); the L1
    term is the mean absolute band difference, the L2 term the mean squared one.
    Short clips are covered by center padding, so inputs below the largest
    window are still valid.
    """
    if sample_rate is None:
        if not isinstance(x, Waveform):
            raise ValueError("sample_rate required when passing raw tensors")
        sample_rate = x.sample_rate
    a, b = _truncate_pair(_as_samples(x), _as_samples(x_hat))
    fmax = min(8000.0, sample_rate / 2)
    l1 = a.new_zeros(())
    l2 = a.new_zeros(())
    for i in scales:
        window, hop = 2**i, 2 ** (i - 2)
        ma = log_mel(a, sample_rate, n_mels, window, hop, fmax=fmax)
        mb = log_mel(b, sample_rate, n_mels, window, hop, fmax=fmax)
        l1 = l1 + (ma - mb).abs().mean()
        l2 = l2 + (ma - mb).pow(2).mean()
    return l1, l2


def multiscale_mel_loss(x, x_hat, sample_rate: int | None = None, scales=MEL_SCALES) -> torch.Tensor:
    """Unweighted sum of both multiscale mel terms."""
    l1, l2 = mel_loss_components(x, x_hat, sample_rate, scales)
    return l1 + l2
