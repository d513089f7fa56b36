"""Frozen feature teacher: a pluggable encoder producing 50 Hz frame features.

Two backends share one interface: a deterministic fixed-seed stand-in encoder
for desk-scale runs, and a weight file loaded from disk. Teacher parameters
never receive gradients; gradients still flow through the teacher to its input,
which the reconstruction-driven distillation relies on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from .errors import CodecError
from .signal import Waveform

TEACHER_FILE_VERSION = 1
STANDIN_SEED = 1337
STANDIN_DIM = 384
STANDIN_STRIDES = (5, 4, 4, 4)  # total stride 320 -> 50 Hz at 16 kHz


@dataclass(frozen=True)
class TeacherFeatures:
    """Frame-by-dimension feature matrix plus the teacher's frame rate."""

    features: torch.Tensor
    frame_rate: float

    def __post_init__(self):
        if self.features.dim() != 2:
            raise ValueError("teacher features must be [T, d]")


class _Downsample(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        kernel = 2 * stride
        pad_total = kernel - stride
        self.pad = (pad_total - pad_total // 2, pad_total // 2)
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, stride=stride)

    def forward(self, x):
        return self.conv(nn.functional.pad(x, self.pad))


class StandInEncoder(nn.Module):
    """Conv front-end (total stride 320) plus a small transformer, 50 Hz output.

    Output features are mean/variance-normalized per dimension over time
    (utterance-level, CMVN-style). A randomly initialized stack carries a large
    constant bias per dimension; without the normalization that bias dwarfs the
    input-dependent structure and feature distances stop measuring anything.
    """

    def __init__(self, feature_dim: int = STANDIN_DIM, seed: int = STANDIN_SEED):
        super().__init__()
        self.feature_dim = feature_dim
        self.seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            channels = (feature_dim // 4, feature_dim // 2, feature_dim, feature_dim)
            convs: list[nn.Module] = [nn.Conv1d(1, channels[0], 7, padding=3)]
            ch = channels[0]
            for stride, out_ch in zip(STANDIN_STRIDES, channels):
                convs.append(nn.ELU())
                convs.append(_Downsample(ch, out_ch, stride))
                ch = out_ch
            self.frontend = nn.Sequential(*convs)
            heads = next(h for h in (6, 4, 2, 1) if feature_dim % h == 0)
            layer = nn.TransformerEncoderLayer(
                d_model=feature_dim,
                nhead=heads,
                dim_feedforward=4 * feature_dim,
                dropout=0.0,
                batch_first=True,
                norm_first=True,
            )
            self.transformer = nn.TransformerEncoder(layer, 2, enable_nested_tensor=False)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        h = self.frontend(wave.unsqueeze(1)).transpose(1, 2)
        h = self.transformer(h)
        mean = h.mean(dim=1, keepdim=True)
        std = h.std(dim=1, keepdim=True, unbiased=False)
        return (h - mean) / (std + 1e-5)


class Teacher:
    """Frozen wrapper around a feature encoder.

    `encode` is deterministic; an optional per-frame normalization of the
    output features is exposed as a config switch (off by default).
    """

    def __init__(self, module: nn.Module, feature_dim: int, frame_rate: float = 50.0, normalize: bool = False):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.module = module
        self.feature_dim = feature_dim
        self.frame_rate = frame_rate
        self.normalize = normalize

    def features(self, samples: torch.Tensor) -> torch.Tensor:
        """Batched feature path used inside losses: [B, n] -> [B, T, d]."""
        out = self.module(samples)
        if self.normalize:
            out = nn.functional.layer_norm(out, (out.shape[-1],))
        return out

    def encode(self, wave: Waveform | torch.Tensor) -> TeacherFeatures:
        samples = wave.samples if isinstance(wave, Waveform) else wave
        with torch.no_grad():
            feats = self.features(samples.unsqueeze(0))[0]
        return TeacherFeatures(feats, self.frame_rate)

    def digest(self) -> str:
        return parameter_digest(self.module)


def create_teacher(
    backend: str = "standin",
    path=None,
    feature_dim: int = STANDIN_DIM,
    seed: int = STANDIN_SEED,
    normalize: bool = False,
) -> Teacher:
    """Build a teacher from config: 'standin' (fixed seed) or 'file' (weights on disk)."""
    if backend == "standin":
        return Teacher(StandInEncoder(feature_dim, seed), feature_dim, normalize=normalize)
    if backend == "file":
        if path is None:
            raise CodecError("file teacher backend requires a weight path")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CodecError(f"cannot load teacher weights from {path}: {exc}") from exc
        if payload.get("format_version") != TEACHER_FILE_VERSION:
            raise CodecError(f"{path}: unsupported teacher file version")
        dim = int(payload["feature_dim"])
        module = StandInEncoder(dim, seed=int(payload.get("seed", STANDIN_SEED)))
        module.load_state_dict(payload["state"])
        return Teacher(module, dim, frame_rate=float(payload.get("frame_rate", 50.0)), normalize=normalize)
    raise CodecError(f"unknown teacher backend '{backend}'")


def save_teacher(teacher: Teacher, path) -> None:
    torch.save(
        {
            "format_version": TEACHER_FILE_VERSION,
            "feature_dim": teacher.feature_dim,
            "frame_rate": teacher.frame_rate,
            "seed": getattr(teacher.module, "seed", STANDIN_SEED),
            "state": teacher.module.state_dict(),
        },
        path,
    )


def align_truncate(a: TeacherFeatures | torch.Tensor, b: TeacherFeatures | torch.Tensor):
    """Truncate both feature matrices to the shorter length along time."""
    mat_a = a.features if isinstance(a, TeacherFeatures) else a
    mat_b = b.features if isinstance(b, TeacherFeatures) else b
    if mat_a.shape[-1] != mat_b.shape[-1]:
        raise ValueError("feature dimensions differ")
    n = min(mat_a.shape[-2], mat_b.shape[-2])
    if n == 0:
        raise ValueError("zero temporal overlap between feature matrices")
    return mat_a[..., :n, :], mat_b[..., :n, :]


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers, order-stable."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def feature_sensitivity(teacher: Teacher, wave: Waveform, noise_rms: float = 1e-3, seed: int = 0) -> float:
    """Relative feature change under small additive noise (diagnostic only)."""
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(len(wave), generator=gen, dtype=wave.samples.dtype) * noise_rms
    clean = teacher.encode(wave).features
    noisy = teacher.encode(Waveform(wave.samples + noise, wave.sample_rate)).features
    denom = clean.norm().clamp(min=1e-12)
    return float((noisy - clean).norm() / denom)
