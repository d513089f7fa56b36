"""Manifest-driven data pipeline, the alternating GAN training loop, and
checkpointing.

The trainer owns all mutable state (model, discriminators, codebook EMA,
optimizers, RNG); everything it touches round-trips through checkpoints so a
resumed run reproduces the uninterrupted one bit-for-bit on CPU.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RunConfig, config_from_dict, validate_config
from .errors import CheckpointVersionError, CodecError, TrainingDiverged
from .losses import (
    DiscriminatorEnsemble,
    GeneratorLossParts,
    disc_hinge_loss,
    distill_feature,
    distill_recon,
    feature_matching_loss,
    gen_hinge_loss,
    total_generator_loss,
)
from .nets import MirroredDecoder, SpeechEncoder, VocosDecoder
from .quantize import QuantizerStack, TokenSequence, commitment_loss, decode_tokens, split_rvq
from .signal import Waveform, load_audio, mel_loss_components, resample, save_audio, time_loss
from .teacher import Teacher, create_teacher

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    transcript: str
    duration: float


def load_manifest(path, check_paths: bool = True) -> list[ManifestRecord]:
    """Line-delimited {path, transcript, duration} records."""
    base = Path(path).parent
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            raw = json.loads(line)
            rec_path = Path(raw["path"])
            if not rec_path.is_absolute():
                rec_path = base / rec_path
            if check_paths and not rec_path.exists():
                raise CodecError(f"{path}:{lineno}: audio file not found: {rec_path}")
            duration = float(raw["duration"])
            if duration <= 0:
                raise CodecError(f"{path}:{lineno}: duration must be positive")
            records.append(ManifestRecord(str(rec_path), raw.get("transcript", ""), duration))
    return records


def write_manifest(records, path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps({"path": rec.path, "transcript": rec.transcript, "duration": rec.duration}) + "\n")


def crop_segment(wave: Waveform, seconds: float, rng: random.Random) -> tuple[Waveform, bool]:
    """Uniform random crop of exactly seconds * rate samples.

    Clips shorter than the segment are right-padded with zeros; the second
    return value flags that padding happened.
    """
    target = round(seconds * wave.sample_rate)
    n = len(wave)
    if n >= target:
        offset = rng.randint(0, n - target)
        return Waveform(wave.samples[offset : offset + target], wave.sample_rate), False
    padded = torch.nn.functional.pad(wave.samples, (0, target - n))
    return Waveform(padded, wave.sample_rate), True


def make_synthetic_corpus(out_dir, n_clips: int = 8, seconds: float = 1.0, sample_rate: int = 16000, seed: int = 0):
    """Write a deterministic harmonic-tone corpus plus its manifest; returns the manifest path.

    Clips are speech-shaped enough for toy runs: pitched harmonics with slow
    amplitude movement and a small noise floor.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    t = np.arange(round(seconds * sample_rate)) / sample_rate
    for i in range(n_clips):
        f0 = rng.uniform(90.0, 260.0)
        x = np.zeros_like(t)
        for h in range(1, 6):
            amp = rng.uniform(0.2, 1.0) / h
            x += amp * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
        envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1.0, 3.0) * t + rng.uniform(0, 2 * np.pi))
        x = x * envelope + 0.01 * rng.standard_normal(t.shape)
        x = 0.7 * x / np.max(np.abs(x))
        path = out_dir / f"clip_{i:03d}.wav"
        save_audio(Waveform(torch.from_numpy(x.astype(np.float32)), sample_rate), path)
        records.append(ManifestRecord(str(path), f"synthetic utterance {i}", seconds))
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    return manifest_path


@dataclass
class StepReport:
    """Every loss component of one alternating step, as plain floats."""

    step: int
    time: float
    mel_l1: float
    mel_l2: float
    adversarial: float
    feature_matching: float
    commitment: float
    distill: float
    total: float
    discriminator: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class CodecModel(nn.Module):
    """Generator bundle: dual (or shared) encoders, split quantizer, decoders."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.semantic_encoder = SpeechEncoder(cfg.encoder)
        if cfg.encoder_kind == "dual":
            self.acoustic_encoder = SpeechEncoder(cfg.encoder)
        else:
            self.acoustic_encoder = self.semantic_encoder
        self.quantizer = QuantizerStack(
            cfg.quantizer.semantic_size,
            cfg.quantizer.acoustic_sizes,
            cfg.quantizer.dim,
            cfg.quantizer.decay,
            cfg.quantizer.dead_code_interval,
        )
        if cfg.decoder_kind == "vocos":
            self.main_decoder = VocosDecoder(cfg.decoder)
        else:
            self.main_decoder = MirroredDecoder(cfg.encoder, input_dim=cfg.quantizer.dim)
        self.aux_decoder = VocosDecoder(cfg.aux_decoder) if cfg.aux_mode == "decoupled" else None
        if cfg.distill_mode == "feature":
            self.feature_proj = nn.Linear(cfg.quantizer.dim, cfg.teacher.feature_dim)
        else:
            self.feature_proj = None

    @property
    def sample_rate(self) -> int:
        return self.cfg.frame_rate.sample_rate

    @property
    def frame_rate(self) -> float:
        return self.cfg.frame_rate.frame_rate

    def semantic_reconstruction(self, z_sem: torch.Tensor) -> torch.Tensor:
        """Waveform from semantic features alone, respecting the aux-decoder mode."""
        mode = self.cfg.aux_mode
        if mode == "decoupled":
            return self.aux_decoder(z_sem)
        if mode == "shared":
            return self.main_decoder(z_sem)
        # frozen: the shared decoder runs with detached parameters so the
        # distillation gradient reaches the semantic branch but never the decoder.
        params = {k: v.detach() for k, v in self.main_decoder.state_dict().items()}
        return torch.func.functional_call(self.main_decoder, params, (z_sem,))

    @torch.no_grad()
    def encode(self, wave: Waveform) -> TokenSequence:
        if wave.sample_rate != self.sample_rate:
            raise CodecError(f"expected {self.sample_rate} Hz input, got {wave.sample_rate}")
        hop = self.cfg.frame_rate.hop_total
        usable = len(wave) // hop * hop
        if usable == 0:
            raise CodecError(f"input shorter than one frame ({hop} samples)")
        x = wave.samples[:usable].unsqueeze(0)
        h_sem = self.semantic_encoder(x)[0]
        h_ac = self.acoustic_encoder(x)[0]
        tokens, _, _ = split_rvq(h_sem, h_ac, self.quantizer, self.frame_rate)
        return tokens

    @torch.no_grad()
    def decode(self, tokens: TokenSequence) -> Waveform:
        z_sem, z_ac = decode_tokens(tokens, self.quantizer)
        wave = self.main_decoder((z_sem + z_ac).unsqueeze(0))[0]
        return Waveform(wave, self.sample_rate)

    @torch.no_grad()
    def decode_semantic(self, tokens: TokenSequence) -> Waveform:
        z_sem, _ = decode_tokens(tokens, self.quantizer)
        wave = self.semantic_reconstruction(z_sem.unsqueeze(0))[0]
        return Waveform(wave, self.sample_rate)

    @torch.no_grad()
    def embed(self, wave: Waveform) -> tuple[torch.Tensor, torch.Tensor]:
        """Quantized semantic and acoustic embedding sequences for one clip."""
        tokens = self.encode(wave)
        return decode_tokens(tokens, self.quantizer)


class EpochSampler:
    """Seeded permutation sampler visiting every record exactly once per epoch."""

    def __init__(self, num_items: int, rng: random.Random):
        self.num_items = num_items
        self.rng = rng
        self.epoch = 0
        self.order = list(range(num_items))
        self.rng.shuffle(self.order)
        self.cursor = 0

    def next_indices(self, batch_size: int) -> list[int]:
        out = []
        while len(out) < batch_size:
            if self.cursor >= self.num_items:
                self.epoch += 1
                self.order = list(range(self.num_items))
                self.rng.shuffle(self.order)
                self.cursor = 0
            out.append(self.order[self.cursor])
            self.cursor += 1
        return out

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "order": list(self.order), "cursor": self.cursor}

    def load_state_dict(self, state: dict) -> None:
        self.epoch = state["epoch"]
        self.order = list(state["order"])
        self.cursor = state["cursor"]


class Trainer:
    """Alternating generator/discriminator training with a frozen teacher."""

    def __init__(self, cfg: RunConfig, device: str = "cpu"):
        validate_config(cfg)
        self.cfg = cfg
        self.device = torch.device(device)
        torch.manual_seed(cfg.training.seed)
        self.model = CodecModel(cfg).to(self.device)
        self.discriminators = DiscriminatorEnsemble(cfg.discriminator).to(self.device)
        self.teacher: Teacher = create_teacher(
            cfg.teacher.backend,
            cfg.teacher.path,
            cfg.teacher.feature_dim,
            cfg.teacher.seed,
            cfg.teacher.normalize,
        )
        self.teacher.module.to(self.device)
        self.optim_g = torch.optim.AdamW(
            self.model.parameters(),
            lr=cfg.training.learning_rate,
            betas=cfg.training.betas,
            weight_decay=cfg.training.weight_decay,
        )
        self.optim_d = torch.optim.AdamW(
            self.discriminators.parameters(),
            lr=cfg.training.learning_rate,
            betas=cfg.training.betas,
            weight_decay=cfg.training.weight_decay,
        )
        self.py_rng = random.Random(cfg.training.seed)
        self.step = 0
        self.last_checkpoint_path: str | None = None
        self._audio_cache: dict[str, Waveform] = {}

    # ------------------------------------------------------------------ data

    def _load_record(self, record: ManifestRecord) -> Waveform:
        wave = self._audio_cache.get(record.path)
        if wave is None:
            wave = load_audio(record.path)
            if wave.sample_rate != self.cfg.frame_rate.sample_rate:
                wave = resample(wave, self.cfg.frame_rate.sample_rate)
            self._audio_cache[record.path] = wave
        return wave

    def make_batch(self, records, indices) -> torch.Tensor:
        segments = []
        for idx in indices:
            wave = self._load_record(records[idx])
            segment, _ = crop_segment(wave, self.cfg.training.segment_seconds, self.py_rng)
            segments.append(segment.samples)
        return torch.stack(segments).to(self.device)

    # ------------------------------------------------------------- train step

    def train_step(self, batch: torch.Tensor) -> StepReport:
        cfg = self.cfg
        self.model.train()
        self.discriminators.train()
        x = batch.to(self.device)

        h_sem = self.model.semantic_encoder(x)
        h_ac = self.model.acoustic_encoder(x)
        qr = self.model.quantizer.quantize(h_sem, h_ac, init=True)
        x_hat = self.model.main_decoder(qr.z_sem + qr.z_ac)
        x_hat_sem = self.model.semantic_reconstruction(qr.z_sem)

        l_time = time_loss(x, x_hat)
        mel_l1, mel_l2 = mel_loss_components(x, x_hat, cfg.frame_rate.sample_rate)
        fake = self.discriminators(x_hat)
        with torch.no_grad():
            real = self.discriminators(x)
        l_adv = gen_hinge_loss(fake)
        l_feat = feature_matching_loss(real, fake)
        l_com = commitment_loss(qr.pre, qr.post)

        if cfg.distill_mode == "recon":
            l_distill = distill_recon(x, x_hat_sem, self.teacher)
        else:
            # Cosine distance (1 + negative similarity) keeps the logged value
            # non-negative with the same gradients as the raw similarity loss.
            student = self.model.feature_proj(qr.z_sem)
            with torch.no_grad():
                teacher_feats = self.teacher.features(x)
            l_distill = 1.0 + distill_feature(
                student, teacher_feats, cfg.teacher.frame_rate, cfg.frame_rate.frame_rate
            )

        parts = GeneratorLossParts(
            time=l_time,
            mel_l1=mel_l1,
            mel_l2=mel_l2,
            adversarial=l_adv,
            feature_matching=l_feat,
            commitment=l_com,
            distill=l_distill,
        )
        try:
            total = total_generator_loss(parts, cfg.weights)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite total generator loss at step {self.step}")
        except TrainingDiverged as exc:
            exc.last_checkpoint = self.last_checkpoint_path
            raise

        self.optim_g.zero_grad(set_to_none=True)
        total.backward()
        if cfg.training.grad_clip is not None:
            nn.utils.clip_grad_norm_(self.model.parameters(), cfg.training.grad_clip)
        self.optim_g.step()
        self.model.quantizer.apply_updates(qr)

        real_out = self.discriminators(x)
        fake_out = self.discriminators(x_hat.detach())
        l_disc = disc_hinge_loss(real_out, fake_out)
        if not torch.isfinite(l_disc):
            raise TrainingDiverged(
                f"non-finite discriminator loss at step {self.step}", self.last_checkpoint_path
            )
        self.optim_d.zero_grad(set_to_none=True)
        l_disc.backward()
        self.optim_d.step()

        self.step += 1
        return StepReport(
            step=self.step,
            time=l_time.detach().item(),
            mel_l1=mel_l1.detach().item(),
            mel_l2=mel_l2.detach().item(),
            adversarial=l_adv.detach().item(),
            feature_matching=l_feat.detach().item(),
            commitment=l_com.detach().item(),
            distill=l_distill.detach().item(),
            total=total.detach().item(),
            discriminator=l_disc.detach().item(),
        )

    def run(self, records, steps: int | None = None, epochs: int | None = None, log_file=None, sampler=None):
        """Train over manifest records; returns the per-step reports.

        `log_file` is an open text handle receiving one JSON record per step.
        """
        if not records:
            raise CodecError("empty manifest")
        if steps is None:
            epochs = epochs if epochs is not None else self.cfg.training.epochs
            per_epoch = math.ceil(len(records) / self.cfg.training.batch_size)
            steps = epochs * per_epoch
        sampler = sampler or getattr(self, "_sampler", None) or EpochSampler(len(records), self.py_rng)
        self._sampler = sampler
        reports = []
        for _ in range(steps):
            batch = self.make_batch(records, sampler.next_indices(self.cfg.training.batch_size))
            report = self.train_step(batch)
            reports.append(report)
            if log_file is not None:
                log_file.write(json.dumps(report.as_dict()) + "\n")
                log_file.flush()
        return reports

    # ----------------------------------------------------------- checkpoints

    def save_checkpoint(self, path) -> None:
        sampler = getattr(self, "_sampler", None)
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
            "step": self.step,
            "model": self.model.state_dict(),
            "discriminators": self.discriminators.state_dict(),
            "optim_g": self.optim_g.state_dict(),
            "optim_d": self.optim_d.state_dict(),
            "python_rng": self.py_rng.getstate(),
            "torch_rng": torch.get_rng_state(),
            "teacher_digest": self.teacher.digest(),
            "sampler": sampler.state_dict() if sampler is not None else None,
        }
        torch.save(payload, path)
        self.last_checkpoint_path = str(path)

    @classmethod
    def from_checkpoint(cls, path, device: str = "cpu") -> "Trainer":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint version {payload.get('format_version')}, "
                f"this build reads {CHECKPOINT_VERSION}"
            )
        cfg = config_from_dict(payload["config"])
        trainer = cls(cfg, device=device)
        trainer.model.load_state_dict(payload["model"])
        trainer.discriminators.load_state_dict(payload["discriminators"])
        trainer.optim_g.load_state_dict(payload["optim_g"])
        trainer.optim_d.load_state_dict(payload["optim_d"])
        trainer.step = payload["step"]
        state = payload["python_rng"]
        trainer.py_rng.setstate((state[0], tuple(state[1]), state[2]))
        torch.set_rng_state(payload["torch_rng"])
        if payload.get("sampler"):
            sampler = EpochSampler(1, trainer.py_rng)
            sampler.load_state_dict(payload["sampler"])
            sampler.num_items = len(payload["sampler"]["order"])
            trainer._sampler = sampler
        trainer.last_checkpoint_path = str(path)
        return trainer


def load_model(path, device: str = "cpu") -> tuple[CodecModel, RunConfig]:
    """Inference-only load: generator weights and config, no discriminators."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {payload.get('format_version')}, this build reads {CHECKPOINT_VERSION}"
        )
    cfg = config_from_dict(payload["config"])
    model = CodecModel(cfg).to(device)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg
