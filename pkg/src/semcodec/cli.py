"""Command-line interface: train, encode, decode, eval, kl-report.

Every command is reproducible given its seed, and every output directory
carries the resolved config digest. Relative --out paths resolve under
$SEMCODEC_HOME when that variable is set. Exit codes: 0 success, 1 validation
failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import load_config
from .errors import CodecError, ConfigValidationError
from .eval import (
    EvalCorpus,
    EvalItem,
    export_embeddings,
    plugin_metric,
    register_metric,
    si_snr,
    snmi,
    snmi_ratio,
    write_embeddings,
    CommandMetric,
)
from .klgauss import fit_gaussian_stats, kl_report_record
from .quantize import read_tokens, read_tokens_jsonl, write_tokens, write_tokens_jsonl
from .report import render_eval_report, render_kl_report, render_training_curves
from .signal import load_audio, multiscale_mel_loss, resample, save_audio
from .train import Trainer, load_manifest, load_model, make_synthetic_corpus

BUILTIN_METRICS = ("snmi", "si_snr", "mel_distance")


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(path) -> Path:
    """Resolve relative output paths under $SEMCODEC_HOME when it is set."""
    path = Path(path)
    root = os.environ.get("SEMCODEC_HOME")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _write_meta(path, **fields) -> None:
    Path(path).write_text(json.dumps(fields, indent=2))


def _load_waveform(path, sample_rate):
    wave = load_audio(path)
    if wave.sample_rate != sample_rate:
        wave = resample(wave, sample_rate)
    return wave


def cmd_train(args) -> int:
    cfg = load_config(args.preset, args.config, args.set)
    out_dir = _out_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.synthetic:
        manifest_path = make_synthetic_corpus(
            out_dir / "synthetic_corpus",
            n_clips=args.synthetic,
            seconds=max(cfg.training.segment_seconds, 1.0),
            sample_rate=cfg.frame_rate.sample_rate,
            seed=cfg.training.seed,
        )
    else:
        if not args.manifest:
            raise ConfigValidationError(["train needs --manifest or --synthetic N"])
        manifest_path = args.manifest
    records = load_manifest(manifest_path)

    resolved = out_dir / "resolved_config.json"
    resolved.write_text(json.dumps(cfg.to_dict(), indent=2))
    print(f"config digest: {cfg.digest()}")
    print(f"resolved config: {resolved}")

    trainer = Trainer(cfg)
    log_path = out_dir / "training_log.jsonl"
    with open(log_path, "w") as log_file:
        reports = trainer.run(records, steps=args.steps, epochs=args.epochs, log_file=log_file)

    ckpt_path = out_dir / "checkpoint.pt"
    trainer.save_checkpoint(ckpt_path)
    render_training_curves([r.as_dict() for r in reports], out_dir / "loss_curves.png")
    from .teacher import feature_sensitivity

    probe = trainer._load_record(records[0])
    _write_meta(
        out_dir / "run_meta.json",
        config_digest=cfg.digest(),
        checkpoint=str(ckpt_path),
        steps=trainer.step,
        teacher_digest=trainer.teacher.digest(),
        teacher_noise_sensitivity=feature_sensitivity(trainer.teacher, probe, noise_rms=1e-3),
    )
    print(f"checkpoint: {ckpt_path}")
    print(f"training log: {log_path}")
    return 0


def cmd_encode(args) -> int:
    model, cfg = load_model(args.checkpoint)
    wave = _load_waveform(args.audio, cfg.frame_rate.sample_rate)
    tokens = model.encode(wave)
    out = Path(args.tokens)
    if args.jsonl:
        write_tokens_jsonl(tokens, out, extra_header={"config_digest": cfg.digest()})
    else:
        write_tokens(tokens, out)
    _write_meta(
        out.with_suffix(out.suffix + ".meta.json"),
        config_digest=cfg.digest(),
        checkpoint_digest=_file_digest(args.checkpoint),
        frames=len(tokens),
        source_samples=len(wave),
    )
    print(f"tokens: {out} ({len(tokens)} frames at {tokens.frame_rate} Hz)")
    return 0


def _read_token_file(path):
    try:
        return read_tokens(path)
    except CodecError:
        return read_tokens_jsonl(path)


def cmd_decode(args) -> int:
    model, cfg = load_model(args.checkpoint)
    tokens = _read_token_file(args.tokens)
    if args.mode == "semantic-only":
        wave = model.decode_semantic(tokens)
    else:
        wave = model.decode(tokens)
    save_audio(wave, args.audio)
    _write_meta(
        Path(args.audio).with_suffix(".meta.json"),
        config_digest=cfg.digest(),
        checkpoint_digest=_file_digest(args.checkpoint),
        mode=args.mode,
        samples=len(wave),
    )
    print(f"audio: {args.audio} ({len(wave)} samples)")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_model(args.checkpoint)
    records = load_manifest(args.manifest)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for spec in args.plugin or []:
        name, _, command = spec.partition("=")
        if not command:
            raise ConfigValidationError([f"plugin spec '{spec}' is not name=command"])
        register_metric(name, CommandMetric(name, command))

    items = []
    corpus = EvalCorpus()
    clips = []
    for rec in records:
        wave = _load_waveform(rec.path, cfg.frame_rate.sample_rate)
        tokens = model.encode(wave)
        corpus.items.append(EvalItem(tokens, rec.transcript))
        clips.append((wave, Path(rec.path).stem, rec.path))
        item = {"path": rec.path, "frames": len(tokens)}
        if "si_snr" in metrics or "mel_distance" in metrics:
            recon = model.decode(tokens)
            if "si_snr" in metrics:
                item["si_snr"] = si_snr(wave, recon)
            if "mel_distance" in metrics:
                item["mel_distance"] = float(
                    multiscale_mel_loss(wave.samples[: len(recon)], recon.samples, cfg.frame_rate.sample_rate)
                )
        items.append(item)

    report = {
        "config_digest": cfg.digest(),
        "checkpoint_digest": _file_digest(args.checkpoint),
        "num_items": len(items),
        "metrics": metrics,
        "items": items,
    }
    if "si_snr" in metrics:
        report["si_snr_mean"] = float(np.mean([i["si_snr"] for i in items]))
    if "mel_distance" in metrics:
        report["mel_distance_mean"] = float(np.mean([i["mel_distance"] for i in items]))
    if "snmi" in metrics:
        snmi_values = {"semantic": snmi(corpus, "semantic")}
        for k in range(corpus.items[0].tokens.acoustic_ids.shape[1]):
            snmi_values[f"acoustic-{k}"] = snmi(corpus, f"acoustic-{k}")
        report["snmi"] = snmi_values
        try:
            report["snmi_ratio"] = snmi_ratio(corpus)
        except ValueError as exc:
            report["snmi_ratio"] = None
            report["snmi_ratio_note"] = str(exc)
    for name in metrics:
        if name not in BUILTIN_METRICS:
            result = plugin_metric(name, checkpoint=args.checkpoint, manifest=args.manifest)
            report.setdefault("plugins", {})[name] = {
                "value": result.value,
                "available": result.available,
                "detail": result.detail,
            }

    out_dir = _out_dir(args.out)
    artifacts = render_eval_report(report, out_dir)
    if args.export_embeddings:
        emb_path = out_dir / "embeddings.jsonl"
        write_embeddings(export_embeddings(model, clips), emb_path)
        artifacts["embeddings"] = emb_path
    print(f"report: {artifacts['report']}")
    return 0


def cmd_kl_report(args) -> int:
    model, cfg = load_model(args.checkpoint)
    records = load_manifest(args.manifest)
    teacher_frames = []
    student_frames = []
    recon_frames = []
    from .teacher import create_teacher

    teacher = create_teacher(
        cfg.teacher.backend, cfg.teacher.path, cfg.teacher.feature_dim, cfg.teacher.seed, cfg.teacher.normalize
    )
    for rec in records:
        wave = _load_waveform(rec.path, cfg.frame_rate.sample_rate)
        teacher_frames.append(teacher.encode(wave).features.numpy())
        tokens = model.encode(wave)
        recon = model.decode_semantic(tokens)
        recon_feats = teacher.encode(recon).features.numpy()
        recon_frames.append(recon_feats)
        if model.feature_proj is not None:
            z_sem, _ = model.embed(wave)
            with torch.no_grad():
                student_frames.append(model.feature_proj(z_sem).numpy())
        else:
            student_frames.append(recon_feats)

    teacher_stats = fit_gaussian_stats(np.concatenate(teacher_frames))
    student_stats = fit_gaussian_stats(np.concatenate(student_frames))
    recon_mu = np.concatenate(recon_frames).mean(axis=0)
    report = kl_report_record(teacher_stats, student_stats, recon_mu)
    report["config_digest"] = cfg.digest()
    report["checkpoint_digest"] = _file_digest(args.checkpoint)
    report["num_items"] = len(records)
    artifacts = render_kl_report(report, _out_dir(args.out))
    print(f"report: {artifacts['report']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semcodec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a tokenizer")
    p.add_argument("--preset", default="toy", help="25hz | 12.5hz | 6.25hz | toy")
    p.add_argument("--config", default=None, help="JSON override document")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--manifest", default=None)
    p.add_argument("--synthetic", type=int, default=0, metavar="N", help="generate an N-clip synthetic corpus")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("encode", help="waveform to tokens")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--jsonl", action="store_true", help="write the JSON-lines token variant")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="tokens to waveform")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--mode", choices=("full", "semantic-only"), default="full")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="run metrics over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", default="snmi,si_snr")
    p.add_argument("--plugin", action="append", default=[], metavar="NAME=COMMAND")
    p.add_argument("--export-embeddings", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("kl-report", help="Gaussian KL diagnostic over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_kl_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CodecError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
