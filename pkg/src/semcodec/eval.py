"""Token-stream evaluation: the sequence-identity mutual-information metric,
reconstruction fidelity proxies, delay-pattern utilities, embedding export, and
the external-metric plugin interface.
"""

from __future__ import annotations

import hashlib
import json
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from itertools import groupby

import numpy as np
import torch

from .errors import MetricAdapterError
from .quantize import TokenSequence
from .signal import Waveform

SI_SNR_CAP_DB = 60.0
LSH_PRIME = (1 << 31) - 1  # Mersenne prime keeps a*x + b inside int64
DEFAULT_NUM_HASHES = 64


def dedup(ids) -> list[int]:
    """Collapse runs of equal adjacent ids; idempotent."""
    return [key for key, _ in groupby(ids)]


def _shingles(ids) -> list[int]:
    """Token bigrams with start/end sentinels so single-token sequences hash too."""
    padded = [-1, *ids, -2]
    return [((a + 3) << 32) ^ (b + 3) for a, b in zip(padded, padded[1:])]


def lsh_bucket(ids, num_hashes: int = DEFAULT_NUM_HASHES, seed: int = 0) -> str:
    """MinHash signature over the token-bigram set, reduced to a stable bucket id.

    Deterministic for a fixed seed: identical sequences always collide.
    """
    ids = list(ids)
    if not ids:
        return "empty"
    rng = np.random.default_rng(seed)
    a = rng.integers(1, LSH_PRIME, size=num_hashes, dtype=np.int64)
    b = rng.integers(0, LSH_PRIME, size=num_hashes, dtype=np.int64)
    shingles = np.asarray(sorted({s % LSH_PRIME for s in _shingles(ids)}), dtype=np.int64)
    hashed = (shingles[:, None] * a[None, :] + b[None, :]) % LSH_PRIME
    signature = hashed.min(axis=0)
    digest = hashlib.sha1(signature.astype("<i8").tobytes()).hexdigest()
    return digest[:16]


@dataclass(frozen=True)
class EvalItem:
    tokens: TokenSequence
    transcript_id: str


@dataclass
class EvalCorpus:
    items: list[EvalItem] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def transcript_classes(self) -> set[str]:
        return {item.transcript_id for item in self.items}


def mutual_information(contingency: np.ndarray) -> tuple[float, float, float]:
    """(MI, H(rows), H(cols)) in nats from an empirical contingency table."""
    counts = np.asarray(contingency, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty contingency table")
    joint = counts / total
    p_row = joint.sum(axis=1)
    p_col = joint.sum(axis=0)
    mi = 0.0
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            p = joint[i, j]
            if p > 0:
                mi += p * math.log(p / (p_row[i] * p_col[j]))
    h_row = -sum(p * math.log(p) for p in p_row if p > 0)
    h_col = -sum(p * math.log(p) for p in p_col if p > 0)
    return mi, h_row, h_col


def _stream_ids(tokens: TokenSequence, stream: str) -> np.ndarray:
    if stream == "semantic":
        return tokens.semantic_ids
    if stream.startswith("acoustic-"):
        k = int(stream.split("-", 1)[1])
        if not 0 <= k < tokens.acoustic_ids.shape[1]:
            raise ValueError(f"acoustic stream index {k} out of range")
        return tokens.acoustic_ids[:, k]
    raise ValueError(f"unknown stream '{stream}' (expected 'semantic' or 'acoustic-k')")


def snmi(corpus: EvalCorpus, stream: str = "semantic", num_hashes: int = DEFAULT_NUM_HASHES, seed: int = 0) -> float:
    """Mutual information between hashed sequence identities and transcripts,
    normalized by the transcript entropy. Always in [0, 1]."""
    classes = sorted(corpus.transcript_classes())
    if len(classes) < 2:
        raise ValueError("need at least 2 transcript classes")
    buckets: dict[str, int] = {}
    pairs = []
    for item in corpus.items:
        ids = dedup(_stream_ids(item.tokens, stream).tolist())
        bucket = lsh_bucket(ids, num_hashes, seed)
        pairs.append((buckets.setdefault(bucket, len(buckets)), classes.index(item.transcript_id)))
    table = np.zeros((len(buckets), len(classes)))
    for b, c in pairs:
        table[b, c] += 1
    mi, _, h_transcript = mutual_information(table)
    if h_transcript <= 0:
        raise ValueError("degenerate transcript distribution")
    return min(max(mi / h_transcript, 0.0), 1.0)


def snmi_ratio(corpus: EvalCorpus, num_hashes: int = DEFAULT_NUM_HASHES, seed: int = 0) -> float:
    """Mean acoustic-stream SNMI divided by semantic SNMI."""
    semantic = snmi(corpus, "semantic", num_hashes, seed)
    if semantic == 0:
        raise ValueError("semantic SNMI is zero; ratio undefined")
    n_ac = corpus.items[0].tokens.acoustic_ids.shape[1]
    acoustic = [snmi(corpus, f"acoustic-{k}", num_hashes, seed) for k in range(n_ac)]
    return float(np.mean(acoustic)) / semantic


def si_snr(x, x_hat, cap_db: float = SI_SNR_CAP_DB) -> float:
    """Scale-invariant signal-to-noise ratio in dB, capped.

    Invariant to positive rescaling of the estimate; both signals are
    mean-removed and truncated to the shorter length first.
    """
    ref = (x.samples if isinstance(x, Waveform) else x).to(torch.float64)
    est = (x_hat.samples if isinstance(x_hat, Waveform) else x_hat).to(torch.float64)
    n = min(ref.shape[-1], est.shape[-1])
    if n == 0:
        raise ValueError("empty overlap")
    ref = ref[:n] - ref[:n].mean()
    est = est[:n] - est[:n].mean()
    ref_energy = float(ref.pow(2).sum())
    if ref_energy <= 0:
        raise ValueError("zero-energy reference")
    target = (float((est * ref).sum()) / ref_energy) * ref
    noise = est - target
    noise_energy = float(noise.pow(2).sum())
    target_energy = float(target.pow(2).sum())
    if noise_energy == 0:
        return cap_db
    return min(10.0 * math.log10(target_energy / noise_energy), cap_db)


@dataclass
class DelayedTokenGrid:
    """Step-major grid with the acoustic rows lagging the semantic row by one.

    The PAD id of each column is the corresponding codebook size (one past the
    last valid id).
    """

    steps: np.ndarray
    semantic_size: int
    acoustic_sizes: tuple[int, ...]
    frame_rate: float

    @property
    def pad_ids(self) -> tuple[int, ...]:
        return (self.semantic_size, *self.acoustic_sizes)


def apply_delay(tokens: TokenSequence) -> DelayedTokenGrid:
    """Stagger acoustic rows one step behind the semantic row; grid has T+1 steps."""
    t = len(tokens)
    n_ac = tokens.acoustic_ids.shape[1]
    grid = np.zeros((t + 1, 1 + n_ac), dtype=np.int64)
    grid[:, 0] = tokens.semantic_size
    for k in range(n_ac):
        grid[:, 1 + k] = tokens.acoustic_sizes[k]
    grid[:t, 0] = tokens.semantic_ids
    grid[1 : t + 1, 1:] = tokens.acoustic_ids
    return DelayedTokenGrid(grid, tokens.semantic_size, tokens.acoustic_sizes, tokens.frame_rate)


def invert_delay(grid: DelayedTokenGrid) -> TokenSequence:
    """Undo apply_delay, validating the PAD layout cell by cell."""
    steps = grid.steps
    t = steps.shape[0] - 1
    if t <= 0:
        raise ValueError("degenerate all-PAD grid cannot be inverted")
    if steps.shape[1] != 1 + len(grid.acoustic_sizes):
        raise ValueError("grid width does not match acoustic stream count")
    if steps[t, 0] != grid.semantic_size:
        raise ValueError("missing PAD in the trailing semantic cell")
    if (steps[:t, 0] >= grid.semantic_size).any():
        raise ValueError("PAD in an illegal semantic cell")
    for k, size in enumerate(grid.acoustic_sizes):
        if steps[0, 1 + k] != size:
            raise ValueError(f"missing PAD in the leading acoustic cell of stream {k}")
        if (steps[1:, 1 + k] >= size).any():
            raise ValueError(f"PAD in an illegal acoustic cell of stream {k}")
    return TokenSequence(
        frame_rate=grid.frame_rate,
        semantic_ids=steps[:t, 0],
        acoustic_ids=steps[1 : t + 1, 1:],
        semantic_size=grid.semantic_size,
        acoustic_sizes=grid.acoustic_sizes,
    )


def export_embeddings(model, clips) -> list[dict]:
    """Per-clip time-mean semantic and acoustic quantized embeddings.

    `clips` yields (Waveform, speaker_id, utterance_id) triples; the records
    are ready for an external projection tool.
    """
    records = []
    for wave, speaker, utterance in clips:
        z_sem, z_ac = model.embed(wave)
        for stream, z in (("semantic", z_sem), ("acoustic", z_ac)):
            records.append(
                {
                    "utterance": utterance,
                    "speaker": speaker,
                    "stream": stream,
                    "vector": z.mean(dim=0).tolist(),
                }
            )
    return records


def write_embeddings(records, path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


# ------------------------------------------------------------------- plugins


@dataclass(frozen=True)
class MetricResult:
    name: str
    value: float | None
    available: bool
    detail: str = ""


_METRIC_REGISTRY: dict = {}


def register_metric(name: str, fn) -> None:
    _METRIC_REGISTRY[name] = fn


def unregister_metric(name: str) -> None:
    _METRIC_REGISTRY.pop(name, None)


def plugin_metric(name: str, **kwargs) -> MetricResult:
    """Dispatch to a registered external evaluator.

    An unregistered name yields an explicit unavailable result, never a silent
    zero; adapter failures raise with their output preserved.
    """
    fn = _METRIC_REGISTRY.get(name)
    if fn is None:
        return MetricResult(name, None, False, "no evaluator registered under this name")
    value = fn(**kwargs)
    return MetricResult(name, float(value), True)


class CommandMetric:
    """Adapter running an external command whose stdout is a single float."""

    def __init__(self, name: str, command: str):
        self.name = name
        self.argv = shlex.split(command)

    def __call__(self, **kwargs) -> float:
        argv = list(self.argv)
        for key, value in kwargs.items():
            argv += [f"--{key}", str(value)]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise MetricAdapterError(
                self.name, f"exit code {proc.returncode}", proc.stdout, proc.stderr
            )
        try:
            return float(proc.stdout.strip())
        except ValueError as exc:
            raise MetricAdapterError(
                self.name, f"cannot parse stdout as float: {exc}", proc.stdout, proc.stderr
            ) from exc
