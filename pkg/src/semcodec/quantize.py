"""Vector quantization: plain VQ, residual stacks, the split semantic/acoustic
composition, EMA codebook learning, and token-sequence serialization.

Encoding and decoding are pure given a codebook snapshot; `codebook_update`
mutates EMA state and is meant to be driven by a single training loop.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import CheckpointVersionError, CodecError

TOKEN_MAGIC = b"SCTK"
TOKEN_FORMAT_VERSION = 1

# Deterministic batch-index mixing for dead-code reseeding; avoids carrying
# RNG state inside codebooks so checkpoints stay self-contained.
_RESEED_MIX = 2654435761


class Codebook(nn.Module):
    """K code vectors of dimension d with EMA cluster statistics.

    Codebooks learn by exponential moving average (decay 0.99 by default) with
    k-means initialization on the first update batch. A code assigned nothing
    for `dead_code_interval` consecutive updates is re-seeded from the current
    batch. decay == 1.0 freezes the codebook entirely (updates become no-ops).
    """

    def __init__(self, num_entries: int, dim: int, decay: float = 0.99, dead_code_interval: int = 64, eps: float = 1e-5):
        super().__init__()
        if num_entries < 2:
            raise ValueError(f"codebook needs at least 2 entries, got {num_entries}")
        self.num_entries = num_entries
        self.dim = dim
        self.decay = decay
        self.dead_code_interval = dead_code_interval
        self.eps = eps
        self.register_buffer("entries", torch.zeros(num_entries, dim))
        self.register_buffer("ema_cluster_size", torch.zeros(num_entries))
        self.register_buffer("ema_embed_sum", torch.zeros(num_entries, dim))
        self.register_buffer("usage", torch.zeros(num_entries, dtype=torch.long))
        self.register_buffer("unused_updates", torch.zeros(num_entries, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))
        self.register_buffer("update_count", torch.zeros((), dtype=torch.long))

    def extra_repr(self):
        return f"num_entries={self.num_entries}, dim={self.dim}, decay={self.decay}"


def vq_encode(frames: torch.Tensor, codebook: Codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest code per frame by squared Euclidean distance.

    Returns (ids [...,], quantized [..., d]); ties break toward the lowest index.
    """
    if frames.shape[-1] != codebook.dim:
        raise ValueError(f"frame dim {frames.shape[-1]} != codebook dim {codebook.dim}")
    flat = frames.reshape(-1, codebook.dim)
    entries = codebook.entries.to(flat.dtype)
    dist = (
        flat.pow(2).sum(dim=1, keepdim=True)
        - 2.0 * flat @ entries.t()
        + entries.pow(2).sum(dim=1)
    )
    ids = dist.argmin(dim=1)
    quantized = entries[ids]
    return ids.reshape(frames.shape[:-1]), quantized.reshape(frames.shape)


def rvq_encode(frames: torch.Tensor, codebooks) -> tuple[torch.Tensor, torch.Tensor]:
    """Greedy residual quantization through an ordered codebook stack.

    Stage j quantizes the residual left by stages < j. Returns
    (ids [..., n_stages], quantized_sum [..., d]).
    """
    codebooks = list(codebooks)
    if not codebooks:
        raise ValueError("residual stack needs at least one codebook")
    residual = frames
    total = torch.zeros_like(frames)
    all_ids = []
    for cb in codebooks:
        ids, quantized = vq_encode(residual, cb)
        residual = residual - quantized
        total = total + quantized
        all_ids.append(ids)
    return torch.stack(all_ids, dim=-1), total


@dataclass
class QuantizationResult:
    """Training-path outputs: straight-through features, ids, and the per-stage
    (pre, post) pairs the commitment loss and EMA updates consume."""

    z_sem: torch.Tensor
    z_ac: torch.Tensor
    sem_ids: torch.Tensor
    ac_ids: torch.Tensor
    pre: list[torch.Tensor]
    post: list[torch.Tensor]


class QuantizerStack(nn.Module):
    """One semantic codebook in parallel with an ordered acoustic residual stack."""

    def __init__(
        self,
        semantic_size: int,
        acoustic_sizes,
        dim: int,
        decay: float = 0.99,
        dead_code_interval: int = 64,
    ):
        super().__init__()
        self.dim = dim
        self.semantic = Codebook(semantic_size, dim, decay, dead_code_interval)
        self.acoustic = nn.ModuleList(
            Codebook(size, dim, decay, dead_code_interval) for size in acoustic_sizes
        )

    @property
    def num_acoustic(self) -> int:
        return len(self.acoustic)

    @property
    def acoustic_sizes(self) -> tuple[int, ...]:
        return tuple(cb.num_entries for cb in self.acoustic)

    def quantize(self, h_sem: torch.Tensor, h_ac: torch.Tensor, init: bool = False) -> QuantizationResult:
        """Batched split quantization with straight-through gradients.

        With init=True, codebooks still awaiting k-means initialization are
        seeded from their own stage inputs before encoding, so later residual
        stages see residuals under the freshly initialized earlier stages.
        """
        if h_sem.shape != h_ac.shape:
            raise ValueError("semantic/acoustic features must share shape")
        if init and not bool(self.semantic.initialized):
            kmeans_init(self.semantic, h_sem.detach())
        sem_ids, q_sem = vq_encode(h_sem, self.semantic)
        pre = [h_sem]
        post = [q_sem]
        residual = h_ac
        total = torch.zeros_like(h_ac)
        ac_ids = []
        for cb in self.acoustic:
            if init and not bool(cb.initialized):
                kmeans_init(cb, residual.detach())
            ids, quantized = vq_encode(residual, cb)
            pre.append(residual)
            post.append(quantized)
            residual = residual - quantized
            total = total + quantized
            ac_ids.append(ids)
        return QuantizationResult(
            z_sem=straight_through(h_sem, q_sem),
            z_ac=straight_through(h_ac, total),
            sem_ids=sem_ids,
            ac_ids=torch.stack(ac_ids, dim=-1),
            pre=pre,
            post=post,
        )

    def apply_updates(self, result: QuantizationResult) -> None:
        """EMA + dead-code maintenance from the most recent quantize() call."""
        codebook_update(self.semantic, result.pre[0], result.sem_ids)
        for k, cb in enumerate(self.acoustic):
            codebook_update(cb, result.pre[k + 1], result.ac_ids[..., k])


@dataclass
class TokenSequence:
    """Per-frame semantic id plus acoustic id rows, with codebook sizes for validation."""

    frame_rate: float
    semantic_ids: np.ndarray
    acoustic_ids: np.ndarray
    semantic_size: int
    acoustic_sizes: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.semantic_ids = np.asarray(self.semantic_ids, dtype=np.int64)
        self.acoustic_ids = np.asarray(self.acoustic_ids, dtype=np.int64)
        self.acoustic_sizes = tuple(int(s) for s in self.acoustic_sizes)
        if self.acoustic_ids.ndim != 2:
            raise ValueError("acoustic_ids must be [T, n_acoustic]")
        if self.semantic_ids.shape[0] != self.acoustic_ids.shape[0]:
            raise ValueError("semantic and acoustic parts must share T")
        if self.acoustic_ids.shape[1] != len(self.acoustic_sizes):
            raise ValueError("acoustic_sizes must match acoustic id columns")
        if self.semantic_ids.size and (
            self.semantic_ids.min() < 0 or self.semantic_ids.max() >= self.semantic_size
        ):
            raise ValueError("semantic id out of range")
        for k, size in enumerate(self.acoustic_sizes):
            col = self.acoustic_ids[:, k]
            if col.size and (col.min() < 0 or col.max() >= size):
                raise ValueError(f"acoustic id out of range in stream {k}")

    def __len__(self):
        return self.semantic_ids.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, TokenSequence)
            and self.frame_rate == other.frame_rate
            and self.semantic_size == other.semantic_size
            and self.acoustic_sizes == other.acoustic_sizes
            and np.array_equal(self.semantic_ids, other.semantic_ids)
            and np.array_equal(self.acoustic_ids, other.acoustic_ids)
        )


def split_rvq(
    h_sem: torch.Tensor,
    h_ac: torch.Tensor,
    stack: QuantizerStack,
    frame_rate: float,
) -> tuple[TokenSequence, torch.Tensor, torch.Tensor]:
    """Quantize semantic features with the plain VQ and acoustic features with
    the residual stack; returns the token sequence plus both quantized paths."""
    if h_sem.shape != h_ac.shape:
        raise ValueError(f"feature shapes differ: {tuple(h_sem.shape)} vs {tuple(h_ac.shape)}")
    if h_sem.dim() != 2:
        raise ValueError("split_rvq expects [T, d] features")
    sem_ids, z_sem = vq_encode(h_sem, stack.semantic)
    ac_ids, z_ac = rvq_encode(h_ac, stack.acoustic)
    tokens = TokenSequence(
        frame_rate=frame_rate,
        semantic_ids=sem_ids.cpu().numpy(),
        acoustic_ids=ac_ids.cpu().numpy(),
        semantic_size=stack.semantic.num_entries,
        acoustic_sizes=stack.acoustic_sizes,
    )
    return tokens, z_sem, z_ac


def decode_tokens(tokens: TokenSequence, stack: QuantizerStack) -> tuple[torch.Tensor, torch.Tensor]:
    """Look ids back up: z_sem rows are semantic entries, z_ac rows the stack sums."""
    sem_ids = torch.from_numpy(tokens.semantic_ids)
    ac_ids = torch.from_numpy(tokens.acoustic_ids)
    if sem_ids.numel() and (sem_ids.max() >= stack.semantic.num_entries or sem_ids.min() < 0):
        raise ValueError("semantic id out of codebook range")
    z_sem = stack.semantic.entries[sem_ids]
    z_ac = torch.zeros(len(tokens), stack.dim, dtype=stack.semantic.entries.dtype)
    for k, cb in enumerate(stack.acoustic):
        col = ac_ids[:, k]
        if col.numel() and (col.max() >= cb.num_entries or col.min() < 0):
            raise ValueError(f"acoustic id out of codebook range in stream {k}")
        z_ac = z_ac + cb.entries[col]
    return z_sem, z_ac


def straight_through(pre_q: torch.Tensor, post_q: torch.Tensor) -> torch.Tensor:
    """Quantized values on the forward pass, identity gradient on the backward."""
    if pre_q.shape != post_q.shape:
        raise ValueError("pre/post quantization shapes differ")
    return pre_q + (post_q - pre_q).detach()


def commitment_loss(pre_q, post_q, reduction: str = "mean") -> torch.Tensor:
    """Squared deviation of encoder outputs from their (detached) codes.

    `pre_q`/`post_q` are matched sequences of per-quantizer tensors covering the
    semantic stage and every acoustic stage. Reduction is the mean over frames
    (and batch) of the per-frame squared L2 norm, summed over stages; "sum"
    replaces the frame mean with a sum. Gradients reach the encoder side only.
    """
    pre_q, post_q = list(pre_q), list(post_q)
    if len(pre_q) != len(post_q) or not pre_q:
        raise ValueError("pre/post quantizer lists must be non-empty and matched")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction '{reduction}'")
    total = pre_q[0].new_zeros(())
    for pre, post in zip(pre_q, post_q):
        if pre.shape != post.shape:
            raise ValueError("pre/post quantization shapes differ")
        dev = (pre - post.detach()).pow(2).sum(dim=-1)
        total = total + (dev.mean() if reduction == "mean" else dev.sum())
    return total


def kmeans_init(codebook: Codebook, frames: torch.Tensor, iters: int = 10) -> None:
    """Deterministic Lloyd iterations seeded by evenly spaced batch frames."""
    flat = frames.reshape(-1, codebook.dim).detach()
    n = flat.shape[0]
    if n == 0:
        return
    idx = torch.linspace(0, n - 1, codebook.num_entries).round().long()
    centers = flat[idx].clone()
    for _ in range(iters):
        dist = (
            flat.pow(2).sum(1, keepdim=True) - 2.0 * flat @ centers.t() + centers.pow(2).sum(1)
        )
        assign = dist.argmin(dim=1)
        counts = torch.bincount(assign, minlength=codebook.num_entries).clamp(min=1)
        sums = torch.zeros_like(centers).index_add_(0, assign, flat)
        centers = torch.where(
            torch.bincount(assign, minlength=codebook.num_entries).unsqueeze(1) > 0,
            sums / counts.unsqueeze(1),
            centers,
        )
    codebook.entries.copy_(centers.to(codebook.entries.dtype))
    codebook.ema_embed_sum.copy_(centers.to(codebook.entries.dtype))
    codebook.ema_cluster_size.fill_(1.0)
    codebook.initialized.fill_(True)


def codebook_update(codebook: Codebook, frames: torch.Tensor, ids: torch.Tensor) -> Codebook:
    """EMA update from the most recent encode's assignments, plus dead-code reseed.

    No-op on empty batches and under the degenerate decay == 1.0.
    """
    flat = frames.reshape(-1, codebook.dim).detach().to(codebook.entries.dtype)
    flat_ids = ids.reshape(-1)
    if flat.shape[0] == 0:
        return codebook
    if codebook.decay >= 1.0:
        return codebook
    if not bool(codebook.initialized):
        kmeans_init(codebook, flat)
        flat_ids = vq_encode(flat, codebook)[0].reshape(-1)

    counts = torch.bincount(flat_ids, minlength=codebook.num_entries).to(codebook.entries.dtype)
    sums = torch.zeros_like(codebook.ema_embed_sum).index_add_(0, flat_ids, flat)
    decay = codebook.decay
    codebook.ema_cluster_size.mul_(decay).add_(counts, alpha=1 - decay)
    codebook.ema_embed_sum.mul_(decay).add_(sums, alpha=1 - decay)

    n = codebook.ema_cluster_size.sum()
    smoothed = (
        (codebook.ema_cluster_size + codebook.eps)
        / (n + codebook.num_entries * codebook.eps)
        * n
    )
    codebook.entries.copy_(codebook.ema_embed_sum / smoothed.unsqueeze(1))

    used = counts > 0
    codebook.usage.add_(counts.long())
    codebook.unused_updates.add_(1)
    codebook.unused_updates[used] = 0
    codebook.update_count.add_(1)

    dead = codebook.unused_updates >= codebook.dead_code_interval
    if dead.any():
        dead_idx = dead.nonzero(as_tuple=False).squeeze(1)
        step = int(codebook.update_count)
        picks = (dead_idx * _RESEED_MIX + step) % flat.shape[0]
        codebook.entries[dead_idx] = flat[picks]
        codebook.ema_embed_sum[dead_idx] = flat[picks]
        codebook.ema_cluster_size[dead_idx] = 1.0
        codebook.unused_updates[dead_idx] = 0
    return codebook


def write_tokens(tokens: TokenSequence, path) -> None:
    """Self-describing binary token record; bit-exact round-trip with read_tokens."""
    n_ac = len(tokens.acoustic_sizes)
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC)
        f.write(struct.pack("<Hd", TOKEN_FORMAT_VERSION, tokens.frame_rate))
        f.write(struct.pack("<IH", tokens.semantic_size, n_ac))
        f.write(struct.pack(f"<{n_ac}I", *tokens.acoustic_sizes))
        f.write(struct.pack("<Q", len(tokens)))
        rows = np.concatenate([tokens.semantic_ids[:, None], tokens.acoustic_ids], axis=1)
        f.write(rows.astype("<u4").tobytes())


def read_tokens(path) -> TokenSequence:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TOKEN_MAGIC:
            raise CodecError(f"{path}: not a token file (bad magic {magic!r})")
        version, frame_rate = struct.unpack("<Hd", f.read(10))
        if version != TOKEN_FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: token format version {version}, this build reads {TOKEN_FORMAT_VERSION}"
            )
        semantic_size, n_ac = struct.unpack("<IH", f.read(6))
        acoustic_sizes = struct.unpack(f"<{n_ac}I", f.read(4 * n_ac))
        (length,) = struct.unpack("<Q", f.read(8))
        raw = f.read(4 * length * (1 + n_ac))
        rows = np.frombuffer(raw, dtype="<u4").reshape(length, 1 + n_ac).astype(np.int64)
    return TokenSequence(
        frame_rate=frame_rate,
        semantic_ids=rows[:, 0],
        acoustic_ids=rows[:, 1:],
        semantic_size=int(semantic_size),
        acoustic_sizes=tuple(int(s) for s in acoustic_sizes),
    )


def write_tokens_jsonl(tokens: TokenSequence, path, extra_header: dict | None = None) -> None:
    """Human-readable JSON-lines variant: one header line, then one line per frame."""
    header = {
        "format_version": TOKEN_FORMAT_VERSION,
        "frame_rate": tokens.frame_rate,
        "semantic_size": tokens.semantic_size,
        "acoustic_sizes": list(tokens.acoustic_sizes),
    }
    if extra_header:
        header.update(extra_header)
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for t in range(len(tokens)):
            f.write(
                json.dumps(
                    {"semantic": int(tokens.semantic_ids[t]), "acoustic": [int(v) for v in tokens.acoustic_ids[t]]}
                )
                + "\n"
            )


def read_tokens_jsonl(path) -> TokenSequence:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format_version") != TOKEN_FORMAT_VERSION:
            raise CheckpointVersionError(f"{path}: unsupported token format version")
        sem, ac = [], []
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            sem.append(rec["semantic"])
            ac.append(rec["acoustic"])
    n_ac = len(header["acoustic_sizes"])
    return TokenSequence(
        frame_rate=float(header["frame_rate"]),
        semantic_ids=np.asarray(sem, dtype=np.int64),
        acoustic_ids=np.asarray(ac, dtype=np.int64).reshape(len(sem), n_ac),
        semantic_size=int(header["semantic_size"]),
        acoustic_sizes=tuple(header["acoustic_sizes"]),
    )
