import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semcodec.errors import CheckpointVersionError
from semcodec.quantize import (
    Codebook,
    QuantizerStack,
    TokenSequence,
    codebook_update,
    commitment_loss,
    decode_tokens,
    kmeans_init,
    read_tokens,
    read_tokens_jsonl,
    rvq_encode,
    split_rvq,
    straight_through,
    vq_encode,
    write_tokens,
    write_tokens_jsonl,
)


def make_codebook(entries: torch.Tensor, **kwargs) -> Codebook:
    cb = Codebook(entries.shape[0], entries.shape[1], **kwargs).to(entries.dtype)
    cb.entries.copy_(entries)
    cb.initialized.fill_(True)
    return cb


def brute_force_ids(frames: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    # Independent oracle: explicit squared distances, first-minimum argmin.
    diffs = frames[:, None, :] - entries[None, :, :]
    return diffs.pow(2).sum(-1).argmin(dim=1)


class TestVqEncode:
    def test_nearest_by_inspection(self):
        cb = make_codebook(torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
        ids, quantized = vq_encode(torch.tensor([[0.2, 0.1]]), cb)
        assert ids.tolist() == [0]
        assert torch.equal(quantized, torch.tensor([[0.0, 0.0]]))

    def test_exact_match_zero_error(self):
        torch.manual_seed(0)
        entries = torch.randn(8, 4)
        cb = make_codebook(entries)
        ids, quantized = vq_encode(entries[3].unsqueeze(0), cb)
        assert ids.tolist() == [3]
        assert torch.equal(quantized[0], entries[3])

    def test_matches_brute_force(self):
        torch.manual_seed(1)
        frames = torch.randn(100, 8, dtype=torch.float64)
        entries = torch.randn(16, 8, dtype=torch.float64)
        cb = make_codebook(entries)
        ids, quantized = vq_encode(frames, cb)
        expected = brute_force_ids(frames, entries)
        assert torch.equal(ids, expected)
        assert torch.equal(quantized, entries[expected])

    def test_tie_breaks_to_lowest_index(self):
        entry = torch.tensor([0.5, -0.25])
        cb = make_codebook(torch.stack([entry, entry, entry]))
        ids, _ = vq_encode(torch.tensor([[0.9, 0.1]]), cb)
        assert ids.tolist() == [0]

    @given(st.integers(0, 2**31 - 1), st.integers(2, 24), st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_property_matches_exhaustive_search(self, seed, num_entries, dim):
        gen = torch.Generator().manual_seed(seed)
        frames = torch.randn(30, dim, generator=gen, dtype=torch.float64)
        entries = torch.randn(num_entries, dim, generator=gen, dtype=torch.float64)
        cb = make_codebook(entries)
        ids, _ = vq_encode(frames, cb)
        assert torch.equal(ids, brute_force_ids(frames, entries))

    def test_dimension_mismatch(self):
        cb = make_codebook(torch.zeros(4, 3))
        with pytest.raises(ValueError):
            vq_encode(torch.zeros(5, 2), cb)

    def test_batched_shapes(self):
        torch.manual_seed(2)
        cb = make_codebook(torch.randn(8, 4))
        ids, quantized = vq_encode(torch.randn(2, 10, 4), cb)
        assert ids.shape == (2, 10)
        assert quantized.shape == (2, 10, 4)


class TestRvqEncode:
    def test_single_stage_equals_vq(self):
        torch.manual_seed(3)
        frames = torch.randn(20, 4)
        cb = make_codebook(torch.randn(8, 4))
        rvq_ids, rvq_sum = rvq_encode(frames, [cb])
        vq_ids, vq_quant = vq_encode(frames, cb)
        assert torch.equal(rvq_ids[:, 0], vq_ids)
        assert torch.equal(rvq_sum, vq_quant)

    def test_residual_norm_nonincreasing_with_zero_code(self):
        # Every codebook contains the zero vector, so each stage can fall back
        # to "no change": residual norms cannot grow.
        torch.manual_seed(4)
        frames = torch.randn(50, 6)
        stacks = []
        for k in range(3):
            entries = torch.randn(9, 6)
            entries[0] = 0.0
            stacks.append(make_codebook(entries))
        residual = frames
        prev_norm = residual.pow(2).sum(-1)
        for cb in stacks:
            _, quantized = vq_encode(residual, cb)
            residual = residual - quantized
            norm = residual.pow(2).sum(-1)
            assert (norm <= prev_norm + 1e-6).all()
            prev_norm = norm

    def test_matches_stagewise_brute_force(self):
        torch.manual_seed(5)
        frames = torch.randn(20, 5, dtype=torch.float64)
        cb1 = make_codebook(torch.randn(4, 5, dtype=torch.float64))
        cb2 = make_codebook(torch.randn(4, 5, dtype=torch.float64))
        ids, total = rvq_encode(frames, [cb1, cb2])

        ids1 = brute_force_ids(frames, cb1.entries)
        res = frames - cb1.entries[ids1]
        ids2 = brute_force_ids(res, cb2.entries)
        assert torch.equal(ids[:, 0], ids1)
        assert torch.equal(ids[:, 1], ids2)
        assert torch.allclose(total, cb1.entries[ids1] + cb2.entries[ids2])

    def test_quantized_sum_is_stage_sum(self):
        torch.manual_seed(6)
        frames = torch.randn(10, 4)
        cbs = [make_codebook(torch.randn(6, 4)) for _ in range(3)]
        ids, total = rvq_encode(frames, cbs)
        rebuilt = sum(cb.entries[ids[:, j]] for j, cb in enumerate(cbs))
        assert torch.allclose(total, rebuilt)

    def test_empty_stack_rejected(self):
        with pytest.raises(ValueError):
            rvq_encode(torch.zeros(3, 2), [])


def make_stack(dim=4, sem=8, n_ac=7, ac=8, seed=0) -> QuantizerStack:
    torch.manual_seed(seed)
    stack = QuantizerStack(sem, (ac,) * n_ac, dim)
    stack.semantic.entries.copy_(torch.randn(sem, dim))
    stack.semantic.initialized.fill_(True)
    for cb in stack.acoustic:
        cb.entries.copy_(torch.randn(ac, dim))
        cb.initialized.fill_(True)
    return stack


class TestSplitRvq:
    def test_exact_semantic_match(self):
        stack = make_stack()
        h_sem = stack.semantic.entries[:5].clone()
        h_ac = torch.randn(5, 4)
        tokens, z_sem, _ = split_rvq(h_sem, h_ac, stack, 25.0)
        assert torch.equal(z_sem, h_sem)
        assert tokens.semantic_ids.tolist() == [0, 1, 2, 3, 4]

    def test_decode_consistency(self):
        torch.manual_seed(7)
        stack = make_stack()
        tokens, z_sem, z_ac = split_rvq(torch.randn(12, 4), torch.randn(12, 4), stack, 25.0)
        back_sem, back_ac = decode_tokens(tokens, stack)
        assert torch.equal(back_sem, z_sem)
        assert torch.equal(back_ac, z_ac)

    def test_single_frame_round_trip(self):
        stack = make_stack(seed=1)
        tokens, z_sem, z_ac = split_rvq(torch.randn(1, 4), torch.randn(1, 4), stack, 25.0)
        back_sem, back_ac = decode_tokens(tokens, stack)
        assert torch.equal(back_sem, z_sem) and torch.equal(back_ac, z_ac)

    def test_shape_mismatch_rejected(self):
        stack = make_stack()
        with pytest.raises(ValueError):
            split_rvq(torch.zeros(3, 4), torch.zeros(4, 4), stack, 25.0)

    def test_serialized_round_trip_decodes_identically(self, tmp_path):
        torch.manual_seed(8)
        stack = make_stack(seed=2)
        tokens, z_sem, z_ac = split_rvq(torch.randn(9, 4), torch.randn(9, 4), stack, 12.5)
        path = tmp_path / "tokens.bin"
        write_tokens(tokens, path)
        reread = read_tokens(path)
        assert reread == tokens
        back_sem, back_ac = decode_tokens(reread, stack)
        assert torch.equal(back_sem, z_sem) and torch.equal(back_ac, z_ac)


class TestDecodeTokens:
    def test_constant_lookup(self):
        stack = make_stack(seed=3)
        tokens = TokenSequence(25.0, np.zeros(4), np.zeros((4, 7)), 8, (8,) * 7)
        z_sem, z_ac = decode_tokens(tokens, stack)
        assert torch.equal(z_sem[0], stack.semantic.entries[0])
        expected = sum(cb.entries[0] for cb in stack.acoustic)
        assert torch.allclose(z_ac[0], expected)

    def test_out_of_range_rejected(self):
        stack = make_stack(seed=4)  # stack codebooks hold 8 entries
        tokens = TokenSequence(25.0, np.full(2, 98), np.zeros((2, 7)), 99, (99,) * 7)
        with pytest.raises(ValueError):
            decode_tokens(tokens, stack)


class TestTokenSerialization:
    def make_tokens(self):
        rng = np.random.default_rng(0)
        return TokenSequence(
            frame_rate=6.25,
            semantic_ids=rng.integers(0, 4096, 50),
            acoustic_ids=rng.integers(0, 4096, (50, 7)),
            semantic_size=4096,
            acoustic_sizes=(4096,) * 7,
        )

    def test_binary_bit_exact(self, tmp_path):
        tokens = self.make_tokens()
        path = tmp_path / "t.tok"
        write_tokens(tokens, path)
        assert read_tokens(path) == tokens

    def test_jsonl_bit_exact(self, tmp_path):
        tokens = self.make_tokens()
        path = tmp_path / "t.jsonl"
        write_tokens_jsonl(tokens, path)
        assert read_tokens_jsonl(path) == tokens

    def test_version_guard(self, tmp_path):
        tokens = self.make_tokens()
        path = tmp_path / "t.tok"
        write_tokens(tokens, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            read_tokens(path)


class TestCommitmentLoss:
    def test_identity_zero(self):
        x = torch.randn(10, 4)
        assert commitment_loss([x], [x.clone()]).item() == 0.0

    def test_unit_deviation_sum_reduction(self):
        # Deviation (1, 0, ...) per frame over T frames sums to T.
        t = 13
        pre = torch.zeros(t, 4)
        post = torch.zeros(t, 4)
        pre[:, 0] = 1.0
        assert commitment_loss([pre], [post], reduction="sum").item() == pytest.approx(float(t))

    def test_unit_deviation_mean_reduction(self):
        pre = torch.zeros(13, 4)
        post = torch.zeros(13, 4)
        pre[:, 0] = 1.0
        assert commitment_loss([pre], [post]).item() == pytest.approx(1.0)

    def test_sums_over_stages(self):
        pre = torch.zeros(5, 2)
        post = torch.zeros(5, 2)
        pre[:, 0] = 1.0
        assert commitment_loss([pre, pre], [post, post]).item() == pytest.approx(2.0)

    def test_gradient_reaches_encoder_only(self):
        torch.manual_seed(9)
        pre = torch.randn(6, 3, requires_grad=True)
        post = torch.randn(6, 3, requires_grad=True)
        loss = commitment_loss([pre], [post])
        g_pre, g_post = torch.autograd.grad(loss, [pre, post], allow_unused=True)
        assert g_pre is not None and g_pre.abs().sum() > 0
        assert g_post is None or torch.all(g_post == 0)

    def test_codebook_gradient_exactly_zero(self):
        # Autodiff oracle: entries indexed from the codebook get no gradient.
        torch.manual_seed(10)
        cb = make_codebook(torch.randn(8, 4))
        cb.entries.requires_grad_(True)
        frames = torch.randn(12, 4, requires_grad=True)
        _, quantized = vq_encode(frames, cb)
        loss = commitment_loss([frames], [quantized])
        g_frames, g_entries = torch.autograd.grad(loss, [frames, cb.entries], allow_unused=True)
        assert g_frames.abs().sum() > 0
        assert g_entries is None or torch.all(g_entries == 0)
        cb.entries.requires_grad_(False)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            commitment_loss([torch.zeros(3, 2)], [torch.zeros(2, 2)])


class TestStraightThrough:
    def test_forward_equals_quantized(self):
        pre = torch.tensor([0.25, 0.5, -1.0])
        post = torch.tensor([0.5, 0.75, -0.5])
        assert torch.equal(straight_through(pre, post), post)

    def test_identity_jacobian(self):
        pre = torch.randn(5, 3, requires_grad=True)
        post = torch.randn(5, 3)
        out = straight_through(pre, post)
        (grad,) = torch.autograd.grad(out.sum(), pre)
        assert torch.equal(grad, torch.ones_like(pre))

    def test_encoder_receives_gradient_through_quantizer(self):
        torch.manual_seed(11)
        encoder = torch.nn.Linear(6, 4)
        cb = make_codebook(torch.randn(8, 4))
        x = torch.randn(10, 6)
        h = encoder(x)
        _, quantized = vq_encode(h, cb)
        z = straight_through(h, quantized)
        z.pow(2).sum().backward()
        total = sum(p.grad.abs().sum().item() for p in encoder.parameters())
        assert total > 0


class TestCodebookUpdate:
    def test_fixed_point_on_repeated_batch(self):
        # Repeated identical two-cluster batches drive entries to the cluster means.
        torch.manual_seed(12)
        cb = Codebook(2, 3, decay=0.9)
        frames = torch.cat([torch.full((10, 3), -2.0), torch.full((10, 3), 2.0)])
        for _ in range(200):
            ids, _ = (vq_encode(frames, cb) if bool(cb.initialized) else (torch.zeros(20, dtype=torch.long), None))
            codebook_update(cb, frames, ids)
        sorted_entries = cb.entries[cb.entries[:, 0].argsort()]
        assert torch.allclose(sorted_entries[0], torch.full((3,), -2.0), atol=1e-2)
        assert torch.allclose(sorted_entries[1], torch.full((3,), 2.0), atol=1e-2)

    def test_dead_code_reseeded(self):
        torch.manual_seed(13)
        cb = Codebook(4, 2, decay=0.5, dead_code_interval=3)
        kmeans_init(cb, torch.randn(16, 2))
        cb.entries[3] = torch.tensor([100.0, 100.0])  # never selected
        frames = torch.randn(32, 2)
        for _ in range(3):
            ids, _ = vq_encode(frames, cb)
            codebook_update(cb, frames, ids)
        # after the interval the faraway code must have been re-seeded from batch
        assert cb.entries[3].abs().max() < 50.0

    def test_decay_one_is_noop(self):
        torch.manual_seed(14)
        cb = Codebook(4, 2, decay=1.0)
        kmeans_init(cb, torch.randn(16, 2))
        before = cb.entries.clone()
        frames = torch.randn(32, 2)
        ids, _ = vq_encode(frames, cb)
        codebook_update(cb, frames, ids)
        assert torch.equal(cb.entries, before)

    def test_empty_batch_is_noop(self):
        cb = Codebook(4, 2)
        kmeans_init(cb, torch.randn(8, 2))
        before = cb.entries.clone()
        codebook_update(cb, torch.zeros(0, 2), torch.zeros(0, dtype=torch.long))
        assert torch.equal(cb.entries, before)


class TestQuantizerStackTraining:
    def test_quantize_matches_pure_ops(self):
        torch.manual_seed(15)
        stack = make_stack(seed=5)
        h_sem = torch.randn(2, 6, 4)
        h_ac = torch.randn(2, 6, 4)
        result = stack.quantize(h_sem, h_ac)
        sem_ids, q_sem = vq_encode(h_sem, stack.semantic)
        ac_ids, q_ac = rvq_encode(h_ac, stack.acoustic)
        assert torch.equal(result.sem_ids, sem_ids)
        assert torch.equal(result.ac_ids, ac_ids)
        assert torch.allclose(result.z_sem, q_sem)
        assert torch.allclose(result.z_ac, q_ac)

    def test_updates_move_codebooks(self):
        torch.manual_seed(16)
        stack = QuantizerStack(8, (8,) * 3, 4)
        h = torch.randn(2, 20, 4)
        result = stack.quantize(h, h.clone(), init=True)
        before = stack.semantic.entries.clone()
        stack.apply_updates(result)
        assert not torch.equal(stack.semantic.entries, before)
