import numpy as np
import pytest
import torch

from semcodec.errors import CodecError
from semcodec.signal import Waveform
from semcodec.teacher import (
    StandInEncoder,
    Teacher,
    align_truncate,
    create_teacher,
    feature_sensitivity,
    parameter_digest,
    save_teacher,
)


def small_teacher() -> Teacher:
    return create_teacher("standin", feature_dim=64, seed=1337)


class TestStandInTeacher:
    def test_bit_identical_across_constructions(self):
        a = StandInEncoder(feature_dim=64, seed=1337)
        b = StandInEncoder(feature_dim=64, seed=1337)
        assert parameter_digest(a) == parameter_digest(b)

    def test_different_seeds_differ(self):
        a = StandInEncoder(feature_dim=64, seed=1)
        b = StandInEncoder(feature_dim=64, seed=2)
        assert parameter_digest(a) != parameter_digest(b)

    def test_encode_deterministic(self):
        teacher = small_teacher()
        torch.manual_seed(0)
        wave = Waveform(torch.rand(6400) * 2 - 1, 16000)
        f1 = teacher.encode(wave).features
        f2 = teacher.encode(wave).features
        assert torch.equal(f1, f2)

    def test_frame_arithmetic_50hz(self):
        teacher = small_teacher()
        wave = Waveform(torch.zeros(32000), 16000)
        feats = teacher.encode(wave)
        # oracle: 2 s at a 320-sample hop -> 100 frames
        assert feats.features.shape == (100, 64)
        assert feats.frame_rate == 50.0

    def test_parameters_frozen(self):
        teacher = small_teacher()
        assert all(not p.requires_grad for p in teacher.module.parameters())

    def test_gradient_flows_through_input(self):
        teacher = small_teacher()
        x = torch.randn(1, 3200, requires_grad=True)
        out = teacher.features(x)
        out.pow(2).sum().backward()
        assert x.grad is not None and x.grad.abs().sum() > 0

    def test_digest_stable_under_forward(self):
        teacher = small_teacher()
        before = teacher.digest()
        teacher.encode(Waveform(torch.rand(3200), 16000))
        assert teacher.digest() == before


class TestFileBackend:
    def test_round_trip(self, tmp_path):
        teacher = small_teacher()
        path = tmp_path / "teacher.pt"
        save_teacher(teacher, path)
        loaded = create_teacher("file", path=path)
        assert loaded.digest() == teacher.digest()
        assert loaded.feature_dim == teacher.feature_dim

    def test_missing_weights(self, tmp_path):
        with pytest.raises(CodecError):
            create_teacher("file", path=tmp_path / "missing.pt")

    def test_requires_path(self):
        with pytest.raises(CodecError):
            create_teacher("file")

    def test_unknown_backend(self):
        with pytest.raises(CodecError):
            create_teacher("whatever")


class TestAlignTruncate:
    def test_equal_lengths_unchanged(self):
        a = torch.randn(10, 4)
        b = torch.randn(10, 4)
        ta, tb = align_truncate(a, b)
        assert torch.equal(ta, a) and torch.equal(tb, b)

    def test_min_rule(self):
        a = torch.randn(100, 4)
        b = torch.randn(99, 4)
        ta, tb = align_truncate(a, b)
        assert ta.shape[0] == tb.shape[0] == 99

    def test_zero_overlap_rejected(self):
        with pytest.raises(ValueError):
            align_truncate(torch.zeros(0, 4), torch.zeros(5, 4))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            align_truncate(torch.zeros(5, 4), torch.zeros(5, 3))

    def test_mse_after_alignment_matches_manual(self):
        torch.manual_seed(1)
        a = torch.randn(12, 4, dtype=torch.float64)
        b = torch.randn(10, 4, dtype=torch.float64)
        ta, tb = align_truncate(a, b)
        mse = (ta - tb).pow(2).mean().item()
        manual = float(np.mean((a.numpy()[:10] - b.numpy()) ** 2))
        assert mse == pytest.approx(manual, abs=1e-12)


class TestSensitivityDiagnostic:
    def test_reports_relative_change(self):
        teacher = small_teacher()
        torch.manual_seed(2)
        wave = Waveform(torch.rand(6400) * 2 - 1, 16000)
        rel = feature_sensitivity(teacher, wave, noise_rms=1e-3, seed=0)
        assert rel >= 0.0
        assert np.isfinite(rel)

    def test_zero_noise_zero_change(self):
        teacher = small_teacher()
        wave = Waveform(torch.rand(3200), 16000)
        assert feature_sensitivity(teacher, wave, noise_rms=0.0) == 0.0
