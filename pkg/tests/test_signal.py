import math

import numpy as np
import pytest
import scipy.io.wavfile
import torch

from semcodec.errors import AudioFormatError, ConfigurationError
from semcodec.signal import (
    MEL_SCALES,
    ComplexSpectrogram,
    Waveform,
    istft,
    load_audio,
    mel_filterbank,
    mel_loss_components,
    mel_spectrogram,
    multiscale_mel_loss,
    resample,
    save_audio,
    stft,
    time_loss,
)


class TestLoadAudio:
    def test_pcm16_silence(self, tmp_path):
        path = tmp_path / "silence.wav"
        scipy.io.wavfile.write(path, 16000, np.zeros(16000, dtype=np.int16))
        wave = load_audio(path)
        assert len(wave) == 16000
        assert wave.sample_rate == 16000
        assert torch.all(wave.samples == 0)

    def test_pcm16_full_scale(self, tmp_path):
        path = tmp_path / "full.wav"
        scipy.io.wavfile.write(path, 16000, np.full(100, 32767, dtype=np.int16))
        wave = load_audio(path)
        assert torch.all((wave.samples - 1.0).abs() <= 1.0 / 32768)

    def test_stereo_averaging(self, tmp_path):
        path = tmp_path / "stereo.wav"
        data = np.stack([np.full(50, 0.5), np.full(50, -0.5)], axis=1).astype(np.float32)
        scipy.io.wavfile.write(path, 16000, data)
        wave = load_audio(path)
        assert torch.all(wave.samples == 0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_audio(tmp_path / "nope.wav")

    def test_unsupported_encoding(self, tmp_path):
        path = tmp_path / "int32.wav"
        scipy.io.wavfile.write(path, 16000, np.zeros(10, dtype=np.int32))
        with pytest.raises(AudioFormatError):
            load_audio(path)

    def test_save_round_trip_float32(self, tmp_path):
        torch.manual_seed(0)
        wave = Waveform(torch.rand(1000) * 2 - 1, 16000)
        path = tmp_path / "rt.wav"
        save_audio(wave, path, encoding="float32")
        back = load_audio(path)
        assert torch.equal(back.samples, wave.samples)


class TestResample:
    def test_identity(self):
        torch.manual_seed(0)
        wave = Waveform(torch.rand(1600) * 2 - 1, 16000)
        out = resample(wave, 16000)
        assert torch.equal(out.samples, wave.samples)

    def test_sine_peak_preserved(self):
        # DFT-peak oracle: the dominant bin must stay at 1 kHz after 32k -> 16k.
        t = np.arange(32000) / 32000
        wave = Waveform(torch.from_numpy(np.sin(2 * np.pi * 1000 * t).astype(np.float32)), 32000)
        out = resample(wave, 16000)
        assert len(out) == 16000
        spectrum = np.abs(np.fft.rfft(out.samples.numpy()))
        peak_hz = np.argmax(spectrum) * 16000 / len(out)
        assert peak_hz == pytest.approx(1000.0, abs=1.0)

    def test_length_arithmetic(self):
        wave = Waveform(torch.zeros(8000), 8000)
        assert len(resample(wave, 16000)) == 16000

    def test_bad_rate(self):
        wave = Waveform(torch.zeros(100), 16000)
        with pytest.raises(ConfigurationError):
            resample(wave, 0)


class TestStftRoundTrip:
    def test_white_noise_round_trip(self):
        torch.manual_seed(0)
        wave = Waveform(torch.rand(16000) * 2 - 1, 16000)
        spec = stft(wave, 1280, 320)
        back = istft(spec, length=16000)
        err = (back.samples - wave.samples).abs()
        assert err[1280:-1280].max() < 1e-6

    def test_zero_in_zero_out(self):
        wave = Waveform(torch.zeros(4000), 16000)
        back = istft(stft(wave, 1280, 320), length=4000)
        assert torch.all(back.samples == 0)

    def test_sine_rms_preserved(self):
        t = torch.arange(16000, dtype=torch.float64) / 16000
        wave = Waveform(torch.sin(2 * math.pi * 440 * t), 16000)
        back = istft(stft(wave, 1280, 320), length=16000)
        rms_in = wave.samples.pow(2).mean().sqrt()
        rms_out = back.samples.pow(2).mean().sqrt()
        assert abs(rms_out - rms_in) / rms_in < 1e-6

    @pytest.mark.parametrize("fft,hop", [(1280, 320), (1024, 256), (512, 128), (2048, 512), (1024, 512)])
    def test_supported_pairs_round_trip(self, fft, hop):
        torch.manual_seed(fft + hop)
        n = 8192
        wave = Waveform(torch.rand(n) * 2 - 1, 16000)
        back = istft(stft(wave, fft, hop), length=n)
        err = (back.samples - wave.samples).abs()
        assert err[fft:-fft].max() < 1e-6

    def test_non_cola_pair_rejected(self):
        wave = Waveform(torch.zeros(4000), 16000)
        with pytest.raises(ConfigurationError):
            stft(wave, 1280, 300)

    def test_shape_invariant(self):
        wave = Waveform(torch.zeros(16000), 16000)
        spec = stft(wave, 1280, 320)
        assert spec.bins.shape[0] == 1280 // 2 + 1


class TestMelSpectrogram:
    @pytest.mark.parametrize("i,window,hop", [(5, 32, 8), (11, 2048, 512)])
    def test_scale_parameterization(self, i, window, hop):
        assert 2**i == window and 2 ** (i - 2) == hop
        wave = Waveform(torch.rand(4096), 16000)
        mel = mel_spectrogram(wave, n_mels=64, window=window, hop=hop)
        assert mel.bands.shape[0] == 64

    def test_determinism(self):
        torch.manual_seed(3)
        wave = Waveform(torch.rand(4096), 16000)
        a = mel_spectrogram(wave, 64, 1024, 256)
        b = mel_spectrogram(wave, 64, 1024, 256)
        assert torch.equal(a.bands, b.bands)

    def test_window_shorter_than_hop_rejected(self):
        wave = Waveform(torch.rand(4096), 16000)
        with pytest.raises(ConfigurationError):
            mel_spectrogram(wave, 64, 128, 256)

    def test_filterbank_rows(self):
        fb = mel_filterbank(16000, 2048, 64, fmax=8000.0)
        assert (fb >= 0).all()
        peaks = fb.max(dim=1).values
        # at this resolution every band has support, and the documented
        # normalization is unit peak
        assert (peaks > 0).all()
        assert torch.allclose(peaks, torch.ones(64), atol=1e-6)

    def test_filterbank_small_fft_rows_nonnegative(self):
        fb = mel_filterbank(16000, 32, 64, fmax=8000.0)
        assert (fb >= 0).all()
        peaks = fb.max(dim=1).values
        nonempty = peaks > 0
        assert torch.allclose(peaks[nonempty], torch.ones(int(nonempty.sum())), atol=1e-6)


class TestTimeLoss:
    def test_identity(self):
        x = torch.rand(1000)
        assert time_loss(x, x).item() == 0.0

    def test_constant_offset(self):
        x = torch.zeros(777)
        x_hat = torch.full((777,), 0.5)
        assert time_loss(x, x_hat).item() == pytest.approx(0.5)

    def test_scalar_recomputation_oracle(self):
        torch.manual_seed(1)
        x = torch.rand(500, dtype=torch.float64)
        y = torch.rand(500, dtype=torch.float64)
        expected = float(np.mean(np.abs(x.numpy() - y.numpy())))
        assert time_loss(x, y).item() == pytest.approx(expected, abs=1e-9)

    def test_truncates_to_shorter(self):
        x = torch.zeros(100)
        y = torch.full((120,), 1.0)
        assert time_loss(x, y).item() == pytest.approx(1.0)

    def test_empty_overlap_rejected(self):
        with pytest.raises(ValueError):
            time_loss(torch.zeros(0), torch.zeros(10))


class TestMultiscaleMelLoss:
    def test_identity(self):
        torch.manual_seed(2)
        x = torch.rand(4096)
        assert multiscale_mel_loss(x, x, 16000).item() == 0.0

    def test_symmetry(self):
        torch.manual_seed(4)
        x = torch.rand(4096)
        y = torch.rand(4096)
        assert multiscale_mel_loss(x, y, 16000).item() == pytest.approx(
            multiscale_mel_loss(y, x, 16000).item(), rel=1e-6
        )

    def test_nonnegative(self):
        torch.manual_seed(5)
        x = torch.rand(4096)
        y = torch.rand(4096)
        assert multiscale_mel_loss(x, y, 16000).item() >= 0

    def test_short_clip_supported(self):
        # 0.1 s at 16 kHz is shorter than the largest analysis window (2048);
        # center padding must cover it.
        torch.manual_seed(6)
        x = torch.rand(1600)
        y = torch.rand(1600)
        assert math.isfinite(multiscale_mel_loss(x, y, 16000).item())

    def test_gradient_matches_finite_differences(self):
        # Central finite differences on a 0.1 s clip, random coordinate subset.
        torch.manual_seed(7)
        x = (torch.rand(1600, dtype=torch.float64) * 2 - 1)
        x_hat = (x + 0.1 * torch.randn(1600, dtype=torch.float64)).requires_grad_(True)
        loss = multiscale_mel_loss(x, x_hat, 16000)
        (grad,) = torch.autograd.grad(loss, x_hat)

        eps = 1e-6
        rng = np.random.default_rng(0)
        coords = rng.choice(1600, size=12, replace=False)
        for i in coords:
            shifted = x_hat.detach().clone()
            shifted[i] += eps
            up = multiscale_mel_loss(x, shifted, 16000).item()
            shifted[i] -= 2 * eps
            down = multiscale_mel_loss(x, shifted, 16000).item()
            fd = (up - down) / (2 * eps)
            if abs(fd) > 1e-6:
                assert abs(grad[i].item() - fd) / abs(fd) < 1e-3

    def test_components_split(self):
        torch.manual_seed(8)
        x = torch.rand(4096)
        y = torch.rand(4096)
        l1, l2 = mel_loss_components(x, y, 16000)
        total = multiscale_mel_loss(x, y, 16000)
        assert total.item() == pytest.approx((l1 + l2).item(), rel=1e-6)
        assert len(MEL_SCALES) == 7


class TestWaveformInvariants:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Waveform(torch.tensor([0.0, float("nan")]), 16000)

    def test_rejects_stereo_tensor(self):
        with pytest.raises(ValueError):
            Waveform(torch.zeros(2, 100), 16000)

    def test_spectrogram_bin_check(self):
        with pytest.raises(ValueError):
            ComplexSpectrogram(torch.zeros(100, 10, dtype=torch.complex64), 1280, 320, ("hann", 1280), 16000)
