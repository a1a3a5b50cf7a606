"""Featurizer tests: FFT vs a naive DFT, hand-pinned mel/DCT values, WAV I/O."""

import math
import struct

import numpy as np
import pytest

from asrkit import features as feat
from asrkit.errors import ConfigError, FeatureError, WavError
from oracles import naive_dft, rel_err


def _tone(freq, seconds=1.0, sr=16000, amp=0.3):
    t = np.arange(int(seconds * sr)) / sr
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


# --- framing ----------------------------------------------------------------------

def test_default_frame_count_one_second():
    # 16000 samples, 400-sample window, 160-sample hop: (16000-400)//160 + 1
    audio = feat.AudioBuffer(_tone(440), 16000)
    out = feat.featurize(audio, feat.FeatureConfig())
    assert out.shape == (98, 40)
    assert out.dtype == np.float32


def test_frame_count_formula():
    cfg = feat.FeatureConfig()
    for n in (400, 401, 559, 560, 561, 4000):
        audio = feat.AudioBuffer(np.zeros(n, np.float32), 16000)
        frames = feat.frame_signal(audio, cfg)
        assert frames.shape[0] == (n - 400) // 160 + 1


def test_audio_shorter_than_window_rejected():
    audio = feat.AudioBuffer(np.zeros(399, np.float32), 16000)
    with pytest.raises(FeatureError):
        feat.frame_signal(audio, feat.FeatureConfig())


def test_window_function_applied():
    cfg = feat.FeatureConfig()
    rng = np.random.default_rng(0)
    x = rng.standard_normal(700).astype(np.float32)
    frames = feat.frame_signal(feat.AudioBuffer(x, 16000), cfg)
    want = x[:400].astype(np.float64) * np.hamming(400)
    assert rel_err(frames[0], want) < 1e-6
    want2 = x[160:560].astype(np.float64) * np.hamming(400)
    assert rel_err(frames[1], want2) < 1e-6


# --- FFT and power spectrum --------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 4, 8, 32, 128])
def test_fft_matches_naive_dft(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    assert rel_err(feat.fft_radix2(x).ravel(), naive_dft(x)) < 1e-9


def test_fft_batched_rows_match_single():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 16))
    batch = feat.fft_radix2(x)
    for i in range(3):
        assert rel_err(batch[i], naive_dft(x[i])) < 1e-9


def test_power_spectrum_zero_pads_to_power_of_two():
    frames = np.ones((2, 10))
    spec = feat.power_spectrum(frames)
    # padded to 16, bins 0..8 kept
    assert spec.shape == (2, 9)
    # DC bin of an all-ones length-10 frame is |10|^2
    assert spec[0, 0] == pytest.approx(100.0, rel=1e-9)


def test_power_spectrum_tone_peaks_at_right_bin():
    sr = 16000
    x = _tone(1000.0, seconds=0.05, sr=sr)  # 800 samples -> padded to 1024
    spec = feat.power_spectrum(x[np.newaxis, :])
    peak = np.argmax(spec[0])
    assert abs(peak * sr / 1024 - 1000.0) < sr / 1024


# --- mel scale and filterbank ------------------------------------------------------

def test_mel_hand_value():
    # 2595 * log10(1 + 700/700) = 2595 * log10(2)
    assert feat.hz_to_mel(700.0) == pytest.approx(2595.0 * math.log10(2.0), rel=1e-12)
    assert feat.mel_to_hz(feat.hz_to_mel(437.5)) == pytest.approx(437.5, rel=1e-9)


def test_filterbank_shape_and_coverage():
    fb = feat.mel_filterbank(40, 512, 16000)
    assert fb.shape == (257, 40)  # bins by filters, applied as spec @ fb
    assert (fb >= 0).all()
    assert (fb.sum(axis=0) > 0).all()  # every filter has weight somewhere


def test_filterbank_rejects_unresolvable_filters():
    # far more filters than FFT bins: some triangle must collapse
    with pytest.raises(ConfigError):
        feat.mel_filterbank(200, 64, 16000)


def test_mfsc_tone_activates_matching_filter():
    sr = 16000
    cfg = feat.FeatureConfig()
    centers = feat.filter_center_freqs(cfg.num_mel_filters, sr)
    target = int(np.argmin(np.abs(centers - 1500.0)))
    out = feat.mfsc(feat.AudioBuffer(_tone(centers[target]), sr), cfg)
    hot = np.argmax(out.mean(axis=0))
    assert abs(int(hot) - target) <= 1


def test_mfsc_floor_on_silence():
    cfg = feat.FeatureConfig()
    out = feat.mfsc(feat.AudioBuffer(np.zeros(800, np.float32), 16000), cfg)
    assert np.allclose(out, math.log(1e-10))


# --- DCT and mfcc ------------------------------------------------------------------

def test_dct_matrix_is_orthonormal():
    d = feat.dct_matrix(12)
    assert rel_err(d @ d.T, np.eye(12)) < 1e-9


def test_dct_of_constant_is_scaled_first_coefficient():
    d = feat.dct_matrix(8)
    c = 3.25
    coeffs = d @ np.full(8, c)
    assert coeffs[0] == pytest.approx(c * math.sqrt(8), rel=1e-9)
    assert np.abs(coeffs[1:]).max() < 1e-9


def test_mfcc_shape_and_energy_ordering():
    cfg = feat.FeatureConfig()
    out = feat.mfcc(feat.AudioBuffer(_tone(500), 16000), cfg)
    assert out.shape == (98, 13)


# --- featurize dispatch ------------------------------------------------------------

def test_featurize_kinds_and_dims():
    cfg = feat.FeatureConfig()
    audio = feat.AudioBuffer(_tone(600, seconds=0.2), 16000)
    raw = feat.featurize(audio, feat.FeatureConfig(feature_kind="raw"))
    assert raw.shape == (len(audio.samples), 1)  # one sample per row
    spec = feat.featurize(audio, feat.FeatureConfig(feature_kind="power_spectrum"))
    assert spec.shape[1] == 257
    assert feat.featurize(audio, cfg).shape[1] == 40
    assert feat.featurize(audio, feat.FeatureConfig(feature_kind="mfcc")).shape[1] == 13


def test_featurize_normalization():
    cfg = feat.FeatureConfig(normalize=True)
    rng = np.random.default_rng(4)
    noisy = (0.2 * rng.standard_normal(16000)).astype(np.float32)
    out = feat.featurize(feat.AudioBuffer(noisy, 16000), cfg)
    assert np.abs(out.mean(axis=0)).max() < 1e-4
    assert np.abs(out.std(axis=0) - 1.0).max() < 1e-3


def test_feature_config_validation():
    with pytest.raises(ConfigError):
        feat.FeatureConfig(hop_ms=30.0)  # hop > window
    with pytest.raises(ConfigError):
        feat.FeatureConfig(num_cepstra=50)
    with pytest.raises(ConfigError):
        feat.FeatureConfig(feature_kind="cepstrum")


# --- WAV I/O -----------------------------------------------------------------------

def test_wav_round_trip(tmp_path):
    path = str(tmp_path / "t.wav")
    x = _tone(440, seconds=0.1)
    feat.write_wav(path, feat.AudioBuffer(x, 16000))
    back = feat.load_wav(path)
    assert back.sample_rate == 16000
    assert back.samples.dtype == np.float32
    assert np.abs(back.samples - x).max() <= 1.0 / 32768.0 + 1e-7


def test_wav_stereo_averages_channels(tmp_path):
    sr = 8000
    left = np.full(100, 0.5, np.float32)
    right = np.full(100, -0.25, np.float32)
    inter = np.empty(200, dtype="<i2")
    inter[0::2] = np.round(left * 32767).astype("<i2")
    inter[1::2] = np.round(right * 32767).astype("<i2")
    body = inter.tobytes()
    blob = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(body), b"WAVE", b"fmt ", 16,
        1, 2, sr, sr * 4, 4, 16, b"data", len(body),
    ) + body
    path = tmp_path / "st.wav"
    path.write_bytes(blob)
    audio = feat.load_wav(str(path))
    assert audio.sample_rate == sr
    assert np.allclose(audio.samples, (left + right) / 2.0, atol=2e-4)


def test_wav_float32_format(tmp_path):
    sr = 8000
    x = np.linspace(-1, 1, 50).astype("<f4")
    body = x.tobytes()
    blob = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(body), b"WAVE", b"fmt ", 16,
        3, 1, sr, sr * 4, 4, 32, b"data", len(body),
    ) + body
    path = tmp_path / "f32.wav"
    path.write_bytes(blob)
    audio = feat.load_wav(str(path))
    assert np.allclose(audio.samples, x, atol=1e-7)


def test_wav_errors_carry_byte_offsets(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFX" + b"\x00" * 40)
    with pytest.raises(WavError) as exc:
        feat.load_wav(str(bad))
    assert "offset" in str(exc.value)

    trunc = tmp_path / "trunc.wav"
    x = _tone(440, seconds=0.01)
    feat.write_wav(str(trunc), feat.AudioBuffer(x, 16000))
    blob = trunc.read_bytes()
    trunc.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(WavError):
        feat.load_wav(str(trunc))
