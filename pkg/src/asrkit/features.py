"""Audio feature extraction: power spectrum, log-mel filterbanks (MFSC), MFCC.

Everything here is a pure function of its inputs, computed on the fly and
deterministically: same audio and config give bit-identical features no
matter how many worker threads the data pipeline runs. Internals use double
precision; emitted feature matrices are float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FeatureError, WavError

FEATURE_KINDS = ("raw", "power_spectrum", "mfsc", "mfcc")
WINDOW_FUNCTIONS = ("hamming", "hanning")


@dataclass
class AudioBuffer:
    """Mono audio: float32 samples in [-1, 1] plus the sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise FeatureError("empty audio buffer")

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.samples.size / self.sample_rate


@dataclass
class FeatureConfig:
    feature_kind: str = "mfsc"
    window_ms: float = 25.0
    hop_ms: float = 10.0
    num_mel_filters: int = 40
    num_cepstra: int = 13
    window_function: str = "hamming"
    log_floor: float = 1e-10
    normalize: bool = False  # optional per-utterance mean/variance normalization

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {self.feature_kind!r}")
        if self.window_function not in WINDOW_FUNCTIONS:
            raise ConfigError(f"unknown window function {self.window_function!r}")
        if not (0 < self.hop_ms <= self.window_ms):
            raise ConfigError(
                f"need 0 < hop_ms <= window_ms, got hop={self.hop_ms} window={self.window_ms}"
            )
        if self.num_cepstra > self.num_mel_filters:
            raise ConfigError(
                f"num_cepstra {self.num_cepstra} > num_mel_filters {self.num_mel_filters}"
            )
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def feature_dim(self, sample_rate: int) -> int:
        if self.feature_kind == "raw":
            return 1
        if self.feature_kind == "power_spectrum":
            return _next_pow2(self.window_samples(sample_rate)) // 2 + 1
        if self.feature_kind == "mfsc":
            return self.num_mel_filters
        return self.num_cepstra


# --- WAV (RIFF) reading ---------------------------------------------------

def load_wav(path) -> AudioBuffer:
    """Read a RIFF/WAVE file: PCM 16-bit or IEEE-float 32-bit, mono or stereo.

    Stereo is averaged down to mono; 16-bit integers are scaled by 1/32768.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise WavError("file too short for a RIFF header", offset=0)
    if raw[0:4] != b"RIFF":
        raise WavError("missing RIFF magic", offset=0)
    if raw[8:12] != b"WAVE":
        raise WavError("missing WAVE form type", offset=8)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body_start = pos + 8
        if body_start + chunk_size > len(raw):
            raise WavError(
                f"chunk {chunk_id!r} of size {chunk_size} overruns the file",
                offset=pos,
            )
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavError("fmt chunk too small", offset=pos)
            fmt = struct.unpack_from("<HHIIHH", raw, body_start)
        elif chunk_id == b"data":
            data = (body_start, chunk_size)
        pos = body_start + chunk_size + (chunk_size & 1)  # chunks are word aligned

    if fmt is None:
        raise WavError("no fmt chunk found", offset=len(raw))
    if data is None:
        raise WavError("no data chunk found", offset=len(raw))

    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise WavError(f"unsupported channel count {channels}")
    start, size = data
    if audio_format == 1 and bits == 16:
        if size % (2 * channels):
            raise WavError("PCM16 data size not a multiple of the frame size", offset=start)
        ints = np.frombuffer(raw, dtype="<i2", count=size // 2, offset=start)
        samples = ints.astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        if size % (4 * channels):
            raise WavError("float data size not a multiple of the frame size", offset=start)
        samples = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=start).astype(
            np.float32
        )
    else:
        raise WavError(f"unsupported codec: format={audio_format} bits={bits}", offset=start)

    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1, dtype=np.float32)
    if samples.size == 0:
        raise WavError("data chunk holds no samples", offset=start)
    return AudioBuffer(samples=samples, sample_rate=sample_rate)


def write_wav(path, audio: AudioBuffer):
    """Write mono PCM16; the counterpart of load_wav for tooling and tests."""
    samples = np.clip(audio.samples, -1.0, 1.0)
    ints = np.round(samples * 32767.0).astype("<i2")
    body = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(body),
        b"WAVE",
        b"fmt ",
        16,
        1,
        1,
        audio.sample_rate,
        audio.sample_rate * 2,
        2,
        16,
        b"data",
        len(body),
    )
    with open(path, "wb") as f:
        f.write(header + body)


# --- framing and spectra ---------------------------------------------------

def _window(kind: str, width: int) -> np.ndarray:
    if kind == "hamming":
        return np.hamming(width)
    return np.hanning(width)


def frame_signal(audio: AudioBuffer, config: FeatureConfig) -> np.ndarray:
    """Slice audio into overlapping frames and apply the window function.

    Frame count is floor((Nsamples - W) / H) + 1 for window W and hop H.
    """
    w = config.window_samples(audio.sample_rate)
    h = config.hop_samples(audio.sample_rate)
    n = audio.samples.size
    if n < w:
        raise FeatureError(f"audio of {n} samples is shorter than one {w}-sample window")
    t = (n - w) // h + 1
    idx = np.arange(t)[:, None] * h + np.arange(w)[None, :]
    frames = audio.samples[idx].astype(np.float64)
    return frames * _window(config.window_function, w)[None, :]


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    The last axis extent must be a power of two.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n & (n - 1) or n == 0:
        raise ConfigError(f"FFT length {n} is not a power of two")
    levels = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(1, n):
        rev[i] = (rev[i >> 1] >> 1) | ((i & 1) << (levels - 1))
    a = np.ascontiguousarray(x[..., rev], dtype=np.complex128)
    batch = a.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        b = a.reshape(*batch, n // m, m)
        even = b[..., :half].copy()
        odd = b[..., half:] * tw
        b[..., :half] = even + odd
        b[..., half:] = even - odd
        m *= 2
    return a


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    """Squared-magnitude half spectrum of each frame.

    Frames are zero-padded to the next power of two n; bins 0..n/2 are kept.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    w = frames.shape[-1]
    if w < 1:
        raise FeatureError("empty frame")
    n = _next_pow2(w)
    if n != w:
        frames = np.pad(frames, ((0, 0), (0, n - w)))
    spec = fft_radix2(frames)[..., : n // 2 + 1]
    return (spec.real**2 + spec.imag**2)


# --- mel filterbank and cepstra --------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale over [0, sr/2].

    Returns a (fft_size/2+1)-by-num_filters weight matrix. Raises ConfigError
    when a filter is narrower than the FFT bin spacing (all-zero weights).
    """
    n_bins = fft_size // 2 + 1
    edges_mel = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), num_filters + 2)
    edges_hz = mel_to_hz(edges_mel)
    bin_freqs = np.arange(n_bins, dtype=np.float64) * sample_rate / fft_size
    weights = np.zeros((n_bins, num_filters))
    for j in range(num_filters):
        lo, mid, hi = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        weights[:, j] = np.maximum(0.0, np.minimum(up, down))
        if not weights[:, j].any():
            raise ConfigError(
                f"mel filter {j} spans less than one FFT bin "
                f"({num_filters} filters over {n_bins} bins); reduce num_mel_filters"
            )
    return weights


def filter_center_freqs(num_filters: int, sample_rate: int) -> np.ndarray:
    """Center frequency in Hz of each triangular mel filter."""
    edges_mel = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), num_filters + 2)
    return mel_to_hz(edges_mel[1:-1])


def mfsc(audio: AudioBuffer, config: FeatureConfig) -> np.ndarray:
    """Log-mel filterbank energies, T-by-num_mel_filters float32."""
    frames = frame_signal(audio, config)
    spec = power_spectrum(frames)
    fft_size = (spec.shape[-1] - 1) * 2
    fb = mel_filterbank(config.num_mel_filters, fft_size, audio.sample_rate)
    energies = spec @ fb
    return np.log(np.maximum(energies, config.log_floor)).astype(np.float32)


def dct_matrix(size: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row k holds the k-th basis vector."""
    n = np.arange(size, dtype=np.float64)
    k = n[:, None]
    mat = np.cos(np.pi * (n[None, :] + 0.5) * k / size)
    mat *= np.sqrt(2.0 / size)
    mat[0] *= np.sqrt(0.5)
    return mat


def mfcc(audio: AudioBuffer, config: FeatureConfig) -> np.ndarray:
    """DCT-II of the log-mel frames, truncated to num_cepstra coefficients."""
    mels = mfsc(audio, config).astype(np.float64)
    dct = dct_matrix(config.num_mel_filters)[: config.num_cepstra]
    return (mels @ dct.T).astype(np.float32)


def featurize(audio: AudioBuffer, config: FeatureConfig) -> np.ndarray:
    """Dispatch on config.feature_kind; returns a T-by-D float32 matrix."""
    if config.feature_kind == "raw":
        feats = audio.samples.reshape(-1, 1).astype(np.float32)
    elif config.feature_kind == "power_spectrum":
        feats = power_spectrum(frame_signal(audio, config)).astype(np.float32)
    elif config.feature_kind == "mfsc":
        feats = mfsc(audio, config)
    else:
        feats = mfcc(audio, config)
    if config.normalize:
        mean = feats.mean(axis=0, dtype=np.float64)
        std = feats.std(axis=0, dtype=np.float64)
        feats = ((feats - mean) / np.maximum(std, 1e-8)).astype(np.float32)
    return feats
