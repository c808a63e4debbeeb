"""STFT analysis/synthesis, mel filterbanks, the complex-coefficient head, and
a synthetic multi-partial test-signal generator.

All operations are pure functions over float64 arrays.  The STFT uses a
periodic Hann window with reflect padding of ``n_fft // 2`` on each side and
window-square-normalized overlap-add on the way back, which makes
``istft(stft(x))`` exact to roundoff on the interior of the signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import DomainError, FileFormatError

MEL_LOG_FLOOR = 1e-5
OLA_DENOM_FLOOR = 1e-12


def _as_samples(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DomainError(f"expected a mono sample vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("audio samples must be finite")
    return arr


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio: a sample vector plus its sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", _as_samples(self.samples))
        if int(self.sample_rate) <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """STFT geometry. Defaults follow the 48 kHz codec setting (960/480)."""

    n_fft: int = 960
    hop: int = 480
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft <= 0 or self.hop <= 0:
            raise DomainError("n_fft and hop must be positive")
        if self.window != "hann":
            raise DomainError(f"unsupported window {self.window!r}")
        # hop <= n_fft/2 guarantees full frame coverage of the padded signal,
        # which together with window-square normalization makes the
        # overlap-add inverse exact.
        if 2 * self.hop > self.n_fft:
            raise DomainError(
                f"hop={self.hop} with n_fft={self.n_fft} breaks overlap-add "
                "reconstruction (need hop <= n_fft/2)"
            )

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1


def hann_window(n_fft: int) -> np.ndarray:
    """Periodic Hann window of length ``n_fft``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """frames x (n_fft/2 + 1) complex STFT coefficients plus their geometry."""

    data: np.ndarray
    config: StftConfig

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.complex128)
        if arr.ndim != 2 or arr.shape[1] != self.config.bins:
            raise DomainError(
                f"spectrogram shape {arr.shape} inconsistent with "
                f"n_fft={self.config.n_fft} (expected {self.config.bins} bins)"
            )
        if not np.all(np.isfinite(arr)):
            raise DomainError("spectrogram entries must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def frames(self) -> int:
        return self.data.shape[0]


def stft(audio: AudioBuffer, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Short-time Fourier transform.

    The signal is reflect-padded by ``n_fft // 2`` on each side and cut into
    ``ceil(len / hop)`` frames of length ``n_fft`` spaced ``hop`` apart; each
    frame is Hann-windowed and transformed with a real FFT.
    """
    x = audio.samples
    if len(x) == 0:
        raise DomainError("cannot transform empty audio")
    n_fft, hop = config.n_fft, config.hop
    pad = n_fft // 2
    if len(x) == 1:
        padded = np.full(2 * pad + 1, x[0])
    else:
        padded = np.pad(x, pad, mode="reflect")
    frames = -(-len(x) // hop)
    idx = hop * np.arange(frames)[:, None] + np.arange(n_fft)[None, :]
    segments = padded[idx] * hann_window(n_fft)
    return ComplexSpectrogram(np.fft.rfft(segments, axis=1), config)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> np.ndarray:
    """Inverse STFT by windowed overlap-add with window-square normalization.

    ``length`` selects how many samples to return after trimming the analysis
    padding; it defaults to ``frames * hop``.  Returns the raw sample vector
    (callers attach the sample rate).
    """
    cfg = spec.config
    n_fft, hop = cfg.n_fft, cfg.hop
    frames = spec.frames
    if frames == 0:
        raise DomainError("cannot invert an empty spectrogram")
    if length is None:
        length = frames * hop
    if length <= 0 or length > frames * hop:
        raise DomainError(
            f"length {length} not representable by {frames} frames of hop {hop}"
        )
    w = hann_window(n_fft)
    segments = np.fft.irfft(spec.data, n=n_fft, axis=1)
    total = (frames - 1) * hop + n_fft
    num = np.zeros(total)
    den = np.zeros(total)
    for k in range(frames):
        sl = slice(k * hop, k * hop + n_fft)
        num[sl] += segments[k] * w
        den[sl] += w * w
    y = num / np.maximum(den, OLA_DENOM_FLOOR)
    pad = n_fft // 2
    return y[pad : pad + length]


@dataclass(frozen=True)
class HeadOutput:
    """Codec head pre-activations: log-magnitude ``m`` and raw real/imag parts."""

    m: np.ndarray
    x_raw: np.ndarray
    y_raw: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        xr = np.asarray(self.x_raw, dtype=np.float64)
        yr = np.asarray(self.y_raw, dtype=np.float64)
        if not (m.shape == xr.shape == yr.shape):
            raise DomainError("head fields must share one shape")
        for arr in (m, xr, yr):
            if not np.all(np.isfinite(arr)):
                raise DomainError("head fields must be finite")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "x_raw", xr)
        object.__setattr__(self, "y_raw", yr)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def head_to_complex(h: HeadOutput, config: StftConfig | None = None):
    """Turn head pre-activations into complex STFT coefficients.

    The magnitude is ``softplus(m)``; the phase direction is the unit vector
    of ``(x_raw, y_raw)``, so any positive scaling of the raw pair leaves the
    coefficient unchanged and no phase wrapping can occur.  The degenerate
    all-zero raw pair maps to phase 0.

    When ``config`` is given the result is wrapped as a ComplexSpectrogram.
    """
    mag = softplus(h.m)
    norm = np.hypot(h.x_raw, h.y_raw)
    safe = np.where(norm == 0.0, 1.0, norm)
    cos = np.where(norm == 0.0, 1.0, h.x_raw / safe)
    sin = np.where(norm == 0.0, 0.0, h.y_raw / safe)
    coeffs = mag * cos + 1j * (mag * sin)
    if config is None:
        return coeffs
    return ComplexSpectrogram(coeffs, config)


def complex_to_head(spec: ComplexSpectrogram, mag_floor: float = 1e-30) -> HeadOutput:
    """Inverse of ``head_to_complex`` up to the softplus floor.

    Magnitudes below ``mag_floor`` are clamped before inverting softplus so
    silent bins stay finite.
    """
    mag = np.maximum(np.abs(spec.data), mag_floor)
    # inverse softplus: m = mag + log(1 - exp(-mag)); the expm1 form stays
    # finite even when mag rounds exp(-mag) to exactly 1
    m = mag + np.log(-np.expm1(-mag))
    return HeadOutput(m=m, x_raw=spec.data.real, y_raw=spec.data.imag)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters: an ``n_mels x bins`` nonnegative weight matrix."""

    weights: np.ndarray
    n_mels: int
    sample_rate: int
    center_freqs: np.ndarray = field(repr=False, default=None)


def mel_filterbank(
    n_mels: int, config: StftConfig, sample_rate: int
) -> MelFilterbank:
    """Build triangular filters with centers equally spaced on the mel scale
    from 0 Hz to Nyquist.  Filter heights are un-normalized (peak 1).

    A filter too narrow to touch any FFT bin gets the bin nearest its center
    set to 1 so every row stays nonzero.
    """
    if n_mels < 1:
        raise DomainError("n_mels must be >= 1")
    bins = config.bins
    if n_mels > bins:
        raise DomainError(f"n_mels={n_mels} exceeds {bins} FFT bins")
    mel_pts = np.linspace(0.0, float(hz_to_mel(sample_rate / 2)), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.arange(bins) * (sample_rate / config.n_fft)
    lower, center, upper = hz_pts[:-2], hz_pts[1:-1], hz_pts[2:]
    up = (freqs[None, :] - lower[:, None]) / np.maximum(center - lower, 1e-12)[:, None]
    down = (upper[:, None] - freqs[None, :]) / np.maximum(upper - center, 1e-12)[:, None]
    weights = np.maximum(0.0, np.minimum(up, down))
    empty = ~np.any(weights > 0.0, axis=1)
    if np.any(empty):
        nearest = np.argmin(np.abs(freqs[None, :] - center[:, None]), axis=1)
        weights[empty, nearest[empty]] = 1.0
    return MelFilterbank(weights, n_mels, int(sample_rate), center_freqs=center)


def log_mel(
    audio: AudioBuffer,
    fb: MelFilterbank,
    config: StftConfig = StftConfig(),
    floor: float = MEL_LOG_FLOOR,
) -> np.ndarray:
    """Log mel spectrogram ``log(max(fb . |stft|, floor))``, frames x n_mels."""
    if fb.sample_rate != audio.sample_rate:
        raise DomainError(
            f"filterbank built for {fb.sample_rate} Hz, audio is "
            f"{audio.sample_rate} Hz"
        )
    mags = np.abs(stft(audio, config).data)
    return np.log(np.maximum(mags @ fb.weights.T, floor))


def synth_signal(seed: int, duration: float, sample_rate: int = 48000) -> AudioBuffer:
    """Deterministic multi-partial test signal.

    Mixes 1-3 components; each component carries up to 20 sinusoidal
    partials with a piecewise-linear interpolated pitch trajectory, a random
    spectral envelope, and per-partial harmonic deviation.  The mix is
    peak-normalized to 0.9.  Useful for exciting the full frequency range in
    codec and loss tests without any audio assets.
    """
    if duration <= 0:
        raise DomainError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    mix = np.zeros(n)
    n_components = int(rng.integers(1, 4))
    for _ in range(n_components):
        n_partials = int(rng.integers(1, 21))
        n_knots = int(rng.integers(2, 6))
        f0_base = float(np.exp(rng.uniform(np.log(40.0), np.log(1000.0))))
        knots = f0_base * 2.0 ** rng.uniform(-0.5, 0.5, size=n_knots)
        t_knots = np.linspace(0.0, n - 1, n_knots)
        f0 = np.interp(np.arange(n), t_knots, knots)
        base_phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
        env_slope = rng.uniform(0.5, 2.0)
        deviation = rng.uniform(0.0, 0.03)
        component = np.zeros(n)
        for p in range(1, n_partials + 1):
            ratio = p * (1.0 + deviation * rng.standard_normal())
            gain = rng.uniform(0.2, 1.0) / p**env_slope
            phase0 = rng.uniform(0.0, 2.0 * np.pi)
            if ratio <= 0 or np.max(f0) * ratio > 0.95 * sample_rate / 2:
                continue
            component += gain * np.sin(base_phase * ratio + phase0)
        mix += rng.uniform(0.3, 1.0) * component
    peak = np.max(np.abs(mix))
    if peak > 0:
        mix *= 0.9 / peak
    return AudioBuffer(mix, sample_rate)


def compression_ratios(
    sample_rate: int = 48000, hop: int = 480, latent_dim: int = 128
) -> dict:
    """Both labeled compression-ratio conventions for an STFT-hop codec.

    ``audio_samples_per_latent_value`` divides the audio sample rate by the
    latent value rate (hop / latent_dim); ``latent_values_per_audio_sample``
    is its reciprocal.  Reported side by side because either convention
    appears in codec comparisons.
    """
    return {
        "audio_samples_per_latent_value": hop / latent_dim,
        "latent_values_per_audio_sample": latent_dim / hop,
    }


def read_wav(path) -> AudioBuffer:
    """Read a PCM 16-bit or 32-bit float WAV file as mono float64.

    Stereo input is downmixed by channel averaging (with a warning).  The
    sample rate is taken as-is; no resampling happens anywhere in the
    toolkit.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # wavfile raises bare ValueError on bad RIFF
        raise FileFormatError(path, f"not a readable WAV file ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FileFormatError(
            path, f"unsupported WAV sample format {data.dtype} "
            "(expected 16-bit PCM or 32-bit float)"
        )
    if samples.ndim == 2:
        warnings.warn(f"{path}: downmixing {samples.shape[1]} channels to mono")
        samples = samples.mean(axis=1)
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer, fmt: str = "float32") -> None:
    """Write mono audio as 32-bit float (default) or 16-bit PCM WAV."""
    if fmt == "float32":
        wavfile.write(path, audio.sample_rate, audio.samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(audio.samples, -1.0, 32767.0 / 32768.0)
        wavfile.write(
            path, audio.sample_rate, np.round(clipped * 32768.0).astype(np.int16)
        )
    else:
        raise DomainError(f"unknown WAV format {fmt!r}")
