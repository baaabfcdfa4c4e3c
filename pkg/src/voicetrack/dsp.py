"""Audio ingestion and the DSP kernels shared by the feature extractors.

Every function here is pure: inputs are never modified and outputs are
fresh arrays, so recordings can be processed in parallel by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
from scipy.io import wavfile
from scipy.signal import lfilter

EPS = 1e-10
DEFAULT_SAMPLE_RATE = 22050

# numerator of the classic RASTA band-pass, already normalised by sum(k^2)
RASTA_NUMERATOR = np.array([0.2, 0.1, 0.0, -0.1, -0.2])
RASTA_POLE = 0.98


@dataclass(frozen=True)
class Waveform:
    samples: npt.NDArray[np.float64]
    sample_rate_hz: int

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class FrameSet:
    frames: npt.NDArray[np.float64]
    window_ms: float
    step_ms: float
    sample_rate_hz: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_len(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class Spectrum:
    magnitudes: npt.NDArray[np.float64]
    bin_width_hz: float

    @property
    def n_fft(self) -> int:
        return 2 * (len(self.magnitudes) - 1)

    @property
    def frequencies(self) -> npt.NDArray[np.float64]:
        return np.arange(len(self.magnitudes)) * self.bin_width_hz

    @property
    def sample_rate_hz(self) -> float:
        return self.bin_width_hz * self.n_fft


@dataclass(frozen=True)
class BandEnergyTrajectory:
    values: npt.NDArray[np.float64]
    band_edges_hz: npt.NDArray[np.float64]

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]


def _to_unit_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # 24-bit files come back left-justified in int32, so one scale fits both
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise ValueError(f"unsupported WAV sample type {data.dtype}")


def resample_linear(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Resample by linear interpolation between neighbouring samples."""
    if rate_in == rate_out:
        return np.array(samples, dtype=np.float64)
    n_out = int(round(len(samples) * rate_out / rate_in))
    t_out = np.arange(n_out) / rate_out
    t_in = np.arange(len(samples)) / rate_in
    return np.interp(t_out, t_in, samples)


def load_waveform(path: str | Path, resample_to: int | None = None) -> Waveform:
    """Read a PCM WAV file into a :class:`Waveform`.

    Integer encodings (8/16/24/32-bit) are scaled to [-1, 1]; 32-bit float
    data is passed through.  Multi-channel files keep channel 0.  The sample
    rate is preserved unless ``resample_to`` is given.
    """
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises bare ValueError for bad headers
        raise ValueError(f"cannot decode WAV file {path}: {exc}") from exc
    if data.ndim == 2:
        data = data[:, 0]
    if data.size == 0:
        raise ValueError(f"{path} contains no audio")
    samples = _to_unit_float(data)
    if resample_to is not None and resample_to != rate:
        samples = resample_linear(samples, rate, resample_to)
        rate = resample_to
    return Waveform(samples, int(rate))


def frame_length(window_ms: float, sample_rate_hz: int) -> int:
    return int(round(window_ms * sample_rate_hz / 1000.0))


def frame_signal(w: Waveform, window_ms: float = 200.0, step_ms: float = 100.0) -> FrameSet:
    """Cut the waveform into overlapping frames; the trailing partial frame is dropped."""
    flen = frame_length(window_ms, w.sample_rate_hz)
    step = frame_length(step_ms, w.sample_rate_hz)
    if flen < 1 or step < 1:
        raise ValueError("window and step must cover at least one sample")
    n = len(w.samples)
    if n < flen:
        raise ValueError(f"waveform of {n} samples is shorter than one window ({flen})")
    n_frames = (n - flen) // step + 1
    idx = np.arange(flen)[None, :] + step * np.arange(n_frames)[:, None]
    return FrameSet(w.samples[idx], window_ms, step_ms, w.sample_rate_hz)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def magnitude_spectrum(frame: npt.ArrayLike, sample_rate_hz: float, n_fft: int | None = None) -> Spectrum:
    """One-sided magnitude spectrum of a Hamming-windowed frame."""
    x = np.asarray(frame, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty frame")
    if n_fft is None:
        n_fft = next_pow2(len(x))
    mags = np.abs(np.fft.rfft(x * np.hamming(len(x)), n=n_fft))
    return Spectrum(mags, sample_rate_hz / n_fft)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, sample_rate_hz: float, n_bands: int = 26,
                   fmin: float = 20.0, fmax: float | None = None):
    """Triangular mel filters with unit peak.

    Returns ``(weights, edges)`` where ``weights`` has shape
    ``(n_bands, n_fft // 2 + 1)`` and ``edges`` holds the ``n_bands + 2``
    corner frequencies in Hz.
    """
    if fmax is None:
        fmax = sample_rate_hz / 2.0
    if fmax <= fmin:
        raise ValueError(f"fmax ({fmax}) must exceed fmin ({fmin})")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    return weights, edges


def mel_band_energies(spec: Spectrum, n_bands: int = 26, fmin: float = 20.0,
                      fmax: float | None = None) -> np.ndarray:
    """Linear band powers: filterbank applied to |X|^2."""
    weights, _ = mel_filterbank(spec.n_fft, spec.sample_rate_hz, n_bands, fmin, fmax)
    return weights @ (spec.magnitudes ** 2)


def mel_log_energies(spec: Spectrum, n_bands: int = 26, fmin: float = 20.0,
                     fmax: float | None = None) -> np.ndarray:
    return np.log(np.maximum(mel_band_energies(spec, n_bands, fmin, fmax), EPS))


def rasta_filter(traj: BandEnergyTrajectory) -> BandEnergyTrajectory:
    """Classic RASTA band-pass along the frame axis, zero initial state."""
    values = np.asarray(traj.values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("trajectory must be a non-empty (n_frames, n_bands) matrix")
    out = lfilter(RASTA_NUMERATOR, [1.0, -RASTA_POLE], values, axis=0)
    return BandEnergyTrajectory(out, traj.band_edges_hz)


def normalized_autocorrelation(frame: np.ndarray, max_lag: int) -> np.ndarray:
    """r[k] = sum x[n]x[n+k] / sqrt(sum x[n]^2 * sum x[n+k]^2) for k = 0..max_lag."""
    x = np.asarray(frame, dtype=np.float64)
    n = len(x)
    nfft = next_pow2(2 * n)
    X = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(X * np.conj(X), nfft)[: max_lag + 1]
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    lags = np.arange(max_lag + 1)
    head = csum[n - lags]  # energy of x[0 : n-k]
    tail = csum[n] - csum[lags]  # energy of x[k : n]
    denom = np.sqrt(head * tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > EPS, acf / np.where(denom > EPS, denom, 1.0), 0.0)
    return r


@dataclass(frozen=True)
class PitchEstimate:
    f0_hz: float
    voicing_prob: float
    lag: float


def autocorrelation_pitch(frame: npt.ArrayLike, sample_rate_hz: float, fmin: float = 50.0,
                          fmax: float = 500.0, threshold: float = 0.45,
                          octave_tolerance: float = 0.03) -> PitchEstimate:
    """Normalised-autocorrelation pitch detector.

    The best lag is the highest peak of the normalised autocorrelation in
    ``[fs/fmax, fs/fmin]``; the earliest local peak within
    ``octave_tolerance`` of that maximum wins, which keeps exactly periodic
    frames from locking onto a multiple of the period.  The peak lag is
    refined by parabolic interpolation.
    """
    x = np.asarray(frame, dtype=np.float64)
    min_lag = int(np.floor(sample_rate_hz / fmax))
    max_lag = int(np.ceil(sample_rate_hz / fmin))
    if len(x) <= max_lag:
        raise ValueError(f"frame of {len(x)} samples is shorter than the max lag {max_lag}")
    if not np.any(x):
        return PitchEstimate(0.0, 0.0, 0.0)
    r = normalized_autocorrelation(x - x.mean(), max_lag + 1)
    search = r[min_lag: max_lag + 1]
    best = float(search.max())
    voicing = float(np.clip(best, 0.0, 1.0))
    if voicing < threshold:
        return PitchEstimate(0.0, voicing, 0.0)
    k = min_lag + int(np.argmax(search))
    for cand in range(min_lag + 1, k):
        if r[cand] >= r[cand - 1] and r[cand] >= r[cand + 1] and r[cand] >= best - octave_tolerance:
            k = cand
            break
    lag = float(k)
    a, b, c = r[k - 1], r[k], r[k + 1]
    curv = a - 2 * b + c
    if curv < 0:
        lag += 0.5 * (a - c) / curv
    return PitchEstimate(sample_rate_hz / lag, voicing, lag)


def real_cepstrum(frame: npt.ArrayLike, n_fft: int | None = None) -> np.ndarray:
    """Inverse transform of the floored natural-log magnitude spectrum (length n_fft)."""
    x = np.asarray(frame, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty frame")
    if n_fft is None:
        n_fft = next_pow2(len(x))
    mags = np.abs(np.fft.rfft(x * np.hamming(len(x)), n=n_fft))
    return np.fft.irfft(np.log(np.maximum(mags, EPS)), n=n_fft)
