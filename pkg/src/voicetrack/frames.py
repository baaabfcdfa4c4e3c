"""Frame-level low-level descriptors (72 columns per frame).

Column layout follows the ComParE-style naming used for the frame-level
set: F0 and voicing, perturbation and HNR, auditory-spectrum norms, RMS
energy and ZCR, 26 RASTA-filtered bands, 15 FFT-magnitude descriptors,
MFCC 1-14, three cepstral-peak-prominence variants and four rhythm
descriptors.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .dsp import (
    EPS,
    BandEnergyTrajectory,
    Spectrum,
    Waveform,
    autocorrelation_pitch,
    frame_signal,
    magnitude_spectrum,
    mel_filterbank,
    normalized_autocorrelation,
    rasta_filter,
    real_cepstrum,
)

log = logging.getLogger(__name__)

N_FEATURES = 72
N_BANDS = 26
HNR_CLAMP = 100.0
GROUPS = ("Rhythm-energy", "Rhythm-zcr", "MFCC", "Quality", "RASTA", "F0")

_GROUP_IDS = {
    "Rhythm-energy": [6, 8, 36, 37, 42, 48, 50, 68, 70, 71],
    "Rhythm-zcr": [9, 38, 39, 40, 41, 43, 44, 45, 46, 47, 49, 69],
    "MFCC": list(range(51, 65)),
    "Quality": [2, 3, 4, 5, 65, 66, 67],
    "RASTA": [7] + list(range(10, 36)),
    "F0": [0, 1],
}

_NAMES = (
    ["F0final_sma", "voicingFinalUnclipped_sma", "jitterLocal_sma", "jitterDDP_sma",
     "shimmerLocal_sma", "logHNR_sma", "audspec_lengthL1norm_sma",
     "audspecRasta_lengthL1norm_sma", "pcm_RMSenergy_sma", "pcm_zcr_sma"]
    + [f"audSpec_Rfilt_sma[{k}]" for k in range(N_BANDS)]
    + ["pcm_fftMag_fband250-650_sma", "pcm_fftMag_fband1000-4000_sma",
       "pcm_fftMag_spectralRollOff25.0_sma", "pcm_fftMag_spectralRollOff50.0_sma",
       "pcm_fftMag_spectralRollOff75.0_sma", "pcm_fftMag_spectralRollOff90.0_sma",
       "pcm_fftMag_spectralFlux_sma", "pcm_fftMag_spectralCentroid_sma",
       "pcm_fftMag_spectralEntropy_sma", "pcm_fftMag_spectralVariance_sma",
       "pcm_fftMag_spectralSkewness_sma", "pcm_fftMag_spectralKurtosis_sma",
       "pcm_fftMag_spectralSlope_sma", "pcm_fftMag_psySharpness_sma",
       "pcm_fftMag_spectralHarmonicity_sma"]
    + [f"mfcc_sma[{k}]" for k in range(1, 15)]
    + ["cpp", "cpp_band", "cpp_high", "energy", "zcr", "spl", "activity"]
)


@dataclass(frozen=True)
class CatalogEntry:
    id: int
    name: str
    group: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FeatureCatalog:
    entries: tuple
    window_ms: float = 200.0
    step_ms: float = 100.0
    n_bands: int = N_BANDS
    f0_min: float = 50.0
    f0_max: float = 500.0
    voicing_threshold: float = 0.45
    activity_ratio: float = 0.1

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def ids_in_group(self, group: str) -> list[int]:
        return [e.id for e in self.entries if e.group == group]

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def hash(self) -> str:
        payload = {
            "entries": [[e.id, e.name, e.group, e.params] for e in self.entries],
            "window_ms": self.window_ms, "step_ms": self.step_ms, "n_bands": self.n_bands,
            "f0_min": self.f0_min, "f0_max": self.f0_max,
            "voicing_threshold": self.voicing_threshold, "activity_ratio": self.activity_ratio,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def default_catalog() -> FeatureCatalog:
    group_of = {i: g for g, ids in _GROUP_IDS.items() for i in ids}
    params = {36: {"band_hz": [250, 650]}, 37: {"band_hz": [1000, 4000]},
              38: {"rolloff": 0.25}, 39: {"rolloff": 0.5}, 40: {"rolloff": 0.75},
              41: {"rolloff": 0.9}, 65: {"f0_range_hz": [50, 500]},
              66: {"f0_range_hz": [50, 160]}, 67: {"f0_range_hz": [160, 500]},
              69: {"unit": "crossings per second"}}
    for k in range(N_BANDS):
        params[10 + k] = {"band": k}
    for k in range(14):
        params[51 + k] = {"coefficient": k + 1}
    entries = tuple(CatalogEntry(i, _NAMES[i], group_of[i], params.get(i, {}))
                    for i in range(N_FEATURES))
    return FeatureCatalog(entries)


@dataclass(frozen=True)
class FrameFeatureMap:
    values: np.ndarray
    catalog_hash: str
    source_id: str = ""
    flags: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != N_FEATURES:
            raise ValueError(f"frame map must have {N_FEATURES} columns, got shape {values.shape}")
        if values.shape[0] < 1:
            raise ValueError("frame map needs at least one frame")
        if not np.all(np.isfinite(values)):
            raise ValueError("frame map contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path: str | Path, catalog: FeatureCatalog | None = None,
               sample_rate_hz: int | None = None) -> None:
        """Write the map plus a ``.json`` metadata sidecar next to it."""
        catalog = catalog or default_catalog()
        path = Path(path)
        np.savetxt(path, self.values, fmt="%.17g", delimiter=",",
                   header=",".join(catalog.names), comments="")
        meta = {"recording_id": self.source_id, "sample_rate_hz": sample_rate_hz,
                "catalog_hash": self.catalog_hash, "n_frames": self.n_frames}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path, catalog: FeatureCatalog | None = None) -> "FrameFeatureMap":
        catalog = catalog or default_catalog()
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if header != catalog.names:
            raise ValueError(f"{path}: header does not match the feature catalog")
        values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta_path = path.with_suffix(".json")
        source_id, chash = path.stem, catalog.hash
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            source_id = meta.get("recording_id", source_id)
            chash = meta.get("catalog_hash", chash)
        if chash != catalog.hash:
            raise ValueError(f"{path}: catalog hash {chash[:12]} does not match {catalog.hash[:12]}")
        return cls(values, chash, source_id)


# --------------------------------------------------------------------------
# spectral descriptors

def _bark(f):
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def _sharpness_weight(z):
    return np.where(z < 15.8, 1.0, 0.066 * np.exp(0.171 * z))


def spectral_harmonicity(spec: Spectrum, fmin: float = 50.0, fmax: float = 500.0) -> float:
    """Peak normalised autocorrelation of the magnitude spectrum over harmonic spacings."""
    m = spec.magnitudes
    lo = max(1, int(np.floor(fmin / spec.bin_width_hz)))
    hi = int(np.ceil(fmax / spec.bin_width_hz))
    if hi >= len(m) - 1 or not np.any(m):
        return 0.0
    r = normalized_autocorrelation(m - m.mean(), hi)
    return float(np.clip(r[lo: hi + 1].max(), 0.0, 1.0))


def spectral_shape_features(spec: Spectrum, prev: Spectrum | None = None) -> np.ndarray:
    """The 15 FFT-magnitude descriptors (catalog ids 36-50), in catalog order.

    Distribution statistics treat ``p_i = m_i / sum(m)`` as a probability
    mass over bin frequencies.  Band energies and roll-offs use ``m_i^2``.
    An all-zero spectrum yields zeros everywhere.
    """
    m = np.asarray(spec.magnitudes, dtype=np.float64)
    f = spec.frequencies
    power = m ** 2
    prev_m = np.zeros_like(m) if prev is None else np.asarray(prev.magnitudes, dtype=np.float64)
    flux = float(np.sum((m - prev_m) ** 2))

    band_lo = float(power[(f >= 250) & (f <= 650)].sum())
    band_hi = float(power[(f >= 1000) & (f <= 4000)].sum())

    total = m.sum()
    if total <= 0:
        out = np.zeros(15)
        out[6] = flux
        out[0], out[1] = band_lo, band_hi
        return out

    cum = np.cumsum(power)
    rolloffs = [float(f[min(np.searchsorted(cum, q * cum[-1]), len(f) - 1)])
                for q in (0.25, 0.5, 0.75, 0.9)]

    p = m / total
    centroid = float(np.sum(p * f))
    nz = p > 0
    entropy = float(-np.sum(p[nz] * np.log(p[nz])))
    dev = f - centroid
    variance = float(np.sum(p * dev ** 2))
    if variance > 0:
        skewness = float(np.sum(p * dev ** 3) / variance ** 1.5)
        kurtosis = float(np.sum(p * dev ** 4) / variance ** 2)
    else:
        skewness = kurtosis = 0.0
    fc = f - f.mean()
    slope = float(np.sum(fc * (m - m.mean())) / np.sum(fc ** 2))
    z = _bark(f)
    sharpness = float(0.11 * np.sum(m * z * _sharpness_weight(z)) / total)
    harmonicity = spectral_harmonicity(spec)
    return np.array([band_lo, band_hi, *rolloffs, flux, centroid, entropy, variance,
                     skewness, kurtosis, slope, sharpness, harmonicity])


# --------------------------------------------------------------------------
# voice quality

@dataclass(frozen=True)
class Perturbation:
    jitter_local: float
    jitter_ddp: float
    shimmer_local: float
    undefined: tuple = ()


def perturbation_features(periods, amplitudes) -> Perturbation:
    """Local jitter, DDP jitter and local shimmer of a period/amplitude sequence.

    Measures that need more points than supplied come back as 0 and are
    named in ``undefined``.
    """
    T = np.asarray(periods, dtype=np.float64)
    A = np.asarray(amplitudes, dtype=np.float64)
    undefined = []
    if len(T) >= 2 and T.mean() > 0:
        jitter_local = float(np.mean(np.abs(np.diff(T))) / T.mean())
    else:
        jitter_local = 0.0
        undefined.append("jitter_local")
    if len(T) >= 3 and T.mean() > 0:
        jitter_ddp = float(np.mean(np.abs(np.diff(T, n=2))) / T.mean())
    else:
        jitter_ddp = 0.0
        undefined.append("jitter_ddp")
    if len(A) >= 2 and A.mean() > 0:
        shimmer = float(np.mean(np.abs(np.diff(A))) / A.mean())
    else:
        shimmer = 0.0
        undefined.append("shimmer_local")
    return Perturbation(jitter_local, jitter_ddp, shimmer, tuple(undefined))


def loghnr_from_correlation(r: float) -> float:
    if r <= 0:
        return -HNR_CLAMP
    if r >= 1:
        return HNR_CLAMP
    return float(np.clip(10.0 * np.log10(r / (1.0 - r)), -HNR_CLAMP, HNR_CLAMP))


def harmonicity_loghnr(frame, sample_rate_hz: float, fmin: float = 50.0, fmax: float = 500.0,
                       threshold: float = 0.45) -> float:
    """log harmonics-to-noise ratio in dB from the autocorrelation at the pitch lag."""
    x = np.asarray(frame, dtype=np.float64)
    est = autocorrelation_pitch(x, sample_rate_hz, fmin, fmax, threshold)
    if est.f0_hz == 0.0:
        return -HNR_CLAMP
    k = int(round(est.lag))
    r = normalized_autocorrelation(x - x.mean(), k)[k]
    return loghnr_from_correlation(float(r))


CPP_RANGES = {"cpp": (50.0, 500.0), "cpp_band": (50.0, 160.0), "cpp_high": (160.0, 500.0)}


def _cpp_in_range(cep_db: np.ndarray, sample_rate_hz: float, f_lo: float, f_hi: float) -> float:
    q_lo = int(np.floor(sample_rate_hz / f_hi))
    q_hi = int(np.ceil(sample_rate_hz / f_lo))
    q = np.arange(q_lo, q_hi + 1)
    c = cep_db[q_lo: q_hi + 1]
    k = int(np.argmax(c))
    slope, intercept = np.polyfit(q.astype(np.float64), c, 1)
    return float(c[k] - (slope * q[k] + intercept))


def cepstral_peak_prominence(frame, sample_rate_hz: float) -> tuple[float, float, float]:
    """(cpp, cpp_band, cpp_high): rahmonic peak height above the regression trend, in dB."""
    x = np.asarray(frame, dtype=np.float64)
    if len(x) <= sample_rate_hz / CPP_RANGES["cpp"][0]:
        raise ValueError("frame too short for the largest quefrency searched")
    if not np.any(x):
        return 0.0, 0.0, 0.0
    cep_db = real_cepstrum(x) * (20.0 / np.log(10.0))
    return tuple(_cpp_in_range(cep_db, sample_rate_hz, lo, hi) for lo, hi in CPP_RANGES.values())


# --------------------------------------------------------------------------
# rhythm

@dataclass(frozen=True)
class RhythmFeatures:
    rms_energy: float
    zcr: float
    spl: float
    activity: float
    audspec_l1: float
    audspec_rasta_l1: float


def zero_crossing_count(x: np.ndarray) -> int:
    positive = np.asarray(x) >= 0
    return int(np.count_nonzero(positive[1:] != positive[:-1]))


def rhythm_features(frame, activity_threshold: float = 0.0, band_energies=None,
                    rasta_bands=None) -> RhythmFeatures:
    """Energy, ZCR, SPL, activity flag and auditory-spectrum L1 norms of one frame.

    ``band_energies`` are the linear mel band powers of the frame and
    ``rasta_bands`` its RASTA-filtered log bands; each L1 norm is 0 when
    the corresponding input is omitted.
    """
    x = np.asarray(frame, dtype=np.float64)
    rms = float(np.sqrt(np.mean(x * x)))
    zcr = zero_crossing_count(x) / (len(x) - 1) if len(x) > 1 else 0.0
    spl = float(20.0 * np.log10(max(rms, EPS) / EPS))
    active = 1.0 if rms > activity_threshold else 0.0
    l1 = float(np.sum(np.abs(band_energies))) if band_energies is not None else 0.0
    l1r = float(np.sum(np.abs(rasta_bands))) if rasta_bands is not None else 0.0
    return RhythmFeatures(rms, zcr, spl, active, l1, l1r)


# --------------------------------------------------------------------------

def _perturbation_columns(f0: np.ndarray, amps: np.ndarray, window: int = 3):
    """Per-frame jitter/shimmer from the trailing run of voiced frames."""
    n = len(f0)
    out = np.zeros((n, 3))
    n_undefined = 0
    run_start = 0
    for k in range(n):
        if f0[k] <= 0:
            run_start = k + 1
            continue
        lo = max(run_start, k - window + 1)
        p = perturbation_features(1.0 / f0[lo: k + 1], amps[lo: k + 1])
        out[k] = p.jitter_local, p.jitter_ddp, p.shimmer_local
        n_undefined += bool(p.undefined)
    return out, n_undefined


def extract_lld_map(w: Waveform, catalog: FeatureCatalog | None = None,
                    source_id: str = "") -> FrameFeatureMap:
    """Compute the (n_frames x 72) descriptor map of a recording."""
    catalog = catalog or default_catalog()
    fs = w.sample_rate_hz
    frames = frame_signal(w, catalog.window_ms, catalog.step_ms).frames
    n = frames.shape[0]
    spectra = [magnitude_spectrum(fr, fs) for fr in frames]
    n_fft = spectra[0].n_fft
    fb, edges = mel_filterbank(n_fft, fs, catalog.n_bands)
    band_pow = np.stack([fb @ (s.magnitudes ** 2) for s in spectra])
    log_bands = np.log(np.maximum(band_pow, EPS))
    rasta = rasta_filter(BandEnergyTrajectory(log_bands, edges)).values
    mfcc = dct(log_bands, type=2, norm="ortho", axis=1)[:, 1:15]

    out = np.zeros((n, N_FEATURES))
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    activity_threshold = catalog.activity_ratio * float(np.median(rms))
    amps = np.max(np.abs(frames), axis=1)
    for k, fr in enumerate(frames):
        est = autocorrelation_pitch(fr, fs, catalog.f0_min, catalog.f0_max, catalog.voicing_threshold)
        out[k, 0], out[k, 1] = est.f0_hz, est.voicing_prob
        out[k, 5] = harmonicity_loghnr(fr, fs, catalog.f0_min, catalog.f0_max, catalog.voicing_threshold)
        rf = rhythm_features(fr, activity_threshold, band_pow[k], rasta[k])
        out[k, 6], out[k, 7] = rf.audspec_l1, rf.audspec_rasta_l1
        out[k, 8], out[k, 9] = rf.rms_energy, rf.zcr
        out[k, 36:51] = spectral_shape_features(spectra[k], spectra[k - 1] if k > 0 else None)
        out[k, 65:68] = cepstral_peak_prominence(fr, fs)
        out[k, 68] = float(np.sum(fr * fr))
        out[k, 69] = zero_crossing_count(fr) * fs / len(fr)
        out[k, 70], out[k, 71] = rf.spl, rf.activity
    out[:, 10:36] = rasta
    out[:, 51:65] = mfcc
    pert, n_undefined = _perturbation_columns(out[:, 0], amps)
    out[:, 2:5] = pert
    flags = {"undefined_perturbation_frames": n_undefined,
             "unvoiced_frames": int(np.count_nonzero(out[:, 0] == 0))}
    if n_undefined:
        log.debug("%s: %d voiced frames with undefined perturbation values", source_id, n_undefined)
    return FrameFeatureMap(out, catalog.hash, source_id, flags)
