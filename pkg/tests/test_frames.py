import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tone
from oracles import central_moments
from voicetrack.dsp import EPS, Spectrum, Waveform
from voicetrack.frames import (
    GROUPS,
    HNR_CLAMP,
    N_FEATURES,
    FrameFeatureMap,
    cepstral_peak_prominence,
    default_catalog,
    extract_lld_map,
    harmonicity_loghnr,
    loghnr_from_correlation,
    perturbation_features,
    rhythm_features,
    spectral_shape_features,
)

CAT = default_catalog()


# -- catalog -----------------------------------------------------------------

def test_catalog_ids_contiguous_and_partitioned():
    ids = [e.id for e in CAT.entries]
    assert ids == list(range(N_FEATURES))
    seen = sorted(i for g in GROUPS for i in CAT.ids_in_group(g))
    assert seen == ids


def test_catalog_group_lists():
    assert CAT.ids_in_group("MFCC") == list(range(51, 65))
    rasta = CAT.ids_in_group("RASTA")
    assert 7 in rasta and all(i in rasta for i in range(10, 36))
    assert CAT.ids_in_group("F0") == [0, 1]
    assert len(set(CAT.names)) == N_FEATURES


def test_catalog_hash_stable_and_sensitive():
    assert default_catalog().hash == CAT.hash
    from dataclasses import replace
    assert replace(CAT, step_ms=50.0).hash != CAT.hash


def test_frame_map_invariants():
    with pytest.raises(ValueError):
        FrameFeatureMap(np.zeros((3, 71)), CAT.hash)
    with pytest.raises(ValueError):
        FrameFeatureMap(np.zeros((0, 72)), CAT.hash)
    bad = np.zeros((2, 72))
    bad[1, 4] = np.inf
    with pytest.raises(ValueError):
        FrameFeatureMap(bad, CAT.hash)


def test_frame_map_csv_round_trip(tmp_path, rng):
    fm = FrameFeatureMap(rng.standard_normal((5, 72)), CAT.hash, "rec1")
    fm.to_csv(tmp_path / "rec1.csv", sample_rate_hz=16000)
    back = FrameFeatureMap.from_csv(tmp_path / "rec1.csv")
    np.testing.assert_array_equal(back.values, fm.values)
    assert back.source_id == "rec1" and back.catalog_hash == CAT.hash


def test_frame_map_csv_hash_mismatch(tmp_path, rng):
    import json
    fm = FrameFeatureMap(rng.standard_normal((2, 72)), "deadbeef", "x")
    fm.to_csv(tmp_path / "x.csv")
    with pytest.raises(ValueError, match="hash"):
        FrameFeatureMap.from_csv(tmp_path / "x.csv")
    meta = json.loads((tmp_path / "x.json").read_text())
    assert meta["catalog_hash"] == "deadbeef"


# -- extraction --------------------------------------------------------------

def test_silence_map():
    fm = extract_lld_map(Waveform(np.zeros(22050), 22050))
    v = fm.values
    assert v.shape == (9, 72)
    for name in ("F0final_sma", "pcm_RMSenergy_sma", "pcm_zcr_sma", "energy", "zcr", "spl"):
        assert not np.any(v[:, CAT.index(name)]), name
    assert not np.any(v[:, 6])
    # log bands all sit on the floor, a constant vector whose DCT has no c1..c14 content
    assert np.max(np.abs(v[:, 51:65])) < 1e-9
    assert np.all(v[:, 5] == -HNR_CLAMP)


def test_tone_f0_column():
    fm = extract_lld_map(tone(220, 3.0))
    f0 = fm.values[:, 0]
    voiced = f0 > 0
    assert voiced.sum() >= fm.n_frames - 1
    np.testing.assert_allclose(f0[voiced], 220, rtol=0.02)


def test_extraction_bitwise_deterministic(rng):
    w = Waveform(rng.standard_normal(22050) * 0.1, 22050)
    a = extract_lld_map(w).values
    b = extract_lld_map(w).values
    assert a.tobytes() == b.tobytes()


def test_scale_behaviour():
    rng = np.random.default_rng(3)
    base = tone(180, 1.0).samples + 0.05 * rng.standard_normal(22050)
    a = 3.0
    v1 = extract_lld_map(Waveform(base, 22050)).values
    v2 = extract_lld_map(Waveform(a * base, 22050)).values
    for name in ("pcm_zcr_sma", "jitterLocal_sma", "pcm_fftMag_spectralCentroid_sma",
                 "pcm_fftMag_spectralEntropy_sma", "pcm_fftMag_spectralRollOff50.0_sma",
                 "pcm_fftMag_spectralRollOff90.0_sma"):
        j = CAT.index(name)
        np.testing.assert_allclose(v2[:, j], v1[:, j], atol=1e-6, err_msg=name)
    # log-energy shift by log(a^2) affects only c0, which is dropped
    np.testing.assert_allclose(v2[:, 51:65], v1[:, 51:65], atol=1e-6)
    np.testing.assert_allclose(v2[:, 8], a * v1[:, 8], rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(arrays(np.float64, 2000, elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_fuzz_extraction_finite(x):
    fm = extract_lld_map(Waveform(x, 8000))
    assert np.all(np.isfinite(fm.values))


def test_extraction_too_short():
    with pytest.raises(ValueError):
        extract_lld_map(Waveform(np.zeros(100), 22050))


# -- spectral shape ----------------------------------------------------------

def test_single_bin_spectrum():
    m = np.zeros(129)
    m[40] = 2.0
    s = Spectrum(m, 31.25)
    out = spectral_shape_features(s)
    assert len(out) == 15
    assert out[8] == 0.0  # entropy
    assert out[9] == 0.0  # variance
    assert out[7] == pytest.approx(40 * 31.25)


def test_uniform_spectrum_entropy():
    K = 64
    out = spectral_shape_features(Spectrum(np.ones(K), 10.0))
    assert out[8] == pytest.approx(np.log(K), rel=1e-12)


def test_zero_spectrum_conventions():
    out = spectral_shape_features(Spectrum(np.zeros(65), 10.0))
    assert out[7] == 0.0 and out[8] == 0.0


def test_moments_match_direct_summation(rng):
    m = rng.random(257)
    bw = 22050 / 512
    s = Spectrum(m, bw)
    out = spectral_shape_features(s)
    f = np.arange(257) * bw
    total = sum(m)
    centroid = sum(mi * fi for mi, fi in zip(m, f)) / total
    var = sum(mi * (fi - centroid) ** 2 for mi, fi in zip(m, f)) / total
    skew = sum(mi * (fi - centroid) ** 3 for mi, fi in zip(m, f)) / total / var ** 1.5
    kurt = sum(mi * (fi - centroid) ** 4 for mi, fi in zip(m, f)) / total / var ** 2
    ent = -sum((mi / total) * np.log(mi / total) for mi in m)
    ref = [centroid, ent, var, skew, kurt]
    np.testing.assert_allclose(out[7:12], ref, rtol=1e-9)


def test_flux_against_previous(rng):
    a, b = rng.random(33), rng.random(33)
    cur = spectral_shape_features(Spectrum(a, 1.0), Spectrum(b, 1.0))
    assert cur[6] == pytest.approx(float(np.sum((a - b) ** 2)), rel=1e-12)
    first = spectral_shape_features(Spectrum(a, 1.0))
    assert first[6] == pytest.approx(float(np.sum(a ** 2)), rel=1e-12)


def test_slope_on_linear_spectrum():
    f = np.arange(100) * 5.0
    out = spectral_shape_features(Spectrum(2.0 + 0.01 * f, 5.0))
    assert out[12] == pytest.approx(0.01, rel=1e-10)


# -- perturbation ------------------------------------------------------------

def test_periodic_train_zero_perturbation():
    p = perturbation_features([0.01] * 8, [0.7] * 8)
    assert (p.jitter_local, p.jitter_ddp, p.shimmer_local) == (0.0, 0.0, 0.0)
    assert p.undefined == ()


def test_alternating_10_11_ms():
    p = perturbation_features([0.010, 0.011] * 10, [1.0] * 20)
    assert p.jitter_local == pytest.approx(1 / 10.5, rel=1e-12)


def test_perturbation_elementwise_oracle(rng):
    T = rng.uniform(0.004, 0.012, 25)
    A = rng.uniform(0.1, 1.0, 25)
    p = perturbation_features(T, A)
    mT = sum(T) / len(T)
    jl = sum(abs(T[i] - T[i - 1]) for i in range(1, len(T))) / (len(T) - 1) / mT
    jd = sum(abs((T[i + 1] - T[i]) - (T[i] - T[i - 1])) for i in range(1, len(T) - 1)) / (len(T) - 2) / mT
    sh = sum(abs(A[i] - A[i - 1]) for i in range(1, len(A))) / (len(A) - 1) / (sum(A) / len(A))
    assert p.jitter_local == pytest.approx(jl, rel=1e-12)
    assert p.jitter_ddp == pytest.approx(jd, rel=1e-12)
    assert p.shimmer_local == pytest.approx(sh, rel=1e-12)


def test_insufficient_periods_flagged():
    p = perturbation_features([0.01], [1.0])
    assert p.jitter_local == 0 and set(p.undefined) == {"jitter_local", "jitter_ddp", "shimmer_local"}
    p = perturbation_features([0.01, 0.011], [1.0, 0.9])
    assert p.undefined == ("jitter_ddp",)


# -- HNR ---------------------------------------------------------------------

def test_hnr_half_is_zero_db():
    assert loghnr_from_correlation(0.5) == pytest.approx(0.0, abs=1e-12)


def test_hnr_clamps():
    assert loghnr_from_correlation(1.0) == HNR_CLAMP
    assert loghnr_from_correlation(0.0) == -HNR_CLAMP
    assert loghnr_from_correlation(1 - 1e-30) == HNR_CLAMP


@pytest.mark.parametrize("f0", [210, 225, 245])
def test_pure_sine_at_upper_clamp(f0):
    # integer-sample period, so the lag-k correlation is exactly 1
    assert harmonicity_loghnr(tone(f0, 0.2).samples, 22050) == HNR_CLAMP


def test_off_grid_sine_still_high():
    # 110.25-sample period: the integer lag misses the true period slightly
    assert harmonicity_loghnr(tone(200, 0.2).samples, 22050) > 35


def test_unvoiced_frame_at_floor():
    assert harmonicity_loghnr(np.zeros(4410), 22050) == -HNR_CLAMP


@pytest.mark.parametrize("snr_db", [0.0, 5.0, 10.0])
def test_hnr_tracks_mixture_snr(snr_db):
    rng = np.random.default_rng(11)
    vals = []
    for _ in range(10):
        s = tone(200, 0.2, amp=1.0).samples
        noise = rng.standard_normal(len(s))
        noise *= np.sqrt(np.mean(s ** 2) / np.mean(noise ** 2) / 10 ** (snr_db / 10))
        vals.append(harmonicity_loghnr(s + noise, 22050))
    assert abs(np.mean(vals) - snr_db) < 3.0


# -- CPP ---------------------------------------------------------------------

def test_cpp_zero_frame():
    assert cepstral_peak_prominence(np.zeros(4410), 22050) == (0.0, 0.0, 0.0)


def test_cpp_too_short():
    with pytest.raises(ValueError):
        cepstral_peak_prominence(np.ones(200), 22050)


def test_pulse_train_cpp():
    fs = 8000
    x = np.zeros(1600)
    x[::80] = 1.0  # 100 Hz
    cpp, band, high = cepstral_peak_prominence(x, fs)
    noise = [cepstral_peak_prominence(np.random.default_rng(s).standard_normal(1600), fs)[0]
             for s in range(10)]
    assert cpp > 5 * np.mean(noise)
    assert band >= high


def test_white_noise_cpp_small_relative_to_voice():
    fs = 8000
    rng = np.random.default_rng(0)
    noise = np.mean([cepstral_peak_prominence(rng.standard_normal(1600), fs)[0] for _ in range(20)])
    x = np.zeros(1600)
    x[::80] = 1.0
    assert noise < 0.25 * cepstral_peak_prominence(x, fs)[0]


# -- rhythm ------------------------------------------------------------------

def test_alternating_frame():
    rf = rhythm_features(np.array([1.0, -1.0] * 50))
    assert rf.zcr == 1.0 and rf.rms_energy == 1.0


def test_constant_frame_zcr():
    assert rhythm_features(np.full(100, 0.3)).zcr == 0.0


def test_sine_zcr():
    t = np.arange(8000) / 8000
    rf = rhythm_features(np.sin(2 * np.pi * 100 * t + 0.1))
    assert rf.zcr == pytest.approx(200 / 8000, rel=0.01)


def test_spl_and_activity():
    rf = rhythm_features(np.full(10, 0.5), activity_threshold=0.4)
    assert rf.spl == pytest.approx(20 * np.log10(0.5 / EPS))
    assert rf.activity == 1.0
    assert rhythm_features(np.full(10, 0.5), activity_threshold=0.6).activity == 0.0


def test_l1_norms():
    rf = rhythm_features(np.ones(4), band_energies=np.array([1.0, 2.0]), rasta_bands=np.array([-1.0, 3.0]))
    assert (rf.audspec_l1, rf.audspec_rasta_l1) == (3.0, 4.0)


def test_moment_oracle_sanity(rng):
    # guards the oracle itself against a silent regression
    x = rng.standard_normal(50)
    m, v, s, k = central_moments(list(x))
    assert m == pytest.approx(np.mean(x)) and v == pytest.approx(np.var(x))
