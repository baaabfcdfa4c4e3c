import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tone
from oracles import central_moments
from voicetrack.dsp import Waveform
from voicetrack.frames import FrameFeatureMap, default_catalog, extract_lld_map
from voicetrack.functionals import (
    FUNCTIONALS,
    GLOBAL_GROUPS,
    apply_functionals,
    build_global_vector,
    global_feature_names,
    global_group_index,
    group_sizes,
    read_global_store,
    write_global_store,
)

IDX = {name: i for i, name in enumerate(FUNCTIONALS)}
CAT = default_catalog()

# documented manifest: 98 trajectories x 17 functionals
EXPECTED_GROUP_SIZES = {"G1": 17, "G2": 17, "G3": 34, "G4": 68, "G5": 255, "G6": 884,
                        "G7": 238, "G8": 34, "G9": 34, "G10": 17, "G11": 68}


def test_seventeen_functionals():
    assert len(FUNCTIONALS) == 17
    assert len(apply_functionals([1.0, 2.0, 4.0])) == 17


def test_constant_trajectory():
    out = apply_functionals(np.full(20, 3.5))
    assert out[IDX["mean"]] == 3.5
    for name in ("stddev", "linregc1", "range", "skewness", "kurtosis", "linregerrQ"):
        assert out[IDX[name]] == 0.0, name


def test_exact_line():
    out = apply_functionals([0.0, 1.0, 2.0, 3.0])
    assert out[IDX["linregc1"]] == pytest.approx(1.0, abs=1e-15)
    assert out[IDX["mean"]] == 1.5 and out[IDX["max"]] == 3.0
    assert out[IDX["linregerrQ"]] == pytest.approx(0.0, abs=1e-30)


def test_moments_against_oracle(rng):
    x = rng.gamma(2.0, size=101)
    out = apply_functionals(x)
    m, v, s, k = central_moments(list(x))
    assert out[IDX["mean"]] == pytest.approx(m, rel=1e-12)
    assert out[IDX["stddev"]] == pytest.approx(np.sqrt(v), rel=1e-12)
    assert out[IDX["skewness"]] == pytest.approx(s, rel=1e-9)
    assert out[IDX["kurtosis"]] == pytest.approx(k, rel=1e-9)


def test_percentiles_linear_interpolation():
    out = apply_functionals([10.0, 0.0, 30.0, 20.0])
    # sorted [0, 10, 20, 30], position q * (n - 1)
    assert out[IDX["quartile1"]] == 7.5
    assert out[IDX["quartile2"]] == 15.0
    assert out[IDX["quartile3"]] == 22.5
    assert out[IDX["iqr1-3"]] == 15.0
    assert out[IDX["percentile1"]] == pytest.approx(0.3)


def test_mean_crossings_and_outliers():
    out = apply_functionals([0.0, 2.0, 0.0, 2.0, 0.0])
    assert out[IDX["meanCrossingRate"]] == 1.0
    out = apply_functionals([0.0] * 9 + [10.0])
    assert out[IDX["upperOutlierFraction"]] == pytest.approx(0.1)


def test_short_conventions():
    one = apply_functionals([4.0])
    assert one[IDX["stddev"]] == 0 and one[IDX["linregc1"]] == 0 and one[IDX["mean"]] == 4.0
    two = apply_functionals([1.0, 3.0])
    assert two[IDX["skewness"]] == 0 and two[IDX["kurtosis"]] == 0
    with pytest.raises(ValueError):
        apply_functionals([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=60), st.randoms())
def test_order_free_statistics_shuffle_invariant(xs, r):
    a = apply_functionals(xs)
    ys = list(xs)
    r.shuffle(ys)
    b = apply_functionals(ys)
    for name in ("mean", "stddev", "min", "max", "range", "quartile1", "quartile2",
                 "quartile3", "percentile1", "percentile99", "upperOutlierFraction"):
        assert b[IDX[name]] == pytest.approx(a[IDX[name]], rel=1e-9, abs=1e-9), name


def test_shuffle_changes_order_dependent_stats():
    x = np.arange(20.0)
    y = np.random.default_rng(0).permutation(x)
    a, b = apply_functionals(x), apply_functionals(y)
    assert a[IDX["linregc1"]] != b[IDX["linregc1"]]
    assert a[IDX["meanCrossingRate"]] != b[IDX["meanCrossingRate"]]


# -- global vectors ----------------------------------------------------------

def test_group_cardinalities():
    assert group_sizes() == EXPECTED_GROUP_SIZES
    assert sum(EXPECTED_GROUP_SIZES.values()) == 1666 == 98 * 17
    idx = global_group_index()
    assert set(idx.values()) == set(GLOBAL_GROUPS)
    assert len(idx) == len(global_feature_names()) == 1666


def test_silence_vector():
    v = build_global_vector(extract_lld_map(Waveform(np.zeros(22050), 22050)))
    names = list(v.names)
    assert len(v) == 1666
    zcr = [i for i, n in enumerate(names) if v.group_index[n] == "G3"]
    assert not np.any(v.values[zcr])
    rms = v.values[names.index("pcm_RMSenergy_sma__mean")]
    assert rms == 0.0


def test_tone_f0_mean():
    v = build_global_vector(extract_lld_map(tone(220, 3.0)))
    mean_f0 = v.values[list(v.names).index("F0final_sma__mean")]
    assert mean_f0 == pytest.approx(220, rel=0.02)


def test_schema_stable_across_recordings(rng):
    a = build_global_vector(extract_lld_map(tone(150, 1.0)))
    b = build_global_vector(extract_lld_map(Waveform(0.1 * rng.standard_normal(30000), 22050)))
    assert a.names == b.names and len(a) == len(b)


def test_hash_mismatch_rejected():
    with pytest.raises(ValueError):
        build_global_vector(FrameFeatureMap(np.zeros((3, 72)), "other"))


def test_rasta_deltas_present(rng):
    fm = FrameFeatureMap(rng.standard_normal((6, 72)), CAT.hash)
    v = build_global_vector(fm)
    k = list(v.names).index("audSpec_Rfilt_sma_de[3]__mean")
    assert v.values[k] == pytest.approx(np.mean(np.diff(fm.values[:, 13])))


def test_store_round_trip(tmp_path, rng):
    vecs = [build_global_vector(FrameFeatureMap(rng.standard_normal((4, 72)), CAT.hash, f"r{i}"))
            for i in range(3)]
    write_global_store(tmp_path / "g.csv", vecs)
    ids, names, X = read_global_store(tmp_path / "g.csv")
    assert ids == ["r0", "r1", "r2"] and names == list(vecs[0].names)
    np.testing.assert_array_equal(X, np.stack([v.values for v in vecs]))
    assert (tmp_path / "g_groups.json").exists()
