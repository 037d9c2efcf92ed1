import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eitphys import sigproc
from eitphys.errors import AlignmentError, UnsupportedRateError, UsageError
from eitphys.phantom import PatientParams, simulate_record
from eitphys.sigproc import Channel, Rating


def band_limited(n, seed, cutoff=0.08):
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    spec[int(cutoff * n) :] = 0
    return np.fft.irfft(spec, n)


def delayed(x, k, n, start=40):
    """Window of x delayed by k samples: out[t] = x[start + t - k]."""
    return x[start - k : start - k + n]


# ---------------------------------------------------------------- resampling


def test_resample_constant():
    out = sigproc.resample_10hz(Channel("V", np.full(1000, 3.25), 100.0))
    assert out.rate == 10.0
    assert len(out) == 100
    np.testing.assert_allclose(out.samples, 3.25, atol=1e-12)


def test_resample_sine_matches_analytic():
    t = np.arange(1000) / 100.0
    out = sigproc.resample_10hz(Channel("V", np.sin(2 * np.pi * t), 100.0))
    expected = np.sin(2 * np.pi * np.arange(len(out)) / 10.0)
    assert np.max(np.abs(out.samples - expected)) < 1e-2


def test_resample_length_1280_gives_128():
    assert len(sigproc.resample_array(np.zeros(1280), 100.0)) == 128


def test_resample_rejects_low_rate():
    with pytest.raises(UnsupportedRateError):
        sigproc.resample_10hz(Channel("V", np.zeros(50), 5.0))


def test_resample_multichannel_matches_columns():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((500, 3))
    both = sigproc.resample_array(x, 50.0)
    for j in range(3):
        np.testing.assert_allclose(both[:, j], sigproc.resample_array(x[:, j], 50.0), atol=1e-12)


def test_channel_rejects_non_finite():
    with pytest.raises(UsageError):
        Channel("V", np.array([1.0, np.nan]), 10.0)
    with pytest.raises(UsageError):
        Channel("V", np.zeros(3), 0.0)


# ------------------------------------------------------------ standardization


def test_standardize_closed_form():
    y, mean, sd = sigproc.standardize([1.0, 2.0, 3.0])
    np.testing.assert_allclose(y, [-1.2247449, 0.0, 1.2247449], atol=1e-6)
    assert mean == 2.0
    assert math.isclose(sd, math.sqrt(2 / 3))


def test_standardize_constant_is_guarded():
    res = sigproc.standardize([5.0, 5.0, 5.0])
    assert res.degenerate
    np.testing.assert_array_equal(res.y, [0.0, 0.0, 0.0])
    assert res.sd == sigproc.STANDARDIZE_EPS


def test_standardize_errors():
    with pytest.raises(UsageError):
        sigproc.standardize([])
    with pytest.raises(UsageError):
        sigproc.standardize([1.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 50), elements=st.floats(-1e3, 1e3)))
def test_standardize_idempotent(x):
    once = sigproc.standardize(x).y
    twice = sigproc.standardize(once).y
    np.testing.assert_allclose(twice, once, atol=1e-6)
    if not sigproc.standardize(x).degenerate:
        assert abs(once.mean()) < 1e-6 and abs(once.std() - 1) < 1e-6


# ----------------------------------------------------------------- alignment


def test_estimate_lag_constructed_shift():
    x = band_limited(600, 0)
    a = x[40:540]
    assert sigproc.estimate_lag(a, delayed(x, 5, 500), 20) == 5
    assert sigproc.estimate_lag(a, a, 20) == 0


def brute_force_lag(a, b, max_lag):
    scores = {}
    for lag in range(-max_lag, max_lag + 1):
        pairs = [(a[t], b[t + lag]) for t in range(len(a)) if 0 <= t + lag < len(b)]
        x = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        scores[lag] = np.corrcoef(x, y)[0, 1]
    best = max(scores.values())
    tied = [lag for lag, s in scores.items() if s >= best - 1e-9]
    return min(tied, key=lambda lag: (abs(lag), -lag))


def test_estimate_lag_tie_goes_to_smallest_lag():
    period = 20
    t = np.arange(400)
    x = np.sin(2 * np.pi * t / period)
    a = x[60:300]
    b = delayed(x, period + 2, 240, start=60)
    lag = sigproc.estimate_lag(a, b, 30)
    assert lag == brute_force_lag(a, b, 30) == 2


@pytest.mark.parametrize("k", [-15, -7, -1, 0, 3, 9, 15])
def test_estimate_lag_recovers_shift(k):
    x = band_limited(700, 3)
    assert sigproc.estimate_lag(x[40:640], delayed(x, k, 600), 15) == k


def test_estimate_lag_all_lags_skipped():
    with pytest.raises(AlignmentError):
        sigproc.estimate_lag(np.ones(10), np.ones(10), 3)
    with pytest.raises(UsageError):
        sigproc.estimate_lag(np.ones(10), np.ones(10), 10)


def _record(lags, **kw):
    return simulate_record(PatientParams(), 60.0, seed=4, lags=lags, **kw)


def test_align_recovers_injected_lags():
    aligned = sigproc.align_records(_record({"eit": 7, "monitor": -12}))
    assert aligned.meta["estimated_lags"] == {"eit": 7, "monitor": -12}
    assert aligned.meta["residual_lags"] == {"eit": 0, "monitor": 0}
    assert aligned.meta["unalignable"] == []
    # after alignment the identity between devices holds again
    ch = aligned.channels
    np.testing.assert_array_equal(ch["p_tp"].samples + ch["p_es"].samples, ch["p_aw"].samples)


def test_align_zero_lag_is_identity():
    rec = _record({})
    aligned = sigproc.align_records(rec)
    assert aligned.n_samples == rec.n_samples
    for cid, ch in rec.channels.items():
        np.testing.assert_array_equal(aligned.channels[cid].samples, ch.samples)
    np.testing.assert_array_equal(aligned.eit, rec.eit)


def test_align_flags_noise_channel():
    rec = _record({"monitor": 4})
    noise = np.random.default_rng(0).standard_normal(rec.n_samples).astype(np.float32)
    rec.channels["p_aw_monitor"] = Channel("p_aw_monitor", noise, 10.0, "cmH2O")
    aligned = sigproc.align_records(rec)
    assert aligned.meta["unalignable"] == ["monitor"]
    assert "p_es" not in aligned.channels and "p_ab" not in aligned.channels
    assert "V" in aligned.channels


# ------------------------------------------------------------------- metrics


def test_rmse_examples():
    x = band_limited(200, 1)
    assert sigproc.rmse(x, x) == 0.0
    assert sigproc.shifted_rmse(x, x) == 0.0
    assert math.isclose(sigproc.rmse(x + 0.7, x), 0.7, rel_tol=1e-12)
    with pytest.raises(UsageError):
        sigproc.rmse(x, x[:-1])


def test_shifted_rmse_constructed_shift():
    x = band_limited(400, 2, cutoff=0.03)
    pred = x[40:168]
    tgt = delayed(x, 3, 128)
    assert sigproc.shifted_rmse(pred, tgt, 10) < 0.05 * tgt.std()
    assert sigproc.rmse(pred, tgt) > 0.2 * tgt.std()


@pytest.mark.parametrize("k", range(-10, 11))
def test_shifted_rmse_vanishes_under_shift(k):
    t = np.arange(300) / 10.0
    x = np.sin(2 * np.pi * 0.25 * t) + 0.3 * np.sin(2 * np.pi * 0.11 * t + 1.0)
    assert sigproc.shifted_rmse(x[40:168], delayed(x, k, 128), 10) < 1e-6


def test_shifted_rmse_zero_lag_is_rmse():
    x, y = band_limited(128, 5), band_limited(128, 6)
    assert sigproc.shifted_rmse(x, y, 0) == sigproc.rmse(x, y)


# ----------------------------------------------------------------------- DTW


def test_dtw_examples():
    assert sigproc.dtw([1, 2, 3], [1, 2, 3]) == 0.0
    assert sigproc.dtw([1, 2, 3], [1, 2, 2, 3]) == 0.0
    assert sigproc.dtw([0, 3], [1]) == 3.0
    with pytest.raises(UsageError):
        sigproc.dtw([], [1.0])


def _paths(n, m):
    """Every monotone path from (0,0) to (n-1,m-1) with unit steps."""
    out = []

    def walk(i, j, acc):
        if (i, j) == (n - 1, m - 1):
            out.append(acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc + [(i + di, j + dj)])

    walk(0, 0, [(0, 0)])
    return out


def _path_oracle_all(seqs_a, seqs_b, paths):
    """min over paths of summed |a_i - b_j|, vectorized over sequence pairs."""
    a = np.asarray(seqs_a, dtype=float)
    b = np.asarray(seqs_b, dtype=float)
    cost = np.abs(a[:, :, None] - b[:, None, :])  # [pairs, n, m]
    best = np.full(len(a), np.inf)
    for p in paths:
        ii, jj = np.array(p).T
        best = np.minimum(best, cost[:, ii, jj].sum(axis=1))
    return best


def test_dtw_matches_path_enumeration():
    rng = np.random.default_rng(0)
    checked = 0
    for n in range(1, 9):
        for m in range(1, 9):
            paths = _paths(n, m)
            seqs_n = np.array(list(itertools.product(range(3), repeat=n)))
            seqs_m = np.array(list(itertools.product(range(3), repeat=m)))
            if len(seqs_n) * len(seqs_m) * len(paths) <= 2_000_000:
                ia, ib = np.meshgrid(np.arange(len(seqs_n)), np.arange(len(seqs_m)), indexing="ij")
                ia, ib = ia.ravel(), ib.ravel()
            else:
                ia = rng.integers(0, len(seqs_n), 40)
                ib = rng.integers(0, len(seqs_m), 40)
            oracle = _path_oracle_all(seqs_n[ia], seqs_m[ib], paths)
            got = np.array([sigproc.dtw(seqs_n[i], seqs_m[j]) for i, j in zip(ia, ib)])
            np.testing.assert_array_equal(got, oracle)
            checked += len(ia)
    assert checked > 10_000


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 20), elements=st.floats(-10, 10)),
    arrays(np.float64, st.integers(1, 20), elements=st.floats(-10, 10)),
)
def test_dtw_symmetry_and_identity(a, b):
    assert sigproc.dtw(a, b) == pytest.approx(sigproc.dtw(b, a), abs=1e-9)
    assert sigproc.dtw(a, a) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-10, 10)), arrays(np.float64, n, elements=st.floats(-10, 10)))))
def test_dtw_bounded_by_diagonal(pair):
    a, b = pair
    assert sigproc.dtw(a, b) <= np.abs(a - b).sum() + 1e-9


# ------------------------------------------------------------- visual rating


def breathing(n=128, seed=0):
    t = np.arange(n) / 10.0
    rng = np.random.default_rng(seed)
    return np.sin(2 * np.pi * 0.25 * t) + 0.3 * np.sin(2 * np.pi * 0.5 * t + 0.4) + 0.05 * rng.standard_normal(n)


def test_rating_examples():
    tgt = breathing()
    assert sigproc.visual_rating(tgt, tgt) is Rating.PLUS
    assert sigproc.visual_rating(0.3 * tgt, tgt) is Rating.CIRCLE
    noise = np.random.default_rng(9).standard_normal(128)
    assert sigproc.visual_rating(noise, tgt) is Rating.MINUS
    assert sigproc.visual_rating(np.zeros(128), tgt) is Rating.MINUS


@pytest.mark.parametrize("c", [0.1, 0.3, 0.5, 0.69, 0.7, 0.71, 1.0, 1.2, 1.4, 1.41, 2.0, 5.0, -0.7, -1.0, -1.4])
def test_rating_scale_detection(c):
    tgt = breathing(seed=3)
    got = sigproc.visual_rating(c * tgt, tgt)
    if c > 0 and 0.7 <= c <= 1.4:
        assert got is Rating.PLUS
    elif c > 0:
        assert got is Rating.CIRCLE
    else:
        assert got is not Rating.PLUS


def test_metrics_report_counts_and_csv(tmp_path):
    rep = sigproc.MetricsReport("volume", "test", n_segments=3, rmse=1.5, dtw=2.0, plus=1, circle=1, minus=1)
    assert rep.plus + rep.circle + rep.minus == rep.n_segments
    path = tmp_path / "m.csv"
    sigproc.write_metrics_csv([rep], path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == sigproc.CSV_FIELDS
    assert lines[1].startswith("volume,,test,3,")
    sigproc.write_summary_json([rep], tmp_path / "s.json")
    assert '"rmse": 1.5' in (tmp_path / "s.json").read_text()


def test_plot_svg(tmp_path):
    path = tmp_path / "seg.svg"
    sigproc.plot_segment_svg(breathing(), breathing(seed=1), path, title="example", unit="ml")
    assert path.read_text().lstrip().startswith("<?xml")
