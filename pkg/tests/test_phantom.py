import dataclasses
import json
import math

import numpy as np
import pytest

from eitphys import sigproc
from eitphys.errors import ConfigError
from eitphys.phantom import (
    Dataset,
    PatientParams,
    Record,
    SplitScheme,
    TargetScaler,
    anatomy_masks,
    build_dataset,
    crop_segments,
    read_dataset,
    read_record,
    render_eit,
    simulate_record,
    simulate_trace,
    split,
    write_dataset,
    write_record,
)
from eitphys.phantom.mechanics import SIM_RATE, Breath, integrate
from eitphys.phantom.render import MAX_CARDIAC_DELAY
from eitphys.tasks import task_spec


@pytest.fixture(scope="module")
def cohort():
    return build_dataset(3, 4, seed=11, duration=60.0)


def test_params_validation():
    with pytest.raises(ConfigError):
        PatientParams(compliance=-1.0)
    with pytest.raises(ConfigError):
        PatientParams(resp_rate=50.0)
    with pytest.raises(ConfigError):
        PatientParams(arterial_lag=0.6)
    with pytest.raises(ConfigError):
        PatientParams(mode_schedule=(("HFO", 10.0),))
    p = PatientParams()
    assert PatientParams.from_dict(p.to_dict()) == p


def test_duration_too_short():
    with pytest.raises(ConfigError):
        simulate_record(PatientParams(), 20.0)


# -------------------------------------------------------- closed-form oracles


def test_pc_step_response():
    p = PatientParams(resistance=10.0, compliance=50.0, driving_pressure=15.0, peep=5.0)
    n = int(5 * p.time_constant * SIM_RATE)  # t_insp = 5 RC
    V, F, P = integrate(p, [Breath(0, n + 1, n + 2, "PC")], n + 1)
    assert abs(V[n] - 750.0) <= 0.01 * 750.0
    np.testing.assert_array_equal(P, 20.0)


def test_passive_expiration_exponential():
    p = PatientParams(resistance=15.0, compliance=50.0)
    tau = p.time_constant
    n = int(round(tau * SIM_RATE))
    V, _, P = integrate(p, [Breath(0, 0, n + 1, "PC")], n + 1, v0=600.0)
    assert abs(V[n] - 600.0 * math.exp(-1.0)) <= 0.01 * 600.0 * math.exp(-1.0)
    np.testing.assert_array_equal(P, p.peep)


def test_vc_constant_flow_reaches_target():
    p = PatientParams(tidal_volume=480.0)
    V, F, _ = integrate(p, [Breath(0, 100, 300, "VC")], 300)
    assert np.ptp(F[:100]) < 1e-12
    assert V[99] + F[99] * 10 == pytest.approx(480.0)


# ---------------------------------------------------------------- identities


def test_transpulmonary_identity_exact(cohort):
    rec = simulate_record(PatientParams(), 60.0, seed=2, lags={"eit": 3, "monitor": -9})
    ref = rec.reference
    assert np.max(np.abs(ref["p_aw"] - ref["p_es"] - ref["p_tp"])) == 0.0
    trace = simulate_trace(PatientParams(), 60.0, 2)
    assert np.max(np.abs(trace.p_aw - trace.p_es - trace.p_tp)) == 0.0
    # the monitor stores p_tp and p_es together, so the identity survives lags and float32
    for r in cohort:
        ch = r.channels
        np.testing.assert_array_equal(ch["p_tp"].samples + ch["p_es"].samples, ch["p_aw_monitor"].samples)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_volume_is_integral_of_flow(seed):
    trace = simulate_trace(PatientParams(resp_rate=20.0 + seed), 90.0, seed)
    integral = np.concatenate([[0.0], np.cumsum(trace.F[:-1]) * 1000.0 / SIM_RATE])
    assert np.max(np.abs(trace.V - integral)) < 1.0


def mode_fingerprints(rec: Record):
    """Worst PC and VC ratios over all breaths with an inspiratory interior."""
    ref = rec.reference or {c: ch.samples for c, ch in rec.channels.items()}
    peep = rec.meta["params"]["peep"]
    worst = {"PC": 0.0, "VC": 0.0}
    counts = {"PC": 0, "VC": 0}
    t = np.arange(len(ref["p_aw"])) / 10.0
    for start, end_insp, _, mode in rec.meta["breaths"]:
        idx = (t >= start + 0.3) & (t <= end_insp - 0.3)
        if idx.sum() < 2:
            continue
        if mode == "PC":
            p = ref["p_aw"][idx]
            ratio = p.std() / np.mean(p - peep)
        else:
            f = ref["F"][idx]
            ratio = f.std() / f.mean()
        worst[mode] = max(worst[mode], ratio)
        counts[mode] += 1
    return worst, counts


def test_mode_fingerprints(cohort):
    for rec in cohort:
        rec = simulate_record(
            PatientParams.from_dict(rec.meta["params"]), 60.0, rec.meta["seed"], record_id=rec.record_id
        )
        worst, counts = mode_fingerprints(rec)
        assert counts["PC"] > 0
        assert worst["PC"] < 0.05 and worst["VC"] < 0.05


def test_peristalsis_only_in_esophageal_pressure():
    p = PatientParams(peristalsis_rate=3.0)
    with_p = simulate_trace(p, 120.0, 5)
    without = simulate_trace(p, 120.0, 5, peristalsis=False)
    assert with_p.peristalsis
    for name in ("V", "F", "p_aw", "p_ab"):
        np.testing.assert_array_equal(getattr(with_p, name), getattr(without, name))
    diff = with_p.p_es - without.p_es
    assert diff.min() >= 0.0
    active = np.concatenate([[False], diff > 0, [False]])
    edges = np.flatnonzero(np.diff(active.astype(int)))
    for lo, hi in zip(edges[::2], edges[1::2]):
        if lo == 0 or hi == len(diff):
            continue  # event cut by the record boundary
        assert (hi - lo) / SIM_RATE >= 3.0 - 2 / SIM_RATE


def test_lag_round_trip():
    rng = np.random.default_rng(5)
    for i in range(6):
        lags = {"eit": int(rng.integers(-30, 31)), "monitor": int(rng.integers(-30, 31))}
        rec = simulate_record(PatientParams(resp_rate=12 + 2 * i), 60.0, seed=i, lags=lags)
        aligned = sigproc.align_records(rec)
        assert aligned.meta["estimated_lags"] == lags
        assert aligned.meta["residual_lags"] == {"eit": 0, "monitor": 0}


def test_seed_determinism():
    a = simulate_record(PatientParams(), 40.0, seed=8, lags={"eit": 2})
    b = simulate_record(PatientParams(), 40.0, seed=8, lags={"eit": 2})
    assert a.eit.tobytes() == b.eit.tobytes()
    for cid in a.channels:
        assert a.channels[cid].samples.tobytes() == b.channels[cid].samples.tobytes()
    c = simulate_record(PatientParams(), 40.0, seed=9, lags={"eit": 2})
    assert a.eit.tobytes() != c.eit.tobytes()


def test_lag_beyond_margin_rejected():
    with pytest.raises(ConfigError):
        simulate_record(PatientParams(), 40.0, lags={"monitor": 41})


# ------------------------------------------------------------------- render


def test_noise_free_frame_sum_is_affine_in_volume():
    rec = simulate_record(PatientParams(), 40.0, seed=1, noise_sigma=0.0, cardiac_gain=0.0)
    r = np.corrcoef(rec.eit_sum(), rec.channels["V"].samples.astype(np.float64))[0, 1]
    assert abs(r - 1.0) < 1e-9


def test_anatomy_differs_between_patients():
    a = np.array(anatomy_masks(1).lung_centroid())
    b = np.array(anatomy_masks(2).lung_centroid())
    assert np.max(np.abs(a - b)) >= 1.0 or np.hypot(*(a - b)) >= 1.0
    assert anatomy_masks(1).delay.max() <= MAX_CARDIAC_DELAY


def test_zero_gains_give_zero_frames():
    frames = render_eit(np.linspace(0, 500, 50), np.ones((MAX_CARDIAC_DELAY + 1, 50)), anatomy_masks(0),
                        np.random.default_rng(0), ventilation_gain=0.0)
    assert not frames.any()
    seg_eit = sigproc.standardize(frames)
    assert seg_eit.degenerate and np.all(np.isfinite(seg_eit.y))


# ------------------------------------------------------------ dataset/splits


def _stub(n_patients, n_records):
    recs = [Record(p, f"p{p:03d}_r{i:02d}", None, {}) for p in range(n_patients) for i in range(n_records)]
    return Dataset(recs)


def test_intra_split_counts():
    ds = _stub(17, 10)
    train, test = split(ds, SplitScheme.INTRA)
    assert len(test) == 51
    assert 0.25 < len(test) / len(ds) < 0.35 or len(test) / len(ds) == pytest.approx(0.3)
    assert all(r.record_id.endswith(("r07", "r08", "r09")) for r in test)


def test_inter_split_counts():
    ds = _stub(20, 3)
    train, test = split(ds, "inter", seed=4)
    assert len(test.patient_ids) == 2
    assert not set(train.patient_ids) & set(test.patient_ids)
    assert split(ds, "inter", seed=4)[1].record_ids == test.record_ids
    assert len(split(_stub(12, 2), "inter")[1].patient_ids) == 2


@pytest.mark.parametrize("scheme,shape", [("intra", (3, 5)), ("inter", (11, 2)), ("intra", (1, 4))])
def test_split_is_partition(scheme, shape):
    ds = _stub(*shape)
    train, test = split(ds, scheme)
    assert not set(train.record_ids) & set(test.record_ids)
    assert len(train) + len(test) == len(ds)


def test_split_preconditions():
    with pytest.raises(ConfigError):
        split(_stub(3, 3), "intra")
    with pytest.raises(ConfigError):
        split(_stub(9, 4), "inter")
    with pytest.raises(ConfigError):
        split(_stub(12, 4), "crossover")


def test_build_dataset_deterministic_and_parallel_invariant(cohort):
    again = build_dataset(3, 4, seed=11, duration=60.0, workers=2)
    assert again.record_ids == cohort.record_ids
    for a, b in zip(cohort, again):
        assert a.eit.tobytes() == b.eit.tobytes()
        assert a.injected_lags == b.injected_lags


def test_record_roundtrip(tmp_path, cohort):
    rec = cohort.records[0]
    write_record(rec, tmp_path / "r")
    back = read_record(tmp_path / "r")
    assert back.record_id == rec.record_id and back.injected_lags == rec.injected_lags
    assert back.eit.tobytes() == rec.eit.tobytes()
    for cid in rec.channels:
        assert back.channels[cid].samples.tobytes() == rec.channels[cid].samples.tobytes()
    raw = np.fromfile(tmp_path / "r" / "V.bin", dtype="<f4")
    np.testing.assert_array_equal(raw, rec.channels["V"].samples)
    assert json.loads((tmp_path / "r" / "meta.json").read_text())["format_version"] == 1


def test_dataset_roundtrip_and_manifest(tmp_path, cohort):
    write_dataset(cohort, tmp_path / "ds")
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert [r["id"] for r in manifest["records"]] == cohort.record_ids
    assert set(manifest["splits"]) == {"intra"}
    assert read_dataset(tmp_path / "ds").record_ids == cohort.record_ids
    with pytest.raises(ConfigError):
        write_dataset(cohort, tmp_path / "ds")
    write_dataset(cohort, tmp_path / "ds", force=True)


# ------------------------------------------------------------------ segments


def test_crops_have_128_frames_and_standardized_eit():
    rec = simulate_record(PatientParams(), 60.0, seed=3)
    spec = task_spec(1)
    scaler = TargetScaler.fit([rec], spec.targets)
    segs = crop_segments(rec, 5, 0, spec, scaler)
    assert len(segs) == 5
    for s in segs:
        assert s.eit.shape == (128, 32, 32) and s.target.shape == (128, 1)
        assert abs(s.eit.mean()) < 1e-5 and abs(s.eit.std() - 1) < 1e-5
        np.testing.assert_allclose(s.to_physical(s.target), s.raw, rtol=1e-12, atol=1e-9)


def test_volume_scaler_roundtrip():
    scaler = TargetScaler({"V": 180.0}, {"V": 189.0})
    ml = np.array([0.0, 180.0, 369.0, 612.5])
    np.testing.assert_allclose(scaler.inverse("V", scaler.transform("V", ml)), ml, rtol=0, atol=1e-12)
    np.testing.assert_allclose(scaler.transform("V", [180.0, 369.0]), [0.0, 1.0])


def test_normalized_task_segments_are_standardized():
    rec = simulate_record(PatientParams(), 40.0, seed=3)
    seg = crop_segments(rec, 1, 0, task_spec(4))[0]
    assert abs(seg.target.mean()) < 1e-9 and abs(seg.target.std() - 1) < 1e-9


def test_short_or_incomplete_records_skipped():
    rec = simulate_record(PatientParams(), 40.0, seed=3)
    short = dataclasses.replace(
        rec,
        eit=rec.eit[:100],
        channels={c: dataclasses.replace(ch, samples=ch.samples[:100]) for c, ch in rec.channels.items()},
    )
    with pytest.warns(UserWarning):
        assert crop_segments(short, 2, 0, task_spec(1), TargetScaler({"V": 0.0}, {"V": 1.0})) == []
    missing = dataclasses.replace(rec, channels={c: ch for c, ch in rec.channels.items() if c != "p_ab"})
    with pytest.warns(UserWarning):
        assert crop_segments(missing, 2, 0, task_spec(4)) == []
