"""Records: simulated multi-device recordings and their on-disk layout."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from eitphys.errors import ConfigError, UsageError
from eitphys.phantom.mechanics import SIM_RATE, V_REF, cardiac_basis, quantize, simulate_trace
from eitphys.phantom.params import PatientParams
from eitphys.phantom.render import MAX_CARDIAC_DELAY, anatomy_masks, render_eit
from eitphys.sigproc import TARGET_RATE, UNITS, Channel, resample_array

FORMAT_VERSION = 1
LAG_MARGIN = 40  # samples at 10 Hz simulated on each side for lag injection
DEVICE_OF = {
    "V": "ventilator",
    "F": "ventilator",
    "p_aw": "ventilator",
    "p_aw_monitor": "monitor",
    "p_es": "monitor",
    "p_tp": "monitor",
    "p_ab": "monitor",
}
CHANNEL_ORDER = ("V", "F", "p_aw", "p_aw_monitor", "p_es", "p_tp", "p_ab")


@dataclass
class Record:
    patient_id: int
    record_id: str
    eit: np.ndarray | None  # [T, 32, 32] float32
    channels: dict[str, Channel]
    injected_lags: dict[str, int] = field(default_factory=dict)
    sample_rate: float = TARGET_RATE
    meta: dict = field(default_factory=dict)
    # ground-truth 10 Hz channels before lag injection; in memory only
    reference: dict[str, np.ndarray] | None = field(default=None, repr=False, compare=False)

    @property
    def n_samples(self) -> int:
        return len(self.channels["V"])

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def device_channels(self) -> dict[str, str]:
        return {cid: DEVICE_OF.get(cid, "ventilator") for cid in self.channels}

    def eit_sum(self) -> np.ndarray:
        if self.eit is None:
            raise UsageError(f"record {self.record_id} has no EIT frames")
        return self.eit.sum(axis=(1, 2), dtype=np.float64)

    def samples(self, cid: str) -> np.ndarray:
        if cid == "eit_sum":
            return self.eit_sum()
        try:
            return self.channels[cid].samples
        except KeyError:
            raise UsageError(f"record {self.record_id} has no channel {cid!r}") from None


def record_name(patient_id: int, index: int) -> str:
    return f"p{patient_id:03d}_r{index:02d}"


def simulate_record(
    params: PatientParams,
    duration: float = 120.0,
    seed: int = 0,
    *,
    record_id: str | None = None,
    lags: dict[str, int] | None = None,
    noise_sigma: float = 0.05,
    cardiac_gain: float = 0.1,
    peristalsis: bool = True,
) -> Record:
    """Simulate, resample to 10 Hz, render EIT and inject device lags.

    A positive lag L for a device means its samples trail the ventilator:
    observed[t] = true[t - L].
    """
    if duration < 30:
        raise ConfigError(f"duration must be at least 30 s, got {duration}")
    lags = {"eit": 0, "monitor": 0, **(lags or {})}
    for dev, lag in lags.items():
        if dev not in ("eit", "monitor"):
            raise ConfigError(f"unknown device {dev!r} in lags")
        if abs(int(lag)) > LAG_MARGIN:
            raise ConfigError(f"lag {lag} for {dev} exceeds the simulated margin of {LAG_MARGIN} samples")
    margin_s = LAG_MARGIN / TARGET_RATE
    sim_duration = duration + 2 * margin_s
    trace = simulate_trace(params, sim_duration, seed, peristalsis=peristalsis)

    full = {
        "V": resample_array(trace.V, SIM_RATE),
        "F": resample_array(trace.F, SIM_RATE),
        "p_ab": resample_array(trace.p_ab, SIM_RATE),
    }
    full["p_aw"] = quantize(resample_array(trace.p_aw, SIM_RATE))
    full["p_es"] = quantize(resample_array(trace.p_es, SIM_RATE))
    full["p_tp"] = full["p_aw"] - full["p_es"]
    full["p_aw_monitor"] = full["p_aw"]
    heart = resample_array(cardiac_basis(trace, MAX_CARDIAC_DELAY).T, SIM_RATE).T

    anatomy = anatomy_masks(params.anatomy_seed)
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    frames = render_eit(full["V"], heart, anatomy, noise_rng, V_REF, noise_sigma, cardiac_gain)

    n = int(round(duration * TARGET_RATE))
    m = LAG_MARGIN

    def window(arr, lag):
        return arr[m - lag : m - lag + n]

    channels = {}
    for cid in CHANNEL_ORDER:
        lag = lags["monitor"] if DEVICE_OF[cid] == "monitor" else 0
        data = window(full[cid], lag).astype(np.float32)
        channels[cid] = Channel(cid, data, TARGET_RATE, UNITS[cid])
    eit = np.ascontiguousarray(window(frames, lags["eit"]))
    reference = {cid: window(full[cid], 0) for cid in CHANNEL_ORDER}

    offset = m / TARGET_RATE
    breaths = [
        [b.start / SIM_RATE - offset, b.end_insp / SIM_RATE - offset, b.end / SIM_RATE - offset, b.mode]
        for b in trace.breaths
        if b.end / SIM_RATE > offset and b.start / SIM_RATE < offset + duration
    ]
    events = [
        [e.onset - offset, e.duration, e.amplitude]
        for e in trace.peristalsis
        if e.onset + e.duration > offset and e.onset < offset + duration
    ]
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "params": params.to_dict(),
        "duration": float(duration),
        "noise_sigma": float(noise_sigma),
        "cardiac_gain": float(cardiac_gain),
        "breaths": breaths,
        "peristalsis": events,
    }
    return Record(
        patient_id=params.patient_id,
        record_id=record_id or record_name(params.patient_id, 0),
        eit=eit,
        channels=channels,
        injected_lags={k: int(v) for k, v in lags.items()},
        meta=meta,
        reference=reference,
    )


# ---------------------------------------------------------------- disk format


def write_record(rec: Record, directory) -> Path:
    """meta.json + one little-endian float32 file per channel + eit.bin [T,32,32]."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    meta = dict(rec.meta)
    meta.update(
        format_version=FORMAT_VERSION,
        patient_id=rec.patient_id,
        record_id=rec.record_id,
        sample_rate=rec.sample_rate,
        injected_lags=rec.injected_lags,
        n_samples=rec.n_samples,
        channels={cid: {"unit": ch.unit, "rate": ch.rate, "file": f"{cid}.bin"} for cid, ch in rec.channels.items()},
        eit_shape=list(rec.eit.shape) if rec.eit is not None else None,
    )
    for cid, ch in rec.channels.items():
        (tmp / f"{cid}.bin").write_bytes(np.asarray(ch.samples, dtype="<f4").tobytes())
    if rec.eit is not None:
        (tmp / "eit.bin").write_bytes(np.ascontiguousarray(rec.eit, dtype="<f4").tobytes())
    (tmp / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    return directory


def read_record(directory) -> Record:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"{directory} is not a record directory (no meta.json)") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{directory}: unsupported record format {meta.get('format_version')}")
    channels = {}
    for cid, info in meta.pop("channels").items():
        data = np.fromfile(directory / info["file"], dtype="<f4").astype(np.float32)
        channels[cid] = Channel(cid, data, float(info["rate"]), info["unit"])
    shape = meta.pop("eit_shape")
    eit = None
    if shape is not None:
        eit = np.fromfile(directory / "eit.bin", dtype="<f4").astype(np.float32).reshape(shape)
    return Record(
        patient_id=int(meta.pop("patient_id")),
        record_id=meta.pop("record_id"),
        eit=eit,
        channels=channels,
        injected_lags={k: int(v) for k, v in meta.pop("injected_lags").items()},
        sample_rate=float(meta.pop("sample_rate")),
        meta={k: v for k, v in meta.items() if k != "n_samples"},
    )
