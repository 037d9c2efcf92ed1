"""Cohorts of simulated records, split protocols and training crops."""

from __future__ import annotations

import enum
import json
import math
import shutil
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from eitphys.errors import ConfigError
from eitphys.phantom.params import PatientParams, sample_patient, vary_settings
from eitphys.phantom.record import Record, read_record, record_name, simulate_record, write_record
from eitphys.sigproc import standardize
from eitphys.tasks import TaskSpec

MANIFEST_VERSION = 1
SEGMENT_LENGTH = 128


class SplitScheme(str, enum.Enum):
    INTRA = "intra"
    INTER = "inter"

    @classmethod
    def parse(cls, value) -> "SplitScheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        key = {"intrapatient": "intra", "interpatient": "inter"}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"split: unknown scheme {value!r}; expected 'intra' or 'inter'") from None


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 12
    records_per_patient: int = 12
    duration: float = 120.0
    seed: int = 0
    noise_sigma: float = 0.05
    cardiac_gain: float = 0.1
    max_eit_lag: int = 5
    max_monitor_lag: int = 30

    def __post_init__(self) -> None:
        if self.n_patients < 1 or self.records_per_patient < 1:
            raise ConfigError("n_patients and records_per_patient must be >= 1")
        if self.duration < 30:
            raise ConfigError(f"duration must be >= 30 s, got {self.duration}")
        if self.noise_sigma < 0 or self.cardiac_gain < 0:
            raise ConfigError("noise_sigma and cardiac_gain must be >= 0")


@dataclass
class Dataset:
    records: list[Record]
    patients: dict[int, PatientParams] = field(default_factory=dict)
    cohort: CohortConfig | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def record_ids(self) -> list[str]:
        return [r.record_id for r in self.records]

    @property
    def patient_ids(self) -> list[int]:
        return sorted({r.patient_id for r in self.records})

    def subset(self, ids) -> "Dataset":
        wanted = set(ids)
        return Dataset([r for r in self.records if r.record_id in wanted], self.patients, self.cohort)


def _record_job(args) -> Record:
    cohort, params, index = args
    rng = np.random.default_rng([cohort.seed, params.patient_id, index, 1])
    settings = vary_settings(params, index, rng)
    lags = {
        "eit": int(rng.integers(-cohort.max_eit_lag, cohort.max_eit_lag + 1)),
        "monitor": int(rng.integers(-cohort.max_monitor_lag, cohort.max_monitor_lag + 1)),
    }
    seed = int(np.random.SeedSequence([cohort.seed, params.patient_id, index]).generate_state(1)[0])
    rec = simulate_record(
        settings,
        cohort.duration,
        seed,
        record_id=record_name(params.patient_id, index),
        lags=lags,
        noise_sigma=cohort.noise_sigma,
        cardiac_gain=cohort.cardiac_gain,
    )
    rec.reference = None
    return rec


def build_dataset(n_patients: int = 12, records_per_patient: int = 12, seed: int = 0, *, workers: int = 1,
                  **cohort_kwargs) -> Dataset:
    """Simulate a cohort; the result does not depend on ``workers``."""
    cohort = CohortConfig(n_patients, records_per_patient, seed=seed, **cohort_kwargs)
    rng = np.random.default_rng([seed, 0])
    patients = {pid: sample_patient(pid, rng) for pid in range(n_patients)}
    jobs = [(cohort, patients[pid], i) for pid in range(n_patients) for i in range(records_per_patient)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_record_job, jobs, chunksize=4))
    else:
        records = [_record_job(j) for j in jobs]
    return Dataset(records, patients, cohort)


def split(dataset: Dataset, scheme, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Intra: each patient's last three records are test. Inter: ceil(10%) of patients are test."""
    scheme = SplitScheme.parse(scheme)
    by_patient: dict[int, list[Record]] = {}
    for rec in dataset.records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    test_ids: set[str] = set()
    if scheme is SplitScheme.INTRA:
        for pid, recs in by_patient.items():
            if len(recs) < 4:
                raise ConfigError(f"intra-patient split needs >= 4 records per patient; patient {pid} has {len(recs)}")
            test_ids.update(r.record_id for r in sorted(recs, key=lambda r: r.record_id)[-3:])
    else:
        pids = sorted(by_patient)
        if len(pids) < 10:
            raise ConfigError(f"inter-patient split needs >= 10 patients, got {len(pids)}")
        k = math.ceil(0.1 * len(pids))
        order = np.random.default_rng([seed, 7]).permutation(len(pids))
        held = {pids[i] for i in order[:k]}
        test_ids.update(r.record_id for r in dataset.records if r.patient_id in held)
    train = [r for r in dataset.records if r.record_id not in test_ids]
    test = [r for r in dataset.records if r.record_id in test_ids]
    return Dataset(train, dataset.patients, dataset.cohort), Dataset(test, dataset.patients, dataset.cohort)


# ---------------------------------------------------------------- disk format


def _manifest(dataset: Dataset, split_seed: int) -> dict:
    splits = {}
    for scheme in SplitScheme:
        try:
            train, test = split(dataset, scheme, split_seed)
        except ConfigError:
            continue
        splits[scheme.value] = {"train": train.record_ids, "test": test.record_ids}
    return {
        "format_version": MANIFEST_VERSION,
        "cohort": dataset.cohort.__dict__ if dataset.cohort else None,
        "patients": {str(pid): p.to_dict() for pid, p in sorted(dataset.patients.items())},
        "records": [{"id": r.record_id, "patient_id": r.patient_id, "path": r.record_id} for r in dataset.records],
        "split_seed": split_seed,
        "splits": splits,
    }


def write_dataset(dataset: Dataset, directory, force: bool = False, split_seed: int = 0) -> Path:
    """Record directories plus manifest.json; the manifest is written last."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise ConfigError(f"{directory} exists and is not empty; pass force to overwrite")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in dataset.records:
        write_record(rec, directory / rec.record_id)
    manifest = _manifest(dataset, split_seed)
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.rename(directory / "manifest.json")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"{directory} has no manifest.json")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ConfigError(f"{path}: unsupported manifest version {manifest.get('format_version')}")
    return manifest


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    records = [read_record(directory / entry["path"]) for entry in manifest["records"]]
    patients = {int(k): PatientParams.from_dict(v) for k, v in manifest.get("patients", {}).items()}
    cohort = CohortConfig(**manifest["cohort"]) if manifest.get("cohort") else None
    return Dataset(records, patients, cohort)


# ------------------------------------------------------------------- segments


@dataclass
class TargetScaler:
    """Global channel-wise affine constants z = (x - mean) / sd."""

    mean: dict[str, float]
    sd: dict[str, float]

    @classmethod
    def fit(cls, records, channels) -> "TargetScaler":
        mean, sd = {}, {}
        for cid in channels:
            parts = [np.asarray(r.samples(cid), dtype=np.float64) for r in records if cid in r.channels]
            if not parts:
                raise ConfigError(f"no training record carries channel {cid!r}")
            data = np.concatenate(parts)
            mean[cid] = float(data.mean())
            sd[cid] = float(max(data.std(), 1e-8))
        return cls(mean, sd)

    def transform(self, cid: str, x):
        return (np.asarray(x, dtype=np.float64) - self.mean[cid]) / self.sd[cid]

    def inverse(self, cid: str, z):
        return np.asarray(z, dtype=np.float64) * self.sd[cid] + self.mean[cid]

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "sd": dict(self.sd)}

    @classmethod
    def from_dict(cls, d) -> "TargetScaler":
        return cls(dict(d["mean"]), dict(d["sd"]))


@dataclass
class Segment:
    record_id: str
    patient_id: int
    start: int
    eit: np.ndarray  # [T, 32, 32] float32, standardized
    target: np.ndarray  # [T, K] model space
    raw: np.ndarray  # [T, K] physical units
    offset: np.ndarray  # [K] affine constants mapping model space back to physical
    scale: np.ndarray  # [K]
    aux: np.ndarray | None = None  # [T, 1] physical units

    def to_physical(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scale + self.offset


def has_channels(record: Record, spec: TaskSpec) -> bool:
    return record.eit is not None and all(c in record.channels for c in spec.channels_needed)


def make_segment(record: Record, start: int, spec: TaskSpec, scaler: TargetScaler | None,
                 length: int = SEGMENT_LENGTH) -> Segment:
    sl = slice(start, start + length)
    eit = standardize(record.eit[sl]).y.astype(np.float32)
    raw = np.stack([np.asarray(record.samples(c)[sl], dtype=np.float64) for c in spec.targets], axis=1)
    offset = np.empty(len(spec.targets))
    scale = np.empty(len(spec.targets))
    target = np.empty_like(raw)
    for k, cid in enumerate(spec.targets):
        if spec.normalized or cid in spec.per_segment:
            st = standardize(raw[:, k])
            target[:, k], offset[k], scale[k] = st.y, st.mean, st.sd
        else:
            if scaler is None:
                raise ConfigError(f"task {int(spec.task)} needs a fitted TargetScaler")
            target[:, k] = scaler.transform(cid, raw[:, k])
            offset[k], scale[k] = scaler.mean[cid], scaler.sd[cid]
    aux = None
    if spec.aux:
        aux = np.asarray(record.samples(spec.aux)[sl], dtype=np.float64)[:, None]
    return Segment(record.record_id, record.patient_id, start, eit, target, raw, offset, scale, aux)


def crop_segments(record: Record, n_crops: int, seed, spec: TaskSpec, scaler: TargetScaler | None = None,
                  length: int = SEGMENT_LENGTH) -> list[Segment]:
    """Random crops of ``length`` consecutive frames; short or incomplete records yield none."""
    if record.n_samples < length:
        warnings.warn(f"record {record.record_id} has {record.n_samples} samples (< {length}); skipped", stacklevel=2)
        return []
    if not has_channels(record, spec):
        warnings.warn(f"record {record.record_id} lacks channels for task {int(spec.task)}; skipped", stacklevel=2)
        return []
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, record.n_samples - length + 1, size=n_crops)
    return [make_segment(record, int(s), spec, scaler, length) for s in starts]


def tile_segments(record: Record, spec: TaskSpec, scaler: TargetScaler | None = None,
                  length: int = SEGMENT_LENGTH) -> list[Segment]:
    """Non-overlapping consecutive windows from the record start, for evaluation."""
    if record.n_samples < length or not has_channels(record, spec):
        return []
    return [make_segment(record, s, spec, scaler, length) for s in range(0, record.n_samples - length + 1, length)]
