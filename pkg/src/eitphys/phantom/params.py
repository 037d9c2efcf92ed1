"""Patient parameters and their sampling ranges."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from eitphys.errors import ConfigError

MODES = ("PC", "VC")


@dataclass(frozen=True)
class PatientParams:
    patient_id: int = 0
    resistance: float = 10.0  # cmH2O*s/l
    compliance: float = 40.0  # ml/cmH2O, respiratory system
    chest_wall_compliance: float = 150.0  # ml/cmH2O
    resp_rate: float = 18.0  # 1/min
    heart_rate: float = 80.0  # 1/min
    peep: float = 8.0  # cmH2O
    driving_pressure: float = 12.0  # cmH2O, PC breaths
    tidal_volume: float = 450.0  # ml, VC breaths
    arterial_lag: float = 0.2  # s
    systolic: float = 120.0  # mmHg
    diastolic: float = 70.0  # mmHg
    anatomy_seed: int = 0
    peristalsis_rate: float = 1.0  # events/min
    mode_schedule: tuple[tuple[str, float], ...] = (("PC", 90.0), ("VC", 30.0))
    ie_ratio: float = 0.5  # inspiration / expiration time

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode_schedule", tuple((str(m), float(d)) for m, d in self.mode_schedule))
        self.validate()

    def validate(self) -> None:
        for name in ("resistance", "compliance", "chest_wall_compliance"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be positive, got {value}")
        checks = [
            ("resp_rate", 8.0, 35.0),
            ("heart_rate", 50.0, 140.0),
            ("arterial_lag", 0.0, 0.5),
            ("ie_ratio", 0.1, 2.0),
        ]
        for name, lo, hi in checks:
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ConfigError(f"{name}={value} outside [{lo}, {hi}]")
        if self.peep < 0 or self.driving_pressure <= 0 or self.tidal_volume <= 0:
            raise ConfigError("peep must be >= 0 and driving_pressure, tidal_volume > 0")
        if self.systolic <= self.diastolic or self.diastolic <= 0:
            raise ConfigError(f"need 0 < diastolic < systolic, got {self.diastolic}/{self.systolic}")
        if self.peristalsis_rate < 0:
            raise ConfigError("peristalsis_rate must be >= 0")
        if not self.mode_schedule:
            raise ConfigError("mode_schedule must not be empty")
        for mode, duration in self.mode_schedule:
            if mode not in MODES or duration <= 0:
                raise ConfigError(f"mode_schedule entry ({mode!r}, {duration}) invalid; modes are {MODES}")

    @property
    def time_constant(self) -> float:
        """R*C in seconds."""
        return self.resistance * self.compliance / 1000.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode_schedule"] = [list(x) for x in self.mode_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PatientParams":
        d = dict(d)
        d["mode_schedule"] = tuple(tuple(x) for x in d.get("mode_schedule", ()))
        return cls(**d)


def sample_patient(patient_id: int, rng: np.random.Generator) -> PatientParams:
    """Draws one cohort member; ranges cover typical ventilated-adult values."""
    u = rng.uniform
    systolic = u(100, 140)
    return PatientParams(
        patient_id=patient_id,
        resistance=u(8, 15),
        compliance=u(25, 50),
        chest_wall_compliance=u(80, 200),
        resp_rate=u(12, 25),
        heart_rate=u(60, 110),
        peep=u(5, 15),
        driving_pressure=u(8, 16),
        tidal_volume=u(300, 600),
        arterial_lag=u(0.05, 0.4),
        systolic=systolic,
        diastolic=u(55, 80),
        anatomy_seed=int(rng.integers(0, 2**31 - 1)),
        peristalsis_rate=u(0.5, 2.0),
        mode_schedule=(("PC", 90.0), ("VC", 30.0)),
    )


def vary_settings(base: PatientParams, record_index: int, rng: np.random.Generator) -> PatientParams:
    """Per-record ventilator and physiology drift around a patient's baseline."""
    j = lambda scale: 1.0 + rng.uniform(-scale, scale)  # noqa: E731
    pc = rng.uniform(40, 110)
    vc = rng.uniform(15, 40)
    schedule = (("PC", pc), ("VC", vc)) if record_index % 2 == 0 else (("VC", vc), ("PC", pc))
    return dataclasses.replace(
        base,
        resistance=base.resistance * j(0.1),
        compliance=base.compliance * j(0.1),
        resp_rate=float(np.clip(base.resp_rate * j(0.1), 8, 35)),
        heart_rate=float(np.clip(base.heart_rate * j(0.05), 50, 140)),
        peep=max(0.0, base.peep + rng.uniform(-2, 2)),
        driving_pressure=base.driving_pressure * j(0.2),
        tidal_volume=base.tidal_volume * j(0.2),
        mode_schedule=schedule,
    )
