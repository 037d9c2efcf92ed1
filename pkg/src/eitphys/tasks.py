"""Prediction tasks and the channel layout each one needs."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from eitphys.errors import ConfigError
from eitphys.nets import Variant


class Task(enum.IntEnum):
    VOLUME = 1
    FLOW = 2
    AIRWAY_PRESSURE = 3
    ARTERIAL_PRESSURE = 4
    TRANSPULMONARY_PRESSURE = 5

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            if key.isdigit():
                value = int(key)
            elif key in _ALIASES:
                return _ALIASES[key]
            else:
                raise ConfigError(f"task: unknown value {value!r}; expected 1-5 or one of {sorted(_ALIASES)}")
        try:
            return cls(int(value))
        except ValueError:
            raise ConfigError(f"task: unknown value {value!r}; expected 1-5") from None

    @property
    def short(self) -> str:
        return _SHORT[self]


_SHORT = {
    Task.VOLUME: "volume",
    Task.FLOW: "flow",
    Task.AIRWAY_PRESSURE: "p_aw",
    Task.ARTERIAL_PRESSURE: "p_ab",
    Task.TRANSPULMONARY_PRESSURE: "p_tp",
}
_ALIASES = {v: k for k, v in _SHORT.items()}
_ALIASES.update({"v": Task.VOLUME, "f": Task.FLOW, "paw": Task.AIRWAY_PRESSURE, "pab": Task.ARTERIAL_PRESSURE,
                 "ptp": Task.TRANSPULMONARY_PRESSURE})


@dataclass(frozen=True)
class TaskSpec:
    """Channel wiring for one (task, variant) pair.

    ``normalized`` targets are standardized per segment; all others use global
    affine constants fitted on the training set. ``per_segment`` lists extra
    targets standardized per segment regardless. The first target is the one
    that gets scored.
    """

    task: Task
    variant: Variant
    targets: tuple[str, ...]
    normalized: bool
    aux: str | None = None
    shift_lag: int = 0
    per_segment: tuple[str, ...] = ()

    @property
    def scored(self) -> str:
        return self.targets[0]

    @property
    def channels_needed(self) -> tuple[str, ...]:
        return self.targets + ((self.aux,) if self.aux else ())


def task_spec(task, variant=Variant.EIT_ONLY) -> TaskSpec:
    task = Task.parse(task)
    variant = Variant.parse(variant)
    if task is not Task.TRANSPULMONARY_PRESSURE and variant is not Variant.EIT_ONLY:
        raise ConfigError(f"variant: {variant.value} only applies to task 5 (p_tp), got task {int(task)}")
    if task is Task.VOLUME:
        return TaskSpec(task, variant, ("V",), False)
    if task is Task.FLOW:
        return TaskSpec(task, variant, ("F",), False)
    if task is Task.AIRWAY_PRESSURE:
        return TaskSpec(task, variant, ("p_aw",), True)
    if task is Task.ARTERIAL_PRESSURE:
        return TaskSpec(task, variant, ("p_ab",), True, shift_lag=10)
    if variant is Variant.EIT_JOINT_OUTPUTS:
        # absolute p_aw carries the PEEP offset, which the images do not show
        return TaskSpec(task, variant, ("p_tp", "p_aw"), False, per_segment=("p_aw",))
    if variant is Variant.EIT_PLUS_PAW:
        return TaskSpec(task, variant, ("p_tp",), False, aux="p_aw")
    return TaskSpec(task, variant, ("p_tp",), False)
