"""Declarative experiment configuration read from and written to TOML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from eitphys.errors import ConfigError
from eitphys.nets import ModelConfig, Variant
from eitphys.phantom.dataset import CohortConfig, SplitScheme
from eitphys.tasks import Task, task_spec
from eitphys.training import TrainConfig

# Model fields derived from the task rather than configured.
_DERIVED_MODEL_FIELDS = ("output_channels", "variant")


@dataclass
class SplitConfig:
    scheme: str = "inter"
    seed: int = 0

    def __post_init__(self) -> None:
        self.scheme = SplitScheme.parse(self.scheme).value


@dataclass
class RunConfig:
    tasks: list[int] = field(default_factory=lambda: [1])
    variants: list[str] = field(default_factory=lambda: ["eit_only"])
    plots: bool = True
    workers: int = 1

    def __post_init__(self) -> None:
        self.tasks = [int(Task.parse(t)) for t in self.tasks]
        self.variants = [Variant.parse(v).value for v in self.variants]
        if not self.tasks or not self.variants:
            raise ConfigError("run.tasks and run.variants must not be empty")
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")

    def jobs(self) -> list[tuple[Task, Variant]]:
        """(task, variant) pairs; variants other than EIT-only only apply to task 5."""
        out = []
        for t in self.tasks:
            task = Task(t)
            if task is Task.TRANSPULMONARY_PRESSURE:
                out.extend((task, Variant(v)) for v in self.variants)
            else:
                out.append((task, Variant.EIT_ONLY))
        return out


@dataclass
class ExperimentConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)
    out: str = "runs/default"

    SECTIONS = ("cohort", "split", "train", "model", "run")

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        for name in _DERIVED_MODEL_FIELDS:
            model.pop(name)
        train = self.train.to_dict()
        train.pop("task")
        train.pop("variant")
        return {
            "out": self.out,
            "cohort": dataclasses.asdict(self.cohort),
            "split": dataclasses.asdict(self.split),
            "train": train,
            "model": model,
            "run": dataclasses.asdict(self.run),
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(cls.SECTIONS) - {"out"}
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        defaults = cls()
        built = {}
        for section in cls.SECTIONS:
            base = getattr(defaults, section)
            values = data.get(section, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table")
            built[section] = _build(section, base, values)
        out = data.get("out", defaults.out)
        if not isinstance(out, str):
            raise ConfigError(f"out: expected a string, got {type(out).__name__}")
        return cls(out=out, **built)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = tomli.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def train_config(self, task: Task, variant: Variant) -> TrainConfig:
        return dataclasses.replace(self.train, task=task, variant=variant)

    def model_config(self, task: Task, variant: Variant) -> ModelConfig:
        spec = task_spec(task, variant)
        return dataclasses.replace(self.model, output_channels=spec.targets, variant=spec.variant)


def _build(section: str, base, values: dict):
    allowed = {f.name: f for f in dataclasses.fields(base)}
    blocked = set(_DERIVED_MODEL_FIELDS) if section == "model" else set()
    if section == "train":
        blocked = {"task", "variant"}
    kwargs = {}
    for key, value in values.items():
        if key not in allowed or key in blocked:
            hint = " (set by run.tasks / run.variants)" if key in blocked else ""
            raise ConfigError(f"{section}.{key}: unknown field{hint}")
        kwargs[key] = _coerce(f"{section}.{key}", value, getattr(base, key))
    try:
        return dataclasses.replace(base, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return type(default)(value)
    return value

