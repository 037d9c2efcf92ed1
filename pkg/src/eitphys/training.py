"""Loss, AdamW, the one-cycle schedule, the training loop and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from eitphys import autodiff as ad
from eitphys import nets, sigproc
from eitphys.autodiff import Tensor
from eitphys.errors import ConfigError, NumericalError, UsageError
from eitphys.nets import EitSequenceModel, ModelConfig, Variant
from eitphys.phantom.dataset import Dataset, Segment, TargetScaler, crop_segments, has_channels, tile_segments
from eitphys.tasks import Task, TaskSpec, task_spec


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    pct_start: float = 0.3
    grad_clip: float = 1.0
    seed: int = 0
    task: Task = Task.VOLUME
    variant: Variant = Variant.EIT_ONLY
    crops_per_record: int = 1

    def __post_init__(self) -> None:
        self.task = Task.parse(self.task)
        self.variant = Variant.parse(self.variant)
        self.betas = tuple(float(b) for b in self.betas)
        if not 0 < self.pct_start < 1:
            raise ConfigError(f"pct_start must lie in (0, 1), got {self.pct_start}")
        if not self.max_lr > 0:
            raise ConfigError(f"max_lr must be positive, got {self.max_lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.crops_per_record < 1:
            raise ConfigError("epochs, batch_size and crops_per_record must be >= 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.grad_clip <= 0 or self.weight_decay < 0:
            raise ConfigError("grad_clip must be > 0 and weight_decay >= 0")
        task_spec(self.task, self.variant)

    @property
    def spec(self) -> TaskSpec:
        return task_spec(self.task, self.variant)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task"] = int(self.task)
        d["variant"] = self.variant.value
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"train: unknown field(s) {sorted(unknown)}")
        return cls(**d)


def model_config_for(spec: TaskSpec, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    return dataclasses.replace(base, output_channels=spec.targets, variant=spec.variant)


# ------------------------------------------------------------------ loss/optim


def l1_multitask_loss(pred: Tensor, tgt) -> Tensor:
    """Mean absolute error over every element; all output channels weigh the same."""
    if not isinstance(tgt, Tensor):
        tgt = Tensor(np.asarray(tgt, dtype=pred.dtype))
    if pred.shape != tgt.shape:
        raise UsageError(f"prediction shape {pred.shape} differs from target shape {tgt.shape}")
    return ad.l1_loss(pred, tgt)


def adamw_init(params) -> dict:
    return {"step": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}


def adamw_step(params, grads, state=None, lr=1e-3, wd=1e-2, betas=(0.9, 0.999), eps=1e-8):
    """One AdamW update, in place on the parameter arrays.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    params = [np.asarray(p) if not isinstance(p, np.ndarray) else p for p in params]
    state = state or adamw_init(params)
    if len(state["m"]) != len(params) or len(grads) != len(params):
        raise UsageError("optimizer state, gradients and parameters differ in count")
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g.shape != p.shape or m.shape != p.shape:
            raise UsageError(f"shape mismatch in AdamW: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + wd * p
        p -= (lr * update).astype(p.dtype, copy=False)
    return params, state


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine warmup from max_lr/25 to max_lr, then cosine decay to max_lr/1e4 at the last step."""
    if not 0 <= step < total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps})")
    peak = cfg.max_lr
    start = peak / 25.0
    final = peak / 1e4
    warm = cfg.pct_start * total_steps
    if step <= warm:
        frac = step / warm
        return start + (peak - start) * (1 - math.cos(math.pi * frac)) / 2
    span = total_steps - 1 - warm
    frac = min(1.0, (step - warm) / span) if span > 0 else 1.0
    return final + (peak - final) * (1 + math.cos(math.pi * frac)) / 2


def clip_grad_norm(grads, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ------------------------------------------------------------------ checkpoint


@dataclass
class Checkpoint:
    model: EitSequenceModel
    train_config: TrainConfig
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer: dict | None = None
    scaler: TargetScaler | None = None

    @property
    def spec(self) -> TaskSpec:
        return self.train_config.spec

    def save(self, path) -> None:
        arrays = nets.state_arrays(self.model)
        names = [n for n, _ in self.model.named_parameters()]
        step = 0
        if self.optimizer:
            step = self.optimizer["step"]
            for name, m, v in zip(names, self.optimizer["m"], self.optimizer["v"]):
                arrays[f"optim:m:{name}"] = m
                arrays[f"optim:v:{name}"] = v
        header = {
            "config": self.model.config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "epoch": self.epoch,
            "history": self.history,
            "optimizer_step": step,
            "scaler": self.scaler.to_dict() if self.scaler else None,
        }
        nets.write_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, arrays = nets.read_checkpoint(path)
        model = nets.build_model(ModelConfig.from_dict(header["config"]))
        nets.load_state_arrays(model, {k: v for k, v in arrays.items() if not k.startswith("optim:")})
        names = [n for n, _ in model.named_parameters()]
        optimizer = None
        if f"optim:m:{names[0]}" in arrays:
            optimizer = {
                "step": header["optimizer_step"],
                "m": [arrays[f"optim:m:{n}"] for n in names],
                "v": [arrays[f"optim:v:{n}"] for n in names],
            }
        scaler = TargetScaler.from_dict(header["scaler"]) if header.get("scaler") else None
        return cls(model, TrainConfig.from_dict(header["train_config"]), header["epoch"], header["history"],
                   optimizer, scaler)


# ---------------------------------------------------------------- batching


def stack_batch(segments: list[Segment]):
    eit = np.stack([s.eit for s in segments])[:, :, None]
    target = np.stack([s.target for s in segments])
    aux = np.stack([s.aux for s in segments]) if segments[0].aux is not None else None
    return eit, target, aux


def _first_non_finite(named) -> str | None:
    for name, arr in named:
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


def _diagnose(model, eit, target, aux, pred) -> str:
    named = [("input:eit", eit), ("input:target", target), ("input:aux_paw", aux)]
    named += [(f"param:{n}", p.data) for n, p in model.named_parameters()]
    named += [(f"grad:{n}", p.grad) for n, p in model.named_parameters()]
    named += [("output:prediction", None if pred is None else pred.data)]
    return _first_non_finite(named) or "none found (overflow inside the loss)"


def check_model_matches(model: EitSequenceModel, spec: TaskSpec) -> None:
    cfg = model.config
    if tuple(cfg.output_channels) != spec.targets:
        raise ConfigError(f"model outputs {tuple(cfg.output_channels)} but task expects {spec.targets}")
    if cfg.variant is not spec.variant:
        raise ConfigError(f"model variant {cfg.variant.value} differs from task variant {spec.variant.value}")


# --------------------------------------------------------------------- train


def epoch_segments(records, cfg: TrainConfig, epoch: int, scaler) -> list[Segment]:
    """Fresh random crops for one epoch in a seed-determined order."""
    spec = cfg.spec
    segs: list[Segment] = []
    for i, rec in enumerate(records):
        segs.extend(crop_segments(rec, cfg.crops_per_record, [cfg.seed, epoch, i], spec, scaler))
    order = np.random.default_rng([cfg.seed, epoch, 99]).permutation(len(segs))
    return [segs[i] for i in order]


def train_step(model, segments, optimizer, lr, cfg: TrainConfig, step: int) -> float:
    eit, target, aux = stack_batch(segments)
    dtype = ad.get_default_dtype()
    model.train()
    model.zero_grad()
    pred = None
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            pred = model(eit.astype(dtype), None if aux is None else aux.astype(dtype))
            loss = l1_multitask_loss(pred, target.astype(dtype))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at step {step}")
            ad.backward(loss)
    except NumericalError as exc:
        ad.default_tape().clear()
        raise NumericalError(f"{exc}; first non-finite tensor: {_diagnose(model, eit, target, aux, pred)}") from None
    params = model.parameters()
    grads = [p.grad for p in params]
    bad = _first_non_finite((f"grad:{n}", p.grad) for n, p in model.named_parameters())
    if bad:
        raise NumericalError(f"non-finite gradient at step {step}; first non-finite tensor: {bad}")
    clip_grad_norm(grads, cfg.grad_clip)
    adamw_step([p.data for p in params], grads, optimizer, lr, cfg.weight_decay, cfg.betas, cfg.eps)
    return value


def fit_scaler(records, spec: TaskSpec) -> TargetScaler | None:
    if spec.normalized:
        return None
    return TargetScaler.fit(records, spec.targets)


def train(
    model: EitSequenceModel,
    dataset: Dataset,
    cfg: TrainConfig,
    *,
    log_path=None,
    scaler: TargetScaler | None = None,
    segments: list[Segment] | None = None,
    steps: int | None = None,
    callback: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Seed-deterministic loop with gradient clipping and the one-cycle schedule.

    With ``segments`` given, those fixed segments are cycled instead of drawing
    crops, and ``steps`` overrides the epoch-derived step count.
    """
    spec = cfg.spec
    check_model_matches(model, spec)
    records = [r for r in dataset.records if has_channels(r, spec)]
    if segments is None and not records:
        raise ConfigError(f"no training record carries the channels {spec.channels_needed}")
    if scaler is None and segments is None:
        scaler = fit_scaler(records, spec)
    if segments is not None:
        per_epoch = math.ceil(len(segments) / cfg.batch_size)
    else:
        per_epoch = math.ceil(len(records) * cfg.crops_per_record / cfg.batch_size)
    total = steps if steps is not None else per_epoch * cfg.epochs
    optimizer = adamw_init([p.data for p in model.parameters()])
    history: list[dict] = []
    log = None
    if log_path is not None:
        fh = Path(log_path).open("w", newline="")
        log = csv.DictWriter(fh, fieldnames=["step", "epoch", "lr", "loss"], lineterminator="\n")
        log.writeheader()
    try:
        step = 0
        epoch = 0
        while step < total:
            pool = segments if segments is not None else epoch_segments(records, cfg, epoch, scaler)
            if segments is not None:
                order = np.random.default_rng([cfg.seed, epoch, 99]).permutation(len(pool))
                pool = [pool[i] for i in order]
            for b in range(0, len(pool), cfg.batch_size):
                if step >= total:
                    break
                lr = one_cycle_lr(step, total, cfg)
                loss = train_step(model, pool[b : b + cfg.batch_size], optimizer, lr, cfg, step)
                entry = {"step": step, "epoch": epoch, "lr": lr, "loss": loss}
                history.append(entry)
                if log is not None:
                    log.writerow({"step": step, "epoch": epoch, "lr": f"{lr:.6e}", "loss": f"{loss:.6f}"})
                if callback is not None:
                    callback(entry)
                step += 1
            epoch += 1
    finally:
        if log is not None:
            fh.close()
    model.eval()
    return Checkpoint(model, cfg, epoch, history, optimizer, scaler)


# ------------------------------------------------------------------ evaluate


@dataclass
class Prediction:
    segment: Segment
    pred: np.ndarray  # [T] scored channel, physical units (SD units for normalized tasks)
    target: np.ndarray
    rating: sigproc.Rating


def predict(model: EitSequenceModel, segments: list[Segment], batch_size: int = 8) -> list[np.ndarray]:
    """Model-space outputs [T, K] for each segment."""
    model.eval()
    out = []
    dtype = ad.get_default_dtype()
    with ad.no_grad():
        for b in range(0, len(segments), batch_size):
            eit, _, aux = stack_batch(segments[b : b + batch_size])
            pred = model(eit.astype(dtype), None if aux is None else aux.astype(dtype))
            out.extend(np.asarray(pred.data, dtype=np.float64))
    return out


def evaluate(checkpoint: Checkpoint, test_set: Dataset | list, *, split_name: str = "test",
             return_predictions: bool = False):
    """Scores the first target channel on non-overlapping windows of every test record.

    Absolute tasks report RMSE in physical units; normalized tasks in per-segment
    SD units. DTW is computed in model space. An empty test set gives an empty report.
    """
    spec = checkpoint.spec
    records = test_set.records if isinstance(test_set, Dataset) else list(test_set)
    segments = [s for r in records for s in tile_segments(r, spec, checkpoint.scaler)]
    report = sigproc.MetricsReport(
        task=spec.task.short,
        split=split_name,
        variant=spec.variant.value if spec.task is Task.TRANSPULMONARY_PRESSURE else "",
        unit="SD" if spec.normalized else sigproc.UNITS[spec.scored],
    )
    preds: list[Prediction] = []
    if not segments:
        return (report, preds) if return_predictions else report
    outputs = predict(checkpoint.model, segments)
    sq, shifted_sq, dtws, targets = [], [], [], []
    max_lag = 10
    for seg, z in zip(segments, outputs):
        if spec.normalized:
            p, t = z[:, 0], seg.target[:, 0]
        else:
            p, t = seg.to_physical(z)[:, 0], seg.raw[:, 0]
        sq.append(np.mean((p - t) ** 2))
        shifted_sq.append(sigproc.shifted_rmse(p, t, max_lag) ** 2)
        dtws.append(sigproc.dtw(z[:, 0], seg.target[:, 0]))
        rating = sigproc.visual_rating(p, t)
        report.ratings.append(rating.value)
        targets.append(t)
        preds.append(Prediction(seg, p, t, rating))
    allt = np.concatenate(targets)
    report.n_segments = len(segments)
    report.target_mean = float(allt.mean())
    report.target_sd = float(allt.std())
    report.rmse = float(np.sqrt(np.mean(sq)))
    report.shifted_rmse = float(np.sqrt(np.mean(shifted_sq)))
    report.dtw = float(np.mean(dtws))
    report.plus = report.ratings.count("+")
    report.circle = report.ratings.count("o")
    report.minus = report.ratings.count("-")
    return (report, preds) if return_predictions else report
