"""CNN-BiLSTM per-frame regressor.

A wide-resnet extracts a feature vector from each 32x32 EIT frame, a single-layer
bidirectional LSTM runs over the frame sequence and a linear head emits one
prediction per frame and output channel. For the transpulmonary-pressure task the
model can also take the absolute airway pressure as an auxiliary input.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from eitphys import autodiff as ad
from eitphys.autodiff import Tensor
from eitphys.errors import ConfigError, DimensionError, UsageError

CHECKPOINT_MAGIC = b"EITPHYS\x00"
CHECKPOINT_VERSION = 1
AUX_PAW_SCALE = 20.0  # cmH2O


class Variant(str, enum.Enum):
    EIT_ONLY = "eit_only"
    EIT_JOINT_OUTPUTS = "eit_joint_outputs"
    EIT_PLUS_PAW = "eit_plus_paw"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        numbered = {1: cls.EIT_ONLY, 2: cls.EIT_JOINT_OUTPUTS, 3: cls.EIT_PLUS_PAW}
        if isinstance(value, int) or (isinstance(value, str) and value.isdigit()):
            try:
                return numbered[int(value)]
            except KeyError:
                raise ConfigError(f"variant number must be 1, 2 or 3, got {value}") from None
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown variant {value!r}; choose from {[v.value for v in cls]}") from None


@dataclass
class ModelConfig:
    groups: int = 3
    layers_per_group: int = 3
    initial_features: int = 8
    intermed_dim: int = 32
    lstm_hidden: int = 512
    output_channels: tuple[str, ...] = ("V",)
    variant: Variant = Variant.EIT_ONLY
    aux_hidden: int = 32
    image_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        self.variant = Variant.parse(self.variant)
        self.output_channels = tuple(self.output_channels)
        for name in ("groups", "layers_per_group", "initial_features", "intermed_dim", "lstm_hidden", "aux_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.output_channels:
            raise ConfigError("output_channels must name at least one channel")
        if self.variant is Variant.EIT_JOINT_OUTPUTS and len(self.output_channels) < 2:
            raise ConfigError("the joint-output variant needs at least two output channels")

    @property
    def lstm_input_size(self) -> int:
        extra = self.aux_hidden if self.variant is Variant.EIT_PLUS_PAW else 0
        return self.intermed_dim + extra

    @property
    def conv_layer_count(self) -> int:
        """Stem plus two convs per residual block; skip projections are not counted."""
        return 1 + 2 * self.groups * self.layers_per_group

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["output_channels"] = list(self.output_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------- modules


class Module:
    """Container with ordered parameters, buffers and submodules."""

    def __init__(self) -> None:
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    data = rng.uniform(-bound, bound, size=shape).astype(ad.get_default_dtype())
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0, projection=False):
        super().__init__()
        self.weight = _uniform(rng, (c_out, c_in, k, k), math.sqrt(6.0 / (c_in * k * k)))
        self.stride = stride
        self.padding = padding
        self.projection = projection

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, None, self.stride, self.padding)

    def output_size(self, size: int) -> int:
        return ad.conv_output_size(size, self.weight.shape[2], self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = ad.get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = _uniform(rng, (n_out, n_in), bound)
        self.bias = _uniform(rng, (n_out,), bound)

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LSTM(Module):
    """Unidirectional single-layer LSTM; gate order input, forget, cell, output."""

    def __init__(self, rng, n_in: int, hidden: int, reverse: bool = False):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = _uniform(rng, (4 * hidden, n_in), bound)
        self.w_hh = _uniform(rng, (4 * hidden, hidden), bound)
        self.bias = _uniform(rng, (4 * hidden,), bound)
        self.bias.data[hidden : 2 * hidden] = 1.0
        self.reverse = reverse

    def forward(self, x: Tensor) -> Tensor:
        return ad.lstm_sequence(x, self.w_ih, self.w_hh, self.bias, reverse=self.reverse)


class BiLSTM(Module):
    def __init__(self, rng, n_in: int, hidden: int):
        super().__init__()
        self.fwd = LSTM(rng, n_in, hidden)
        self.bwd = LSTM(rng, n_in, hidden, reverse=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.concat([self.fwd(x), self.bwd(x)], axis=-1)


class ResidualBlock(Module):
    """conv-bn-relu-conv-bn plus a skip connection, followed by relu.

    The skip is the identity unless the block changes width or resolution, in
    which case a strided 1x1 projection conv with its own normalization is used.
    """

    def __init__(self, rng, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride, 1)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, 1)
        self.bn2 = BatchNorm2d(c_out)
        self.proj = None
        self.proj_bn = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(rng, c_in, c_out, 1, stride, 0, projection=True)
            self.proj_bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        out = ad.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return ad.relu(ad.add(out, skip))


class FrameExtractor(Module):
    """Maps [N, 1, S, S] frames to [N, n_intermed] feature vectors."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        nf = cfg.initial_features
        self.stem = Conv2d(rng, 1, nf, 3, 1, 1)
        self.stem_bn = BatchNorm2d(nf)
        self.blocks: list[ResidualBlock] = []
        c_in = nf
        for g in range(cfg.groups):
            c_out = nf * 2**g
            for layer in range(cfg.layers_per_group):
                stride = 2 if (g > 0 and layer == 0) else 1
                self.blocks.append(ResidualBlock(rng, c_in, c_out, stride))
                c_in = c_out
        self.out_channels = c_in
        self.project = Linear(rng, c_in, cfg.intermed_dim)
        self.spatial_sizes = self._check_shapes(cfg.image_size)

    def _check_shapes(self, size: int) -> list[int]:
        sizes = [self.stem.output_size(size)]
        for block in self.blocks:
            if block.conv1.stride > 1 and sizes[-1] < 2:
                raise ConfigError(
                    f"spatial size collapses: a stride-{block.conv1.stride} stage receives a "
                    f"{sizes[-1]}x{sizes[-1]} map (input {size}, stage {len(sizes)})"
                )
            s = block.conv1.output_size(sizes[-1])
            s = block.conv2.output_size(s)
            if block.proj is not None and block.proj.output_size(sizes[-1]) != s:
                raise ConfigError(f"skip projection and main path disagree on spatial size at {sizes[-1]}")
            if s < 1:
                raise ConfigError(f"spatial size collapses below 1x1 (input {size}, after {len(sizes)} stages)")
            sizes.append(s)
        return sizes

    def forward(self, frames: Tensor) -> Tensor:
        x = ad.relu(self.stem_bn(self.stem(frames)))
        for block in self.blocks:
            x = block(x)
        pooled = ad.mean(x, axis=(2, 3))
        return self.project(pooled)


@dataclass
class FrameBatch:
    eit: np.ndarray  # [B, T, 1, S, S], standardized per sequence
    aux_paw: np.ndarray | None = None  # [B, T, 1], absolute cmH2O


class EitSequenceModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.extractor = FrameExtractor(rng, cfg)
        self.aux = Linear(rng, 1, cfg.aux_hidden) if cfg.variant is Variant.EIT_PLUS_PAW else None
        self.lstm = BiLSTM(rng, cfg.lstm_input_size, cfg.lstm_hidden)
        self.head = Linear(rng, 2 * cfg.lstm_hidden, len(cfg.output_channels))

    def conv_layers(self, include_projections: bool = False) -> list[Conv2d]:
        return [
            m for m in self.modules() if isinstance(m, Conv2d) and (include_projections or not m.projection)
        ]

    def forward(self, eit, aux_paw=None) -> Tensor:
        if isinstance(eit, FrameBatch):
            eit, aux_paw = eit.eit, eit.aux_paw
        eit = ad.as_tensor(eit)
        size = self.config.image_size
        if eit.ndim != 5 or eit.shape[2:] != (1, size, size):
            raise DimensionError(f"expected EIT batch [B,T,1,{size},{size}], got {eit.shape}")
        bsz, steps = eit.shape[:2]
        wants_aux = self.config.variant is Variant.EIT_PLUS_PAW
        if wants_aux and aux_paw is None:
            raise UsageError("this model takes airway pressure as auxiliary input, but none was given")
        if not wants_aux and aux_paw is not None:
            raise UsageError(f"auxiliary input given to a {self.config.variant.value} model")
        frames = ad.reshape(eit, (bsz * steps, 1, size, size))
        feats = ad.reshape(self.extractor(frames), (bsz, steps, self.config.intermed_dim))
        if wants_aux:
            aux_paw = ad.as_tensor(aux_paw)
            if aux_paw.shape != (bsz, steps, 1):
                raise DimensionError(f"aux_paw must be [B,T,1]=({bsz},{steps},1), got {aux_paw.shape}")
            scaled = Tensor((aux_paw.data / AUX_PAW_SCALE).astype(ad.get_default_dtype()))
            feats = ad.concat([feats, ad.relu(self.aux(scaled))], axis=-1)
        return self.head(self.lstm(feats))


def build_model(config: ModelConfig | None = None) -> EitSequenceModel:
    return EitSequenceModel(config or ModelConfig())


def forward(model: EitSequenceModel, batch: FrameBatch) -> Tensor:
    return model(batch)


# ------------------------------------------------------------------ checkpoints


def state_arrays(model: Module) -> dict[str, np.ndarray]:
    """Parameters then normalization buffers, in declaration order."""
    arrays = {name: p.data for name, p in model.named_parameters()}
    arrays.update({f"buffer:{name}": b for name, b in model.named_buffers()})
    return arrays


def load_state_arrays(model: Module, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | {f"buffer:{n}" for n in buffers}
    missing = expected - set(arrays)
    if missing:
        raise ConfigError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise DimensionError(f"checkpoint tensor {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data = arrays[name].copy()
    for name, b in buffers.items():
        b[...] = arrays[f"buffer:{name}"]


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``header`` as JSON followed by the raw little-endian array bytes.

    Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, payload.
    Each entry in ``header["tensors"]`` holds name, dtype, shape and the byte
    offset of its buffer relative to the payload start.
    """
    entries, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = dict(header, format_version=CHECKPOINT_VERSION, tensors=entries)
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = memoryview(data)[16 + hlen :]
    arrays = {}
    for e in header["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def save_model(model: EitSequenceModel, path, extra: dict | None = None) -> None:
    header = {"config": model.config.to_dict(), **(extra or {})}
    write_checkpoint(path, header, state_arrays(model))


def load_model(path) -> tuple[EitSequenceModel, dict]:
    header, arrays = read_checkpoint(path)
    model = build_model(ModelConfig.from_dict(header["config"]))
    load_state_arrays(model, {k: v for k, v in arrays.items() if not k.startswith("optim:")})
    return model, header
