"""Small trainable models, Adam, the learning-rate schedule and parameter checkpoints.

Parameters live outside the models as ``dict[str, np.ndarray]``; a forward
pass takes a matching dict of :class:`~sslab.autodiff.Tensor` leaves so the
caller decides which parameter sets participate in gradients.  Batch-norm
running statistics are kept in a separate ``buffers`` dict.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

Params = dict[str, np.ndarray]


class Mode(str, Enum):
    TRAIN_CLEAN = "train-clean"  # batch statistics, running stats updated
    TRAIN_FROZEN = "train-frozen-stats"  # running statistics, no update
    EVAL = "eval"


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class BatchNormLite:
    """Per-channel normalization over all but the last axis."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5

    def init_params(self, prefix: str) -> Params:
        return {f"{prefix}.scale": np.ones(self.channels), f"{prefix}.shift": np.zeros(self.channels)}

    def init_buffers(self, prefix: str) -> Params:
        return {f"{prefix}.mean": np.zeros(self.channels), f"{prefix}.var": np.ones(self.channels)}

    def __call__(self, x: ad.Tensor, params, buffers: Params, prefix: str, mode: Mode) -> ad.Tensor:
        if x.shape[-1] != self.channels:
            raise ad.ShapeError("batchnorm", x.shape, (self.channels,))
        axes = tuple(range(x.ndim - 1))
        if mode == Mode.TRAIN_CLEAN:
            mu = ad.mean(x, axis=axes)
            centered = x - mu
            var = ad.mean(centered * centered, axis=axes)
            m = self.momentum
            buffers[f"{prefix}.mean"] = (1 - m) * buffers[f"{prefix}.mean"] + m * mu.data
            buffers[f"{prefix}.var"] = (1 - m) * buffers[f"{prefix}.var"] + m * var.data
        else:
            centered = x - buffers[f"{prefix}.mean"]
            var = ad.Tensor(buffers[f"{prefix}.var"])
        inv_std = ad.exp(ad.log(var + self.eps) * -0.5)
        return centered * inv_std * params[f"{prefix}.scale"] + params[f"{prefix}.shift"]


@dataclass(frozen=True)
class Mlp:
    """Fully connected ReLU network with a softmax head; inputs are (N, features)."""

    widths: tuple[int, ...] = (2, 100, 100, 2)

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    def init_params(self, rng: np.random.Generator) -> Params:
        params: Params = {}
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            params[f"fc{i}.weight"] = _uniform(rng, a, (a, b))
            params[f"fc{i}.bias"] = np.zeros(b)
        return params

    def init_buffers(self) -> Params:
        return {}

    def logits(self, params, x, mode: Mode = Mode.EVAL, buffers: Params | None = None) -> ad.Tensor:
        h = ad.tensor(x)
        if h.ndim != 2 or h.shape[1] != self.widths[0]:
            raise ad.ShapeError("mlp", h.shape, (None, self.widths[0]))
        last = len(self.widths) - 2
        for i in range(last + 1):
            h = h @ params[f"fc{i}.weight"] + params[f"fc{i}.bias"]
            if i < last:
                h = ad.relu(h)
        return h

    def forward(self, params, x, mode: Mode = Mode.EVAL, buffers: Params | None = None) -> ad.Tensor:
        return ad.softmax(self.logits(params, x, mode, buffers))


@dataclass(frozen=True)
class TinyFcn:
    """Stack of same-padded 3x3 convolutions with a per-pixel softmax; no downsampling."""

    channels: tuple[int, ...] = (3, 16, 16, 5)
    batch_norm: bool = True
    bn: tuple[BatchNormLite, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "bn", tuple(BatchNormLite(c) for c in self.channels[1:-1]))

    @property
    def num_classes(self) -> int:
        return self.channels[-1]

    def init_params(self, rng: np.random.Generator) -> Params:
        params: Params = {}
        for i, (a, b) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            params[f"conv{i}.weight"] = _uniform(rng, 9 * a, (3, 3, a, b))
            params[f"conv{i}.bias"] = np.zeros(b)
            if self.batch_norm and i < len(self.bn):
                params.update(self.bn[i].init_params(f"bn{i}"))
        return params

    def init_buffers(self) -> Params:
        buffers: Params = {}
        if self.batch_norm:
            for i, bn in enumerate(self.bn):
                buffers.update(bn.init_buffers(f"bn{i}"))
        return buffers

    def logits(self, params, x, mode: Mode = Mode.EVAL, buffers: Params | None = None) -> ad.Tensor:
        h = ad.tensor(x)
        if h.ndim != 4 or h.shape[3] != self.channels[0]:
            raise ad.ShapeError("tinyfcn", h.shape, (None, None, None, self.channels[0]))
        last = len(self.channels) - 2
        for i in range(last + 1):
            h = ad.conv3x3(h, params[f"conv{i}.weight"]) + params[f"conv{i}.bias"]
            if i < last:
                if self.batch_norm:
                    h = self.bn[i](h, params, buffers, f"bn{i}", mode)
                h = ad.relu(h)
        return h

    def forward(self, params, x, mode: Mode = Mode.EVAL, buffers: Params | None = None) -> ad.Tensor:
        return ad.softmax(self.logits(params, x, mode, buffers))


@dataclass(frozen=True)
class PixelLinear:
    """Per-pixel (1x1) linear classifier; exactly equivariant to any pixel permutation."""

    in_channels: int = 3
    classes: int = 5

    @property
    def num_classes(self) -> int:
        return self.classes

    def init_params(self, rng: np.random.Generator) -> Params:
        return {
            "pix.weight": _uniform(rng, self.in_channels, (self.in_channels, self.classes)),
            "pix.bias": np.zeros(self.classes),
        }

    def init_buffers(self) -> Params:
        return {}

    def logits(self, params, x, mode: Mode = Mode.EVAL, buffers: Params | None = None) -> ad.Tensor:
        h = ad.tensor(x)
        lead = h.shape[:-1]
        flat = ad.reshape(h, (-1, self.in_channels))
        out = flat @ params["pix.weight"] + params["pix.bias"]
        return ad.reshape(out, lead + (self.classes,))

    def forward(self, params, x, mode: Mode = Mode.EVAL, buffers: Params | None = None) -> ad.Tensor:
        return ad.softmax(self.logits(params, x, mode, buffers))


def forward(model, params, x, mode: Mode = Mode.EVAL, buffers: Params | None = None) -> ad.Tensor:
    """Class probabilities of ``model``; ``params`` may be arrays or tensors."""
    if params and not isinstance(next(iter(params.values())), ad.Tensor):
        params = as_leaves(params, requires_grad=False)
    return model.forward(params, x, Mode(mode), buffers)


def init_params(rng: np.random.Generator, model) -> Params:
    """Fan-in scaled uniform weights (bound sqrt(1/fan_in)), zero biases."""
    return model.init_params(rng)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Params,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> Params:
    """One bias-corrected Adam update; ``weight_decay`` is applied decoupled."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    state.step += 1
    t = state.step
    out: Params = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ad.ShapeError("adam_step", p.shape, g.shape, detail=k)
        m = beta1 * state.m.get(k, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            new = new - lr * weight_decay * p
        out[k] = new
    return out


def lr_schedule(progress: float, eta: float) -> float:
    """``eta * cos(progress * pi / 2)`` for the fraction of epochs completed."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return eta * math.cos(progress * math.pi / 2)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SSLAB1"


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write tensors as: magic, u32 count, then per tensor u32 name length, name,
    u32 rank, u64 extents, little-endian float64 payload."""
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Params:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: Params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return out
