"""Dense-array and differentiable-layer substrate.

Tensors are ``torch.Tensor`` in float32. Layers are thin, shape-checked
wrappers over ``torch.nn.functional``; gradients come from torch autograd and
are collected into :class:`Param` records that carry their own Adam moments.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float32

CHECKPOINT_MAGIC = b"GDCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when a gradient or loss contains NaN or inf."""


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# layers


def conv2d(
    input: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """2-D cross-correlation over an NCHW batch with an OIKK kernel.

    Output spatial size is ``floor((H + 2*pad - K) / stride) + 1``.
    """
    if input.dim() != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {tuple(input.shape)}")
    if weight.dim() != 4:
        raise ShapeError(f"conv2d weight must be OIKK, got shape {tuple(weight.shape)}")
    n, c, h, w = input.shape
    o, i, kh, kw = weight.shape
    if i != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, weight I={i}")
    if bias is not None and tuple(bias.shape) != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {tuple(bias.shape)}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}"
        )
    return F.conv2d(input, weight, bias, stride=stride, padding=pad)


def group_norm(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, groups: int = 8, eps: float = 1e-5
) -> torch.Tensor:
    c = x.shape[1]
    g = min(groups, c)
    if c % g:
        raise ShapeError(f"group_norm: {c} channels not divisible into {g} groups")
    return F.group_norm(x, g, weight, bias, eps)


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}"
        )
    return F.linear(x, weight, bias)


def upsample_nearest(x: torch.Tensor, factor: int) -> torch.Tensor:
    return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def sinusoidal_embedding(value: float, dim: int) -> torch.Tensor:
    """Positional encoding ``[sin(v*w_0..w_{d/2-1}), cos(v*w_0..w_{d/2-1})]``.

    Frequencies are ``w_i = exp(-ln(10000) * i / (dim/2))``.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    i = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * i / half)
    args = float(value) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)]).to(DTYPE)


class GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int = 8) -> None:
        super().__init__()
        self.groups = min(groups, channels)
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return group_norm(x, self.weight, self.bias, self.groups)


class Conv2d(nn.Module):
    """Square-kernel convolution with normal(0, std) init."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        stride: int = 1,
        pad: int | None = None,
        std: float = 0.02,
    ) -> None:
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel) * std)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(nn.Module):
    def __init__(self, in_f: int, out_f: int, std: float | None = None) -> None:
        super().__init__()
        std = 1.0 / math.sqrt(in_f) if std is None else std
        self.weight = nn.Parameter(torch.randn(out_f, in_f) * std)
        self.bias = nn.Parameter(torch.zeros(out_f))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


# --------------------------------------------------------------------------
# parameters, gradients, optimizer


@dataclass
class Param:
    """A trainable tensor with its gradient and Adam moments."""

    name: str
    value: torch.Tensor
    grad: torch.Tensor = field(default=None)  # type: ignore[assignment]
    adam_m: torch.Tensor = field(default=None)  # type: ignore[assignment]
    adam_v: torch.Tensor = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self) -> None:
        for attr in ("grad", "adam_m", "adam_v"):
            if getattr(self, attr) is None:
                setattr(self, attr, torch.zeros_like(self.value, requires_grad=False))

    def zero_grad(self) -> None:
        self.grad.zero_()


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


def params_of(module: nn.Module) -> list[Param]:
    return [Param(name, p) for name, p in module.named_parameters()]


def grad_eval(loss: torch.Tensor, params: Iterable[Param]) -> None:
    """Fill ``p.grad`` with d(loss)/d(p.value) for every param.

    Params the loss does not depend on receive zeros.
    """
    if loss.numel() != 1:
        raise ShapeError(f"grad_eval needs a scalar loss, got shape {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(
        loss.reshape(()), [p.value for p in params], allow_unused=True
    )
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                p.grad.zero_()
            else:
                p.grad.copy_(g)


@torch.no_grad()
def adam_step(param: Param, cfg: AdamConfig) -> Param:
    """One bias-corrected Adam update, in place. ``param.grad`` is left as is."""
    g = param.grad
    if not torch.isfinite(g).all():
        raise NonFiniteError(f"non-finite gradient in {param.name!r}")
    param.step_count += 1
    t = param.step_count
    param.adam_m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
    param.adam_v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
    m_hat = param.adam_m / (1 - cfg.beta1**t)
    v_hat = param.adam_v / (1 - cfg.beta2**t)
    param.value.sub_(cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps))
    return param


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path, tensors: Mapping[str, torch.Tensor], metadata: Mapping | None = None
) -> None:
    """Write ``GDCK`` | u32 version | u64 json length | json | float32-LE payloads."""
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    meta = dict(metadata or {})
    meta["tensors"] = manifest
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            arr = v.detach().to(torch.float32).contiguous().numpy()
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    import numpy as np

    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, n = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    meta = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    tensors: dict[str, torch.Tensor] = {}
    for entry in meta["tensors"]:
        count = math.prod(entry["shape"])
        nbytes = 4 * count
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return meta, tensors
