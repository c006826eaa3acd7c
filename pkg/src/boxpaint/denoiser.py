"""Conditional U-Net denoiser, its training step and annotation sampling."""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .diffusion import (
    DdimPlan,
    IdentityCodec,
    NoiseSchedule,
    ddim_step,
    forward_diffuse,
    multires_noise,
    predict_z0_from_v,
    total_loss,
    v_target,
)
from .nn import (
    DTYPE,
    AdamConfig,
    Conv2d,
    GroupNorm,
    Linear,
    NonFiniteError,
    Param,
    ShapeError,
    adam_step,
    grad_eval,
    load_checkpoint,
    params_of,
    save_checkpoint,
    silu,
    sinusoidal_embedding,
    upsample_nearest,
)


class TaskPrompt(enum.IntEnum):
    ReconstructX = 0
    GenerateY = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 6
    out_channels: int = 3
    base_width: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 4)
    res_blocks: int = 2
    embed_dim: int = 128

    def __post_init__(self) -> None:
        if self.base_width < 1 or not self.channel_mult or self.res_blocks < 1:
            raise ValueError("base_width, channel_mult and res_blocks must be positive")
        if self.embed_dim % 2:
            raise ValueError(f"embed_dim must be even, got {self.embed_dim}")

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def check_size(self, h: int, w: int) -> None:
        f = 2 ** (self.levels - 1)
        if h % f or w % f:
            raise ShapeError(f"spatial size {h}x{w} must be divisible by {f}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    batch_size: int = 1
    steps: int = 1000
    flip_prob: float = 0.5
    prompt_y_prob: float = 0.5
    multires_strength: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.1
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        for name in ("flip_prob", "prompt_y_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


# --------------------------------------------------------------------------
# model


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, embed_dim: int) -> None:
        super().__init__()
        self.norm1 = GroupNorm(in_ch)
        self.conv1 = Conv2d(in_ch, out_ch)
        self.emb = Linear(embed_dim, out_ch)
        self.norm2 = GroupNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch)
        self.skip = Conv2d(in_ch, out_ch, kernel=1) if in_ch != out_ch else None

    def forward(self, x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        h = self.conv1(silu(self.norm1(x)))
        h = h + self.emb(silu(e))[:, :, None, None]
        h = self.conv2(silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class Upsample(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return upsample_nearest(x, 2)


class UNet(nn.Module):
    """Tiny U-Net over ``concat(z_x, z_t)`` with summed time and prompt embeddings."""

    def __init__(self, cfg: UNetConfig = UNetConfig()) -> None:
        super().__init__()
        self.cfg = cfg
        e = cfg.embed_dim
        self.time_mlp = nn.Sequential(Linear(e, e), nn.SiLU(), Linear(e, e))
        self.prompt_mlp = nn.Sequential(Linear(e, e), nn.SiLU(), Linear(e, e))
        self.inc = Conv2d(cfg.in_channels, cfg.base_width)

        ch = cfg.base_width
        skips = [ch]
        self.down = nn.ModuleList()
        for level, mult in enumerate(cfg.channel_mult):
            for _ in range(cfg.res_blocks):
                self.down.append(ResBlock(ch, cfg.base_width * mult, e))
                ch = cfg.base_width * mult
                skips.append(ch)
            if level < cfg.levels - 1:
                self.down.append(Conv2d(ch, ch, stride=2))
                skips.append(ch)
        self.mid = ResBlock(ch, ch, e)
        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.channel_mult))):
            for _ in range(cfg.res_blocks + 1):
                self.up.append(ResBlock(ch + skips.pop(), cfg.base_width * mult, e))
                ch = cfg.base_width * mult
            if level > 0:
                self.up.append(Upsample())
        self.out_norm = GroupNorm(ch)
        self.out = Conv2d(ch, cfg.out_channels, std=0.0)

    def embed(self, t: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        e = self.cfg.embed_dim
        te = torch.stack([sinusoidal_embedding(float(v), e) for v in t])
        pe = torch.stack([sinusoidal_embedding(float(v), e) for v in prompt])
        dtype = self.inc.weight.dtype
        return self.time_mlp(te.to(dtype)) + self.prompt_mlp(pe.to(dtype))

    def forward(self, z_t: torch.Tensor, z_x: torch.Tensor, t, prompt) -> torch.Tensor:
        if z_t.dim() == 3:
            return self.forward(z_t[None], z_x[None], t, prompt)[0]
        if z_t.dim() != 4 or z_x.dim() != 4 or z_t.shape[0] != z_x.shape[0] or z_t.shape[2:] != z_x.shape[2:]:
            raise ShapeError(f"z_t {tuple(z_t.shape)} and z_x {tuple(z_x.shape)} are not aligned")
        if z_x.shape[1] + z_t.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"channels {z_x.shape[1]} + {z_t.shape[1]} != in_channels {self.cfg.in_channels}"
            )
        self.cfg.check_size(*z_t.shape[2:])
        n = z_t.shape[0]
        t = torch.as_tensor(t).reshape(-1).expand(n)
        prompt = torch.as_tensor(int(prompt) if isinstance(prompt, TaskPrompt) else prompt).reshape(-1).expand(n)
        e = self.embed(t, prompt)

        h = self.inc(torch.cat([z_x, z_t], dim=1))
        hs = [h]
        for m in self.down:
            h = m(h, e) if isinstance(m, ResBlock) else m(h)
            hs.append(h)
        h = self.mid(h, e)
        for m in self.up:
            if isinstance(m, ResBlock):
                h = m(torch.cat([h, hs.pop()], dim=1), e)
            else:
                h = m(h)
        return self.out(silu(self.out_norm(h)))


def build_unet(cfg: UNetConfig, seed: int) -> UNet:
    """Fresh model whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)


def prompt_embedding_gap(model: UNet) -> float:
    """L2 distance between the two prompt embeddings at ``t = 0``."""
    with torch.no_grad():
        zero = torch.zeros(1)
        ex = model.embed(zero, torch.tensor([int(TaskPrompt.ReconstructX)]))
        ey = model.embed(zero, torch.tensor([int(TaskPrompt.GenerateY)]))
    return float(torch.linalg.vector_norm(ex - ey))


# --------------------------------------------------------------------------
# training


Sample = tuple[np.ndarray, np.ndarray]  # (x, y) uint8 HWC


@dataclass
class Trainer:
    """Single-writer training state: model, its Adam params and the run's RNGs."""

    model: UNet
    cfg: TrainConfig
    sched: NoiseSchedule
    codec: IdentityCodec = field(default_factory=IdentityCodec)
    step: int = 0

    def __post_init__(self) -> None:
        self.params: list[Param] = params_of(self.model)
        self.adam = AdamConfig(lr=self.cfg.lr)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.gen = torch.Generator().manual_seed(self.cfg.seed)

    def draw(self, batch: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, list[int], list[int]]:
        """Consume the run's RNGs for one batch: ``(z_x, z0, eps, ts, prompts)``."""
        cfg = self.cfg
        zx, zm, ts, prompts = [], [], [], []
        for x, y in batch:
            if x.shape != y.shape:
                raise ShapeError(f"x {x.shape} and y {y.shape} differ")
            if self.rng.random() < cfg.flip_prob:
                x, y = x[:, ::-1], y[:, ::-1]
            p = TaskPrompt.GenerateY if self.rng.random() < cfg.prompt_y_prob else TaskPrompt.ReconstructX
            zx.append(self.codec.encode(x))
            zm.append(self.codec.encode(y if p == TaskPrompt.GenerateY else x))
            ts.append(int(self.rng.integers(1, self.sched.T + 1)))
            prompts.append(int(p))
        z0 = torch.stack(zm)
        eps = multires_noise(tuple(z0.shape), cfg.multires_strength, self.gen)
        return torch.stack(zx), z0, eps, ts, prompts

    def loss(self, batch: Sequence[Sample]) -> tuple[torch.Tensor, list[int], list[int]]:
        """Training loss on one batch (draws randomness, no update)."""
        z_x, z0, eps, ts, prompts = self.draw(batch)
        t = torch.tensor(ts)
        z_t = forward_diffuse(z0, t, eps, self.sched)
        v = self.model(z_t, z_x, t, torch.tensor(prompts))
        loss = total_loss(
            v,
            v_target(z0, eps, t, self.sched),
            predict_z0_from_v(z_t, v, t, self.sched),
            z0,
            t,
            self.cfg.lambda1,
            self.cfg.lambda2,
        )
        return loss, ts, prompts

    def train_step(self, batch: Sequence[Sample]) -> dict:
        """One optimizer step on ``batch``; returns the log record."""
        loss, ts, prompts = self.loss(batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite loss at step {self.step}, t={ts}")
        grad_eval(loss, self.params)
        try:
            for p in self.params:
                adam_step(p, self.adam)
        except NonFiniteError as exc:
            raise NonFiniteError(f"step {self.step}, t={ts}: {exc}") from exc
        self.step += 1
        return {"step": self.step, "t": ts if len(ts) > 1 else ts[0], "prompt": prompts if len(prompts) > 1 else prompts[0], "loss": value}

    def fit(
        self,
        samples: Sequence[Sample],
        log_path: str | Path | None = None,
        checkpoint: str | Path | None = None,
        on_step: Callable[[dict], None] | None = None,
    ) -> list[float]:
        """Run ``cfg.steps`` steps drawing batches uniformly from ``samples``."""
        losses = []
        fh = open(log_path, "a") if log_path else None
        try:
            while self.step < self.cfg.steps:
                idx = self.rng.integers(len(samples), size=self.cfg.batch_size)
                start = time.perf_counter()
                rec = self.train_step([samples[i] for i in idx])
                rec["wall_ms"] = round(1000 * (time.perf_counter() - start), 3)
                losses.append(rec["loss"])
                if fh and self.step % self.cfg.log_every == 0:
                    fh.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(rec)
                if checkpoint and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(checkpoint)
        finally:
            if fh:
                fh.close()
        if checkpoint:
            self.save(checkpoint)
        return losses

    def save(self, path: str | Path) -> None:
        tensors = {}
        for p in self.params:
            tensors[p.name] = p.value
            tensors[f"adam_m/{p.name}"] = p.adam_m
            tensors[f"adam_v/{p.name}"] = p.adam_v
        meta = {
            "kind": "unet",
            "unet": asdict(self.model.cfg),
            "train": asdict(self.cfg),
            "step": self.step,
            "param_steps": self.params[0].step_count if self.params else 0,
            "rng": self.rng.bit_generator.state,
            "torch_rng": self.gen.get_state().tolist(),
        }
        tmp = Path(str(path) + ".tmp")
        save_checkpoint(tmp, tensors, meta)
        tmp.replace(path)

    @classmethod
    def resume(cls, path: str | Path, sched: NoiseSchedule, cfg: TrainConfig | None = None) -> "Trainer":
        meta, tensors = load_checkpoint(path)
        model = model_from_checkpoint(meta, tensors)
        tr = cls(model, cfg or TrainConfig(**meta["train"]), sched, step=int(meta["step"]))
        for p in tr.params:
            if f"adam_m/{p.name}" in tensors:
                p.adam_m.copy_(tensors[f"adam_m/{p.name}"])
                p.adam_v.copy_(tensors[f"adam_v/{p.name}"])
            p.step_count = int(meta.get("param_steps", tr.step))
        tr.rng.bit_generator.state = meta["rng"]
        tr.gen.set_state(torch.tensor(meta["torch_rng"], dtype=torch.uint8))
        return tr


def model_from_checkpoint(meta: dict, tensors: dict[str, torch.Tensor]) -> UNet:
    ucfg = dict(meta["unet"])
    ucfg["channel_mult"] = tuple(ucfg["channel_mult"])
    model = UNet(UNetConfig(**ucfg))
    state = {k: v for k, v in tensors.items() if not k.startswith("adam_")}
    model.load_state_dict(state)
    return model


def load_model(path: str | Path) -> UNet:
    meta, tensors = load_checkpoint(path)
    return model_from_checkpoint(meta, tensors)


# --------------------------------------------------------------------------
# sampling


@torch.no_grad()
def sample_latent(
    model: Callable,
    z_x: torch.Tensor,
    plan: DdimPlan,
    sched: NoiseSchedule,
    prompt: TaskPrompt = TaskPrompt.GenerateY,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """DDIM from Gaussian noise to a clean latent, conditioned on ``z_x``."""
    z = torch.randn(z_x.shape, generator=generator, dtype=DTYPE)
    for tau, tau_prev in plan.pairs():
        v = model(z, z_x, tau, prompt)
        z = ddim_step(z, v, tau, tau_prev, plan, sched, generator)
    return z


def generate_annotation(
    x: np.ndarray,
    model: Callable,
    plan: DdimPlan,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    prompt: TaskPrompt = TaskPrompt.GenerateY,
    codec: IdentityCodec = IdentityCodec(),
) -> np.ndarray:
    """Sample ``y_hat`` for image ``x`` (or reconstruct ``x`` with ``ReconstructX``)."""
    if isinstance(model, nn.Module):
        model.eval()
    z = sample_latent(model, codec.encode(x), plan, sched, prompt, generator)
    return codec.decode(z)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(255.0**2 / mse)
