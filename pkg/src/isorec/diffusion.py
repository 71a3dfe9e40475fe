"""2D denoising diffusion prior: schedule, forward noising, training and sampling.

Images enter the prior in [0, 1] and are mapped to [-1, 1] (``to_model`` /
``from_model``) before noising; checkpoints record that convention.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_state, save_state

log = logging.getLogger(__name__)

NORMALIZATION = "unit_to_symmetric"  # x_model = 2 * x - 1


class TrainingError(RuntimeError):
    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class SamplingError(RuntimeError):
    pass


def to_model(x):
    return 2.0 * x - 1.0


def from_model(x):
    return 0.5 * (x + 1.0)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule. Arrays are indexed by step ``t`` in ``1..T``; entry 0 pads ᾱ_0 = 1."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False, compare=False)
    alpha: np.ndarray = field(repr=False, compare=False)
    alpha_bar: np.ndarray = field(repr=False, compare=False)

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1 or not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"invalid schedule T={T}, beta=[{beta_start}, {beta_end}]")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else beta_start
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for a in (beta, alpha, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(T, beta_start, beta_end, beta, alpha, alpha_bar)


def _check_t(t, T):
    tt = np.asarray(t)
    if np.any(tt < 1) or np.any(tt > T):
        raise ValueError(f"timestep outside [1, {T}]: {t}")


def perturb(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps``; ``t`` is a scalar or one step per batch item."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    t_np = t.cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    _check_t(t_np, sched.T)
    ab = sched.alpha_bar[t_np]
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if isinstance(x0, torch.Tensor):
        shape = (-1,) + (1,) * (x0.ndim - 1) if np.ndim(a) else ()
        a = torch.as_tensor(a, dtype=x0.dtype).reshape(shape)
        b = torch.as_tensor(b, dtype=x0.dtype).reshape(shape)
    elif np.ndim(a):
        a = a.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
        b = b.reshape(a.shape)
    return a * x0 + b * eps


# ----------------------------------------------------------------------------
# noise predictor


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, t_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 1
    base: int = 32
    levels: int = 2
    t_dim: int = 64

    def to_dict(self):
        return asdict(self)


class Denoiser(nn.Module):
    """Small encoder-decoder predicting the added noise; spatial size must divide ``2**levels``."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        c, t_dim = config.base, config.t_dim
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.inp = nn.Conv2d(config.channels, c, 3, padding=1)
        widths = [c * min(2**i, 4) for i in range(config.levels + 1)]
        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(config.levels):
            self.down_blocks.append(ResBlock(widths[i] if i else c, widths[i], t_dim))
            self.downs.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        self.mid = ResBlock(widths[-1], widths[-1], t_dim)
        self.up_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(config.levels)):
            self.ups.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            self.up_blocks.append(ResBlock(2 * widths[i], widths[i], t_dim))
        self.out_norm = nn.GroupNorm(min(8, c), c)
        self.out = nn.Conv2d(c, config.channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((x.shape[0],), int(t))
        temb = self.t_mlp(timestep_embedding(t, self.config.t_dim).to(x.dtype))
        h = self.inp(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for up, block in zip(self.ups, self.up_blocks):
            h = up(F.interpolate(h, scale_factor=2.0, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))


@dataclass(frozen=True)
class PriorConfig:
    denoiser: DenoiserConfig = DenoiserConfig()
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    patch: int = 32
    flips: bool = True
    ema_decay: float = 0.995
    log_every: int = 10
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        d = dict(d)
        den = DenoiserConfig(**d.pop("denoiser", {}))
        return cls(denoiser=den, **d)

    def to_dict(self):
        return asdict(self)


def denoiser_loss(model, x0: torch.Tensor, sched: NoiseSchedule, rng: torch.Generator, t=None, eps=None):
    """Mean squared noise-prediction error for a batch ``x0`` already in model range."""
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    n = x0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (n,), generator=rng)
    if eps is None:
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    xt = perturb(x0, t, eps, sched)
    return F.mse_loss(model(xt, t), eps)


def _batch(patches: torch.Tensor, cfg: PriorConfig, g: torch.Generator) -> torch.Tensor:
    n, _, h, w = patches.shape
    idx = torch.randint(0, n, (cfg.batch_size,), generator=g)
    p = min(cfg.patch, h, w)
    oy = torch.randint(0, h - p + 1, (cfg.batch_size,), generator=g)
    ox = torch.randint(0, w - p + 1, (cfg.batch_size,), generator=g)
    flip = torch.randint(0, 2, (cfg.batch_size, 2), generator=g)
    out = []
    for i in range(cfg.batch_size):
        img = patches[idx[i], :, oy[i] : oy[i] + p, ox[i] : ox[i] + p]
        if cfg.flips:
            if flip[i, 0]:
                img = img.flip(-1)
            if flip[i, 1]:
                img = img.flip(-2)
        out.append(img)
    return torch.stack(out)


@dataclass
class TrainedPrior:
    model: Denoiser
    schedule: NoiseSchedule
    config: PriorConfig
    losses: list = field(default_factory=list)
    steps_done: int = 0

    def save(self, path) -> None:
        meta = {
            "kind": "denoiser",
            "config": self.config.to_dict(),
            "schedule": self.schedule.params(),
            "normalization": NORMALIZATION,
            "seed": self.config.seed,
            "steps": self.steps_done,
        }
        save_state(path, self.model.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "TrainedPrior":
        state, meta = load_state(path)
        if meta.get("kind") != "denoiser":
            raise ValueError(f"{path} is not a denoiser checkpoint")
        cfg = PriorConfig.from_dict(meta["config"])
        model = Denoiser(cfg.denoiser)
        model.load_state_dict(state)
        model.eval()
        return cls(model, build_schedule(**meta["schedule"]), cfg, steps_done=meta.get("steps", 0))


def init_denoiser(cfg: PriorConfig) -> Denoiser:
    torch.manual_seed(cfg.seed)
    return Denoiser(cfg.denoiser)


def train_denoiser(patches, cfg: PriorConfig = PriorConfig()) -> TrainedPrior:
    """Fit the noise predictor on ``patches`` of shape ``(N, C, H, W)`` with values in [0, 1].

    ``losses`` holds ``(step, loss)`` every ``log_every`` steps (1-based).
    """
    patches = torch.tensor(np.asarray(patches), dtype=torch.float32)
    if patches.ndim == 3:
        patches = patches[:, None]
    if patches.shape[0] == 0:
        raise ValueError("empty patch dataset")
    if patches.shape[1] != cfg.denoiser.channels:
        raise ValueError(f"patch channels {patches.shape[1]} != denoiser channels {cfg.denoiser.channels}")
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    model = init_denoiser(cfg)
    patches = to_model(patches)
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ema = copy.deepcopy(model) if cfg.ema_decay > 0 else model
    losses = []
    model.train()
    for step in range(1, cfg.steps + 1):
        x0 = _batch(patches, cfg, g)
        loss = denoiser_loss(model, x0, sched, g)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"denoiser loss diverged at step {step}",
                {"step": step, "recent_losses": losses[-10:], "lr": cfg.lr},
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not model:
            with torch.no_grad():
                for pe, pm in zip(ema.parameters(), model.parameters()):
                    pe.lerp_(pm, 1.0 - cfg.ema_decay)
        if step % cfg.log_every == 0 or step == cfg.steps:
            losses.append((step, loss.item()))
            if step % (cfg.log_every * 50) == 0:
                log.info("prior step %d loss %.5f", step, loss.item())
    model = ema
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return TrainedPrior(model, sched, cfg, losses, cfg.steps)


@torch.no_grad()
def ancestral_sample(model, sched: NoiseSchedule, shape, seed: int = 0) -> torch.Tensor:
    """Reverse chain from ``x_T ~ N(0, I)``; returns ``x_0`` in model range (not clamped)."""
    if isinstance(model, nn.Module):
        for p in model.parameters():
            if not torch.all(torch.isfinite(p)):
                raise SamplingError("denoiser has non-finite weights")
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=g)
    n = shape[0]
    for t in range(sched.T, 0, -1):
        eps = model(x, torch.full((n,), t))
        beta, alpha, ab = sched.beta[t], sched.alpha[t], sched.alpha_bar[t]
        x = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            x = x + math.sqrt(beta) * torch.randn(shape, generator=g)
    if not torch.all(torch.isfinite(x)):
        raise SamplingError("sampling produced non-finite values")
    return x
