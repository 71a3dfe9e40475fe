"""Coordinate network: Gaussian Fourier features followed by a sine MLP."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_state, save_state
from .volume import SlicePlan, expand_slice


@dataclass(frozen=True)
class InrConfig:
    width: int = 128
    depth: int = 4
    embed_half: int = 32
    sigma_b: float = 1.0
    omega_first: float = 30.0
    omega_hidden: float = 1.0
    channels: int = 1
    out_bias: float = 0.5
    head_gain: float = 0.01

    def __post_init__(self):
        for name in ("width", "depth", "embed_half", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.sigma_b > 0:
            raise ValueError("sigma_b must be positive")

    @classmethod
    def full_scale(cls, channels: int = 1) -> "InrConfig":
        return cls(width=768, depth=8, embed_half=256, sigma_b=16.0, channels=channels)

    def to_dict(self) -> dict:
        return asdict(self)


class FourierEmbedding(nn.Module):
    """``c -> [sin(2*pi*B c), cos(2*pi*B c)]`` with a fixed Gaussian ``B`` of shape (m, 3)."""

    def __init__(self, m: int, sigma: float, seed: int = 0, in_dim: int = 3):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("B", torch.randn(m, in_dim, generator=g, dtype=torch.float64).float() * sigma)

    @property
    def out_dim(self) -> int:
        return 2 * self.B.shape[0]

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        proj = 2 * math.pi * coords @ self.B.to(coords.dtype).T
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


def fourier_embed(coords, emb: FourierEmbedding) -> torch.Tensor:
    return emb(torch.as_tensor(coords, dtype=emb.B.dtype))


class SineLayer(nn.Module):
    def __init__(self, fan_in: int, fan_out: int, omega: float, generator: torch.Generator):
        super().__init__()
        self.omega = omega
        self.linear = nn.Linear(fan_in, fan_out)
        bound = math.sqrt(6.0 / fan_in) / omega
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound, generator=generator)
            self.linear.bias.uniform_(-bound, bound, generator=generator)

    def preactivation(self, x):
        return self.omega * self.linear(x)

    def forward(self, x):
        return torch.sin(self.preactivation(x))


class InrModel(nn.Module):
    def __init__(self, config: InrConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        emb_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=g))
        self.embedding = FourierEmbedding(config.embed_half, config.sigma_b, seed=emb_seed)
        layers, fan_in = [], self.embedding.out_dim
        for i in range(config.depth):
            omega = config.omega_first if i == 0 else config.omega_hidden
            layers.append(SineLayer(fan_in, config.width, omega, g))
            fan_in = config.width
        self.hidden = nn.Sequential(*layers)
        self.head = nn.Linear(fan_in, config.channels)
        # near-constant start so the first fidelity steps are not spent undoing init noise
        bound = config.head_gain * math.sqrt(6.0 / fan_in) / config.omega_hidden
        with torch.no_grad():
            self.head.weight.uniform_(-bound, bound, generator=g)
            self.head.bias.fill_(config.out_bias)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        """``(..., 3)`` coordinates in [-1, 1] -> ``(..., C)`` raw intensities."""
        return self.head(self.hidden(self.embedding(coords)))

    def save(self, path, **extra) -> None:
        meta = {"kind": "inr", "config": self.config.to_dict(), "seed": self.seed}
        meta.update(extra)
        save_state(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> tuple["InrModel", dict]:
        state, meta = load_state(path)
        if meta.get("kind") != "inr":
            raise ValueError(f"{path} is not an INR checkpoint")
        model = cls(InrConfig(**meta["config"]), seed=meta.get("seed", 0))
        model.load_state_dict(state)
        return model, meta


def init_inr(config: InrConfig, seed: int = 0) -> InrModel:
    return InrModel(config, seed)


def inr_forward(model: InrModel, coords) -> torch.Tensor:
    p = next(model.parameters())
    return model(torch.as_tensor(coords, dtype=p.dtype, device=p.device))


def plan_coords(plans: list[SlicePlan], dtype=torch.float32) -> torch.Tensor:
    """Stack expanded plans into a ``(len(plans), rows, cols, 3)`` tensor."""
    arrs = [expand_slice(p).reshape(*p.shape, 3) for p in plans]
    return torch.from_numpy(np.stack(arrs)).to(dtype)


def query_slice(model: InrModel, plan: SlicePlan) -> torch.Tensor:
    """Image ``(rows, cols, C)`` of the network sampled on ``plan``."""
    out = inr_forward(model, expand_slice(plan))
    return out.reshape(*plan.shape, -1)
