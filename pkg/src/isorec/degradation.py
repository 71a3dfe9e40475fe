"""Axial forward operator: z-blur + stride subsampling, or block averaging.

Both modes act on the row (z) axis of an axial slice ``(..., rows, cols)``
and accept numpy arrays or torch tensors; with tensors the result stays on
the autograd graph.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .volume import VolumeGrid

MODES = ("gaussian_subsample", "linear_average")


def gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    """Normalized, symmetric Gaussian weights on ``[-radius, radius]`` (float64)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(k**2) / (2.0 * sigma**2))
    w /= w.sum()
    # exact even symmetry regardless of summation order
    return 0.5 * (w + w[::-1])


@dataclass(frozen=True)
class DegradationOp:
    mode: str = "gaussian_subsample"
    factor: int = 4
    sigma_z: float = 2.0
    kernel_radius: int | None = None
    phase: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown degradation mode {self.mode!r}")
        if int(self.factor) != self.factor or self.factor < 2:
            raise ValueError(f"factor must be an integer >= 2, got {self.factor}")
        object.__setattr__(self, "factor", int(self.factor))
        if self.mode == "gaussian_subsample":
            if not self.sigma_z > 0:
                raise ValueError("sigma_z must be positive in gaussian mode")
            if self.kernel_radius is None:
                object.__setattr__(self, "kernel_radius", max(1, math.ceil(3 * self.sigma_z)))
        if self.phase is None:
            object.__setattr__(self, "phase", self.factor // 2)
        if not 0 <= self.phase < self.factor:
            raise ValueError(f"phase must lie in [0, factor), got {self.phase}")

    @property
    def kernel(self) -> np.ndarray:
        return gaussian_kernel_1d(self.sigma_z, self.kernel_radius)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationOp":
        return cls(**{k: d[k] for k in ("mode", "factor", "sigma_z", "kernel_radius", "phase") if k in d})

    def sample_rows(self, n_lr: int) -> np.ndarray:
        """High-res row indices retained by the subsampler."""
        return np.arange(n_lr) * self.factor + self.phase


def _gather_plan(op: DegradationOp, n_hr: int):
    m = n_hr // op.factor
    r = op.kernel_radius
    centers = op.sample_rows(m)
    idx = np.clip(centers[:, None] + np.arange(-r, r + 1)[None, :], 0, n_hr - 1)
    return idx, op.kernel


def degrade(hr_slice, op: DegradationOp):
    """Map ``(..., s*m, w)`` high-res axial slices to ``(..., m, w)`` measurements."""
    n = hr_slice.shape[-2]
    if n % op.factor:
        raise ValueError(f"row count {n} not divisible by factor {op.factor}")
    m = n // op.factor
    is_torch = isinstance(hr_slice, torch.Tensor)
    if op.mode == "linear_average":
        blocks = hr_slice.reshape(*hr_slice.shape[:-2], m, op.factor, hr_slice.shape[-1])
        return blocks.mean(-2) if is_torch else blocks.mean(axis=-2)
    idx, w = _gather_plan(op, n)
    if is_torch:
        w_t = torch.as_tensor(w, dtype=hr_slice.dtype, device=hr_slice.device)
        gathered = hr_slice[..., torch.as_tensor(idx), :]
        return (gathered * w_t[:, None]).sum(-2)
    x = np.asarray(hr_slice)
    out = (x[..., idx, :] * w[:, None]).sum(axis=-2)
    return out.astype(x.dtype, copy=False)


def degrade_volume(volume: VolumeGrid, op: DegradationOp, noise_std: float = 0.0, seed: int = 0) -> VolumeGrid:
    """Apply :func:`degrade` along z to every column of ``volume``.

    ``noise_std > 0`` adds Gaussian measurement noise (clipped back to [0, 1]).
    """
    c, nz, ny, nx = volume.data.shape
    if nz % op.factor:
        raise ValueError(f"D_z={nz} not divisible by factor {op.factor}")
    data = volume.data.astype(np.float64)
    # (C, Z, Y, X) -> columns along z: treat (Y, X) as trailing "cols"
    out = degrade(data.reshape(c, nz, ny * nx), op).reshape(c, nz // op.factor, ny, nx)
    if noise_std > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_std, out.shape)
    sz, sy, sx = volume.spacing
    return VolumeGrid(
        np.clip(out, 0.0, 1.0).astype(np.float32),
        spacing=(sz * op.factor, sy, sx),
        scale=volume.scale,
        offset=volume.offset,
    )
