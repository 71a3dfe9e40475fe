"""Linear-interpolation baseline and PSNR/SSIM evaluation over ZX/ZY/XY planes."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .degradation import gaussian_kernel_1d
from .volume import VolumeGrid, atomic_write_bytes, take_slice

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
FAMILIES = ("ZX", "ZY", "XY")


def linear_interp_volume(aniso: VolumeGrid, s: int, phase: int | None = None) -> VolumeGrid:
    """Upsample along z by ``s``.

    Low-res slice ``k`` sits at high-res row ``k*s + phase`` (default ``s//2``,
    matching the degradation subsampler); rows beyond the first/last sample
    replicate the end slices.
    """
    if s < 2:
        raise ValueError(f"factor must be >= 2, got {s}")
    phase = s // 2 if phase is None else phase
    c, m, ny, nx = aniso.data.shape
    src = np.arange(m) * s + phase
    dst = np.arange(m * s)
    pos = np.clip(dst, src[0], src[-1]).astype(np.float64)
    lo = np.clip(np.searchsorted(src, pos, side="right") - 1, 0, m - 1)
    hi = np.minimum(lo + 1, m - 1)
    frac = np.where(hi > lo, (pos - src[lo]) / s, 0.0)
    d = aniso.data.astype(np.float64)
    out = d[:, lo] * (1 - frac)[None, :, None, None] + d[:, hi] * frac[None, :, None, None]
    sz, sy, sx = aniso.spacing
    return VolumeGrid(
        np.clip(out, 0, 1).astype(np.float32),
        spacing=(sz / s, sy, sx),
        scale=aniso.scale,
        offset=aniso.offset,
    )


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _window() -> np.ndarray:
    g = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW // 2)
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, w.shape), w)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM, Gaussian 11x11 window (sigma 1.5), mean over valid positions."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal 2D images, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _window()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    psnr_mean: dict
    ssim_mean: dict
    per_slice: list = field(default_factory=list)  # (family, index, psnr, ssim)
    config: dict = field(default_factory=dict)

    def counts(self) -> dict:
        out = {f: 0 for f in FAMILIES}
        for fam, *_ in self.per_slice:
            out[fam] += 1
        return out

    def to_json(self) -> dict:
        def enc(v):
            return "inf" if v == math.inf else v

        return {
            "psnr_mean": {k: enc(v) for k, v in self.psnr_mean.items()},
            "ssim_mean": self.ssim_mean,
            "counts": self.counts(),
            "config": self.config,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out / "metrics.json", (json.dumps(self.to_json(), indent=2) + "\n").encode())
        tmp = out / "metrics.csv.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["family", "index", "psnr", "ssim"])
            for fam, idx, p, s in self.per_slice:
                w.writerow([fam, idx, "inf" if p == math.inf else f"{p:.6f}", f"{s:.6f}"])
        tmp.replace(out / "metrics.csv")

    def summary(self) -> str:
        lines = [f"{'plane':<6}{'PSNR':>10}{'SSIM':>10}"]
        for fam in FAMILIES:
            lines.append(f"{fam:<6}{self.psnr_mean[fam]:>10.3f}{self.ssim_mean[fam]:>10.4f}")
        return "\n".join(lines)


def evaluate_volumes(recon: VolumeGrid, gt: VolumeGrid, peak: float = 1.0) -> MetricsReport:
    """PSNR/SSIM for every ZX, ZY and XY plane; channels averaged per slice.

    Family means of PSNR average per-slice dB values; an infinite slice
    makes the family mean infinite.
    """
    if recon.data.shape != gt.data.shape:
        raise ValueError(f"volume shape mismatch {recon.data.shape} vs {gt.data.shape}")
    _, nz, ny, nx = gt.data.shape
    extents = {"ZX": ny, "ZY": nx, "XY": nz}
    rows, p_mean, s_mean = [], {}, {}
    for fam in FAMILIES:
        ps, ss = [], []
        for i in range(extents[fam]):
            a, b = take_slice(recon, fam, i), take_slice(gt, fam, i)
            p = float(np.mean([psnr(x, y, peak) for x, y in zip(a, b)]))
            s = float(np.mean([ssim(x, y, peak) for x, y in zip(a, b)]))
            rows.append((fam, i, p, s))
            ps.append(p)
            ss.append(s)
        p_mean[fam] = float(np.mean(ps))
        s_mean[fam] = float(np.mean(ss))
    return MetricsReport(p_mean, s_mean, rows, {"peak": peak, "ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA})
