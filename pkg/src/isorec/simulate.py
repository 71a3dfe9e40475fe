"""Procedural ground-truth phantoms and the anisotropic simulation protocol."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .degradation import DegradationOp, degrade_volume
from .volume import VolumeGrid, atomic_write_bytes, save_volume


@dataclass(frozen=True)
class PhantomSpec:
    """Structure mix for :func:`make_phantom`. Sizes are in voxels."""

    dims: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    n_shells: int = 10
    shell_radius: tuple[float, float] = (6.0, 16.0)
    shell_thickness: float = 0.9
    n_filaments: int = 12
    filament_radius: tuple[float, float] = (0.8, 1.6)
    filament_segments: int = 6
    horizontal_fraction: float = 0.5
    texture: bool = True
    texture_scale: float = 2.0
    texture_std: float = 0.08
    contrast: tuple[float, float] = (0.15, 0.85)
    sigma_xy: float = 0.5
    channels: int = 1

    def __post_init__(self):
        if min(self.dims) < 16:
            raise ValueError(f"phantom dims must be >= 16, got {self.dims}")
        if self.n_shells == 0 and self.n_filaments == 0 and not self.texture:
            raise ValueError("phantom spec has no structures and no texture")
        lo, hi = self.contrast
        if not 0 <= lo < hi <= 1:
            raise ValueError(f"contrast range must satisfy 0 <= lo < hi <= 1, got {self.contrast}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("dims", "shell_radius", "filament_radius", "contrast"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _shell(dims, rng, spec, grid):
    center = rng.uniform(0, 1, 3) * np.array(dims)
    radii = rng.uniform(*spec.shell_radius, 3)
    rot = Rotation.random(random_state=rng).as_matrix()
    p = np.stack([g - c for g, c in zip(grid, center)], axis=-1) @ rot
    rho = np.sqrt(np.sum((p / radii) ** 2, axis=-1))
    dist = (rho - 1.0) * radii.mean()
    return np.exp(-(dist**2) / (2 * spec.shell_thickness**2))


def _segment_distance(grid, a, b):
    ab = b - a
    t = sum((g - ai) * d for g, ai, d in zip(grid, a, ab)) / max(float(ab @ ab), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.sqrt(sum((g - (ai + t * d)) ** 2 for g, ai, d in zip(grid, a, ab)))


def _filament(dims, rng, spec, grid):
    dims_a = np.array(dims, dtype=np.float64)
    horizontal = rng.uniform() < spec.horizontal_fraction
    pt = rng.uniform(0.1, 0.9, 3) * dims_a
    direction = rng.normal(size=3)
    if horizontal:
        direction[0] = 0.0
    direction /= np.linalg.norm(direction)
    radius = rng.uniform(*spec.filament_radius)
    step = max(dims) / (spec.filament_segments + 1)
    profile = np.zeros(dims)
    for _ in range(spec.filament_segments):
        jitter = rng.normal(scale=0.35, size=3)
        if horizontal:
            jitter[0] *= 0.1
        direction = direction + jitter
        direction /= np.linalg.norm(direction)
        nxt = pt + step * direction
        d = _segment_distance(grid, pt, nxt)
        profile = np.maximum(profile, np.exp(-(d**2) / (2 * radius**2)))
        pt = nxt
    return profile


def _texture(dims, rng, spec):
    noise = ndimage.gaussian_filter(rng.normal(size=dims), spec.texture_scale, mode="wrap")
    return noise / (noise.std() + 1e-12) * spec.texture_std


def _channel(spec: PhantomSpec, seq: np.random.SeedSequence) -> np.ndarray:
    dims = spec.dims
    grid = _grid(dims)
    lo, hi = spec.contrast
    mid = 0.5 * (lo + hi)
    children = seq.spawn(spec.n_shells + spec.n_filaments + 1)
    structure = np.zeros(dims)
    for i in range(spec.n_shells):
        structure = np.maximum(structure, _shell(dims, np.random.default_rng(children[i]), spec, grid))
    for j in range(spec.n_filaments):
        rng = np.random.default_rng(children[spec.n_shells + j])
        structure = np.maximum(structure, _filament(dims, rng, spec, grid))
    has_structure = spec.n_shells + spec.n_filaments > 0
    base = lo + 0.25 * (hi - lo) if has_structure else mid
    vol = base + (hi - base) * structure
    if spec.texture:
        vol = vol + _texture(dims, np.random.default_rng(children[-1]), spec)
    if spec.sigma_xy > 0:
        vol = ndimage.gaussian_filter(vol, spec.sigma_xy, mode="nearest")
    return np.clip(vol, 0.0, 1.0)


def make_phantom(spec: PhantomSpec) -> VolumeGrid:
    """Rasterize shells + filaments (+ band-limited texture) into an isotropic volume.

    Every structure draws from its own child seed, so output depends only on
    ``spec``. Channel ``c`` uses an independent seed stream.
    """
    channel_seqs = np.random.SeedSequence(spec.seed).spawn(spec.channels)
    data = np.stack([_channel(spec, seq) for seq in channel_seqs])
    return VolumeGrid(data.astype(np.float32))


def simulate_anisotropic(gt: VolumeGrid, sigma_z: float, s: int, phase: int | None = None) -> VolumeGrid:
    return degrade_volume(gt, DegradationOp("gaussian_subsample", s, sigma_z, phase=phase))


def extract_lateral_patches(aniso: VolumeGrid, patch: int, count: int, seed: int = 0):
    """Random ``patch x patch`` crops of XY slices.

    Returns ``(patches, origins)`` with patches ``(count, C, patch, patch)`` and
    origins ``(count, 3)`` giving ``(z, y0, x0)`` of each crop.
    """
    _, nz, ny, nx = aniso.data.shape
    if patch < 1 or patch > min(ny, nx):
        raise ValueError(f"patch {patch} exceeds lateral size {(ny, nx)}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.integers(0, nz, count)
    y0 = rng.integers(0, ny - patch + 1, count)
    x0 = rng.integers(0, nx - patch + 1, count)
    out = np.stack([aniso.data[:, z[i], y0[i] : y0[i] + patch, x0[i] : x0[i] + patch] for i in range(count)])
    return out, np.stack([z, y0, x0], axis=1)


@dataclass(frozen=True)
class SimulationConfig:
    phantom: PhantomSpec = PhantomSpec()
    sigma_z: float = 2.0
    factor: int = 4
    patch: int = 32
    patch_count: int = 2000
    patch_seed: int = 0

    @classmethod
    def full_scale(cls, seed: int = 0) -> "SimulationConfig":
        return cls(phantom=PhantomSpec(dims=(128, 128, 128), seed=seed), sigma_z=4.0, factor=8)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        ph = PhantomSpec.from_dict(d.pop("phantom", {}))
        return cls(phantom=ph, **d)

    def to_dict(self):
        return asdict(self)


def make_bundle(cfg: SimulationConfig):
    """Return ``(gt, aniso, patches, patch_origins)`` for ``cfg``."""
    gt = make_phantom(cfg.phantom)
    aniso = simulate_anisotropic(gt, cfg.sigma_z, cfg.factor)
    patches, origins = extract_lateral_patches(aniso, cfg.patch, cfg.patch_count, cfg.patch_seed)
    return gt, aniso, patches, origins


def write_bundle(cfg: SimulationConfig, out_dir) -> Path:
    """Write gt/aniso/patches volumes; ``bundle.json`` is written last."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt, aniso, patches, origins = make_bundle(cfg)
    save_volume(gt, out / "gt.volume")
    save_volume(aniso, out / "aniso.volume")
    # patches stacked along z, one volume per channel layout (C, count, p, p)
    save_volume(VolumeGrid(np.ascontiguousarray(patches.transpose(1, 0, 2, 3))), out / "patches.volume")
    meta = {
        "config": cfg.to_dict(),
        "degradation": DegradationOp("gaussian_subsample", cfg.factor, cfg.sigma_z).to_dict(),
        "patch_origins": origins.tolist(),
    }
    atomic_write_bytes(out / "bundle.json", (json.dumps(meta, indent=2) + "\n").encode())
    return out
