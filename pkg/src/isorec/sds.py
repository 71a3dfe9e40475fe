"""INR reconstruction under measurement consistency plus a score-distillation prior.

Per iteration a batch of axial planes (all ZX or all ZY) is queried from the
INR once; the same images feed the data-fidelity term and the regularizer.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_state, save_state
from .degradation import DegradationOp, degrade
from .diffusion import NoiseSchedule, perturb, to_model
from .inr import InrConfig, InrModel, init_inr
from .metrics import evaluate_volumes
from .volume import SlicePlan, VolumeGrid, axis_coords, expand_slice, save_volume

log = logging.getLogger(__name__)

TV_EPS = 1e-8
REGULARIZERS = ("sds", "tv", "none")


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SdsConfig:
    lam: float = 0.25
    t_start: int = 500
    t_end: int = 1
    epochs: int = 100
    batch_slices: int = 8
    lr: float = 1e-3
    alternate: bool = True
    seed: int = 0
    regularizer: str = "sds"
    reduction: str = "mean"
    scale_sqrt_alpha_bar: bool = False
    optimizer: str = "adam"
    eval_every: int = 0
    residual_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 1 <= self.t_end <= self.t_start:
            raise ValueError(f"need 1 <= t_end <= t_start, got {self.t_end}, {self.t_start}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_slices < 1 or self.epochs < 0:
            raise ValueError("batch_slices must be >= 1 and epochs >= 0")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def full_scale(cls, seed: int = 0) -> "SdsConfig":
        return cls(lam=0.25, t_start=500, t_end=1, epochs=500, batch_slices=8, lr=1e-5, seed=seed)

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------------
# loss terms


def data_fidelity(queried, measurement, op: DegradationOp):
    """Mean squared error between ``degrade(queried)`` and ``measurement``."""
    pred = degrade(queried, op)
    if tuple(pred.shape) != tuple(measurement.shape):
        raise ValueError(f"degraded shape {tuple(pred.shape)} != measurement {tuple(measurement.shape)}")
    if isinstance(pred, torch.Tensor):
        return torch.mean((pred - torch.as_tensor(measurement, dtype=pred.dtype)) ** 2)
    return float(np.mean((np.asarray(pred, np.float64) - measurement) ** 2))


def t_schedule(iteration: int, total_iters: int, cfg: SdsConfig) -> int:
    """Linear noise level from ``t_start`` down to ``t_end``; halves round up."""
    if total_iters < 2:
        return cfg.t_start
    if not 0 <= iteration < total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters})")
    t = cfg.t_start + (cfg.t_end - cfg.t_start) * iteration / (total_iters - 1)
    return int(math.floor(t + 0.5))


def sds_residual(x_model, t: int, eps, denoiser, sched: NoiseSchedule, scale_sqrt_alpha_bar=False):
    """``eps - eps_theta(x_t, t)`` evaluated without gradient tracking."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside [1, {sched.T}]")
    with torch.no_grad():
        xt = perturb(x_model.detach(), t, eps, sched)
        r = eps - denoiser(xt, torch.full((xt.shape[0],), t))
        if scale_sqrt_alpha_bar:
            r = r * math.sqrt(sched.alpha_bar[t])
    return r


def sds_term(x_model, t: int, eps, denoiser, sched: NoiseSchedule, reduction="mean", scale_sqrt_alpha_bar=False, residual=None):
    """Surrogate whose gradient w.r.t. ``x_model`` is ``stopgrad(eps_theta(x_t, t) - eps)``.

    Descending it moves the queried images toward the prior's denoised
    estimate; the residual ``eps - eps_theta`` therefore enters with a minus sign.
    ``x_model`` is ``(B, C, H, W)`` in the prior's range. ``reduction="mean"``
    averages over every element; ``"sum"`` sums per image and averages over the batch.
    """
    r = residual if residual is not None else sds_residual(x_model, t, eps, denoiser, sched, scale_sqrt_alpha_bar)
    prod = -r * x_model
    if reduction == "mean":
        return prod.mean()
    return prod.flatten(1).sum(1).mean()


def tv_term(queried):
    """Mean isotropic finite-difference magnitude over the trailing two axes."""
    x = queried
    dr = x[..., 1:, :-1] - x[..., :-1, :-1]
    dc = x[..., :-1, 1:] - x[..., :-1, :-1]
    if isinstance(x, torch.Tensor):
        return torch.sqrt(dr**2 + dc**2 + TV_EPS).mean()
    return float(np.mean(np.sqrt(dr**2 + dc**2 + TV_EPS)))


# ----------------------------------------------------------------------------
# geometry helpers


class AxialGeometry:
    """Target grid, measurement planes and cached plane coordinates for a run."""

    def __init__(self, aniso: VolumeGrid, op: DegradationOp):
        c, m, ny, nx = aniso.data.shape
        self.channels = c
        self.target = (m * op.factor, ny, nx)
        self.measure = torch.from_numpy(aniso.data.astype(np.float32))
        nz = self.target[0]
        z, y, x = (torch.from_numpy(axis_coords(n)).float() for n in self.target)
        # (ny, nz, nx, 3) for ZX planes, (nx, nz, ny, 3) for ZY planes
        zz, yy, xx = torch.meshgrid(z, y, x, indexing="ij")
        grid = torch.stack([zz, yy, xx], dim=-1)
        self.coords = {"ZX": grid.permute(1, 0, 2, 3).contiguous(), "ZY": grid.permute(2, 0, 1, 3).contiguous()}
        self.count = {"ZX": ny, "ZY": nx}
        self.nz = nz

    def planes(self, orientation: str, idx) -> torch.Tensor:
        return self.coords[orientation][idx]

    def measurements(self, orientation: str, idx) -> torch.Tensor:
        """``(B, C, m, cols)`` measured planes."""
        if orientation == "ZX":
            return self.measure[:, :, idx, :].permute(2, 0, 1, 3)
        return self.measure[:, :, :, idx].permute(3, 0, 1, 2)


def query_planes(model: InrModel, coords: torch.Tensor) -> torch.Tensor:
    """``(B, rows, cols, 3)`` coordinates -> ``(B, C, rows, cols)`` images."""
    return model(coords).permute(0, 3, 1, 2)


def measurement_fidelity(model: InrModel, aniso: VolumeGrid, op: DegradationOp, chunk: int = 8) -> float:
    """Mean data fidelity over every ZX and ZY plane of the target grid."""
    geo = AxialGeometry(aniso, op)
    vals = []
    with torch.no_grad():
        for o in ("ZX", "ZY"):
            for start in range(0, geo.count[o], chunk):
                idx = torch.arange(start, min(start + chunk, geo.count[o]))
                q = query_planes(model, geo.planes(o, idx))
                vals.append(data_fidelity(q, geo.measurements(o, idx), op).item() * len(idx))
    return float(sum(vals) / (geo.count["ZX"] + geo.count["ZY"]))


def export_volume(model: InrModel, dims, chunk: int = 4) -> VolumeGrid:
    """Query every XY plane of ``dims = (N_z, N_y, N_x)``, clamp to [0, 1]."""
    nz, ny, nx = dims
    p = next(model.parameters())
    out = np.empty((model.config.channels, nz, ny, nx), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, nz, chunk):
            plans = [SlicePlan("XY", k, tuple(dims)) for k in range(start, min(start + chunk, nz))]
            coords = np.stack([expand_slice(pl).reshape(ny, nx, 3) for pl in plans])
            vals = model(torch.as_tensor(coords, dtype=p.dtype)).clamp(0.0, 1.0)
            out[:, start : start + len(plans)] = vals.permute(3, 0, 1, 2).cpu().numpy()
    return VolumeGrid(out)


# ----------------------------------------------------------------------------
# run report


@dataclass
class RunReport:
    losses: list = field(default_factory=list)  # (iter, data_fidelity, reg, total, t)
    metrics: list = field(default_factory=list)  # (epoch, psnr_zx, psnr_zy, ssim_zx, ssim_zy)
    fidelity_psnr: list = field(default_factory=list)  # (epoch, psnr of degraded query vs measurement)
    residuals: dict = field(default_factory=dict)  # iter -> (C, rows, cols) array
    orientations: list = field(default_factory=list)
    initial_fidelity: float = float("nan")
    final_fidelity: float = float("nan")
    seconds: float = 0.0
    iterations: int = 0

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "data_fidelity", "sds", "total", "t"])
            for it, df, reg, tot, t in self.losses:
                w.writerow([it, f"{df:.8g}", f"{reg:.8g}", f"{tot:.8g}", t])
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "psnr_zx", "psnr_zy", "ssim_zx", "ssim_zy"])
            for row in self.metrics:
                w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
        with open(out / "fidelity.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "psnr_measurement"])
            for ep, p in self.fidelity_psnr:
                w.writerow([ep, f"{p:.6f}"])
        for it, r in sorted(self.residuals.items()):
            save_volume(VolumeGrid.ingest(r), out / "residuals" / f"iter_{it:06d}.volume")


# ----------------------------------------------------------------------------
# optimization loop


def _iteration_generators(seed: int, it: int):
    base = (seed % (2**31)) * 1_000_003 + it
    return torch.Generator().manual_seed(base), torch.Generator().manual_seed(base + 2**40)


def _save_latest(path, model, opt, it):
    state = dict(model.state_dict())
    for i, p in enumerate(model.parameters()):
        st = opt.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                state[f"opt.{i}.{key}"] = st[key]
    meta = {"kind": "inr", "config": model.config.to_dict(), "seed": model.seed, "iteration": it}
    steps = [int(s["step"]) for s in opt.state.values() if "step" in s]
    meta["opt_step"] = steps[0] if steps else 0
    save_state(path, state, meta)


def _restore_latest(path, model, opt) -> int:
    state, meta = load_state(path)
    model_state = {k: v for k, v in state.items() if not k.startswith("opt.")}
    model.load_state_dict(model_state)
    for i, p in enumerate(model.parameters()):
        if f"opt.{i}.exp_avg" in state:
            opt.state[p] = {
                "step": torch.tensor(float(meta["opt_step"])),
                "exp_avg": state[f"opt.{i}.exp_avg"].clone(),
                "exp_avg_sq": state[f"opt.{i}.exp_avg_sq"].clone(),
            }
    return int(meta["iteration"])


def reconstruct(
    aniso: VolumeGrid,
    denoiser,
    schedule: NoiseSchedule | None,
    inr_config: InrConfig,
    cfg: SdsConfig,
    op: DegradationOp,
    gt: VolumeGrid | None = None,
    latest_path=None,
    resume: bool = False,
):
    """Fit an INR to the anisotropic volume ``aniso``.

    ``denoiser(x_t, t)`` predicts noise for ``(B, C, H, W)`` images in the
    prior's range; it is only called, never updated. ``latest_path`` (if set)
    receives a resumable checkpoint every ``cfg.checkpoint_every`` epochs.
    """
    if inr_config.channels != aniso.channels:
        raise ValueError(f"INR channels {inr_config.channels} != volume channels {aniso.channels}")
    if cfg.regularizer == "sds" and cfg.lam > 0:
        if schedule is None or denoiser is None:
            raise ValueError("SDS regularizer needs a denoiser and schedule")
        if cfg.t_start > schedule.T:
            raise ValueError(f"t_start {cfg.t_start} exceeds schedule length {schedule.T}")
    geo = AxialGeometry(aniso, op)
    model = init_inr(inr_config, cfg.seed)
    params = list(model.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr) if cfg.optimizer == "adam" else torch.optim.SGD(params, lr=cfg.lr)

    iters_per_epoch = math.ceil(0.5 * (geo.count["ZX"] + geo.count["ZY"]) / cfg.batch_slices)
    total = cfg.epochs * iters_per_epoch
    report = RunReport(iterations=total)
    report.initial_fidelity = measurement_fidelity(model, aniso, op)
    start_it = 0
    if resume and latest_path is not None and Path(str(latest_path) + ".json").exists():
        start_it = _restore_latest(latest_path, model, opt)
    use_sds = cfg.regularizer == "sds" and cfg.lam > 0
    t0 = time.perf_counter()

    for it in range(start_it, total):
        g_slices, g_noise = _iteration_generators(cfg.seed, it)
        if cfg.alternate:
            orient = "ZX" if it % 2 == 0 else "ZY"
        else:
            orient = ("ZX", "ZY")[int(torch.randint(0, 2, (1,), generator=g_slices))]
        report.orientations.append(orient)
        n = geo.count[orient]
        idx = torch.randperm(n, generator=g_slices)[: min(cfg.batch_slices, n)]
        t = t_schedule(it, total, cfg)

        q = query_planes(model, geo.planes(orient, idx))
        df = data_fidelity(q, geo.measurements(orient, idx), op)
        reg = torch.zeros((), dtype=df.dtype)
        if use_sds:
            x = to_model(q)
            eps = torch.randn(x.shape, generator=g_noise, dtype=x.dtype)
            r = sds_residual(x, t, eps, denoiser, schedule, cfg.scale_sqrt_alpha_bar)
            reg = sds_term(x, t, eps, denoiser, schedule, cfg.reduction, residual=r)
            if cfg.residual_every and it % cfg.residual_every == 0:
                report.residuals[it] = r[0].cpu().numpy()
        elif cfg.regularizer == "tv" and cfg.lam > 0:
            reg = tv_term(q)
        loss = df + cfg.lam * reg
        if not torch.isfinite(loss):
            if latest_path is not None:
                _save_latest(Path(str(latest_path) + "_nan"), model, opt, it)
            raise ReconstructionError(f"non-finite loss at iteration {it} (t={t})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        report.losses.append((it, df.item(), reg.item(), loss.item(), t))

        if (it + 1) % iters_per_epoch == 0:
            epoch = (it + 1) // iters_per_epoch
            if cfg.eval_every and epoch % cfg.eval_every == 0:
                _evaluate_epoch(model, aniso, op, geo, gt, epoch, report)
            if latest_path is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                _save_latest(latest_path, model, opt, it + 1)
            if epoch % 10 == 0:
                log.info("epoch %d/%d df %.3e reg %.3e t %d", epoch, cfg.epochs, df.item(), reg.item(), t)

    report.seconds = time.perf_counter() - t0
    report.final_fidelity = measurement_fidelity(model, aniso, op)
    if latest_path is not None and total > start_it:
        _save_latest(latest_path, model, opt, total)
    return model, report


def _evaluate_epoch(model, aniso, op, geo, gt, epoch, report):
    mse = measurement_fidelity(model, aniso, op)
    report.fidelity_psnr.append((epoch, math.inf if mse == 0 else 10 * math.log10(1.0 / mse)))
    if gt is not None:
        m = evaluate_volumes(export_volume(model, geo.target), gt)
        report.metrics.append((epoch, m.psnr_mean["ZX"], m.psnr_mean["ZY"], m.ssim_mean["ZX"], m.ssim_mean["ZY"]))
