"""Command-line entry point: ``isorec {simulate,train-prior,reconstruct,evaluate,sample-prior}``.

Every command takes ``--config PATH`` (JSON or TOML), ``--seed N`` and
``--out DIR`` and finishes by writing ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 usage/config error, 2 runtime/numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import tomli
import torch

from .checkpoint import CheckpointError, file_hash
from .degradation import DegradationOp
from .diffusion import PriorConfig, SamplingError, TrainedPrior, TrainingError, ancestral_sample, from_model, train_denoiser
from .inr import InrConfig
from .metrics import evaluate_volumes
from .sds import ReconstructionError, SdsConfig, export_volume, reconstruct
from .simulate import SimulationConfig, extract_lateral_patches, write_bundle
from .volume import VolumeFormatError, VolumeGrid, atomic_write_bytes, load_volume, save_volume

log = logging.getLogger("isorec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _configure_threads():
    n = os.environ.get("ISOREC_THREADS")
    torch.set_num_threads(int(n) if n else 1)


def read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {p}: {exc}") from exc
    try:
        return tomli.loads(text) if p.suffix == ".toml" else json.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise UsageError(f"malformed config {p}: {exc}") from exc


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(out: Path, command: str, resolved: dict, outputs: dict, started: float, extra=None, timing=None):
    """Write ``manifest.json``; wall-clock values live under ``timing`` only."""
    manifest = {
        "command": command,
        "config": resolved,
        "config_sha256": hashlib.sha256(_canonical(resolved).encode()).hexdigest(),
        "outputs": outputs,
        "timing": {"duration_s": round(time.perf_counter() - started, 3), **(timing or {})},
    }
    manifest.update(extra or {})
    atomic_write_bytes(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    stale = out / "manifest.json"
    if stale.exists():
        stale.unlink()
    return out


# ----------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    raw = read_config(args.config)
    if args.seed is not None:
        raw.setdefault("phantom", {})["seed"] = args.seed
        raw["patch_seed"] = args.seed
    try:
        cfg = SimulationConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulation config: {exc}") from exc
    out = _prepare_out(args.out)
    write_bundle(cfg, out)
    outputs = {n: file_hash(out / f"{n}.volume") for n in ("gt", "aniso", "patches")}
    write_manifest(out, "simulate", cfg.to_dict(), outputs, started)
    return EXIT_OK


def _load_patch_source(raw: dict):
    """Patches from a bundle's patches.volume, or cropped from a user volume."""
    if "patches" in raw:
        vol = load_volume(raw["patches"])
        return np.ascontiguousarray(vol.data.transpose(1, 0, 2, 3))
    if "volume" in raw:
        vol = load_volume(raw["volume"])
        p = raw.get("patch", 32)
        patches, _ = extract_lateral_patches(vol, p, raw.get("patch_count", 2000), raw.get("patch_seed", 0))
        return patches
    raise UsageError("train-prior config needs 'patches' or 'volume'")


def cmd_train_prior(args) -> int:
    started = time.perf_counter()
    raw = read_config(args.config)
    prior_raw = dict(raw.get("prior", {}))
    if args.seed is not None:
        prior_raw["seed"] = args.seed
    try:
        cfg = PriorConfig.from_dict(prior_raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid prior config: {exc}") from exc
    patches = _load_patch_source(raw)
    out = _prepare_out(args.out)
    try:
        prior = train_denoiser(patches, cfg)
    except TrainingError as exc:
        atomic_write_bytes(out / "diagnostic.json", (json.dumps(exc.diagnostic, indent=2) + "\n").encode())
        raise
    prior.save(out / "denoiser")
    with open(out / "loss.csv.tmp", "w") as fh:
        fh.write("step,loss\n")
        for step, loss in prior.losses:
            fh.write(f"{step},{loss:.9g}\n")
    (out / "loss.csv.tmp").replace(out / "loss.csv")
    val = validation_loss(prior, patches)
    resolved = {"prior": cfg.to_dict(), "source": {k: v for k, v in raw.items() if k != "prior"}}
    write_manifest(
        out, "train-prior", resolved, {"denoiser": file_hash(out / "denoiser")}, started, {"validation_loss": val}
    )
    return EXIT_OK


def validation_loss(prior: TrainedPrior, patches, n: int = 16, seed: int = 12345) -> float:
    """Fixed-noise, fixed-timestep denoising loss on the first ``n`` patches."""
    from .diffusion import denoiser_loss, to_model

    x0 = to_model(torch.tensor(np.asarray(patches[:n]), dtype=torch.float32))
    g = torch.Generator().manual_seed(seed)
    t = torch.randint(1, prior.schedule.T + 1, (x0.shape[0],), generator=g)
    eps = torch.randn(x0.shape, generator=g)
    with torch.no_grad():
        return float(denoiser_loss(prior.model, x0, prior.schedule, g, t=t, eps=eps))


def cmd_reconstruct(args) -> int:
    started = time.perf_counter()
    raw = read_config(args.config)
    for key in ("aniso", "denoiser"):
        if key not in raw and not (key == "denoiser" and raw.get("sds", {}).get("regularizer") in ("tv", "none")):
            raise UsageError(f"reconstruct config needs '{key}'")
    sds_raw = dict(raw.get("sds", {}))
    if args.seed is not None:
        sds_raw["seed"] = args.seed
    try:
        sds_cfg = SdsConfig(**sds_raw)
        aniso = load_volume(raw["aniso"])
        inr_cfg = InrConfig(**{"channels": aniso.channels, **raw.get("inr", {})})
        op = DegradationOp.from_dict(raw.get("degradation", {"mode": "gaussian_subsample", "factor": 4, "sigma_z": 2.0}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid reconstruct config: {exc}") from exc
    prior, den_hash = None, None
    if "denoiser" in raw:
        try:
            prior = TrainedPrior.load(raw["denoiser"])
        except (CheckpointError, ValueError, KeyError) as exc:
            raise UsageError(f"invalid denoiser checkpoint: {exc}") from exc
        den_hash = file_hash(raw["denoiser"])
        if prior.config.denoiser.channels != aniso.channels:
            raise UsageError(
                f"denoiser has {prior.config.denoiser.channels} channels, volume has {aniso.channels}"
            )
        if sds_cfg.t_start > prior.schedule.T:
            raise UsageError(f"t_start {sds_cfg.t_start} exceeds denoiser schedule T={prior.schedule.T}")
    gt = load_volume(raw["gt"]) if "gt" in raw else None
    out = _prepare_out(args.out)
    model, report = reconstruct(
        aniso,
        prior.model if prior else None,
        prior.schedule if prior else None,
        inr_cfg,
        sds_cfg,
        op,
        gt=gt,
        latest_path=out / "latest",
        resume=bool(raw.get("resume", False)),
    )
    report.write(out / "report")
    model.save(out / "inr", iteration=report.iterations)
    dims = (aniso.dims[0] * op.factor, aniso.dims[1], aniso.dims[2])
    save_volume(export_volume(model, dims), out / "recon.volume")
    resolved = {
        "aniso": str(raw["aniso"]),
        "denoiser": raw.get("denoiser"),
        "gt": raw.get("gt"),
        "sds": sds_cfg.to_dict(),
        "inr": inr_cfg.to_dict(),
        "degradation": op.to_dict(),
    }
    atomic_write_bytes(out / "resolved_config.json", (json.dumps(resolved, indent=2) + "\n").encode())
    outputs = {"inr": file_hash(out / "inr"), "recon": file_hash(out / "recon.volume")}
    extra = {
        "denoiser_sha256": den_hash,
        "aniso_sha256": file_hash(raw["aniso"]),
        "initial_fidelity": report.initial_fidelity,
        "final_fidelity": report.final_fidelity,
    }
    write_manifest(out, "reconstruct", resolved, outputs, started, extra, {"optimization_s": round(report.seconds, 3)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    recon, gt = load_volume(args.recon), load_volume(args.gt)
    if recon.data.shape != gt.data.shape:
        raise UsageError(f"volume shapes differ: {recon.data.shape} vs {gt.data.shape}")
    out = _prepare_out(args.out)
    report = evaluate_volumes(recon, gt)
    report.write(out)
    print(report.summary())
    resolved = {"recon": str(args.recon), "gt": str(args.gt), **report.config}
    write_manifest(out, "evaluate", resolved, {"metrics": file_hash_plain(out / "metrics.json")}, started)
    return EXIT_OK


def file_hash_plain(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_sample_prior(args) -> int:
    started = time.perf_counter()
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    raw = read_config(args.config)
    ckpt = args.checkpoint or raw.get("checkpoint")
    if ckpt is None:
        raise UsageError("sample-prior needs --checkpoint")
    try:
        prior = TrainedPrior.load(ckpt)
    except (CheckpointError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid denoiser checkpoint: {exc}") from exc
    size = args.size or raw.get("size", prior.config.patch)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    out = _prepare_out(args.out)
    x = ancestral_sample(prior.model, prior.schedule, (args.n, prior.config.denoiser.channels, size, size), seed)
    imgs = from_model(x).clamp(0, 1).numpy().transpose(1, 0, 2, 3)
    save_volume(VolumeGrid(np.ascontiguousarray(imgs)), out / "samples.volume")
    resolved = {"checkpoint": str(ckpt), "n": args.n, "size": size, "seed": seed}
    write_manifest(out, "sample-prior", resolved, {"samples": file_hash(out / "samples.volume")}, started,
                   {"denoiser_sha256": file_hash(ckpt)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isorec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)

    common(sub.add_parser("simulate", help="write a phantom bundle"), config_required=False)
    common(sub.add_parser("train-prior", help="train the lateral-slice denoiser"))
    common(sub.add_parser("reconstruct", help="fit the INR to an anisotropic volume"))
    p = sub.add_parser("evaluate", help="PSNR/SSIM of a reconstruction against ground truth")
    p.add_argument("recon")
    p.add_argument("gt")
    p.add_argument("--out", required=True)
    p = sub.add_parser("sample-prior", help="draw ancestral samples from a denoiser")
    common(p, config_required=False)
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "train-prior": cmd_train_prior,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "sample-prior": cmd_sample_prior,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    _configure_threads()
    try:
        return COMMANDS[args.command](args)
    except (UsageError, VolumeFormatError, FileNotFoundError, PermissionError) as exc:
        print(f"isorec {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, SamplingError, ReconstructionError, FloatingPointError) as exc:
        print(f"isorec {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
