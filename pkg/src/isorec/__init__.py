"""Isotropic reconstruction of anisotropic volumes.

An implicit neural representation of the volume is fitted to its
low-resolution axial planes, regularized by score distillation from a 2D
diffusion prior trained on the volume's own lateral slices.
"""
from .degradation import DegradationOp, degrade, degrade_volume, gaussian_kernel_1d
from .diffusion import (
    DenoiserConfig,
    NoiseSchedule,
    PriorConfig,
    TrainedPrior,
    ancestral_sample,
    build_schedule,
    denoiser_loss,
    perturb,
    train_denoiser,
)
from .inr import FourierEmbedding, InrConfig, InrModel, fourier_embed, init_inr, inr_forward, query_slice
from .metrics import MetricsReport, evaluate_volumes, linear_interp_volume, psnr, ssim
from .sds import RunReport, SdsConfig, data_fidelity, export_volume, reconstruct, sds_term, t_schedule, tv_term
from .simulate import PhantomSpec, SimulationConfig, extract_lateral_patches, make_phantom, simulate_anisotropic
from .volume import SlicePlan, VolumeGrid, expand_slice, load_volume, normalize_index, save_volume

__version__ = "0.1.0"
