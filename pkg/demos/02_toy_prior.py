# %% [markdown]
# Does the denoiser learn a distribution?
#
# Train on patches that are either all black or all white, then draw
# ancestral samples. A working prior reproduces both modes and nothing in
# between. About three minutes on one CPU core.

# %%
import numpy as np
import torch

from isorec import DenoiserConfig, PriorConfig, ancestral_sample, train_denoiser
from isorec.diffusion import from_model

torch.set_num_threads(1)

patches = np.zeros((512, 1, 8, 8), np.float32)
patches[256:] = 1.0

cfg = PriorConfig(denoiser=DenoiserConfig(base=16, levels=2), steps=2000, patch=8, batch_size=64, lr=1e-3)
prior = train_denoiser(patches, cfg)
print("loss first/last:", prior.losses[0][1], prior.losses[-1][1])

# %%
x = from_model(ancestral_sample(prior.model, prior.schedule, (256, 1, 8, 8), seed=1)).clamp(0, 1)
means = x.mean(dim=(1, 2, 3)).numpy()
counts, edges = np.histogram(means, bins=10, range=(0, 1))
for c, lo in zip(counts, edges):
    print(f"{lo:.1f}  {'#' * (c // 4)} {c}")
