# %% [markdown]
# # Density statistics and channel tail-drop
#
# Walks one synthetic cloud through the density pipeline: downsample,
# per-anchor statistics, composite score, drop ratio, and the channel
# mask it implies for a 32-channel latent.

# %%
import numpy as np

from tailpcc import density, taildrop
from tailpcc.geometry import downsample, nearest_assignment
from tailpcc.pcio import generate_synthetic

pc = generate_synthetic("gaussian_clusters", 2048, density_contrast=4.0, seed=3)
idx, anchors = downsample(pc, 1 / 24)
stats = density.compute_density_stats(nearest_assignment(pc, anchors), pc, anchors)
print(f"{anchors.n} anchors, d_num range {stats.d_num.min():.0f}..{stats.d_num.max():.0f}")

# %% [markdown]
# The normalisation bounds follow an EMA of the batch 95th percentile.
# A single update initialises them directly.

# %%
norm = density.ema_update(density.NormalizationState(), stats.d_num, stats.d_dist)
delta = density.composite_score(stats, norm)
rho = density.drop_ratio(delta)
print(f"d_max={norm.d_max:.1f} m_max={norm.m_max:.4f}")
print(f"delta mean {delta.mean():.3f}, per-anchor rho in [{rho.min():.3f}, {rho.max():.3f}]")
scene_rho = density.scene_drop_ratio(delta)
print(f"scene rho {scene_rho:.4f}")

# %% [markdown]
# Channel importance blends min-max normalised variance and mean
# absolute step along the anchor order. The mask keeps the top
# ceil((1 - rho) C) channels.

# %%
rng = np.random.default_rng(0)
z = rng.normal(size=(32, anchors.n)) * np.linspace(3.0, 0.2, 32)[:, None]
imp = taildrop.channel_importance(z)
mask = taildrop.build_mask(imp, scene_rho)
print("kept", int(mask.bits.sum()), "of 32:", np.flatnonzero(mask.bits).tolist())

# %%
for k in (1, 4, 16, 32):
    r = 1 - k / 32
    print(f"rho={r:.4f} -> k={taildrop.retained_count(r, 32)}")
