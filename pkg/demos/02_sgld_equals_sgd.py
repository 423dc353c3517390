# %% [markdown]
# # DP-SGLD is DP-SGD with matched hyperparameters
#
# A DP-SGLD step `w - eta * (n/B * sum clip(g_i) + grad r) - sqrt(eta) z` is a
# DP-SGD step with learning rate `n * eta`, noise multiplier
# `B / (n C sqrt(eta))`, and a prior scaled down by `n`. With a shared noise
# stream the two trajectories agree to rounding error.

# %%
import numpy as np

from dpbnn.data import generate_blobs, sample_batch
from dpbnn.dp_optim import DPConfig, Prior, sgd_config_for_sgld, step_dp_sgd, step_dp_sgld
from dpbnn.nn_core import Batch, init_network

ds = generate_blobs(500, 3, 4, seed=0, separation=4.0)
net = init_network((4, 16, 3), rng=np.random.default_rng(0))

sgld_cfg = DPConfig(eta=1e-4, batch_size=25, n=500, C=1.0, prior=Prior("gaussian", 1.0))
sgd_cfg = sgd_config_for_sgld(sgld_cfg)
print("DP-SGD equivalent:", sgd_cfg.eta, round(sgd_cfg.sigma, 4), sgd_cfg.C)

# %%
a, b = net.copy(), net.copy()
noise_a, noise_b = np.random.default_rng(1), np.random.default_rng(1)
batches = np.random.default_rng(2)
gap = []
for t in range(200):
    batch = Batch.take(ds.inputs, ds.labels, sample_batch(500, 25, batches))
    a = step_dp_sgld(a, batch, sgld_cfg, noise_a, t)
    b = step_dp_sgd(b, batch, sgd_cfg, noise_b, t)
    gap.append(np.max(np.abs(a.params - b.params)))
print("largest parameter difference over 200 steps:", max(gap))
