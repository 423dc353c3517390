# %% [markdown]
# # Variational and dropout posteriors under DP
#
# DP-BBP trains a mean-field Gaussian `(mu, rho)` with the reparameterization
# trick, clipping per-sample gradients of the whole objective. DP-MC Dropout
# trains with dropout and keeps it on at prediction time. Both use the usual
# Gaussian mechanism, so their privacy depends only on sigma, B, n and T.

# %%
from dpbnn.harness import preset, run_experiment

small = dict(n_train=3000, n_test=1000, hidden=(64,), epochs=15, K=30)
for method in ("dp-bbp", "dp-mc-dropout", "dp-sgld"):
    log = run_experiment(preset("blobs", method, seed=1, **small))
    m = log.metrics
    print(f"{method:14s} acc {m['accuracy']:.3f}  ECE {m['ece']:.4f}  eps {m['eps']:.3f}  draws {m['draws']}")

# %% [markdown]
# The same configuration without privacy (no clipping, no Gaussian mechanism).

# %%
for method in ("dp-bbp", "dp-mc-dropout"):
    log = run_experiment(preset("blobs", method, private=False, seed=1, **small))
    print(f"{method:14s} non-private acc {log.metrics['accuracy']:.3f}")
