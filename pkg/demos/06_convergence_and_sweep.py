# %% [markdown]
# # Decaying schedule and the DP-SGD family
#
# For a budget of T iterations the schedule sets `C = C0 T^(-1/6)` and solves
# `eta^2 n^2 C^2 T L + eta^3 d T L = L0` for the learning rate. The probe runs
# DP-SGLD with stabilized clipping for each T and fits the log-log slope of the
# smallest expected gradient norm.

# %%
import numpy as np

from dpbnn.probes import (
    ProbeSetting,
    SweepSetting,
    convergence_probe,
    pareto_dominated_fraction,
    sweep_sgd_family,
    theorem5_schedule,
)

for T in (10**2, 10**3, 10**4, 10**5):
    eta, C = theorem5_schedule(T, C0=12.0, L=1.0, L0=1.1, d=147, n=50_000, batch_size=100)
    print(f"T={T:6d}  eta={eta:.3e}  C={C:.3f}")

# %%
res = convergence_probe([10**2, 10**2.5, 10**3], seed=0, setting=ProbeSetting(replicates=2))
print("min grad norms:", np.round(res.min_grad_norm, 4), " slope:", round(res.slope, 3))

# %% [markdown]
# A small sweep: DP-SGD cells over (C, sigma), and DP-SGLD run both directly
# and as its mapped DP-SGD twin. Rows go to `demo_output/sweep.csv`.

# %%
rows = sweep_sgd_family([0.5, 1.5, 5.0], [0.5, 1.3, 3.0], SweepSetting(epochs=3), seed=0,
                        out_path="demo_output/sweep.csv")
final = {}
for method, C, sigma, eta, epoch, mu, eps, acc, status in rows:
    final.setdefault(method, []).append((eps, acc))
sgd_points = final["dp-sgd"]
sgld_points = final["dp-sgld"]
print("share of DP-SGD points dominated by a DP-SGLD point:",
      pareto_dominated_fraction(sgld_points, sgd_points))
