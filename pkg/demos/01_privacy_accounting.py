# %% [markdown]
# # Privacy accounting in closed form
#
# Every method here is a composition of subsampled Gaussian mechanisms, so the
# whole run is mu-GDP with a closed-form mu. This notebook compares the budget
# of DP-SGD and DP-SGLD on an MNIST-sized problem and converts mu to (eps, delta).

# %%
import numpy as np

from dpbnn.dp_optim import map_sgld_to_sgd
from dpbnn.privacy import budget, delta_from_mu_eps, eps_or_inf, gdp_mu_generic, gdp_mu_sgld, iterations

n, B, epochs, delta = 60000, 256, 15, 1e-5
T = iterations(epochs, n, B)  # ceil(n / B) steps per epoch
print("iterations:", T)

# %% [markdown]
# DP-SGD with noise multiplier 1.3, and DP-SGLD with learning rate 5e-6 and
# clipping norm 1.5. DP-SGLD adds no extra noise: its Langevin noise already is
# a Gaussian mechanism.

# %%
sgd = budget(gdp_mu_generic(T, 1.3, B, n), delta)
sgld = budget(gdp_mu_sgld(T, 5e-6, 1.5, B, n), delta)
print("DP-SGD  ", sgd)
print("DP-SGLD ", sgld)

# %% [markdown]
# The SGLD budget is the SGD budget of the equivalent DP-SGD run.

# %%
eta_sgd, sigma_sgd, _ = map_sgld_to_sgd(5e-6, 1.5, n, B)
print(f"equivalent DP-SGD: eta = {eta_sgd:.3f}, sigma = {sigma_sgd:.4f}")
print("same mu:", np.isclose(gdp_mu_generic(T, sigma_sgd, B, n), sgld.mu, rtol=1e-12))

# %% [markdown]
# Batch size works in opposite directions. Larger batches cost DP-SGD more
# privacy per epoch, but make DP-SGLD *more* private, because the Langevin
# noise is fixed while the clipped signal shrinks relative to it. Small
# batches push the SGLD budget past any useful eps (reported as inf).

# %%
for b in (64, 128, 256, 512, 1024):
    Tb = iterations(epochs, n, b)
    print(f"B={b:5d}  eps SGD {eps_or_inf(gdp_mu_generic(Tb, 1.3, b, n), delta):7.3f}"
          f"  eps SGLD {eps_or_inf(gdp_mu_sgld(Tb, 5e-6, 1.5, b, n), delta):7.3f}")

# %% [markdown]
# The full privacy profile delta(eps) of one mu-GDP guarantee.

# %%
for eps in np.linspace(0, 3, 7):
    print(f"eps={eps:4.1f}  delta={delta_from_mu_eps(eps, sgld.mu):.3e}")
