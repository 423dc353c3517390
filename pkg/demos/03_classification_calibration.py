# %% [markdown]
# # Classification, calibration and prediction histograms
#
# DP-SGLD and DP-SGD on a 10-class Gaussian-blob problem with the desk-scale
# preset (10k training points, two hidden layers of 100 units, 15 epochs).
# The SGLD posterior is the trail of iterates from the last epoch.

# %%
import numpy as np

from dpbnn.calibration import calibration_report
from dpbnn.harness import load_task, preset, run_experiment
from dpbnn.posterior import prediction_histogram, sample_predictions

results = {}
for method in ("dp-sgld", "dp-sgd"):
    cfg = preset("blobs", method, seed=0)
    log = run_experiment(cfg, out_dir=f"demo_output/{method}")
    results[method] = log
    m = log.metrics
    print(f"{method:8s} acc {m['accuracy']:.3f}  ECE {m['ece']:.4f}  MCE {m['mce']:.4f}  eps {m['eps']:.3f}")

# %% [markdown]
# Reliability diagram data: bin midpoint against accuracy. The same rows are
# in `demo_output/<method>/calibration_bins.csv`.

# %%
data = load_task(preset("blobs"))
sgld = results["dp-sgld"]
draws = sample_predictions(sgld.ensemble, data.x_test)
rep = calibration_report(np.mean([d.probs for d in draws], axis=0), data.y_test, 15)
for lower, upper, mid, count, acc, conf in rep.as_rows():
    if count:
        print(f"[{lower:.3f}, {upper:.3f})  n={count:5d}  acc={acc:.3f}  conf={conf:.3f}")

# %% [markdown]
# How spread out are the posterior draws on one test point? Each row is a class,
# each column a probability bin, and each entry counts draws.

# %%
print(prediction_histogram(draws, bins=5, row=0))
