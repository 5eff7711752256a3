"""Fit a model by Monte Carlo EM and use it as an early-warning score.

Takes a minute or two on one core.  Run from the repository root:
    python3 demos/learn_and_detect.py
"""

import numpy as np

from hasmm.eval import ScoredEpisode, operating_point, roc_curve
from hasmm.filter import stream_filter
from hasmm.generate import generate_dataset
from hasmm.learn import EmConfig, ffbs_mcem
from hasmm.model import reference_instance
from hasmm.volterra import build_table

truth = reference_instance(3)
train = generate_dataset(truth, 200, seed=10)
held_out = generate_dataset(truth, 150, seed=11)


def progress(it):
    flag = "  (redrawn)" if it.refreshed else ""
    print(f"  iter {it.iteration:2d}  Q = {it.q_hat:10.2f}  min ESS = {it.min_ess:5.1f}{flag}")


# without refresh the importance weights collapse onto one trajectory per
# episode within a few iterations; redrawing keeps the E-step honest
print("fitting 3 states on 200 episodes")
res = ffbs_mcem(train, 3, EmConfig(G=20, max_iter=15, seed=0, ess_refresh=True), callback=progress)
fit = res.params
print(f"log-likelihood {res.initial_loglik:.1f} -> {res.final_loglik:.1f}")
print("mean sojourns  fit:", np.round(fit.mean_sojourn, 2), " truth:", truth.mean_sojourn)
for j, (a, b) in enumerate(zip(fit.emission, truth.emission)):
    print(f"state {j} means  fit: {np.round(a.mean, 2)}  truth: {b.mean}")

table = build_table(fit)
scored = [ScoredEpisode.from_snapshots(ep, list(stream_filter(fit, table, ep))) for ep in held_out]
curve = roc_curve(scored)
prevalence = np.mean([ep.label != 0 for ep in held_out])
thr, tpr, ppv, lead = operating_point(scored, curve, 0.5)
print(f"\nheld-out AUC (PPV vs TPR) {curve.auc:.3f}, prevalence {prevalence:.3f}")
print(f"at TPR {tpr:.2f}: threshold {thr:.3f}, PPV {ppv:.2f}, mean alarm lead {-lead:.1f} h before censoring")
