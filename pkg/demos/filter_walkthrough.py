"""Follow the online filter through one synthetic episode.

Run from the repository root:  python3 demos/filter_walkthrough.py
"""

import numpy as np

from hasmm.filter import stream_filter
from hasmm.generate import generate_dataset
from hasmm.model import absorption_probabilities, reference_instance
from hasmm.volterra import build_table

params = reference_instance(4)
print("mean sojourns (h):", params.mean_sojourn)
print("absorption probabilities from each state:", np.round(absorption_probabilities(params), 3))

# the first episode that ends in the catastrophic state
episodes = generate_dataset(params, 20, seed=3)
ep = next(e for e in episodes if e.label == params.n_states - 1)
print(f"\nepisode {ep.id}: {ep.n_obs} observations, censored at {ep.censor_time:.1f} h")
print("true path:", list(zip(ep.truth.states.tolist(), np.round(ep.truth.sojourns, 1).tolist())))

# the table only depends on the parameters, so it is built once and reused
table = build_table(params)
print(f"table: {table.diagnostics['iterations']} iterations, residual {table.diagnostics['final_residual']:.1e}")

print("\n   t (h)   true  posterior              risk")
for snap in stream_filter(params, table, ep):
    true_state = ep.truth.state_at(snap.t)
    post = " ".join(f"{p:.2f}" for p in snap.posterior)
    print(f"{snap.t:8.2f}   {true_state:4d}  [{post}]   {snap.risk:.3f}")
