"""
Simulating an SDE and building kNN training batches
===================================================

Short trajectories of a one-dimensional Ornstein-Uhlenbeck process are
cut into one-step pairs, then grouped into batches of nearby starting
states.
"""

# %%
import numpy as np

from sfml.dataset import build_pairs, resample_batches
from sfml.sde import get_benchmark, simulate_trajectories

bm = get_benchmark("ou1d")
data = simulate_trajectories(bm.spec, bm.init_low, bm.init_high, n_traj=200, length=50, dt=0.01, seed=0)
print("states:", data.states.shape)

# %%
# Every consecutive pair of states becomes one training sample.
store = build_pairs(data)
print("pairs:", len(store))

# %%
# A batch is an anchor plus its nearest neighbours in x0, so the conditional
# law of x1 given x0 is roughly constant inside it.
plan = resample_batches(store, n_batches=3, batch_size=200, epoch_seed=1)
for members in plan.batches:
    x0 = store.x0[members, 0]
    step = store.x1[members, 0] - x0
    print(f"x0 in [{x0.min():.3f}, {x0.max():.3f}]  step mean {step.mean():+.4f}  step std {step.std():.4f}")

# %%
# The one-step std should sit near sigma * sqrt(dt) = 0.03.
print("expected step std:", 0.3 * np.sqrt(0.01))
