"""
Finding the number of noise sources
===================================

A two-dimensional OU process driven by a single Brownian motion is fit
with latent sizes 1, 2 and 3. The reconstruction error stops improving
once the latent space is large enough to carry the noise. Takes a
few minutes.
"""

# %%
from sfml.dataset import build_pairs
from sfml.sde import get_benchmark, simulate_trajectories
from sfml.training import TrainConfig, evaluate_mse, init_model, sweep_latent_dim

bm = get_benchmark("ou2d_rank1")
store = build_pairs(simulate_trajectories(bm.spec, bm.init_low, bm.init_high, 1000, 50, 0.01, seed=1))
cfg = TrainConfig(epochs=60, n_batches=50, batch_size=1000, seed=0)

print("no latent (identity) mse:", evaluate_mse(init_model(store, cfg), store))
rep = sweep_latent_dim(store, cfg, max_nz=3)
for nz, mse in rep.rows:
    print(f"n_z = {nz}: mse {mse:.3e}")
print("detected dimension:", rep.detected_dim)
