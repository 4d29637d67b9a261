"""
Learning a stochastic flow map for an Ornstein-Uhlenbeck process
================================================================

A small model is trained on OU pairs, then used as a random time stepper.
The run is kept short (a couple of minutes); more epochs and data tighten
the drift estimate.
"""

# %%
import math

import numpy as np

from sfml.dataset import build_pairs
from sfml.evaluation import ks_statistic, recover_drift_diffusion, rollout_ensemble
from sfml.sde import get_benchmark, simulate_trajectories
from sfml.training import TrainConfig, evaluate_mse, init_model, train

bm = get_benchmark("ou1d")
store = build_pairs(simulate_trajectories(bm.spec, bm.init_low, bm.init_high, 1000, 100, 0.01, seed=1))
# a short run only has ~1500 Adam steps, so the parameter average gets a
# shorter window than the default 0.999
cfg = TrainConfig(epochs=30, n_batches=50, batch_size=1000, seed=0, ema_decay=0.99)

model, hist = train(store, cfg, callback=lambda e, r, m: e % 5 == 4 and print(f"epoch {e:3d} mse {r.mse:.2e} moment {r.moment:.3f}"))
print("untrained mse:", evaluate_mse(init_model(store, cfg), store))
print("trained mse:  ", evaluate_mse(model, store))

# %%
# The encoder output on fresh pairs should look standard normal.
held = build_pairs(simulate_trajectories(bm.spec, bm.init_low, bm.init_high, 50, 100, 0.01, seed=2))
print("latent KS:", ks_statistic(model.encode(held.x0, held.x1)[:, 0]))

# %%
# Drift and diffusion read off the decoder against the truth 1.2 - x and 0.3.
xs = np.linspace(0.5, 2.0, 6)
tab = recover_drift_diffusion(model, xs, 100_000, seed=3)
for x, a, b in zip(xs, tab.a_hat[:, 0], tab.b_hat[:, 0]):
    print(f"x {x:.2f}  drift {a:+.3f} (true {1.2 - x:+.3f})  diffusion {b:.3f}")

# %%
# Repeated application from x0 = 1.5 up to T = 5.
st = rollout_ensemble(model, [1.5], 5000, 500, seed=4)
print(f"terminal mean {st.terminal_mean[0]:.4f} (exact {1.2 + 0.3 * math.exp(-5):.4f})")
print(f"terminal std  {st.terminal_std[0]:.4f} (exact {0.3 / math.sqrt(2):.4f})")
