# %% [markdown]
# # Four ways to pool the feedback paths
#
# A higher order cell sees its last N hidden states. Each one is multiplied by
# its own matrix, and the N products are combined before the nonlinearity.
# This walk-through builds the same order-3 cell with each pooling rule and
# looks at what the combination step does.

# %%
import numpy as np

from hornn import HornnConfig, StateBuffer, init_params
from hornn.model import StepTrace, feedback, pool, step

rng = np.random.default_rng(0)
history = StateBuffer([rng.uniform(0, 1, (1, 6)) for _ in range(3)])

# %% [markdown]
# ## Plain sum and max
# `pool` takes the stacked products `(N, lanes, hidden)`. Max keeps the
# largest entry per unit and records which delay won.

# %%
products = np.array([[[1.0, -2.0]], [[0.5, 3.0]], [[-1.0, 0.0]]])
print("sum  :", pool("plain", products)[0])
pooled, winner = pool("max", products)
print("max  :", pooled, "from delays", winner + 1)

# %% [markdown]
# ## FOFE weighting
# Delay n is scaled by alpha**n, so older states fade geometrically.

# %%
cfg = HornnConfig(vocab=12, order=3, hidden=6, pooling="fofe", alpha=0.6, precision=64)
print("coefficients:", cfg.fofe_coefficients())
print("fofe :", pool("fofe", products, alpha=0.6)[0])

# %% [markdown]
# ## Gates
# The gated cell computes a sigmoid gate per delay from the current word and
# that delayed state. With all gate weights at zero every gate is 0.5.

# %%
gated = HornnConfig(vocab=12, order=3, hidden=6, pooling="gated", precision=64)
params = init_params(gated)
trace = StepTrace(x=None, history=[], products=None)
feedback(gated, params, history, np.array([4]), trace)
print("gate range with random weights:", trace.gates.min().round(3), "to", trace.gates.max().round(3))

for w in params.gate_w1 + params.gate_w2:
    w[...] = 0
half = feedback(gated, params, history, np.array([4]))
full = feedback(HornnConfig(vocab=12, order=3, hidden=6, pooling="plain", precision=64), params, history, np.array([4]))
print("zero gates halve the plain sum exactly:", np.array_equal(half, 0.5 * full))

# %% [markdown]
# ## One step of each cell
# Same seed, same history, same input word. Only the pooling differs.

# %%
for pooling in ("plain", "max", "fofe", "gated"):
    c = HornnConfig(vocab=12, order=3, hidden=6, pooling=pooling, precision=64, init_std=0.5)
    h, y = step(c, init_params(c), history.copy(), 4)
    print(f"{pooling:6s} h[:3]={np.round(h[0, :3], 4)}  p(next=0)={y[0, 0]:.4f}")
