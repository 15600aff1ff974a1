# %% [markdown]
# # Order and forgetting-factor sweeps
#
# The sweep harnesses train one model per setting with a shared seed and
# recipe, then report test perplexity. At this scale the numbers are only
# illustrative; the point is the shape of the artifacts.

# %%
from hornn import HornnConfig, TrainSettings
from hornn.evaluation import alpha_sweep, copy_task, order_sweep

# a stream where each "copy" token depends on the token three steps back
train_ids, _ = copy_task(4000, lag=3, seed=1)
test_ids, _ = copy_task(800, lag=3, seed=2)
settings = TrainSettings(lanes=8, epochs=6, column_norm_cap=None)

# %%
base = HornnConfig(vocab=8, hidden=24, pooling="plain")
orders = order_sweep(base, [1, 2, 3, 4], train_ids, test_ids, settings)
print(orders.to_table())

# %%
fofe = HornnConfig(vocab=8, hidden=24, pooling="fofe")
alphas = alpha_sweep(fofe, [0.2, 0.4, 0.6, 0.8], train_ids, test_ids, settings)
print(alphas.to_table())
print(alphas.to_csv())
