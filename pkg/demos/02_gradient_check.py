# %% [markdown]
# # Checking the hand-written backward pass
#
# Every gradient in the package is derived by hand. Here we compare it with
# central finite differences on tiny random problems, then break it on
# purpose to see the checker catch the fault.

# %%
from hornn import HornnConfig
from hornn.evaluation import gradient_check
from hornn.training import backward_window

for pooling in ("plain", "max", "fofe", "gated"):
    cfg = HornnConfig(vocab=11, order=3, hidden=7, pooling=pooling, precision=64)
    rep = gradient_check(cfg, seed=0)
    print(f"{pooling:6s} worst relative error {rep.max_rel_error:.2e} in {rep.worst.name}  passed={rep.passed}")

# %% [markdown]
# ## A negative control
# Flip the sign of one recurrent gradient. Only that matrix should fail.

# %%
def flipped(*args, **kw):
    g = backward_window(*args, **kw)
    g.w_h[1] *= -1
    return g


rep = gradient_check(HornnConfig(vocab=11, order=3, hidden=7, pooling="fofe", precision=64), 0, backward=flipped)
for m in rep.matrices:
    flag = "FAIL" if m.max_rel_error >= rep.tolerance else "ok"
    print(f"{m.name:10s} {m.max_rel_error:.2e} {flag}")
