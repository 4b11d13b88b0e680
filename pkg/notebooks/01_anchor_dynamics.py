# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Anchor dynamics
#
# Each tracklet owns an intra-camera anchor that tracks its frames through a
# moving average on the unit sphere.  When two anchors from different cameras
# are each other's nearest neighbour, their cross-camera anchors merge.
#
# This notebook walks through both mechanisms on a tiny hand-made bank.

# %%
import numpy as np

from dal.anchors import cyclic_rank, ema_update, init_anchor_bank, update_cross_anchor
from dal.linalg import l2_normalize

np.set_printoptions(precision=4, suppress=True)

# %% [markdown]
# ## The moving-average step
#
# The update moves the raw anchor by `eta * (unit(f) - unit(x))`.  With a fixed
# frame embedding the direction converges quickly.

# %%
x = np.array([1.0, 0.0])
f = np.array([0.3, 2.0])
for step in range(8):
    gap = np.linalg.norm(l2_normalize(x) - l2_normalize(f))
    print(f"step {step}: x = {x}, gap {gap:.2e}")
    x = ema_update(x, f, 0.5)

# %% [markdown]
# The step length is bounded by `2 * eta` whatever the anchor norm, so an anchor
# that has grown long turns slowly.  After 50 steps the gap is still visible:

# %%
long_x = np.array([10.0, 0.0])
for _ in range(50):
    long_x = ema_update(long_x, np.array([0.0, 1.0]), 0.5)
print("gap after 50 steps:", np.linalg.norm(l2_normalize(long_x) - np.array([0.0, 1.0])))

# %% [markdown]
# ## Cyclic ranking
#
# Two cameras, three tracklets each.  Tracklet 2 of camera 0 has no clean partner.

# %%
cam0 = [np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]), np.array([[0.7, 0.7, 0.1]])]
cam1 = [np.array([[0.95, 0.05, 0.0]]), np.array([[0.1, 0.9, 0.0]]), np.array([[0.0, 0.0, 1.0]])]
bank = init_anchor_bank([cam0, cam1])

for p in range(3):
    m = cyclic_rank((0, p), bank, 1)
    print(f"query (0,{p}) -> peer {m.peer}, back to {m.backward_rank1}, consistent={m.consistent}")
    update_cross_anchor(bank, (0, p), m)

# %%
print("merge state of camera 0:", [bank.merge_state(0, i) for i in range(3)])
print("cross anchor (0,0):", bank.cross[0][0])
print("cross anchor (0,2) equals its intra anchor:", np.array_equal(bank.cross[0][2], bank.intra[0][2]))
