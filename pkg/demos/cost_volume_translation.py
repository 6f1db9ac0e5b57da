"""
Recovering a translation from the local cost volume
===================================================

Two feature maps that differ by a small integer shift produce a cost
volume whose strongest channel, at every interior voxel, is the offset
that undoes the shift.
"""

import numpy as np

from rwcnet.correlation import local_cost_volume, offsets

rng = np.random.default_rng(0)

# Random unit-norm features on a 10^3 grid, four channels.
feat = rng.normal(size=(4, 10, 10, 10)).astype(np.float32)
feat /= np.linalg.norm(feat, axis=0, keepdims=True)

# The moving map is the fixed map shifted by (1, -2, 0) voxels.
shift = (1, -2, 0)
moving = np.roll(feat, shift, axis=(1, 2, 3))

###############################################################################
# Each of the 125 channels holds the scaled dot product with one
# neighbouring offset inside a radius-2 cube.

cost = local_cost_volume(feat, moving, radius=2).data
print("cost volume shape:", cost.shape)

best = np.argmax(cost[:, 3:7, 3:7, 3:7], axis=0)
table = offsets(2)
found = {table[i] for i in np.unique(best)}
print("offsets picked at interior voxels:", found)
assert found == {shift}
