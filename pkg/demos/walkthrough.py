"""A short tour: one local offset field per position, how it turns into
motion, and why it needs so few parameters.

    python3 demos/walkthrough.py
"""

import numpy as np

from lcdc.deform import deform_input, deformable_conv2d, expand_local_to_dense, lcdc_conv2d
from lcdc.motion import check_flow_equivalence, local_motion, multilinear_image
from lcdc.network import offset_learner_counts
from lcdc.tensor import KernelSpec, conv2d

rng = np.random.default_rng(0)
spec = KernelSpec.same(3, 2, 3)
x = rng.normal(size=(12, 12, 2))
w = rng.normal(size=spec.weight_shape)
local = rng.uniform(-1.5, 1.5, size=(12, 12, 2))

# one (dy, dx) per input position; every tap that reads a position inherits it
y = lcdc_conv2d(x, w, local, spec)
print("lcdc output", y.shape)

# the same thing three ways
dense = expand_local_to_dense(local, spec)
print("vs dense deformable conv :", np.abs(y - deformable_conv2d(x, w, dense, spec)).max())
print("vs conv of warped input  :", np.abs(y - conv2d(deform_input(x, local), w, spec)).max())

# motion is the change of the local field between frames
prev, cur = local, local + np.array([0.5, -0.25])
print("motion of a constant shift:", local_motion(cur, prev)[0, 0])

# on a multilinear image, a translated frame plus shifted offsets reproduce the
# previous output exactly, and the recovered motion is the translation
img = multilinear_image(16, 16, channels=2)
rep = check_flow_equivalence(img, np.array([0.5, 0.25]), rng.uniform(-0.5, 0.5, size=(16, 16, 2)), w, spec)
for line in rep.lines():
    print(" ", line)

# storage: a dense learner predicts 2*G*k*k channels, the local one 2
c = offset_learner_counts(3, 3, 512, 4, 3)
print(f"offset learner parameters: dense {c['dc_deform']}, local {c['lcdc_deform']}, ratio {c['ratio_dense_over_local']:g}")
