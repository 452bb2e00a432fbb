# The five training losses on tiny hand-built inputs, with the values they should give.
# Run: python demos/02_losses.py
import math

import numpy as np
import torch

from vesselkp import losses
from vesselkp.types import Homography, KeypointSet

torch.set_default_dtype(torch.float64)

# Dice: identical binary maps score 0, disjoint maps 1, half-strength prediction 1/3.
t = np.zeros((20, 20)); t.flat[:100] = 1
print("dice(t, t)      %.2e" % float(losses.dice_loss(t, t)))
print("dice(t, 1 - t)  %.6f" % float(losses.dice_loss(t, 1 - t)))
print("dice(t/2, t)    %.6f  (1/3 = %.6f)" % (float(losses.dice_loss(0.5 * t, t)), 1 / 3))

# A soft map is not a fixed point of this Dice: dice(a, a) = 1 - sum(a^2) / sum(a).
a = np.random.default_rng(0).uniform(size=(8, 8))
print("soft dice(a, a) %.4f vs closed form %.4f" % (float(losses.dice_loss(a, a)), 1 - (a ** 2).sum() / a.sum()))

# Detector losses render keypoints to a heatmap target first.
Y = KeypointSet.from_points([[10, 12], [30, 40]], (64, 64))
P = torch.full((64, 64), 0.01)
print("det_sup on a near-empty map %.3f" % float(losses.det_sup_loss(P, Y, sigma=2.0)))

# InfoNCE over keypoint embeddings: identical rows everywhere give log 2,
# orthogonal negatives at temperature 1 give log 2 - 1.
e, n = np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]])
print("ssl identical   %.6f (log 2 = %.6f)" % (float(losses.ssl_contrastive_loss(e, e, e, e, 0.07)), math.log(2)))
print("ssl orthogonal  %.6f (log 2 - 1 = %.6f)" % (float(losses.ssl_contrastive_loss(e, e, n, n, 1.0)),
                                                 math.log(2) - 1))

# Triplet descriptor loss: orthonormal descriptors that survive the warp give max(0, margin - sqrt 2) = 0.
D = np.zeros((8, 8, 4))
pts = KeypointSet.from_points([[1, 1], [5, 2], [2, 6], [6, 6]], (8, 8))
for i, (x, y) in enumerate(pts.coords.astype(int)):
    D[y, x, i] = 1
print("triplet, distinct descriptors %.3f" % float(losses.descriptor_triplet_loss(D, D, pts, Homography.identity(), 0.8)))

# Segmentation consistency under the identity warp of the same map.
S = (np.random.default_rng(1).uniform(size=(32, 32)) > 0.5).astype(float)
print("seg consistency, same binary map %.2e" % float(losses.seg_consistency_loss(S, S, Homography.identity())))
