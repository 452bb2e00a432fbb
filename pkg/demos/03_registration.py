# Robust homography fitting and the evaluation metrics, without any learned model.
# Run: python demos/03_registration.py
import numpy as np

from vesselkp import geometry, metrics
from vesselkp.geometry import HomographySamplerConfig
from vesselkp.matching import estimate_homography, lmeds_sample_count, nnbf_match

rng = np.random.default_rng(1)
frame = (256, 256)

# Descriptor matching: noisy copies of a descriptor set, shuffled.
desc = rng.normal(size=(40, 32))
desc /= np.linalg.norm(desc, axis=1, keepdims=True)
perm = rng.permutation(40)
noisy = desc[perm] + rng.normal(0, 0.05, desc.shape)
m = nnbf_match(None, desc, None, noisy, ratio=0.9, mutual=True)
correct = sum(perm[b] == a for a, b, _ in m)
print("nnBF: %d matches, %d correct" % (len(m), correct))

# LMedS with 30% gross outliers.
print("minimal samples drawn:", lmeds_sample_count(0.5))
H = geometry.sample_homography(HomographySamplerConfig(max_corner_shift=0.2), frame, rng)
src = rng.uniform(0, 256, (20, 2))
dst = geometry.transform_points(src, H)[0]
bad = rng.choice(20, 6, replace=False)
dst[bad] = rng.uniform(0, 256, (6, 2))
fit = estimate_homography(src, dst)
print("outliers flagged:", np.flatnonzero(~fit.inliers).tolist(), "planted:", sorted(bad.tolist()))
print("corner errors (px):", np.round(metrics.corner_errors(fit.homography, H, frame), 6))

# Metrics: two pairs with max errors 10 and 40 give AUC@25 = 0.5 * 16 / 25.
evals = [metrics.PairEvaluation("a", [3.0, 10.0]), metrics.PairEvaluation("b", [1.0, 40.0])]
agg = metrics.aggregate(evals)
print("mMAE %.1f  mMEE %.1f  AUC@25 %.2f" % (agg.mMAE, agg.mMEE, agg.AUC))

# A failed registration never succeeds but stays out of the means.
agg = metrics.aggregate(evals + [metrics.PairEvaluation.failed("c")])
print("with one failure: mMAE %.1f  AUC@25 %.3f  failed %d" % (agg.mMAE, agg.AUC, agg.n_failed))
