# Vessel phantoms, homographies, heatmaps and NMS.
# Run: python demos/01_phantoms_and_geometry.py
import numpy as np

from vesselkp import geometry
from vesselkp.data import PhantomConfig, generate_phantom
from vesselkp.geometry import HomographySamplerConfig

# One seed gives one vessel tree. The two styles share mask and forks,
# which makes a synthetic cross-modality pair with exact ground truth.
img_a, mask, forks = generate_phantom(PhantomConfig(seed=3))
img_b, _, _ = generate_phantom(PhantomConfig(seed=3, modality_style="bright-on-dark"))
print("frame", img_a.shape, "forks", len(forks), "vessel fraction %.3f" % mask.values.mean())
v = mask.values > 0.5
print("dark-on-bright  vessel %.2f background %.2f" % (img_a[v].mean(), img_a[~v].mean()))
print("bright-on-dark  vessel %.2f background %.2f" % (img_b[v].mean(), img_b[~v].mean()))

# A random homography, applied to points and to the image.
rng = np.random.default_rng(0)
H = geometry.sample_homography(HomographySamplerConfig(max_corner_shift=0.08), img_a.shape, rng)
print("H =\n", np.round(H.matrix, 4))
moved, ok = geometry.warp_keypoints(forks, H)
print("forks still in frame after warping:", len(moved), "/", len(forks))

back, _ = geometry.transform_points(geometry.transform_points(forks.coords, H)[0], H.inverse())
print("point round trip error %.1e px" % np.abs(back - forks.coords).max())

# Render the forks as a peak-normalized Gaussian heatmap and pull them back out with NMS.
hm = geometry.render_heatmap(forks, sigma=2.0, kernel=13, frame=img_a.shape)
found = geometry.nms_extract(hm.values, threshold=0.5, radius=4)
d = np.sqrt(((found.coords[:, None] - forks.coords[None]) ** 2).sum(-1)).min(1)
print("NMS recovered", len(found), "peaks; worst distance to a true fork %.2f px" % d.max())

# Consistency filtering: keep detections that some warped detection maps back onto.
warped_dets, _ = geometry.warp_keypoints(found, H)
noisy = geometry.transform_points(warped_dets.coords, H.inverse())[0] + rng.normal(0, 0.3, (len(warped_dets), 2))
kept = geometry.filter_consistent(found, noisy, tol=0.5)
print("consistent within 0.5 px:", len(kept), "of", len(found))
