# How the evaluation metrics react to shifts, offsets, warps and scale changes.
# Run with: python notebooks/03_metrics.py

import numpy as np

from eitphys import sigproc

t = np.arange(128) / 10.0
target = np.sin(2 * np.pi * 0.3 * t)

print("rmse to itself + 0.5:", sigproc.rmse(target + 0.5, target))

late = np.roll(target, 4)
print("rmse of a 0.4 s late copy:", round(sigproc.rmse(late, target), 3),
      "shifted rmse:", round(sigproc.shifted_rmse(late, target), 3))

warped = np.sin(2 * np.pi * 0.3 * (t + 0.3 * np.sin(t)))
print("dtw identical:", sigproc.dtw(target, target), "dtw warped:", round(sigproc.dtw(warped, target), 3))

for scale in (0.5, 0.7, 1.0, 1.4, 2.0):
    print(f"amplitude x{scale}: rating {sigproc.visual_rating(scale * target, target).value}")
print("wrong frequency:", sigproc.visual_rating(np.sin(2 * np.pi * 0.6 * t), target).value)
