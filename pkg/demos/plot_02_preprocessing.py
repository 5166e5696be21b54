"""
From raw volume to network input
================================

A raw-mode phantom (182x218x182) is trimmed to 160x192x160, averaged in
4x4x4 blocks to 40x48x40, clamped at its 99.5th percentile and scaled.
"""

import numpy as np

from neurovol.phantom import RAW_SHAPE, PhantomConfig, generate_phantom
from neurovol.preprocess import (
    box_blur,
    downsample_avg,
    mean_volume,
    preprocess_volume,
    sharpness_score,
    trim_center,
)

raw, _ = generate_phantom(PhantomConfig(shape=RAW_SHAPE), 3, "leuk2")
print("raw", raw.shape)

trimmed = trim_center(raw, (160, 192, 160))
small = downsample_avg(trimmed, 4)
# block averaging keeps the global mean
print("trimmed", trimmed.shape, "downsampled", small.shape,
      "mean gap", abs(float(small.mean(dtype=np.float64)) - float(trimmed.mean(dtype=np.float64))))

vol, report = preprocess_volume(raw)
print("clamp threshold", round(report.clamp_threshold, 4), "output range", vol.min(), vol.max())

# Registration quality check: the mean of well-aligned volumes stays sharp,
# while a stack of shifted copies blurs it.
stack = [preprocess_volume(generate_phantom(PhantomConfig(shape=RAW_SHAPE), s, "healthy")[0])[0] for s in range(3)]
aligned = sharpness_score(mean_volume(stack))
shifted = sharpness_score(mean_volume([np.roll(v, 3 * i, axis=0) for i, v in enumerate(stack)]))
print(f"sharpness aligned {aligned:.4f}  misaligned {shifted:.4f}  blurred {sharpness_score(box_blur(stack[0])):.4f}")
