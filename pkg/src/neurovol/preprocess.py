"""Intensity bounding, normalization, center trimming and block downsampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .tensor import Tensor, avg_pool3d

PAPER_TRIM = (160, 192, 160)
PAPER_BLOCK = 4


def percentile(values, q: float) -> float:
    """Linear interpolation between order statistics at rank ``q/100 * (n-1)``."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty input")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"q must be in [0, 100], got {q}")
    rank = q / 100.0 * (v.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, v.size - 1)
    frac = rank - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


@dataclass
class PreprocessReport:
    clamp_threshold: float
    pre_min: float
    pre_max: float
    pre_mean: float
    post_min: float
    post_max: float
    post_mean: float
    q: float = 99.5
    trim: tuple[int, int, int] | None = None
    block: int = 1
    image_id: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["trim"] is not None:
            d["trim"] = list(d["trim"])
        return d


def bound_and_normalize(volume: np.ndarray, q: float = 99.5) -> tuple[np.ndarray, PreprocessReport]:
    """Clamp above the ``q`` percentile, then map with ``(X - min) / max``.

    ``min`` and ``max`` are taken from the clamped volume. Note the divisor is
    ``max`` rather than ``max - min``; for nonnegative input the result still
    lies in [0, 1]. A clamped volume with ``max <= 1e-12`` maps to zeros.
    """
    vol = np.asarray(volume)
    if not np.all(np.isfinite(vol)):
        raise ValueError("volume contains non-finite voxels")
    thr = percentile(vol, q)
    clamped = np.minimum(vol.astype(np.float64), thr)
    lo, hi = float(clamped.min()), float(clamped.max())
    if hi <= 1e-12:
        out = np.zeros_like(clamped)
    else:
        out = (clamped - lo) / hi
    out = out.astype(np.float32)
    report = PreprocessReport(thr, float(vol.min()), float(vol.max()), float(vol.mean()),
                              float(out.min()), float(out.max()), float(out.mean()), q)
    return out, report


def trim_center(volume: np.ndarray, target) -> np.ndarray:
    """Centered crop; an odd margin drops its extra voxel on the high-index side."""
    vol = np.asarray(volume)
    target = tuple(int(t) for t in target)
    if len(target) != vol.ndim:
        raise ValueError(f"target {target} does not match volume rank {vol.ndim}")
    slices = []
    for axis, (n, t) in enumerate(zip(vol.shape, target)):
        if t > n:
            raise ValueError(f"trim target {t} exceeds source extent {n} on axis {axis}")
        start = (n - t) // 2
        slices.append(slice(start, start + t))
    return vol[tuple(slices)]


def downsample_avg(volume: np.ndarray, block: int = PAPER_BLOCK) -> np.ndarray:
    """Block-average downsampling (delegates to the tensor pooling op)."""
    return avg_pool3d(Tensor(np.asarray(volume)), block).data


def mean_volume(volumes: Iterable[np.ndarray]) -> np.ndarray:
    """Voxelwise running mean, one volume in memory at a time (f64 accumulator)."""
    acc = None
    n = 0
    for v in volumes:
        v = np.asarray(v, dtype=np.float64)
        if acc is None:
            acc = np.zeros_like(v)
        elif v.shape != acc.shape:
            raise ValueError(f"shape mismatch: {v.shape} vs {acc.shape}")
        n += 1
        acc += (v - acc) / n
    if acc is None:
        raise ValueError("mean_volume needs at least one volume")
    return acc


def sharpness_score(volume: np.ndarray) -> float:
    """Mean absolute forward difference over all voxels and axes."""
    vol = np.asarray(volume, dtype=np.float64)
    if min(vol.shape) < 2:
        raise ValueError(f"sharpness needs extent >= 2 on every axis, got {vol.shape}")
    total, count = 0.0, 0
    for axis in range(vol.ndim):
        d = np.abs(np.diff(vol, axis=axis))
        total += d.sum()
        count += d.size
    return float(total / count)


def box_blur(volume: np.ndarray, size: int = 3) -> np.ndarray:
    """Separable box filter with edge replication; used as a reference blur."""
    from scipy.ndimage import uniform_filter
    return uniform_filter(np.asarray(volume, dtype=np.float64), size=size, mode="nearest")


def preprocess_volume(volume: np.ndarray, trim=PAPER_TRIM, block: int = PAPER_BLOCK,
                      q: float = 99.5) -> tuple[np.ndarray, PreprocessReport]:
    """Trim, downsample, then bound and normalize."""
    vol = np.asarray(volume)
    if trim is not None:
        vol = trim_center(vol, trim)
    if block > 1:
        vol = downsample_avg(vol, block)
    out, report = bound_and_normalize(vol, q)
    report.trim = tuple(trim) if trim is not None else None
    report.block = block
    return out, report
