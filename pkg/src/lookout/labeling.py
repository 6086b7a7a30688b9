"""Automatic labeling rules: future-failure horizons and sensor occlusion."""
from __future__ import annotations

import numpy as np

__all__ = [
    "label_failures",
    "lidar_occlusion_sector",
    "label_lidar_occlusion",
    "label_camera_occlusion",
]

# fraction of the scan fov whose median range decides LiDAR occlusion
OCCLUSION_SECTOR_FRACTION = 215.0 / 270.0
OCCLUSION_RANGE_THRESHOLD = 0.3  # meters


def label_failures(instant_failures: np.ndarray, horizon: int) -> np.ndarray:
    """Per-frame future-failure labels over the next ``horizon`` steps.

    Row t is [fail(t), fail(t+1), ..., fail(t+horizon-1)]; steps beyond the
    last recorded frame are padded with False.
    """
    fails = np.asarray(instant_failures, dtype=bool)
    if fails.ndim != 1:
        raise ValueError("instant failure indicators must be 1-D")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    padded = np.concatenate([fails, np.zeros(horizon - 1, dtype=bool)])
    return np.lib.stride_tricks.sliding_window_view(padded, horizon).copy()


def lidar_occlusion_sector(beams: int, fov_deg: float) -> tuple[int, int]:
    """(start, length) of the centered sector used for occlusion labeling.

    The sector spans 215/270 of the fov, rounded to the nearest beam; with
    1081 beams over 270 degrees this is indices 110..970 (861 beams).
    """
    if beams < 2:
        raise ValueError(f"need at least 2 beams, got {beams}")
    intervals = int(round(OCCLUSION_SECTOR_FRACTION * (beams - 1)))
    length = min(intervals + 1, beams)
    start = (beams - length) // 2
    return start, length


def label_lidar_occlusion(ranges: np.ndarray, fov_deg: float = 270.0) -> bool:
    """True iff the median range over the center sector is below 0.3 m."""
    ranges = np.asarray(ranges, dtype=np.float64)
    start, length = lidar_occlusion_sector(ranges.shape[0], fov_deg)
    return bool(np.median(ranges[start : start + length]) < OCCLUSION_RANGE_THRESHOLD)


def label_camera_occlusion(
    pixels: np.ndarray, sharpness_min: float, variance_min: float
) -> bool:
    """True iff the image is too blurry or too flat to be informative.

    Sharpness is the mean absolute 3x3 Laplacian response of the grayscale
    image; variance is taken over all pixel values.
    """
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 3 or px.shape[1] < 3:
        raise ValueError(f"expected an HxWx3 image with H,W >= 3, got {px.shape}")
    gray = px.mean(axis=2)
    lap = (
        gray[:-2, 1:-1]
        + gray[2:, 1:-1]
        + gray[1:-1, :-2]
        + gray[1:-1, 2:]
        - 4.0 * gray[1:-1, 1:-1]
    )
    sharpness = float(np.abs(lap).mean())
    variance = float(px.var())
    return sharpness < sharpness_min or variance < variance_min
