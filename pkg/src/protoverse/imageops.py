"""Small shared raster helpers."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def resize_bilinear(array: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear resize of a 2D array to (H, W)."""
    h, w = out_hw
    if h < 1 or w < 1:
        raise ValueError(f"degenerate target size {(h, w)}")
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected 2D array, got shape {arr.shape}")
    t = torch.from_numpy(arr)[None, None]
    out = F.interpolate(t, size=(int(h), int(w)), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def bbox_iou(a, b) -> float:
    """Intersection over union of two inclusive (r0, c0, r1, c1) boxes."""
    r0 = max(a[0], b[0])
    c0 = max(a[1], b[1])
    r1 = min(a[2], b[2])
    c1 = min(a[3], b[3])
    if r1 < r0 or c1 < c0:
        return 0.0
    inter = (r1 - r0 + 1) * (c1 - c0 + 1)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / float(area_a + area_b - inter)
