"""IEC 61966-2-1 sRGB transfer curve (numpy arrays, torch tensors or floats)."""

from __future__ import annotations

import numpy as np
import torch


def srgb_encode(x):
    if isinstance(x, torch.Tensor):
        lo = 12.92 * x
        hi = 1.055 * torch.clamp(x, min=0.0031308) ** (1.0 / 2.4) - 0.055
        return torch.where(x <= 0.0031308, lo, hi)
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.maximum(x, 0.0031308) ** (1.0 / 2.4) - 0.055)


def srgb_decode(c):
    if isinstance(c, torch.Tensor):
        lo = c / 12.92
        hi = ((torch.clamp(c, min=0.04045) + 0.055) / 1.055) ** 2.4
        return torch.where(c <= 0.04045, lo, hi)
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 2.4)
