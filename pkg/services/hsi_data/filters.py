# services/hsi_data/filters.py
import logging
import math
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from services.error_handler import UsageError
from services.hsi_data.types import HsiCube

logger = logging.getLogger("HsiData")

# ===== Nhân Gaussian rời rạc =====
def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Nhân Gaussian 1D cắt ở bán kính ⌈3σ⌉, chuẩn hóa tổng = 1 sau khi cắt."""
    if sigma < 0:
        raise UsageError(f"sigma phải ≥ 0, nhận {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_kernel_3d(sigma: Sequence[float]) -> np.ndarray:
    """Nhân 3D (trục z, y, x) là tích ngoài của ba nhân 1D."""
    sx, sy, sz = sigma
    kz, ky, kx = gaussian_kernel_1d(sz), gaussian_kernel_1d(sy), gaussian_kernel_1d(sx)
    return kz[:, None, None] * ky[None, :, None] * kx[None, None, :]

# ===== Lọc khối 3D =====
def gaussian_filter_3d(cube: HsiCube, sigma: Sequence[float]) -> HsiCube:
    """
    Lọc Gaussian 3D tách biến, biên phản xạ nửa mẫu.

    sigma = (σx, σy, σz) theo voxel: x là cột, y là hàng, z là trục phổ.
    Thành phần bằng 0 nghĩa là giữ nguyên theo trục đó.
    """
    if len(sigma) != 3:
        raise UsageError(f"sigma cần 3 thành phần (σx, σy, σz), nhận {sigma}")
    sx, sy, sz = (float(s) for s in sigma)
    out = cube.values
    # Thứ tự cố định z → y → x để kết quả tất định
    for axis, s in ((0, sz), (1, sy), (2, sx)):
        if s == 0:
            continue
        out = correlate1d(out, gaussian_kernel_1d(s), axis=axis, mode="reflect")
    logger.debug(f"[gaussian_filter_3d] sigma=({sx}, {sy}, {sz}) shape={cube.shape}")
    return HsiCube(np.array(out, dtype=np.float64, copy=True))
