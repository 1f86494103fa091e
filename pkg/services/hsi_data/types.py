# services/hsi_data/types.py
from dataclasses import dataclass
from typing import Union

import numpy as np

from services.error_handler import DimensionError, UsageError

# ===== Kiểu dữ liệu chính =====
ABUNDANCE_SUM_TOL = 1e-6


def _as_float64(values, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} cần mảng {ndim} chiều, nhận {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{name} rỗng: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} chứa giá trị không hữu hạn (NaN/Inf)")
    return arr


@dataclass(frozen=True, eq=False)
class HsiCube:
    """Khối ảnh siêu phổ L×H×W (band-major)."""
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_float64(self.values, 3, "HsiCube"))

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class PixelMatrix:
    """Ma trận L×N, cột j là phổ của pixel j theo thứ tự hàng rồi cột."""
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_float64(self.values, 2, "PixelMatrix"))

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def pixels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class AbundanceMaps:
    """Bản đồ độ phủ P×H×W, thỏa ANC và ASC."""
    values: np.ndarray

    def __post_init__(self):
        arr = _as_float64(self.values, 3, "AbundanceMaps")
        if np.any(arr < 0):
            raise UsageError("AbundanceMaps vi phạm ANC (có giá trị âm)")
        sums = arr.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > ABUNDANCE_SUM_TOL:
            raise UsageError(
                f"AbundanceMaps vi phạm ASC (lệch tối đa {np.max(np.abs(sums - 1.0)):.2e})"
            )
        object.__setattr__(self, "values", arr)

    @property
    def materials(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class EndmemberMatrix:
    """Ma trận L×P, cột p là phổ của endmember p."""
    values: np.ndarray

    def __post_init__(self):
        arr = _as_float64(self.values, 2, "EndmemberMatrix")
        if np.any(np.linalg.norm(arr, axis=0) == 0):
            raise UsageError("EndmemberMatrix có cột bằng 0")
        object.__setattr__(self, "values", arr)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def materials(self) -> int:
        return self.values.shape[1]


SnrLevel = Union[float, str]


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    cube: HsiCube
    gt_endmembers: EndmemberMatrix
    gt_abundances: AbundanceMaps
    snr_db: SnrLevel
    seed: int

# ===== Chuyển đổi khối <-> ma trận =====
def reshape_to_matrix(cube: HsiCube) -> PixelMatrix:
    """Cột j = row·W + col; phần tử (l, j) = cube(l, row, col)."""
    L, H, W = cube.shape
    return PixelMatrix(cube.values.reshape(L, H * W))


def reshape_to_cube(matrix: PixelMatrix, height: int, width: int) -> HsiCube:
    """Nghịch đảo chính xác của reshape_to_matrix."""
    L, N = matrix.values.shape
    if height <= 0 or width <= 0 or N != height * width:
        raise DimensionError(f"N={N} không khớp H·W={height}×{width}")
    return HsiCube(matrix.values.reshape(L, height, width))


def scene_summary(cube: HsiCube) -> dict:
    """Tóm tắt nhanh một cube để log / trả về HTTP."""
    v = cube.values
    return {
        "bands": cube.bands,
        "height": cube.height,
        "width": cube.width,
        "min": float(v.min()),
        "max": float(v.max()),
        "mean": float(v.mean()),
    }
