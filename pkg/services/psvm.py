# services/psvm.py
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from services.config import PSVM_MAX_SWEEPS, PSVM_SIGMA, SNR_THRESHOLD_OFFSET, SVM_EXHAUSTIVE_LIMIT
from services.error_handler import DimensionError, NormalizationError, RankError, UsageError
from services.hsi_data.filters import gaussian_filter_3d
from services.hsi_data.types import EndmemberMatrix, HsiCube, reshape_to_matrix
from services.subspace import (
    SNR_FORMULAS,
    estimate_snr,
    project,
    snr_threshold,
    svm_maximize,
)

logger = logging.getLogger("Psvm")

NORMALIZATION_EPS = 1e-12
BRANCH_PROJECTIVE = "projective"
BRANCH_MEAN_REMOVED = "mean-removed"

# ===== Tùy chọn & kết quả =====
@dataclass(frozen=True)
class PsvmOptions:
    """denoise=False tương ứng biến thể PSVM_ND (bỏ bước lọc Gaussian có điều kiện)."""
    denoise: bool = True
    snr_formula: str = "db"
    gaussian_sigma: Tuple[float, float, float] = (PSVM_SIGMA, PSVM_SIGMA, PSVM_SIGMA)
    snr_threshold_offset: float = SNR_THRESHOLD_OFFSET
    max_sweeps: int = PSVM_MAX_SWEEPS
    exhaustive_limit: int = SVM_EXHAUSTIVE_LIMIT

    def __post_init__(self):
        if self.snr_formula not in SNR_FORMULAS:
            raise UsageError(f"snr_formula phải thuộc {SNR_FORMULAS}, nhận {self.snr_formula!r}")
        if len(self.gaussian_sigma) != 3 or any(s < 0 for s in self.gaussian_sigma):
            raise UsageError(f"gaussian_sigma cần 3 giá trị ≥ 0, nhận {self.gaussian_sigma}")
        if self.max_sweeps < 1:
            raise UsageError(f"max_sweeps phải ≥ 1, nhận {self.max_sweeps}")
        if self.exhaustive_limit < 0:
            raise UsageError(f"exhaustive_limit phải ≥ 0, nhận {self.exhaustive_limit}")


@dataclass(frozen=True, eq=False)
class PsvmResult:
    endmembers: EndmemberMatrix
    indices: List[int]
    snr_initial: Optional[float]
    snr_final: Optional[float]
    snr_threshold: Optional[float]
    branch: str
    denoised: bool = False
    method: str = "psvm"
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "indices": list(self.indices),
            "snr_initial": self.snr_initial,
            "snr_final": self.snr_final,
            "snr_threshold": self.snr_threshold,
            "branch": self.branch,
            "denoised": self.denoised,
        }

# ===== Các bước con =====
def projective_normalize(X_d: np.ndarray) -> np.ndarray:
    """Chia mỗi cột cho tích vô hướng với u = trung bình các cột (khử hệ số điều biến)."""
    X = np.asarray(X_d, dtype=np.float64)
    u = X.mean(axis=1)
    dots = u @ X
    bad = np.flatnonzero(np.abs(dots) <= NORMALIZATION_EPS)
    if bad.size:
        raise NormalizationError(
            f"Pixel {int(bad[0])} gần trực giao với hướng trung bình (|x·u|={abs(dots[bad[0]]):.2e})"
        )
    return X / dots


def _validate(cube: HsiCube, P: int) -> np.ndarray:
    L, N = cube.bands, cube.height * cube.width
    if not 2 <= P < L:
        raise UsageError(f"Cần 2 ≤ P < L, nhận P={P}, L={L}")
    if N < P:
        raise DimensionError(f"Số pixel N={N} nhỏ hơn P={P}")
    R = reshape_to_matrix(cube).values
    if np.all(R == R[:, :1]):
        raise RankError("Mọi pixel giống hệt nhau, không thể tìm simplex")
    return R


def _mean_removed_extract(R: np.ndarray, P: int, max_sweeps: int, exhaustive_limit: int):
    """Chiếu dữ liệu đã trừ trung bình lên P−1 chiều, tìm simplex, chiếu ngược + r̄."""
    r_mean = R.mean(axis=1, keepdims=True)
    basis, X_d = project(R - r_mean, P - 1)
    indices = svm_maximize(X_d, P, max_sweeps, exhaustive_limit)
    E = basis.U_d @ X_d[:, indices] + r_mean
    return E, indices

# ===== PSVM đầy đủ =====
def psvm_extract_detailed(cube: HsiCube, P: int, options: Optional[PsvmOptions] = None) -> PsvmResult:
    options = options or PsvmOptions()
    R = _validate(cube, P)

    snr_initial = estimate_snr(R, P, options.snr_formula)
    threshold = snr_threshold(P, options.snr_threshold_offset)
    snr = snr_initial
    denoised = False

    if options.denoise and snr < threshold:
        logger.info(
            f"⚠️ [psvm_extract] SNR={snr:.2f} dB < ngưỡng {threshold:.2f} dB, lọc Gaussian 3D "
            f"sigma={options.gaussian_sigma}"
        )
        R = reshape_to_matrix(gaussian_filter_3d(cube, options.gaussian_sigma)).values
        snr = estimate_snr(R, P, options.snr_formula)
        denoised = True

    if snr > threshold:
        branch = BRANCH_PROJECTIVE
        basis, X_d = project(R, P)
        R_d = projective_normalize(X_d)
        indices = svm_maximize(R_d, P, options.max_sweeps, options.exhaustive_limit)
        E = basis.U_d @ X_d[:, indices]
    else:
        branch = BRANCH_MEAN_REMOVED
        E, indices = _mean_removed_extract(R, P, options.max_sweeps, options.exhaustive_limit)

    logger.info(
        f"✅ [psvm_extract] P={P} snr={snr_initial:.2f}→{snr:.2f} dB (ngưỡng {threshold:.2f}) "
        f"branch={branch} denoised={denoised} indices={indices}"
    )
    return PsvmResult(
        endmembers=EndmemberMatrix(E),
        indices=indices,
        snr_initial=snr_initial,
        snr_final=snr,
        snr_threshold=threshold,
        branch=branch,
        denoised=denoised,
        method="psvm" if options.denoise else "psvm-nd",
    )


def psvm_extract(cube: HsiCube, P: int, options: Optional[PsvmOptions] = None) -> EndmemberMatrix:
    """Trích endmember tất định; cột xếp theo chỉ số pixel nguồn tăng dần."""
    return psvm_extract_detailed(cube, P, options).endmembers

# ===== SVM cơ bản (không kiểm tra SNR, không lọc) =====
def svm_extract_detailed(
    cube: HsiCube,
    P: int,
    max_sweeps: int = PSVM_MAX_SWEEPS,
    exhaustive_limit: int = SVM_EXHAUSTIVE_LIMIT,
) -> PsvmResult:
    R = _validate(cube, P)
    E, indices = _mean_removed_extract(R, P, max_sweeps, exhaustive_limit)
    logger.info(f"✅ [svm_extract] P={P} indices={indices}")
    return PsvmResult(
        endmembers=EndmemberMatrix(E),
        indices=indices,
        snr_initial=None,
        snr_final=None,
        snr_threshold=None,
        branch=BRANCH_MEAN_REMOVED,
        method="svm",
    )


def svm_extract(
    cube: HsiCube,
    P: int,
    max_sweeps: int = PSVM_MAX_SWEEPS,
    exhaustive_limit: int = SVM_EXHAUSTIVE_LIMIT,
) -> EndmemberMatrix:
    return svm_extract_detailed(cube, P, max_sweeps, exhaustive_limit).endmembers
