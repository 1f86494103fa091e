# services/subspace.py
import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.linalg import eigh

from services.config import SVM_EXHAUSTIVE_LIMIT
from services.error_handler import DimensionError, UsageError
from services.hsi_data.types import PixelMatrix

logger = logging.getLogger("Subspace")

SNR_FORMULAS = ("db", "as-written")
SNR_RATIO_FLOOR = 1e-12
REFINE_REL_TOL = 1e-12

# ===== Kiểu dữ liệu =====
@dataclass(frozen=True, eq=False)
class ProjectionBasis:
    """U_d (L×d) cột trực chuẩn, kèm trị riêng giảm dần."""
    U_d: np.ndarray
    eigenvalues: np.ndarray

    @property
    def d(self) -> int:
        return self.U_d.shape[1]


@dataclass(frozen=True, eq=False)
class ProjectedData:
    X_d: np.ndarray
    R_d: np.ndarray


def _matrix(R) -> np.ndarray:
    return np.asarray(getattr(R, "values", R), dtype=np.float64)

# ===== Phân tích trị riêng =====
def correlation_eigs(R: PixelMatrix, d: int) -> ProjectionBasis:
    """
    Top-d vector riêng của R·Rᵀ/N (trị riêng giảm dần).

    Quy ước dấu: thành phần có trị tuyệt đối lớn nhất của mỗi cột là dương
    (trùng nhau thì lấy chỉ số đầu tiên).
    """
    X = _matrix(R)
    L, N = X.shape
    if not 1 <= d <= min(L, N):
        raise UsageError(f"d={d} nằm ngoài [1, min(L={L}, N={N})]")
    corr = X @ X.T / N
    w, V = eigh(corr, subset_by_index=[L - d, L - 1])
    w, V = w[::-1].copy(), V[:, ::-1].copy()
    lead = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[lead, np.arange(d)])
    signs[signs == 0] = 1.0
    return ProjectionBasis(U_d=V * signs, eigenvalues=w)


def project(R: PixelMatrix, d: int):
    """Trả về (basis, X_d = U_dᵀ·R)."""
    basis = correlation_eigs(R, d)
    return basis, basis.U_d.T @ _matrix(R)

# ===== Ước lượng SNR =====
def snr_threshold(P: int, offset: float = 0.0) -> float:
    return 22.0 + 10.0 * math.log10(P) + offset


def estimate_snr(R: PixelMatrix, P: int, formula: str = "db") -> float:
    """
    SNR toàn cục (dB) từ phần năng lượng nằm trong không gian con top-P
    của dữ liệu đã trừ trung bình.

    formula='as-written' trả |log10(·)| của cùng tỷ số (để đối chiếu).
    """
    if formula not in SNR_FORMULAS:
        raise UsageError(f"snr_formula phải thuộc {SNR_FORMULAS}, nhận {formula!r}")
    X = _matrix(R)
    L, N = X.shape
    if not 1 <= P < L:
        raise UsageError(f"Cần 1 ≤ P < L, nhận P={P}, L={L}")

    r_mean = X.mean(axis=1, keepdims=True)
    centered = X - r_mean
    basis = correlation_eigs(centered, min(P, N))
    X_p = basis.U_d.T @ centered

    p_r = float(np.sum(X ** 2)) / N
    p_rp = float(np.sum(X_p ** 2)) / N + float(np.sum(r_mean ** 2))
    # Chặn dưới tử và mẫu để dữ liệu không nhiễu cho SNR rất lớn thay vì âm
    tiny = SNR_RATIO_FLOOR * max(p_r, np.finfo(np.float64).tiny)
    num = max(p_rp - (P / L) * p_r, tiny)
    den = max(p_r - p_rp, tiny)
    ratio = max(num / den, SNR_RATIO_FLOOR)

    snr = abs(math.log10(ratio)) if formula == "as-written" else 10.0 * math.log10(ratio)
    logger.debug(f"[estimate_snr] P_R={p_r:.4e} P_RP={p_rp:.4e} snr={snr:.3f} ({formula})")
    return snr

# ===== Thể tích simplex Cayley–Menger =====
def _cm_denominator(n_points: int) -> float:
    return (-1.0) ** n_points * 2.0 ** (n_points - 1) * math.factorial(n_points - 1) ** 2


def cayley_menger_sq_volume_batch(points: np.ndarray) -> np.ndarray:
    """V² cho một lô simplex; points có dạng B×P×d (P đỉnh trong R^d)."""
    pts = np.asarray(points, dtype=np.float64)
    B, P, _ = pts.shape
    diff = pts[:, :, None, :] - pts[:, None, :, :]
    dist2 = np.einsum("bijk,bijk->bij", diff, diff)
    cm = np.zeros((B, P + 1, P + 1))
    cm[:, 0, 1:] = 1.0
    cm[:, 1:, 0] = 1.0
    cm[:, 1:, 1:] = dist2
    vol2 = np.linalg.det(cm) / _cm_denominator(P)
    return np.maximum(vol2, 0.0)


def cayley_menger_sq_volume(points: np.ndarray) -> float:
    """V² của simplex có các đỉnh là cột của ma trận d×P."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 2:
        raise DimensionError(f"Cần ma trận d×P với P ≥ 2, nhận {pts.shape}")
    return float(cayley_menger_sq_volume_batch(pts.T[None])[0])

# ===== Tìm simplex thể tích lớn nhất =====
def _volumes_with_candidates(pts: np.ndarray, fixed: Sequence[int]) -> np.ndarray:
    """V² của {fixed ∪ j} cho mọi cột j; pts là N×d."""
    N = pts.shape[0]
    base = np.broadcast_to(pts[list(fixed)][None], (N, len(fixed), pts.shape[1]))
    batch = np.concatenate([base, pts[:, None, :]], axis=1)
    return cayley_menger_sq_volume_batch(batch)


def _exhaustive_best(pts: np.ndarray, P: int):
    combos = np.array(list(itertools.combinations(range(pts.shape[0]), P)), dtype=np.intp)
    vols = cayley_menger_sq_volume_batch(pts[combos])
    best = int(np.argmax(vols))
    return list(combos[best]), float(vols[best])


def _check_search_args(X: np.ndarray, P: int) -> np.ndarray:
    d, N = X.shape
    if P < 2:
        raise UsageError(f"Cần P ≥ 2, nhận {P}")
    if N < P:
        raise DimensionError(f"Số pixel N={N} nhỏ hơn P={P}")
    if d < P - 1:
        raise DimensionError(f"Cần d ≥ P−1, nhận d={d}, P={P}")
    return X.T


def _greedy_seed(pts: np.ndarray, P: int) -> List[int]:
    chosen = [int(np.argmax(np.einsum("ij,ij->i", pts, pts)))]
    while len(chosen) < P:
        vols = _volumes_with_candidates(pts, chosen)
        vols[chosen] = -np.inf
        chosen.append(int(np.argmax(vols)))
    return chosen


def svm_greedy_seed(R_d: np.ndarray, P: int) -> List[int]:
    """
    Giai đoạn gieo của svm_maximize: cột chuẩn lớn nhất, rồi lần lượt thêm cột
    làm V² lớn nhất. Trả về chỉ số theo thứ tự được chọn.
    """
    pts = _check_search_args(np.asarray(R_d, dtype=np.float64), P)
    return _greedy_seed(pts, P)


def svm_maximize(
    R_d: np.ndarray,
    P: int,
    max_sweeps: int = 50,
    exhaustive_limit: int = SVM_EXHAUSTIVE_LIMIT,
) -> List[int]:
    """
    Chọn P cột của R_d (d×N) có simplex thể tích lớn nhất.

    Gieo tham lam (svm_greedy_seed), sau đó quét thay thế từng slot cho tới khi
    không còn cải thiện. Mọi trường hợp hòa chọn chỉ số nhỏ nhất. Trả về chỉ số
    đã sắp tăng dần.

    exhaustive_limit > 0 bật đối chiếu vét cạn khi C(N,P) ≤ exhaustive_limit:
    kết quả vét cạn chỉ thay thế khi V² lớn hơn hẳn. Mặc định tắt.
    """
    if max_sweeps < 1:
        raise UsageError(f"max_sweeps phải ≥ 1, nhận {max_sweeps}")
    if exhaustive_limit < 0:
        raise UsageError(f"exhaustive_limit phải ≥ 0, nhận {exhaustive_limit}")
    pts = _check_search_args(np.asarray(R_d, dtype=np.float64), P)
    N = pts.shape[0]

    chosen = _greedy_seed(pts, P)
    current = cayley_menger_sq_volume_batch(pts[chosen][None])[0]
    seed_vol = current

    # quét thay thế theo thứ tự slot
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        changed = False
        for slot in range(P):
            others = chosen[:slot] + chosen[slot + 1:]
            vols = _volumes_with_candidates(pts, others)
            vols[others] = -np.inf
            j = int(np.argmax(vols))
            if j != chosen[slot] and vols[j] > current + REFINE_REL_TOL * current:
                chosen[slot] = j
                current = vols[j]
                changed = True
        if not changed:
            break

    if exhaustive_limit and math.comb(N, P) <= exhaustive_limit:
        best, best_vol = _exhaustive_best(pts, P)
        if best_vol > current + REFINE_REL_TOL * current:
            logger.debug(f"[svm_maximize] vét cạn cải thiện V² {current:.6e} → {best_vol:.6e}")
            chosen, current = best, best_vol

    logger.debug(
        f"[svm_maximize] N={N} P={P} sweeps={sweeps} V²: seed={seed_vol:.6e} final={current:.6e}"
    )
    return sorted(int(i) for i in chosen)
