# services/metrics.py
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from services.error_handler import DimensionError, UsageError, ZeroNormError

logger = logging.getLogger("Metrics")

MAX_MATCH_MATERIALS = 8

# ===== Chỉ số từng vật liệu =====
def sad_endmember(e: np.ndarray, e_hat: np.ndarray) -> float:
    """Góc phổ (radian), không kẹp cosine ngoài sai số làm tròn."""
    e = np.asarray(e, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e.shape != e_hat.shape:
        raise DimensionError(f"Hai phổ khác độ dài: {e.shape} vs {e_hat.shape}")
    ne, nh = np.linalg.norm(e), np.linalg.norm(e_hat)
    if ne == 0 or nh == 0:
        raise ZeroNormError("Endmember có chuẩn bằng 0")
    cos = float(e @ e_hat) / (ne * nh)
    return math.acos(min(1.0, max(-1.0, cos)))


def rmse_material(a: np.ndarray, a_hat: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    a_hat = np.asarray(a_hat, dtype=np.float64).ravel()
    if a.shape != a_hat.shape:
        raise DimensionError(f"Bản đồ khác số pixel: {a.size} vs {a_hat.size}")
    return float(np.sqrt(np.mean((a - a_hat) ** 2)))


def _sad_matrix(E_est: np.ndarray, E_gt: np.ndarray) -> np.ndarray:
    """S[i, j] = SAD(cột i của E_gt, cột j của E_est)."""
    P = E_gt.shape[1]
    return np.array([[sad_endmember(E_gt[:, i], E_est[:, j]) for j in range(P)] for i in range(P)])

# ===== Ghép cặp vật liệu =====
def match_materials(E_est, E_gt) -> Tuple[int, ...]:
    """
    Hoán vị perm tối thiểu tổng SAD: vật liệu GT i ↔ cột ước lượng perm[i].
    Vét cạn P! (P ≤ 8), hòa thì lấy hoán vị nhỏ nhất theo thứ tự từ điển.
    """
    Ee = np.asarray(getattr(E_est, "values", E_est), dtype=np.float64)
    Eg = np.asarray(getattr(E_gt, "values", E_gt), dtype=np.float64)
    if Ee.shape != Eg.shape or Ee.ndim != 2:
        raise DimensionError(f"E_est {Ee.shape} và E_gt {Eg.shape} phải cùng dạng L×P")
    P = Eg.shape[1]
    if P > MAX_MATCH_MATERIALS:
        raise UsageError(f"Ghép cặp vét cạn chỉ hỗ trợ P ≤ {MAX_MATCH_MATERIALS}, nhận {P}")
    S = _sad_matrix(Ee, Eg)
    rows = np.arange(P)
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(P)):
        cost = float(S[rows, list(perm)].sum())
        if cost < best_cost:
            best, best_cost = perm, cost
    return tuple(int(i) for i in best)

# ===== Báo cáo đánh giá =====
@dataclass(frozen=True)
class EvalReport:
    permutation: Tuple[int, ...]
    sad: Tuple[float, ...]
    rmse: Tuple[float, ...]
    mean_sad: float
    mean_rmse: float

    def to_frame(self) -> pd.DataFrame:
        """Mỗi vật liệu một dòng, cộng dòng 'average'."""
        P = len(self.sad)
        df = pd.DataFrame(
            {
                "material": [str(i + 1) for i in range(P)],
                "matched_estimate": [str(j + 1) for j in self.permutation],
                "sad": list(self.sad),
                "rmse": list(self.rmse),
            }
        )
        avg = pd.DataFrame(
            {"material": ["average"], "matched_estimate": [""], "sad": [self.mean_sad], "rmse": [self.mean_rmse]}
        )
        return pd.concat([df, avg], ignore_index=True)

    def as_dict(self) -> dict:
        return {
            "permutation": list(self.permutation),
            "sad": list(self.sad),
            "rmse": list(self.rmse),
            "mean_sad": self.mean_sad,
            "mean_rmse": self.mean_rmse,
        }


def evaluate(E_est, A_est, E_gt, A_gt) -> EvalReport:
    """Ghép cặp theo SAD endmember rồi dùng cùng hoán vị cho RMSE abundance."""
    Ee = np.asarray(getattr(E_est, "values", E_est), dtype=np.float64)
    Eg = np.asarray(getattr(E_gt, "values", E_gt), dtype=np.float64)
    Ae = np.asarray(getattr(A_est, "values", A_est), dtype=np.float64)
    Ag = np.asarray(getattr(A_gt, "values", A_gt), dtype=np.float64)
    P = Eg.shape[1]
    if Ae.shape != Ag.shape or Ag.shape[0] != P or Ee.shape != Eg.shape:
        raise DimensionError(
            f"Kích thước không nhất quán: E_est {Ee.shape}, E_gt {Eg.shape}, A_est {Ae.shape}, A_gt {Ag.shape}"
        )
    perm = match_materials(Ee, Eg)
    sad = tuple(sad_endmember(Eg[:, i], Ee[:, j]) for i, j in enumerate(perm))
    rmse = tuple(rmse_material(Ag[i], Ae[j]) for i, j in enumerate(perm))
    report = EvalReport(
        permutation=perm,
        sad=sad,
        rmse=rmse,
        mean_sad=float(np.mean(sad)),
        mean_rmse=float(np.mean(rmse)),
    )
    logger.info(f"✅ [evaluate] SAD TB={report.mean_sad:.4f} RMSE TB={report.mean_rmse:.4f} perm={perm}")
    return report


def summarize_runs(reports: Sequence[Union[EvalReport, Mapping]]) -> Dict[str, float]:
    """
    Trung bình ± độ lệch chuẩn (ddof=0) của SAD/RMSE trung bình qua nhiều lần chạy.

    Nhận EvalReport hoặc dict có 'mean_sad' (và tùy chọn 'mean_rmse').
    """
    if not reports:
        raise UsageError("Không có lần chạy nào để tổng hợp")

    def _get(r, key):
        return r.get(key) if isinstance(r, Mapping) else getattr(r, key)

    sads = np.array([_get(r, "mean_sad") for r in reports], dtype=np.float64)
    out = {
        "runs": len(reports),
        "mean_sad": float(sads.mean()),
        "std_sad": float(sads.std()),
        "median_sad": float(np.median(sads)),
    }
    rmses = [_get(r, "mean_rmse") for r in reports]
    if all(v is not None for v in rmses):
        rmses = np.array(rmses, dtype=np.float64)
        out["mean_rmse"] = float(rmses.mean())
        out["std_rmse"] = float(rmses.std())
    return out


def endmember_sad_only(E_est, E_gt) -> Tuple[Tuple[int, ...], List[float], float]:
    """Chỉ so endmember (cho extract/benchmark khi không có abundance)."""
    Ee = np.asarray(getattr(E_est, "values", E_est), dtype=np.float64)
    Eg = np.asarray(getattr(E_gt, "values", E_gt), dtype=np.float64)
    perm = match_materials(Ee, Eg)
    sad = [sad_endmember(Eg[:, i], Ee[:, j]) for i, j in enumerate(perm)]
    return perm, sad, float(np.mean(sad))
