# services/report.py
from typing import Dict, List

import pandas as pd

from services.metrics import EvalReport

BENCHMARK_COLUMNS = ["runs", "mean_sad", "std_sad", "median_sad", "mean_rmse", "std_rmse"]


def _fmt(digits: int):
    return lambda v: f"{v:.{digits}f}"


def format_eval_table(report: EvalReport) -> str:
    """Bảng SAD/RMSE theo vật liệu, dòng cuối là trung bình."""
    df = report.to_frame().rename(
        columns={"matched_estimate": "matched", "sad": "SAD (rad)", "rmse": "RMSE"}
    )
    return df.to_string(index=False, float_format=_fmt(6))


def gradcheck_frame(rows: List[Dict]) -> pd.DataFrame:
    df = pd.DataFrame(rows, columns=["tensor", "max_rel_error", "checked", "excluded", "passed", "skipped"])
    df["skipped"] = [bool(r.get("skipped", False)) for r in rows]
    df["status"] = [
        "⏭ skipped" if skipped else ("✅ ok" if passed else "❌ FAIL")
        for passed, skipped in zip(df["passed"], df["skipped"])
    ]
    return df


def format_gradcheck_table(rows: List[Dict]) -> str:
    df = gradcheck_frame(rows)[["tensor", "max_rel_error", "checked", "excluded", "status"]]
    return df.to_string(index=False, formatters={"max_rel_error": lambda v: f"{v:.3e}"})


def format_benchmark_summary(summary: Dict[str, Dict]) -> str:
    """Mỗi phương pháp: SAD trung bình ± độ lệch chuẩn (và trung vị) qua các seed."""
    df = pd.DataFrame([{"method": method, **s} for method, s in summary.items()]).set_index("method")
    df = df[[c for c in BENCHMARK_COLUMNS if c in df.columns]]
    return df.to_string(float_format=_fmt(5))


def format_train_summary(result: Dict) -> str:
    lines = ["🧪 Kết quả unmix:"]
    lines.append(f"- Số epoch: {result.get('epochs')} (giai đoạn I: {result.get('t1')})")
    if result.get("final_loss") is not None:
        lines.append(f"- Loss cuối: {result['final_loss']:.6f}")
    for key in ("abundance_dir", "endmembers", "loss_csv"):
        if result.get(key):
            lines.append(f"- {key}: {result[key]}")
    return "\n".join(lines)
