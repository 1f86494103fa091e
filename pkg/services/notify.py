# services/notify.py
import logging
from datetime import datetime, timezone
from typing import Dict, Optional

logger = logging.getLogger("notify")
if not logger.handlers:
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("[%(asctime)s] [%(levelname)s] %(message)s", "%Y-%m-%d %H:%M:%S"))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

# =========================
# Bảng gợi ý
# =========================
# Gợi ý sửa lỗi theo lệnh / endpoint
ACTION_HINTS: Dict[str, str] = {
    "simulate": "Cần bands > materials ≥ 2; SNR là số dB hoặc 'noiseless'.",
    "extract": "Kiểm tra file .hsc và số vật liệu P; nhánh PSVM được ghi trong manifest.",
    "unmix": "Giảm --channels/--iters nếu thiếu RAM; file --init phải có đúng L×P.",
    "eval": "Endmember/abundance ước lượng phải cùng P và cùng kích thước ảnh với GT.",
    "gradcheck": "Xem tensor đầu tiên vượt ngưỡng trong bảng gradcheck.",
    "benchmark": "Giảm số seed hoặc kích thước cảnh.",
}
DEFAULT_HINT = "Xem log chi tiết và manifest của lần chạy."

# kind -> (mức độ mặc định, tiền tố thông điệp, hướng dẫn)
ALERT_KINDS: Dict[str, tuple] = {
    "system": ("error", "", DEFAULT_HINT),
    "data": ("warning", "Dữ liệu bất thường: ", "Kiểm tra kích thước cube, P và ANC/ASC của abundance."),
    "io": ("error", "Không đọc/ghi được file ", "Kiểm tra đường dẫn, magic HSC1 và độ dài payload."),
    "numerical": ("error", "Lỗi số học: ", "Thử seed khác, giảm learning rate hoặc kiểm tra hạng dữ liệu."),
    "config": ("error", "Lỗi cấu hình ", "Kiểm tra preset, biến môi trường .env và tham số dòng lệnh."),
    "resource": ("warning", "Tài nguyên ", "Giảm UNMIX3D_THREADS hoặc kích thước mạng (C, K)."),
}

_LEVELS = {
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
    "critical": logging.CRITICAL,
}


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S")

# =========================
# 1. Ghi nhận kết quả một lệnh
# =========================
def notify_api(action: str, status: str, detail: str = "", hint: str = "") -> Dict:
    """Log kết quả của `action` (simulate, extract, ...) và trả về bản ghi kèm gợi ý sửa lỗi."""
    ok = status == "ok"
    if ok:
        logger.info(f"✅ {action}: {detail}")
    else:
        logger.error(f"❌ {action}: {detail} | ngữ cảnh: {hint}")
    return {
        "ts": _now(),
        "status": status,
        "action": action,
        "message": detail,
        "hint": hint,
        "fix_suggestion": "" if ok else ACTION_HINTS.get(action) or ACTION_HINTS.get(hint, DEFAULT_HINT),
    }

# =========================
# 2. Cảnh báo
# =========================
def system_alert(message: str, severity: str = "error", context: Optional[Dict] = None,
                 kind: str = "system") -> Dict:
    logger.log(_LEVELS.get(severity, logging.ERROR), f"[{kind}/{severity}] {message}")
    return {
        "status": "system_alert",
        "alert": {
            "ts": _now(),
            "type": "system",
            "kind": kind,
            "severity": severity,
            "message": message,
            "context": context or {},
            "guidance": ALERT_KINDS.get(kind, ALERT_KINDS["system"])[2],
        },
    }


def build_alert(kind: str, message: str, context: Optional[Dict] = None,
                severity: Optional[str] = None) -> Dict:
    """Cảnh báo theo loại trong ALERT_KINDS; loại lạ được ghi như cảnh báo hệ thống."""
    if kind not in ALERT_KINDS:
        return system_alert(f"⚠️ Loại cảnh báo lạ ({kind}): {message}", severity or "error", context)
    default_severity, prefix, _ = ALERT_KINDS[kind]
    return system_alert(prefix + message, severity or default_severity, context, kind=kind)


def io_alert(service: str, error: str) -> Dict:
    return build_alert("io", f"({service}): {error}", {"service": service, "error": error})


def config_alert(param: str, error: str) -> Dict:
    return build_alert("config", f"{param}: {error}", {"param": param, "error": error})


def resource_alert(resource: str, usage: float, threshold: float) -> Dict:
    severity = "warning" if usage > threshold else "info"
    return build_alert(
        "resource",
        f"{resource} đang dùng {usage:.1f}% (ngưỡng {threshold:.1f}%)",
        {"resource": resource, "usage": usage, "threshold": threshold},
        severity=severity,
    )
