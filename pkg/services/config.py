# services/config.py
import os
import sys
import json
import logging
import psutil
from dotenv import load_dotenv
from typing import Dict, Any

from services.error_handler import ResourceLimitError
from services.notify import resource_alert

logger = logging.getLogger("Unmix3D.config")

# 1. Load biến môi trường từ .env
load_dotenv()

# =========================
# 2. Các hằng số cấu hình chính
# =========================
# Logging & App
LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
PORT: int = int(os.getenv("PORT", "8000"))
SERVICE_NAME: str = os.getenv("SERVICE_NAME", "unmix3d")
APP_VERSION: str = os.getenv("APP_VERSION", "1.0.0")
ENV: str = os.getenv("ENV", "production")

# Song song hóa: 0 hoặc không đặt = dùng toàn bộ core
UNMIX3D_THREADS: int = int(os.getenv("UNMIX3D_THREADS", "0") or "0")

# Mạng 3D-CSCNet (mặc định theo bộ dữ liệu mô phỏng)
DEFAULT_CHANNELS: int = int(os.getenv("DEFAULT_CHANNELS", "48"))
DEFAULT_ITERS: int = int(os.getenv("DEFAULT_ITERS", "6"))
DEFAULT_LR_E: float = float(os.getenv("DEFAULT_LR_E", "1.2e-4"))
DEFAULT_LR_D: float = float(os.getenv("DEFAULT_LR_D", "1e-4"))
DEFAULT_T1: int = int(os.getenv("DEFAULT_T1", "900"))
DEFAULT_EPOCHS: int = int(os.getenv("DEFAULT_EPOCHS", "1000"))
DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "0"))
COS_EPS: float = float(os.getenv("COS_EPS", "1e-7"))
LOG_INTERVAL: int = int(os.getenv("LOG_INTERVAL", "100"))

# PSVM
PSVM_SIGMA: float = float(os.getenv("PSVM_SIGMA", "1.0"))
PSVM_MAX_SWEEPS: int = int(os.getenv("PSVM_MAX_SWEEPS", "50"))
# 0 = tắt đối chiếu vét cạn trong svm_maximize
SVM_EXHAUSTIVE_LIMIT: int = int(os.getenv("SVM_EXHAUSTIVE_LIMIT", "0"))
SNR_THRESHOLD_OFFSET: float = float(os.getenv("SNR_THRESHOLD_OFFSET", "0.0"))

# Dữ liệu mô phỏng
FIELD_SIGMA: float = float(os.getenv("FIELD_SIGMA", "8.0"))
FIELD_AMPLITUDE: float = float(os.getenv("FIELD_AMPLITUDE", "3.0"))

# Monitoring thresholds
MEMORY_FRACTION: float = float(os.getenv("MEMORY_FRACTION", "0.8"))
CPU_THRESHOLD: float = float(os.getenv("CPU_THRESHOLD", "80.0"))
RAM_THRESHOLD: float = float(os.getenv("RAM_THRESHOLD", "80.0"))
DISK_THRESHOLD: float = float(os.getenv("DISK_THRESHOLD", "90.0"))

# Bảng siêu tham số theo bộ dữ liệu: (L_E, L_D, T_1, T)
DATASET_PRESETS: Dict[str, Dict[str, float]] = {
    "houston": {"lr_e": 1e-4, "lr_d": 1e-5, "t1": 500, "epochs": 1000},
    "moffett": {"lr_e": 2e-4, "lr_d": 2e-4, "t1": 1890, "epochs": 2000},
    "jasper": {"lr_e": 1.2e-4, "lr_d": 1e-4, "t1": 500, "epochs": 2000},
    "simulated": {"lr_e": 1.2e-4, "lr_d": 1e-4, "t1": 900, "epochs": 1000},
}

# Các biến thể ablation: huấn luyện một giai đoạn, số IM, số filter
ABLATION_PRESETS: Dict[str, Dict[str, int]] = {
    "AE2": {"t1": 0},
    "AE5": {"iters": 5},
    "AE6": {"iters": 7},
    "AE7": {"channels": 32},
    "AE8": {"channels": 64},
}

# =========================
# 3. Hàm tiện ích chung
# =========================
def to_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, ensure_ascii=False, indent=2)

def format_size(bytes_val: int) -> str:
    if bytes_val < 1024**2:
        return f"{bytes_val / 1024:.2f} KB"
    elif bytes_val < 1024**3:
        return f"{bytes_val / (1024**2):.2f} MB"
    else:
        return f"{bytes_val / (1024**3):.2f} GB"

def apply_thread_limit(threads: int = UNMIX3D_THREADS) -> bool:
    """
    Đặt OMP/OPENBLAS/MKL_NUM_THREADS = threads (ghi đè giá trị cũ).

    Chỉ có hiệu lực nếu gọi trước khi numpy được import (cli.py và app.py gọi ngay
    sau khi nạp config). Trả về False nếu numpy đã được nạp, khi đó BLAS giữ số luồng cũ.
    """
    if not threads or threads <= 0:
        return False
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)
    effective = "numpy" not in sys.modules
    if not effective:
        logger.warning(f"⚠️ [apply_thread_limit] numpy đã được nạp; giới hạn {threads} luồng có thể không có hiệu lực")
    return effective

# =========================
# 4. Kiểm tra tài nguyên hệ thống
# =========================
def check_resources(cpu_threshold: float = CPU_THRESHOLD,
                    ram_threshold: float = RAM_THRESHOLD,
                    disk_threshold: float = DISK_THRESHOLD) -> Dict[str, Any]:
    cpu_usage = psutil.cpu_percent(interval=0.1)
    ram_usage = psutil.virtual_memory().percent
    disk_usage = psutil.disk_usage('/').percent

    alerts = []
    if cpu_usage > cpu_threshold:
        alerts.append(resource_alert("CPU", cpu_usage, cpu_threshold))
    if ram_usage > ram_threshold:
        alerts.append(resource_alert("RAM", ram_usage, ram_threshold))
    if disk_usage > disk_threshold:
        alerts.append(resource_alert("Disk", disk_usage, disk_threshold))

    return {"cpu": cpu_usage, "ram": ram_usage, "disk": disk_usage, "alerts": alerts}

def check_memory_budget(required_bytes: int, fraction: float = MEMORY_FRACTION) -> Dict[str, Any]:
    """Từ chối cấu hình quá lớn so với RAM còn trống (kiểm tra trước khi huấn luyện)."""
    available = psutil.virtual_memory().available
    budget = int(available * fraction)
    if required_bytes > budget:
        raise ResourceLimitError(
            f"Cấu hình cần ~{format_size(required_bytes)} nhưng chỉ được phép "
            f"{format_size(budget)} ({fraction:.0%} RAM trống)"
        )
    return {"required": required_bytes, "budget": budget}

# =========================
# 5. Trả về config
# =========================
def get_config() -> Dict[str, Any]:
    return {
        "LOG_LEVEL": LOG_LEVEL,
        "PORT": PORT,
        "SERVICE_NAME": SERVICE_NAME,
        "APP_VERSION": APP_VERSION,
        "ENV": ENV,
        "UNMIX3D_THREADS": UNMIX3D_THREADS,
        "NETWORK": {
            "DEFAULT_CHANNELS": DEFAULT_CHANNELS,
            "DEFAULT_ITERS": DEFAULT_ITERS,
            "DEFAULT_LR_E": DEFAULT_LR_E,
            "DEFAULT_LR_D": DEFAULT_LR_D,
            "DEFAULT_T1": DEFAULT_T1,
            "DEFAULT_EPOCHS": DEFAULT_EPOCHS,
            "DEFAULT_SEED": DEFAULT_SEED,
            "COS_EPS": COS_EPS,
            "LOG_INTERVAL": LOG_INTERVAL,
        },
        "PSVM": {
            "PSVM_SIGMA": PSVM_SIGMA,
            "PSVM_MAX_SWEEPS": PSVM_MAX_SWEEPS,
            "SVM_EXHAUSTIVE_LIMIT": SVM_EXHAUSTIVE_LIMIT,
            "SNR_THRESHOLD_OFFSET": SNR_THRESHOLD_OFFSET,
        },
        "THRESHOLDS": {
            "MEMORY_FRACTION": MEMORY_FRACTION,
            "CPU_THRESHOLD": CPU_THRESHOLD,
            "RAM_THRESHOLD": RAM_THRESHOLD,
            "DISK_THRESHOLD": DISK_THRESHOLD,
        }
    }
