# services/error_handler.py
import traceback
import logging
from typing import Optional
from services.notify import build_alert, config_alert, io_alert, notify_api

# Logger riêng cho error handler
logger = logging.getLogger("Unmix3D.errors")
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter(
        "[%(asctime)s] [%(levelname)s] %(message)s", "%Y-%m-%d %H:%M:%S"
    )
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.ERROR)

# =========================
# 1. Mã thoát ổn định cho CLI
# =========================
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

# =========================
# 2. Phân cấp exception
# =========================
class UnmixError(Exception):
    """Lỗi gốc của toolkit; mỗi lớp con mang exit_code và alert_type riêng."""
    exit_code: int = EXIT_FAILURE
    alert_type: str = "system"


class UsageError(UnmixError, ValueError):
    exit_code = EXIT_USAGE
    alert_type = "config"


class DimensionError(UsageError):
    """Kích thước mảng / tham số không khớp nhau."""
    alert_type = "data"


class ResourceLimitError(UsageError):
    """Cấu hình vượt quá ngân sách bộ nhớ."""
    alert_type = "resource"


class CubeIOError(UnmixError, OSError):
    exit_code = EXIT_IO
    alert_type = "io"


class CubeFormatError(CubeIOError):
    """Sai magic, header hỏng hoặc kích thước tràn."""


class TruncatedCubeError(CubeFormatError):
    """Payload ngắn hơn L·H·W số thực."""


class NumericalError(UnmixError, ArithmeticError):
    exit_code = EXIT_NUMERICAL
    alert_type = "numerical"


class RankError(NumericalError):
    """Dữ liệu suy biến (mọi pixel giống nhau)."""


class NormalizationError(NumericalError):
    """Tích vô hướng với hướng trung bình gần 0."""


class ZeroNormError(NumericalError):
    """Phổ có chuẩn bằng 0."""


class GradientCheckError(NumericalError):
    """Sai số gradient vượt ngưỡng."""


def exit_code_for(e: BaseException) -> int:
    """Ánh xạ exception sang mã thoát của CLI."""
    if isinstance(e, UnmixError):
        return e.exit_code
    if isinstance(e, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return EXIT_IO
    if isinstance(e, OSError):
        return EXIT_IO
    if isinstance(e, (FloatingPointError, ArithmeticError)):
        return EXIT_NUMERICAL
    return EXIT_FAILURE

# =========================
# 3. Hàm chuẩn xử lý lỗi
# =========================
def handle_service_error(
    service: str,
    context: str,
    e: Exception,
    alert_type: Optional[str] = None,
    extra_info: Optional[dict] = None,
) -> dict:
    """
    Hàm chuẩn xử lý lỗi cho tất cả service.

    Args:
        service (str): Tên service (vd: 'psvm', 'training', 'cli').
        context (str): Ngữ cảnh lỗi (vd: 'extract', 'load_cube').
        e (Exception): Exception bắt được.
        alert_type (str, optional): khóa của notify.ALERT_KINDS;
            mặc định lấy theo loại exception.
        extra_info (dict, optional): Thông tin bổ sung để dễ phân tích.

    Returns:
        dict: Thông tin lỗi đã chuẩn hóa, gồm status, message, detail, alert, exit_code.
    """
    if alert_type is None:
        alert_type = getattr(e, "alert_type", "system")

    msg = f"[{service}] Lỗi tại {context}: {str(e)}"
    detail = traceback.format_exc()

    logger.error("❌ %s\nChi tiết:\n%s", msg, detail)

    # Luôn gửi notify_api để ghi nhận lỗi
    notify_api(service, "error", msg, hint=context)

    if alert_type == "config":
        alert = config_alert(context, str(e))
    elif alert_type == "io":
        alert = io_alert(service, str(e))
    else:
        alert = build_alert(alert_type, msg, context=extra_info)

    return {
        "status": "error",
        "service": service,
        "context": context,
        "message": msg,
        "detail": detail,
        "alert": alert,
        "exit_code": exit_code_for(e),
    }
