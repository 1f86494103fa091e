# app.py
import json
import math
import logging
from datetime import datetime, timezone
from typing import Optional

from services.config import (
    APP_VERSION,
    DEFAULT_SEED,
    LOG_LEVEL,
    PSVM_SIGMA,
    SERVICE_NAME,
    apply_thread_limit,
    check_resources,
    get_config,
)

# Giới hạn luồng BLAS phải đặt trước khi numpy được nạp
apply_thread_limit()

from starlette.requests import Request  # noqa: E402
from fastapi import APIRouter, FastAPI, Query  # noqa: E402
from fastapi.middleware.cors import CORSMiddleware  # noqa: E402
from fastapi.responses import JSONResponse  # noqa: E402
from starlette.middleware.base import BaseHTTPMiddleware  # noqa: E402
from starlette.responses import Response  # noqa: E402

from dotenv import load_dotenv  # noqa: E402

from services.error_handler import (  # noqa: E402
    CubeIOError,
    NumericalError,
    UsageError,
    handle_service_error,
)
from services.notify import notify_api  # noqa: E402
from services.pipeline import (  # noqa: E402
    METHODS,
    run_eval,
    run_extract,
    run_gradcheck,
    run_simulate,
    run_unmix,
)

# ==============================
# Logging setup
# ==============================
logging.basicConfig(
    level=LOG_LEVEL,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s"
)
logger = logging.getLogger("Unmix3D")

load_dotenv()

# ==============================
# FastAPI app initialization
# ==============================
app = FastAPI(
    title="Unmix3D",
    description="Blind hyperspectral unmixing: PSVM endmember extraction + 3D-CSCNet abundance estimation",
    version=APP_VERSION,
)

# ==============================
# Middleware: Wrap response & sanitize NaN/Inf
# ==============================
def clean_nan(obj):
    """Đệ quy thay NaN/Inf bằng None để JSON hợp lệ."""
    if isinstance(obj, dict):
        return {k: clean_nan(v) for k, v in obj.items()}
    elif isinstance(obj, list):
        return [clean_nan(v) for v in obj]
    elif isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None
    return obj


class ResponseWrapperMiddleware(BaseHTTPMiddleware):
    async def dispatch(self, request: Request, call_next):
        try:
            response = await call_next(request)
            if response.headers.get("content-type", "").startswith("application/json"):
                raw = b""
                async for chunk in response.body_iterator:
                    raw += chunk
                try:
                    body = json.loads(raw.decode())
                except Exception:
                    return Response(content=raw, status_code=response.status_code, media_type="application/json")
                body = clean_nan(body)
                if isinstance(body, dict) and {"status", "message", "data"} <= body.keys():
                    return JSONResponse(content=body, status_code=response.status_code)
                return JSONResponse(
                    content={"status": "ok", "message": "Thành công", "data": body},
                    status_code=response.status_code
                )
            return response
        except Exception as e:
            return JSONResponse(
                content={"status": "error", "message": str(e), "data": {}},
                status_code=500
            )

app.add_middleware(ResponseWrapperMiddleware)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)

# ==============================
# Startup
# ==============================
@app.on_event("startup")
async def startup_event():
    logger.info("🚀 Application startup: dịch vụ unmixing sẵn sàng")
    try:
        check_resources()
        logger.info("✅ Kiểm tra tài nguyên thành công")
    except Exception as e:
        logger.error("❌ Lỗi khi kiểm tra tài nguyên: %s", e)

# ==============================
# Error mapping
# ==============================
def http_status_for(e: Exception) -> int:
    if isinstance(e, UsageError):
        return 400
    if isinstance(e, CubeIOError):
        return 404 if isinstance(e.__cause__, FileNotFoundError) else 500
    if isinstance(e, FileNotFoundError):
        return 404
    if isinstance(e, NumericalError):
        return 422
    return 500


def error_response(service: str, context: str, e: Exception, extra_info: Optional[dict] = None) -> JSONResponse:
    info = handle_service_error(service=service, context=context, e=e, extra_info=extra_info)
    return JSONResponse(
        content={
            "status": "error",
            "message": info["message"],
            "data": {
                "service": info["service"],
                "context": info["context"],
                "exit_code": info["exit_code"],
                "alert": info["alert"],
            },
        },
        status_code=http_status_for(e),
    )

# ==============================
# Router & Endpoints
# ==============================
router = APIRouter()


@router.get("/health", tags=["System"])
def health():
    """Tình trạng tài nguyên và cấu hình."""
    try:
        resources = check_resources()
        return {
            "status": "ok" if not resources["alerts"] else "warning",
            "message": "Báo cáo tình trạng hệ thống",
            "data": {
                "config": get_config(),
                "resources": resources,
                "system_time": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S"),
                "app_version": APP_VERSION,
            },
        }
    except Exception as e:
        return error_response("health_route", "health", e)


@router.get("/version", tags=["System"])
def version_info():
    return {
        "status": "ok",
        "message": "Thông tin phiên bản và cấu hình",
        "data": {"service": SERVICE_NAME, "app_version": APP_VERSION, "config": get_config()},
    }


@router.post("/v1/simulate", tags=["Unmixing"])
def simulate(
    out_dir: str = Query(..., description="Thư mục ghi kết quả"),
    bands: int = Query(..., ge=1),
    height: int = Query(..., ge=1),
    width: int = Query(..., ge=1),
    materials: int = Query(...),
    snr: str = Query("noiseless", description="dB hoặc 'noiseless'"),
    seed: int = Query(DEFAULT_SEED),
    pure_pixels: bool = Query(False),
):
    params = {"bands": bands, "height": height, "width": width, "materials": materials, "snr": snr, "seed": seed}
    try:
        data = run_simulate(bands, height, width, materials, snr, seed, out_dir, pure_pixels=pure_pixels)
        notify_api("simulate", "ok", f"Đã sinh cảnh tại {out_dir}")
        return {"status": "ok", "message": "Đã sinh cảnh mô phỏng", "data": data}
    except Exception as e:
        return error_response("simulate", "run_simulate", e, extra_info=params)


@router.post("/v1/extract", tags=["Unmixing"])
def extract(
    in_path: str = Query(..., description="File cube .hsc"),
    materials: int = Query(...),
    out: str = Query(..., description="File CSV endmember"),
    method: str = Query("psvm", description=f"Một trong {METHODS}"),
    sigma: float = Query(PSVM_SIGMA, ge=0),
    snr_formula: str = Query("db"),
):
    try:
        data = run_extract(in_path, materials, out, method=method, sigma=sigma, snr_formula=snr_formula)
        return {"status": "ok", "message": "Đã trích endmember", "data": data}
    except Exception as e:
        return error_response("extract", "run_extract", e, extra_info={"in_path": in_path, "method": method})


@router.post("/v1/unmix", tags=["Unmixing"])
def unmix(
    in_path: str = Query(...),
    materials: int = Query(...),
    out_dir: str = Query(...),
    init: Optional[str] = Query(None),
    preset: Optional[str] = Query(None),
    ablation: Optional[str] = Query(None),
    channels: Optional[int] = Query(None),
    iters: Optional[int] = Query(None),
    lr_e: Optional[float] = Query(None),
    lr_d: Optional[float] = Query(None),
    t1: Optional[int] = Query(None),
    epochs: Optional[int] = Query(None),
    seed: Optional[int] = Query(None),
):
    try:
        data = run_unmix(
            in_path, materials, out_dir, init=init, preset=preset, ablation=ablation,
            channels=channels, iters=iters, lr_e=lr_e, lr_d=lr_d, t1=t1, epochs=epochs, seed=seed,
        )
        return {"status": "ok", "message": "Đã huấn luyện và xuất abundance", "data": data}
    except Exception as e:
        return error_response("unmix", "run_unmix", e, extra_info={"in_path": in_path})


@router.post("/v1/eval", tags=["Unmixing"])
def evaluate_run(
    est_endmembers: str = Query(...),
    est_abundances: str = Query(...),
    gt_endmembers: str = Query(...),
    gt_abundances: str = Query(...),
    out: Optional[str] = Query(None),
):
    try:
        report = run_eval(est_endmembers, est_abundances, gt_endmembers, gt_abundances, out)
        return {"status": "ok", "message": "Kết quả đánh giá", "data": report.as_dict()}
    except Exception as e:
        return error_response("eval", "run_eval", e)


@router.post("/v1/gradcheck", tags=["Unmixing"])
def gradcheck(seed: int = Query(DEFAULT_SEED), eps: float = Query(1e-5, gt=0)):
    try:
        report = run_gradcheck(seed=seed, eps=eps)
        return {
            "status": "ok" if report.passed else "error",
            "message": "Gradient khớp sai phân hữu hạn" if report.passed else "Gradient sai lệch",
            "data": {"passed": report.passed, "tensors": report.as_rows()},
        }
    except Exception as e:
        return error_response("gradcheck", "run_gradcheck", e)


@app.get("/", tags=["Root"])
def root():
    return {
        "status": "ok",
        "message": "Unmix3D API đang chạy",
        "data": {
            "system_time": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S"),
            "app_version": APP_VERSION,
        },
    }

app.include_router(router)
