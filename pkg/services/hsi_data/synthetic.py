# services/hsi_data/synthetic.py
import logging
import math
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from services.error_handler import DimensionError, UsageError
from services.hsi_data.filters import gaussian_kernel_1d
from services.hsi_data.types import (
    AbundanceMaps,
    EndmemberMatrix,
    HsiCube,
    SnrLevel,
    SyntheticScene,
)

logger = logging.getLogger("HsiData")

MIN_PAIRWISE_SAD = 0.15
MAX_ENDMEMBER_RETRIES = 1000
NOISELESS = "noiseless"

# ===== Seed =====
def derive_seed(seed: int, stream: int) -> int:
    """Tách seed con tất định cho từng bước sinh dữ liệu."""
    state = np.random.SeedSequence([int(seed), int(stream)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def is_noiseless(snr_db: Optional[SnrLevel]) -> bool:
    if snr_db is None:
        return True
    if isinstance(snr_db, str):
        if snr_db.strip().lower() == NOISELESS:
            return True
        raise UsageError(f"SNR không hợp lệ: {snr_db!r}")
    return math.isinf(float(snr_db)) and float(snr_db) > 0

# ===== Nhiễu =====
def add_noise_at_snr(cube: HsiCube, snr_db: SnrLevel, seed: int) -> HsiCube:
    """Cộng nhiễu Gaussian i.i.d. với phương sai mean(Y²)·10^(−snr/10)."""
    if is_noiseless(snr_db):
        return HsiCube(cube.values.copy())
    snr = float(snr_db)
    if not math.isfinite(snr):
        raise UsageError(f"SNR phải hữu hạn, nhận {snr_db}")
    signal_power = float(np.mean(cube.values ** 2))
    noise_std = math.sqrt(signal_power * 10.0 ** (-snr / 10.0))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(cube.shape) * noise_std
    logger.debug(f"[add_noise_at_snr] snr={snr} dB noise_std={noise_std:.3e}")
    return HsiCube(cube.values + noise)

# ===== Độ phủ theo trường Gaussian =====
def generate_gaussian_field_abundances(
    materials: int,
    height: int,
    width: int,
    field_sigma: float = 8.0,
    seed: int = 0,
    amplitude: float = 3.0,
) -> AbundanceMaps:
    """
    Nhiễu trắng → làm mượt 2D (σ_field) → chuẩn hóa độ lệch chuẩn về `amplitude`
    → softmax theo từng pixel (nhiệt độ 1).
    """
    if materials < 2:
        raise UsageError(f"Cần P ≥ 2, nhận {materials}")
    if height < 1 or width < 1:
        raise DimensionError(f"Kích thước không hợp lệ: {height}×{width}")
    rng = np.random.default_rng(seed)
    fields = rng.standard_normal((materials, height, width))
    kernel = gaussian_kernel_1d(field_sigma)
    fields = correlate1d(fields, kernel, axis=1, mode="reflect")
    fields = correlate1d(fields, kernel, axis=2, mode="reflect")

    for p in range(materials):
        f = fields[p] - fields[p].mean()
        std = f.std()
        fields[p] = f / std * amplitude if std > 0 else f

    fields -= fields.max(axis=0, keepdims=True)
    expf = np.exp(fields)
    abundances = expf / expf.sum(axis=0, keepdims=True)
    return AbundanceMaps(abundances)


def plant_pure_pixels(abundances: AbundanceMaps, seed: int) -> AbundanceMaps:
    """Đặt mỗi vật liệu p vào đúng một pixel thuần (vector e_p), vị trí khác nhau."""
    P, H, W = abundances.values.shape
    if P > H * W:
        raise DimensionError(f"Không đủ pixel ({H * W}) cho {P} pixel thuần")
    rng = np.random.default_rng(seed)
    positions = rng.choice(H * W, size=P, replace=False)
    flat = abundances.values.reshape(P, H * W).copy()
    for p, j in enumerate(positions):
        flat[:, j] = 0.0
        flat[p, j] = 1.0
    return AbundanceMaps(flat.reshape(P, H, W))

# ===== Thư viện endmember tổng hợp =====
def _spectral_angle(a: np.ndarray, b: np.ndarray) -> float:
    cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(min(1.0, max(-1.0, cos)))


def _random_bump_spectrum(rng: np.random.Generator, bands: int) -> np.ndarray:
    l = np.arange(bands, dtype=np.float64)
    n_bumps = int(rng.integers(3, 7))
    spectrum = np.full(bands, 0.05)
    for _ in range(n_bumps):
        center = rng.uniform(0.0, bands - 1)
        width = max(1.0, rng.uniform(bands / 25.0, bands / 5.0))
        amp = rng.uniform(0.2, 1.0)
        spectrum += amp * np.exp(-0.5 * ((l - center) / width) ** 2)
    return spectrum / spectrum.max()


def generate_synthetic_endmembers(bands: int, materials: int, seed: int) -> EndmemberMatrix:
    """P phổ dương, mượt, max = 1, SAD từng cặp ≥ 0.15 (sinh lại khi vi phạm)."""
    if materials < 1 or materials >= bands:
        raise UsageError(f"Cần 1 ≤ P < L, nhận P={materials}, L={bands}")
    rng = np.random.default_rng(seed)
    columns = []
    retries = 0
    while len(columns) < materials:
        candidate = _random_bump_spectrum(rng, bands)
        if all(_spectral_angle(candidate, c) >= MIN_PAIRWISE_SAD for c in columns):
            columns.append(candidate)
            continue
        retries += 1
        if retries > MAX_ENDMEMBER_RETRIES:
            raise UsageError(
                f"Không sinh được {materials} endmember đủ tách biệt với L={bands} "
                f"sau {MAX_ENDMEMBER_RETRIES} lần thử"
            )
    return EndmemberMatrix(np.stack(columns, axis=1))

# ===== Tổng hợp cảnh =====
def mix(endmembers: EndmemberMatrix, abundances: AbundanceMaps) -> HsiCube:
    """Mô hình trộn tuyến tính không nhiễu: Y = E·A cho từng pixel."""
    E = endmembers.values
    A = abundances.values
    if E.shape[1] != A.shape[0]:
        raise DimensionError(f"E có P={E.shape[1]} nhưng A có P={A.shape[0]}")
    P, H, W = A.shape
    Y = E @ A.reshape(P, H * W)
    return HsiCube(Y.reshape(E.shape[0], H, W))


def synthesize_scene(
    endmembers: EndmemberMatrix,
    abundances: AbundanceMaps,
    snr_db: SnrLevel,
    seed: int,
) -> SyntheticScene:
    clean = mix(endmembers, abundances)
    cube = add_noise_at_snr(clean, snr_db, seed)
    logger.info(
        f"✅ [synthesize_scene] L={cube.bands} H={cube.height} W={cube.width} "
        f"P={abundances.materials} snr={snr_db}"
    )
    return SyntheticScene(
        cube=cube,
        gt_endmembers=endmembers,
        gt_abundances=abundances,
        snr_db=snr_db,
        seed=seed,
    )


def simulate_scene(
    bands: int,
    height: int,
    width: int,
    materials: int,
    snr_db: SnrLevel,
    seed: int,
    field_sigma: float = 8.0,
    amplitude: float = 3.0,
    pure_pixels: bool = False,
) -> SyntheticScene:
    """Sinh trọn một cảnh mô phỏng từ một seed duy nhất."""
    E = generate_synthetic_endmembers(bands, materials, derive_seed(seed, 0))
    A = generate_gaussian_field_abundances(
        materials, height, width, field_sigma, derive_seed(seed, 1), amplitude
    )
    if pure_pixels:
        A = plant_pure_pixels(A, derive_seed(seed, 3))
    return synthesize_scene(E, A, snr_db, derive_seed(seed, 2))
