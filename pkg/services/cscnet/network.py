# services/cscnet/network.py
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from services.cscnet.conv import conv3d, conv3d_transpose, conv_output_length
from services.error_handler import DimensionError, UsageError
from services.hsi_data.types import AbundanceMaps, EndmemberMatrix, HsiCube

logger = logging.getLogger("CscNet")

K_IN_SIZE = (15, 3, 3)
K_U_SIZE = (7, 3, 3)
K_D_SIZE = (7, 3, 3)
SPATIAL_PADDING = 1

# w_θ = −softplus(rho) = −0.1 lúc khởi tạo, θ^(0) = softplus(−4)
RHO_INIT = math.log(math.expm1(0.1))
B_THETA_INIT = -4.0

# ===== Cấu hình mạng =====
@dataclass(frozen=True)
class NetworkConfig:
    channels: int
    iters: int
    materials: int
    bands: int
    height: int
    width: int
    ss: int
    p_in: int
    p_u: int

    @property
    def stride(self) -> Tuple[int, int, int]:
        return (self.ss, 1, 1)

    @property
    def in_padding(self) -> Tuple[int, int, int]:
        return (self.p_in, SPATIAL_PADDING, SPATIAL_PADDING)

    @property
    def u_padding(self) -> Tuple[int, int, int]:
        return (self.p_u, SPATIAL_PADDING, SPATIAL_PADDING)

    def as_dict(self) -> dict:
        return {
            "channels": self.channels,
            "iters": self.iters,
            "materials": self.materials,
            "bands": self.bands,
            "height": self.height,
            "width": self.width,
            "ss": self.ss,
            "p_in": self.p_in,
            "p_u": self.p_u,
        }


def solve_depth_padding(L: int, k: int, ss: int, P: int) -> int:
    """Padding nhỏ nhất p ∈ [0, ss] sao cho ⌊(L + 2p − k)/ss⌋ + 1 = P."""
    for p in range(ss + 1):
        if L + 2 * p >= k and (L + 2 * p - k) // ss + 1 == P:
            return p
    raise DimensionError(f"Không có padding ≤ {ss} thỏa ⌊(L+2p−{k})/{ss}⌋+1 = {P} với L={L}")


def make_config(L: int, H: int, W: int, P: int, C: int = 48, K: int = 6) -> NetworkConfig:
    if not 2 <= P < L:
        raise UsageError(f"Cần 2 ≤ P < L, nhận P={P}, L={L}")
    if H < 3 or W < 3:
        raise DimensionError(f"Cần H, W ≥ 3, nhận {H}×{W}")
    if C < 1 or K < 1:
        raise UsageError(f"Cần C ≥ 1 và K ≥ 1, nhận C={C}, K={K}")
    ss = math.ceil(L / P)
    p_in = solve_depth_padding(L, K_IN_SIZE[0], ss, P)
    p_u = solve_depth_padding(L, K_U_SIZE[0], ss, P)
    cfg = NetworkConfig(C, K, P, L, H, W, ss, p_in, p_u)
    logger.debug(f"[make_config] {cfg.as_dict()}")
    return cfg

# ===== Tham số =====
@dataclass(eq=False)
class IterationModuleParams:
    k_in: np.ndarray
    k_u: np.ndarray
    k_d: np.ndarray


@dataclass(eq=False)
class ThresholdParams:
    """Lưu dạng mảng 0 chiều để optimizer cập nhật tại chỗ."""
    rho: np.ndarray
    b_theta: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64).reshape(())
        self.b_theta = np.asarray(self.b_theta, dtype=np.float64).reshape(())

    @property
    def slope(self) -> float:
        return -float(softplus(self.rho))


@dataclass(eq=False)
class NetworkParams:
    modules: List[IterationModuleParams]
    thresholds: ThresholdParams
    g_kernel: np.ndarray
    decoder: np.ndarray

    def named_tensors(self) -> "OrderedDict[str, np.ndarray]":
        """Tên ổn định → tensor (tham chiếu, không copy)."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for k, m in enumerate(self.modules):
            out[f"modules.{k}.k_in"] = m.k_in
            out[f"modules.{k}.k_u"] = m.k_u
            out[f"modules.{k}.k_d"] = m.k_d
        out["thresholds.rho"] = self.thresholds.rho
        out["thresholds.b_theta"] = self.thresholds.b_theta
        out["g_kernel"] = self.g_kernel
        out["decoder"] = self.decoder
        return out

    def map(self, fn) -> "NetworkParams":
        return NetworkParams(
            modules=[IterationModuleParams(fn(m.k_in), fn(m.k_u), fn(m.k_d)) for m in self.modules],
            thresholds=ThresholdParams(fn(self.thresholds.rho), fn(self.thresholds.b_theta)),
            g_kernel=fn(self.g_kernel),
            decoder=fn(self.decoder),
        )

    def zeros_like(self) -> "NetworkParams":
        return self.map(np.zeros_like)

    def copy(self) -> "NetworkParams":
        return self.map(np.array)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.named_tensors().values())


def _uniform_kernel(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    config: NetworkConfig,
    seed: int,
    E_init: Optional[Union[EndmemberMatrix, np.ndarray]] = None,
) -> NetworkParams:
    """Kernel ~ U(±√(6/fan_in)) theo thứ tự k_in, k_u, k_d từng module rồi g; decoder ← E_init."""
    rng = np.random.default_rng(seed)
    C = config.channels
    modules = []
    for _ in range(config.iters):
        modules.append(
            IterationModuleParams(
                k_in=_uniform_kernel(rng, (C, 1, *K_IN_SIZE)),
                k_u=_uniform_kernel(rng, (C, 1, *K_U_SIZE)),
                k_d=_uniform_kernel(rng, (C, 1, *K_D_SIZE)),
            )
        )
    g_kernel = _uniform_kernel(rng, (1, C, 1, 1, 1))

    if E_init is None:
        decoder = rng.uniform(0.0, 1.0, size=(config.bands, config.materials))
    else:
        decoder = np.array(getattr(E_init, "values", E_init), dtype=np.float64)
        if decoder.shape != (config.bands, config.materials):
            raise DimensionError(
                f"E_init có dạng {decoder.shape}, cần {(config.bands, config.materials)}"
            )
    return NetworkParams(
        modules=modules,
        thresholds=ThresholdParams(RHO_INIT, B_THETA_INIT),
        g_kernel=g_kernel,
        decoder=decoder,
    )

# ===== Ngưỡng co =====
def softplus(x):
    return np.logaddexp(0.0, x)


def soft_threshold(x: np.ndarray, theta: float) -> np.ndarray:
    """S_θ(x) = sgn(x)·max(|x| − θ, 0)."""
    if theta < 0:
        raise UsageError(f"θ phải ≥ 0, nhận {theta}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0.0)


def compute_thresholds(tp: ThresholdParams, K: int) -> np.ndarray:
    """θ^(k) = softplus(w_θ·k + b_θ), w_θ = −softplus(rho) < 0."""
    w = -softplus(tp.rho)
    k = np.arange(K, dtype=np.float64)
    return softplus(w * k + tp.b_theta)

# ===== Forward =====
@dataclass(eq=False)
class CscbCache:
    thetas: np.ndarray
    pre: List[np.ndarray] = field(default_factory=list)
    z: List[np.ndarray] = field(default_factory=list)
    v: List[Optional[np.ndarray]] = field(default_factory=list)

    def active_masks(self) -> List[np.ndarray]:
        return [np.abs(u) > t for u, t in zip(self.pre, self.thetas)]


@dataclass(eq=False)
class ForwardCache:
    cscb: CscbCache
    logits: np.ndarray
    abundances: np.ndarray
    reconstruction: np.ndarray


def _as_input(Y, config: NetworkConfig) -> np.ndarray:
    arr = np.asarray(getattr(Y, "values", Y), dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    expected = (1, config.bands, config.height, config.width)
    if arr.shape != expected:
        raise DimensionError(f"Input có dạng {arr.shape}, cấu hình cần {expected}")
    return arr


def _check_params(params: NetworkParams, config: NetworkConfig):
    if len(params.modules) != config.iters:
        raise DimensionError(f"Có {len(params.modules)} module, cấu hình cần {config.iters}")
    if params.decoder.shape != (config.bands, config.materials):
        raise DimensionError(f"Decoder {params.decoder.shape} không khớp cấu hình")
    if params.g_kernel.shape != (1, config.channels, 1, 1, 1):
        raise DimensionError(f"g_kernel {params.g_kernel.shape} không khớp C={config.channels}")


def apply_w_in(Y: np.ndarray, m: IterationModuleParams, config: NetworkConfig) -> np.ndarray:
    return conv3d(Y, m.k_in, config.stride, config.in_padding)


def apply_w_d(z: np.ndarray, m: IterationModuleParams, config: NetworkConfig) -> np.ndarray:
    """z-space → Y-space (tích chập chuyển vị, độ sâu ra = L)."""
    return conv3d_transpose(z, m.k_d, config.stride, config.u_padding, out_depth=config.bands)


def apply_w_u(v: np.ndarray, m: IterationModuleParams, config: NetworkConfig) -> np.ndarray:
    return conv3d(v, m.k_u, config.stride, config.u_padding)


def cscb_forward(Y, params: NetworkParams, config: NetworkConfig):
    """
    Khối 3D-CSC trải phẳng K bước.

    z^(0) = S(W_in^(0) Y); z^(k) = S(z^(k−1) − W_u^(k)(W_d^(k) z^(k−1)) + W_in^(k) Y).
    Trả về (z^(K−1), cache) với cache đủ cho lan truyền ngược.
    """
    Yt = _as_input(Y, config)
    _check_params(params, config)
    thetas = compute_thresholds(params.thresholds, config.iters)
    cache = CscbCache(thetas=thetas)

    z = None
    for k, m in enumerate(params.modules):
        u = apply_w_in(Yt, m, config)
        v = None
        if k > 0:
            v = apply_w_d(z, m, config)
            u = z - apply_w_u(v, m, config) + u
        z = soft_threshold(u, float(thetas[k]))
        cache.pre.append(u)
        cache.z.append(z)
        cache.v.append(v)
    return z, cache


def softmax_materials(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def encoder_forward(Y, params: NetworkParams, config: NetworkConfig):
    """Â = G(z) (gộp kênh 1×1×1), A = softmax theo trục vật liệu."""
    z, cscb = cscb_forward(Y, params, config)
    logits = np.tensordot(params.g_kernel[0, :, 0, 0, 0], z, axes=([0], [0]))
    A = softmax_materials(logits)
    cache = ForwardCache(cscb=cscb, logits=logits, abundances=A, reconstruction=None)
    return AbundanceMaps(A), cache


def decoder_forward(A, decoder: np.ndarray) -> HsiCube:
    """Ŷ(l,x,y) = Σ_p decoder(l,p)·A(p,x,y)."""
    A = np.asarray(getattr(A, "values", A), dtype=np.float64)
    D = np.asarray(decoder, dtype=np.float64)
    if A.ndim != 3 or D.ndim != 2 or D.shape[1] != A.shape[0]:
        raise DimensionError(f"Decoder {D.shape} không khớp abundance {A.shape}")
    P, H, W = A.shape
    return HsiCube((D @ A.reshape(P, H * W)).reshape(D.shape[0], H, W))


def network_forward(Y, params: NetworkParams, config: NetworkConfig):
    """Y → (Ŷ, A, cache)."""
    A, cache = encoder_forward(Y, params, config)
    Y_hat = decoder_forward(A, params.decoder)
    cache.reconstruction = Y_hat.values
    return Y_hat, A, cache


def output_depth(config: NetworkConfig) -> int:
    return conv_output_length(config.bands, K_IN_SIZE[0], config.ss, config.p_in)


def parameter_count(config: NetworkConfig) -> Dict[str, int]:
    C, K = config.channels, config.iters
    per_module = C * (int(np.prod(K_IN_SIZE)) + int(np.prod(K_U_SIZE)) + int(np.prod(K_D_SIZE)))
    return {
        "encoder": K * per_module + C + 2,
        "decoder": config.bands * config.materials,
    }
