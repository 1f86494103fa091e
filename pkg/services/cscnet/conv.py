# services/cscnet/conv.py
import itertools
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.error_handler import DimensionError

Triple = Tuple[int, int, int]

# ===== Hình học tích chập =====
def conv_output_length(n: int, k: int, stride: int, padding: int) -> int:
    """⌊(n + 2p − k)/s⌋ + 1; lỗi nếu kết quả < 1."""
    out = (n + 2 * padding - k) // stride + 1
    if n + 2 * padding < k or out < 1:
        raise DimensionError(f"Không có vị trí hợp lệ: n={n}, k={k}, s={stride}, p={padding}")
    return out


def _check(x: np.ndarray, kernel: np.ndarray, stride: Sequence[int], padding: Sequence[int]):
    if x.ndim != 4:
        raise DimensionError(f"Tensor vào cần dạng C×D×H×W, nhận {x.shape}")
    if kernel.ndim != 5:
        raise DimensionError(f"Kernel cần dạng C_out×C_in×kd×kh×kw, nhận {kernel.shape}")
    if len(stride) != 3 or len(padding) != 3 or min(stride) < 1 or min(padding) < 0:
        raise DimensionError(f"stride/padding không hợp lệ: {stride}, {padding}")


def _windows(x: np.ndarray, ksize: Triple, stride: Triple, padding: Triple) -> np.ndarray:
    """View C×D'×H'×W'×kd×kh×kw của input đã pad (không copy)."""
    pd, ph, pw = padding
    sd, sh, sw = stride
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, ksize, axis=(1, 2, 3))
    return win[:, ::sd, ::sh, ::sw]

# ===== Tích chập thuận =====
def conv3d(x: np.ndarray, kernel: np.ndarray, stride: Triple = (1, 1, 1), padding: Triple = (0, 0, 0)) -> np.ndarray:
    """
    Tương quan chéo 3D, zero padding, không bias.

    x: C_in×D×H×W, kernel: C_out×C_in×kd×kh×kw → C_out×D'×H'×W'.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    _check(x, kernel, stride, padding)
    if kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"Kernel có C_in={kernel.shape[1]} nhưng input có {x.shape[0]} kênh")
    ksize = kernel.shape[2:]
    for n, k, s, p in zip(x.shape[1:], ksize, stride, padding):
        conv_output_length(n, k, s, p)
    win = _windows(x, ksize, stride, padding)
    out = np.tensordot(win, kernel, axes=([0, 4, 5, 6], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))


def conv3d_kernel_grad(
    x: np.ndarray,
    grad_out: np.ndarray,
    ksize: Triple,
    stride: Triple = (1, 1, 1),
    padding: Triple = (0, 0, 0),
) -> np.ndarray:
    """∂⟨grad_out, conv3d(x, k)⟩/∂k, dạng C_out×C_in×kd×kh×kw."""
    x = np.asarray(x, dtype=np.float64)
    win = _windows(x, tuple(ksize), stride, padding)
    if win.shape[1:4] != grad_out.shape[1:]:
        raise DimensionError(f"grad_out {grad_out.shape} không khớp output {win.shape[1:4]}")
    return np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))

# ===== Tích chập chuyển vị (liên hợp) =====
def conv3d_transpose(
    x: np.ndarray,
    kernel: np.ndarray,
    stride: Triple = (1, 1, 1),
    padding: Triple = (0, 0, 0),
    out_depth: Optional[int] = None,
    out_spatial: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """
    Liên hợp chính xác của conv3d với cùng kernel/stride/padding.

    x: C_out×D'×H'×W' → C_in×D×H×W. D = out_depth phải thỏa phương trình
    kích thước của conv3d; mặc định D = (D'−1)·s + k − 2p (tương tự cho H, W).
    Các vị trí không được tap nào chạm tới bằng 0.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    _check(x, kernel, stride, padding)
    c_out, c_in = kernel.shape[:2]
    if x.shape[0] != c_out:
        raise DimensionError(f"Input có {x.shape[0]} kênh, kernel cần {c_out}")
    ksize = kernel.shape[2:]
    in_sizes = x.shape[1:]

    default = [(n - 1) * s + k - 2 * p for n, k, s, p in zip(in_sizes, ksize, stride, padding)]
    sizes = list(default)
    if out_depth is not None:
        sizes[0] = int(out_depth)
    if out_spatial is not None:
        sizes[1], sizes[2] = (int(v) for v in out_spatial)
    for n, n_out, k, s, p in zip(sizes, in_sizes, ksize, stride, padding):
        if n < 1 or conv_output_length(n, k, s, p) != n_out:
            raise DimensionError(
                f"Kích thước ra {sizes} không tương thích với input {in_sizes} "
                f"(kernel {ksize}, stride {stride}, padding {padding})"
            )

    padded = [n + 2 * p for n, p in zip(sizes, padding)]
    buf = np.zeros((c_in, *padded))
    D1, H1, W1 = in_sizes
    sd, sh, sw = stride
    for a, b, c in itertools.product(*(range(k) for k in ksize)):
        contrib = np.tensordot(kernel[:, :, a, b, c], x, axes=([0], [0]))
        buf[:, a:a + (D1 - 1) * sd + 1:sd, b:b + (H1 - 1) * sh + 1:sh, c:c + (W1 - 1) * sw + 1:sw] += contrib
    pd, ph, pw = padding
    D, H, W = sizes
    return np.ascontiguousarray(buf[:, pd:pd + D, ph:ph + H, pw:pw + W])
