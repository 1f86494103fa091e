# services/hsi_data/io.py
import logging
import re
import struct
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import pandas as pd

from services.error_handler import (
    CubeFormatError,
    CubeIOError,
    DimensionError,
    TruncatedCubeError,
    UsageError,
)
from services.hsi_data.types import EndmemberMatrix, HsiCube

logger = logging.getLogger("HsiData")

PathLike = Union[str, Path]

HSC_MAGIC = b"HSC1"
HSC_HEADER = struct.Struct("<4sIII")
MAX_VOXELS = 2**31 - 1
PGM_MAXVAL = 65535

# ===== File HSC =====
def store_cube(cube: HsiCube, path: PathLike) -> Path:
    """Ghi cube: magic 'HSC1', L/H/W uint32 LE, rồi L·H·W float32 LE (band-major, row-major)."""
    path = Path(path)
    L, H, W = cube.shape
    if L * H * W > MAX_VOXELS:
        raise CubeFormatError(f"Cube quá lớn để ghi: {L}×{H}×{W}")
    payload = np.ascontiguousarray(cube.values, dtype="<f4").tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(HSC_HEADER.pack(HSC_MAGIC, L, H, W))
            f.write(payload)
    except OSError as e:
        raise CubeIOError(f"Không ghi được {path}: {e}") from e
    logger.debug(f"[store_cube] {path} ({L}×{H}×{W})")
    return path


def load_cube(path: PathLike) -> HsiCube:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CubeIOError(f"Không đọc được {path}: {e}") from e

    if len(raw) < HSC_HEADER.size:
        raise TruncatedCubeError(f"{path}: header ngắn hơn {HSC_HEADER.size} byte")
    magic, L, H, W = HSC_HEADER.unpack_from(raw, 0)
    if magic != HSC_MAGIC:
        raise CubeFormatError(f"{path}: sai magic {magic!r}, cần {HSC_MAGIC!r}")
    if L == 0 or H == 0 or W == 0:
        raise CubeFormatError(f"{path}: kích thước rỗng {L}×{H}×{W}")
    n_voxels = L * H * W
    if n_voxels > MAX_VOXELS:
        raise CubeFormatError(f"{path}: kích thước tràn {L}×{H}×{W}")

    payload = raw[HSC_HEADER.size:]
    expected = n_voxels * 4
    if len(payload) < expected:
        raise TruncatedCubeError(
            f"{path}: cần {n_voxels} float32 nhưng chỉ có {len(payload) // 4}"
        )
    if len(payload) > expected:
        raise CubeFormatError(f"{path}: thừa {len(payload) - expected} byte sau payload")

    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(L, H, W)
    try:
        return HsiCube(values)
    except UsageError as e:
        raise CubeFormatError(f"{path}: {e}") from e

# ===== CSV endmember =====
def store_endmembers_csv(endmembers: Union[EndmemberMatrix, np.ndarray], path: PathLike) -> Path:
    """Header 'band,em1,...,emP', mỗi band một dòng."""
    E = np.asarray(getattr(endmembers, "values", endmembers), dtype=np.float64)
    path = Path(path)
    df = pd.DataFrame(E, columns=[f"em{p + 1}" for p in range(E.shape[1])])
    df.insert(0, "band", np.arange(1, E.shape[0] + 1))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    except OSError as e:
        raise CubeIOError(f"Không ghi được {path}: {e}") from e
    return path


def load_endmembers_csv(path: PathLike) -> EndmemberMatrix:
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except OSError as e:
        raise CubeIOError(f"Không đọc được {path}: {e}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise CubeFormatError(f"{path}: CSV hỏng: {e}") from e
    em_cols = [c for c in df.columns if re.fullmatch(r"em\d+", str(c))]
    if list(df.columns[:1]) != ["band"] or not em_cols:
        raise CubeFormatError(f"{path}: cần header 'band,em1,...,emP', nhận {list(df.columns)}")
    em_cols.sort(key=lambda c: int(c[2:]))
    try:
        return EndmemberMatrix(df[em_cols].to_numpy(dtype=np.float64))
    except (UsageError, ValueError) as e:
        raise CubeFormatError(f"{path}: {e}") from e

# ===== PGM 16-bit =====
def store_pgm16(image: np.ndarray, path: PathLike) -> Path:
    """Ảnh P5 16-bit, giá trị [0,1] được co giãn tuyến tính về [0,65535]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"PGM cần ảnh 2D, nhận {img.shape}")
    H, W = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(f"P5\n{W} {H}\n{PGM_MAXVAL}\n".encode("ascii"))
            f.write(q.tobytes())
    except OSError as e:
        raise CubeIOError(f"Không ghi được {path}: {e}") from e
    return path


def load_pgm16(path: PathLike) -> np.ndarray:
    """Đọc PGM P5 16-bit và giải lượng tử về [0,1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CubeIOError(f"Không đọc được {path}: {e}") from e

    # Header: 4 token (magic, W, H, maxval), bỏ qua comment '#'
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CubeFormatError(f"{path}: header PGM không đầy đủ")
        tokens.append(raw[start:pos])
    pos += 1  # đúng một ký tự trắng sau maxval

    if tokens[0] != b"P5":
        raise CubeFormatError(f"{path}: không phải PGM P5")
    try:
        W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise CubeFormatError(f"{path}: header PGM hỏng") from e
    if maxval != PGM_MAXVAL:
        raise CubeFormatError(f"{path}: cần maxval {PGM_MAXVAL}, nhận {maxval}")
    data = raw[pos:]
    if len(data) < H * W * 2:
        raise TruncatedCubeError(f"{path}: payload PGM bị cắt")
    q = np.frombuffer(data[:H * W * 2], dtype=">u2").reshape(H, W)
    return q.astype(np.float64) / PGM_MAXVAL


def store_abundance_maps(maps: np.ndarray, out_dir: PathLike, prefix: str = "abundance") -> List[Path]:
    """Mỗi vật liệu một file <prefix>_<p>.pgm, p đánh số từ 1."""
    A = np.asarray(getattr(maps, "values", maps), dtype=np.float64)
    out_dir = Path(out_dir)
    return [store_pgm16(A[p], out_dir / f"{prefix}_{p + 1}.pgm") for p in range(A.shape[0])]


def load_abundance_maps(directory: PathLike) -> np.ndarray:
    """Đọc các file *_<p>.pgm trong thư mục, sắp theo p; fallback sang *.hsc (P×H×W)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CubeIOError(f"Không tìm thấy thư mục {directory}")
    indexed = []
    for f in directory.glob("*.pgm"):
        m = re.search(r"_(\d+)\.pgm$", f.name)
        if m:
            indexed.append((int(m.group(1)), f))
    if indexed:
        indexed.sort()
        return np.stack([load_pgm16(f) for _, f in indexed], axis=0)
    hsc = sorted(directory.glob("*.hsc"))
    if hsc:
        return load_cube(hsc[0]).values
    raise CubeIOError(f"{directory}: không có file bản đồ độ phủ (*_<p>.pgm hoặc *.hsc)")

# ===== Loss trace =====
def store_loss_csv(losses: Sequence[float], path: PathLike) -> Path:
    path = Path(path)
    df = pd.DataFrame({"epoch": np.arange(1, len(losses) + 1), "loss": np.asarray(losses, dtype=np.float64)})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    except OSError as e:
        raise CubeIOError(f"Không ghi được {path}: {e}") from e
    return path
