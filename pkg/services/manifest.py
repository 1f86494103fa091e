# services/manifest.py
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

from services.config import APP_VERSION, SERVICE_NAME
from services.error_handler import CubeFormatError, CubeIOError

logger = logging.getLogger("Pipeline")

MANIFEST_NAME = "manifest.txt"


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, Path):
        return str(value)
    return str(value)


@dataclass
class RunManifest:
    """Biên bản một lần chạy: lệnh, tùy chọn đã phân giải, seed, đường dẫn vào/ra, phiên bản."""
    command: str
    seed: Any = None
    options: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, Any] = field(default_factory=dict)
    outputs: Dict[str, Any] = field(default_factory=dict)
    results: Dict[str, Any] = field(default_factory=dict)
    tool: str = SERVICE_NAME
    version: str = APP_VERSION

    def to_text(self) -> str:
        """Dạng key=value, khóa sắp xếp cố định, không có timestamp."""
        lines = [
            f"tool={self.tool}",
            f"version={self.version}",
            f"command={self.command}",
            f"seed={_format_value(self.seed)}",
        ]
        for prefix, section in (
            ("option", self.options),
            ("input", self.inputs),
            ("output", self.outputs),
            ("result", self.results),
        ):
            for key in sorted(section):
                lines.append(f"{prefix}.{key}={_format_value(section[key])}")
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_text(), encoding="utf-8")
        except OSError as e:
            raise CubeIOError(f"Không ghi được manifest {path}: {e}") from e
        logger.debug(f"[RunManifest.write] {path}")
        return path


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CubeIOError(f"Không đọc được manifest {path}: {e}") from e
    out: Dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CubeFormatError(f"{path}:{n}: thiếu '='")
        key, value = line.split("=", 1)
        out[key] = value
    return out
