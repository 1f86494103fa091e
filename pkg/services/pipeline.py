# services/pipeline.py
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from services.config import (
    ABLATION_PRESETS,
    DATASET_PRESETS,
    DEFAULT_CHANNELS,
    DEFAULT_ITERS,
    FIELD_AMPLITUDE,
    FIELD_SIGMA,
    LOG_INTERVAL,
    PSVM_MAX_SWEEPS,
    PSVM_SIGMA,
    SNR_THRESHOLD_OFFSET,
    SVM_EXHAUSTIVE_LIMIT,
)
from services.cscnet.network import make_config
from services.error_handler import CubeIOError, DimensionError, UsageError
from services.hsi_data.io import (
    load_abundance_maps,
    load_cube,
    load_endmembers_csv,
    store_abundance_maps,
    store_cube,
    store_endmembers_csv,
    store_loss_csv,
)
from services.hsi_data.synthetic import NOISELESS, simulate_scene
from services.hsi_data.types import HsiCube, scene_summary
from services.manifest import MANIFEST_NAME, RunManifest
from services.metrics import EvalReport, endmember_sad_only, evaluate, summarize_runs
from services.psvm import PsvmOptions, PsvmResult, psvm_extract_detailed, svm_extract_detailed
from services.training import TrainConfig, gradient_check, train

logger = logging.getLogger("Pipeline")

PathLike = Union[str, Path]
METHODS = ("psvm", "psvm-nd", "svm")

# ===== Tiện ích tham số =====
def parse_snr(value: Union[str, float, None]) -> Union[float, str]:
    """'noiseless' / 'inf' / None → không nhiễu; còn lại ép float."""
    if value is None:
        return NOISELESS
    if isinstance(value, str):
        v = value.strip().lower()
        if v in (NOISELESS, "inf", "+inf"):
            return NOISELESS
        try:
            return float(v)
        except ValueError as e:
            raise UsageError(f"SNR không hợp lệ: {value!r}") from e
    if np.isinf(value) and value > 0:
        return NOISELESS
    return float(value)

# ===== simulate =====
def run_simulate(
    bands: int,
    height: int,
    width: int,
    materials: int,
    snr: Union[str, float],
    seed: int,
    out_dir: PathLike,
    field_sigma: float = FIELD_SIGMA,
    amplitude: float = FIELD_AMPLITUDE,
    pure_pixels: bool = False,
) -> Dict:
    """Sinh cảnh mô phỏng và ghi scene.hsc, gt_endmembers.csv, gt_abundance_<p>.pgm, manifest."""
    if materials < 2:
        raise UsageError(f"Cần --materials ≥ 2, nhận {materials}")
    if bands < 2 or height < 1 or width < 1:
        raise UsageError(f"Kích thước không hợp lệ: L={bands}, H={height}, W={width}")
    snr_db = parse_snr(snr)
    out_dir = Path(out_dir)

    scene = simulate_scene(
        bands, height, width, materials, snr_db, seed,
        field_sigma=field_sigma, amplitude=amplitude, pure_pixels=pure_pixels,
    )
    cube_path = store_cube(scene.cube, out_dir / "scene.hsc")
    em_path = store_endmembers_csv(scene.gt_endmembers, out_dir / "gt_endmembers.csv")
    maps = store_abundance_maps(scene.gt_abundances.values, out_dir, prefix="gt_abundance")

    manifest = RunManifest(
        command="simulate",
        seed=seed,
        options={
            "bands": bands,
            "height": height,
            "width": width,
            "materials": materials,
            "snr": snr_db,
            "field_sigma": field_sigma,
            "amplitude": amplitude,
            "pure_pixels": pure_pixels,
        },
        outputs={"cube": cube_path, "gt_endmembers": em_path, "gt_abundances": out_dir},
    )
    manifest_path = manifest.write(out_dir / MANIFEST_NAME)
    logger.info(f"✅ [run_simulate] {cube_path} ({bands}×{height}×{width}, P={materials}, snr={snr_db})")
    return {
        "cube": str(cube_path),
        "gt_endmembers": str(em_path),
        "gt_abundances": [str(p) for p in maps],
        "manifest": str(manifest_path),
        "summary": scene_summary(scene.cube),
    }

# ===== extract =====
def extract_by_method(
    cube: HsiCube,
    materials: int,
    method: str = "psvm",
    sigma: float = PSVM_SIGMA,
    snr_formula: str = "db",
    snr_offset: float = SNR_THRESHOLD_OFFSET,
    max_sweeps: int = PSVM_MAX_SWEEPS,
    exhaustive_limit: int = SVM_EXHAUSTIVE_LIMIT,
) -> PsvmResult:
    if method not in METHODS:
        raise UsageError(f"--method phải thuộc {METHODS}, nhận {method!r}")
    if method == "svm":
        return svm_extract_detailed(cube, materials, max_sweeps, exhaustive_limit)
    options = PsvmOptions(
        denoise=(method == "psvm"),
        snr_formula=snr_formula,
        gaussian_sigma=(sigma, sigma, sigma),
        snr_threshold_offset=snr_offset,
        max_sweeps=max_sweeps,
        exhaustive_limit=exhaustive_limit,
    )
    return psvm_extract_detailed(cube, materials, options)


def run_extract(
    in_path: PathLike,
    materials: int,
    out: PathLike,
    method: str = "psvm",
    sigma: float = PSVM_SIGMA,
    snr_formula: str = "db",
    snr_offset: float = SNR_THRESHOLD_OFFSET,
    max_sweeps: int = PSVM_MAX_SWEEPS,
    exhaustive_limit: int = SVM_EXHAUSTIVE_LIMIT,
) -> Dict:
    cube = load_cube(in_path)
    result = extract_by_method(
        cube, materials, method, sigma, snr_formula, snr_offset, max_sweeps, exhaustive_limit
    )
    out = Path(out)
    csv_path = store_endmembers_csv(result.endmembers, out)
    manifest = RunManifest(
        command="extract",
        options={
            "materials": materials,
            "method": method,
            "sigma": sigma,
            "snr_formula": snr_formula,
            "snr_offset": snr_offset,
            "max_sweeps": max_sweeps,
            "exhaustive_limit": exhaustive_limit,
        },
        inputs={"cube": in_path},
        outputs={"endmembers": csv_path},
        results={k: v for k, v in result.summary().items() if v is not None},
    )
    manifest_path = manifest.write(out.with_name(out.stem + ".manifest.txt"))
    return {"endmembers": str(csv_path), "manifest": str(manifest_path), **result.summary()}

# ===== unmix =====
def resolve_unmix_settings(
    preset: Optional[str] = None,
    ablation: Optional[str] = None,
    channels: Optional[int] = None,
    iters: Optional[int] = None,
    lr_e: Optional[float] = None,
    lr_d: Optional[float] = None,
    t1: Optional[int] = None,
    epochs: Optional[int] = None,
    seed: Optional[int] = None,
    log_interval: Optional[int] = None,
) -> Tuple[int, int, TrainConfig]:
    """Mặc định → preset bộ dữ liệu → biến thể ablation → cờ tường minh (ưu tiên tăng dần)."""
    settings: Dict = {"channels": DEFAULT_CHANNELS, "iters": DEFAULT_ITERS}
    train_kwargs: Dict = {}
    if preset is not None:
        key = preset.lower()
        if key not in DATASET_PRESETS:
            raise UsageError(f"--preset phải thuộc {sorted(DATASET_PRESETS)}, nhận {preset!r}")
        p = DATASET_PRESETS[key]
        train_kwargs.update(lr_e=p["lr_e"], lr_d=p["lr_d"], t1=int(p["t1"]), epochs=int(p["epochs"]))
    if ablation is not None:
        key = ablation.upper()
        if key not in ABLATION_PRESETS:
            raise UsageError(f"--ablation phải thuộc {sorted(ABLATION_PRESETS)}, nhận {ablation!r}")
        for name, value in ABLATION_PRESETS[key].items():
            if name in settings:
                settings[name] = value
            else:
                train_kwargs[name] = value
    for name, value in (("channels", channels), ("iters", iters)):
        if value is not None:
            settings[name] = value
    explicit = {
        "lr_e": lr_e, "lr_d": lr_d, "t1": t1, "epochs": epochs,
        "seed": seed, "log_interval": log_interval or LOG_INTERVAL,
    }
    train_kwargs.update({k: v for k, v in explicit.items() if v is not None})
    return settings["channels"], settings["iters"], TrainConfig(**train_kwargs)


def run_unmix(
    in_path: PathLike,
    materials: int,
    out_dir: PathLike,
    init: Optional[PathLike] = None,
    preset: Optional[str] = None,
    ablation: Optional[str] = None,
    channels: Optional[int] = None,
    iters: Optional[int] = None,
    lr_e: Optional[float] = None,
    lr_d: Optional[float] = None,
    t1: Optional[int] = None,
    epochs: Optional[int] = None,
    seed: Optional[int] = None,
    log_interval: Optional[int] = None,
) -> Dict:
    """PSVM (nếu không có --init) → huấn luyện 3D-CSCNet → ghi abundance, endmember, loss, manifest."""
    cube = load_cube(in_path)
    C, K, train_cfg = resolve_unmix_settings(
        preset, ablation, channels, iters, lr_e, lr_d, t1, epochs, seed, log_interval
    )
    net_cfg = make_config(cube.bands, cube.height, cube.width, materials, C=C, K=K)

    if init is not None:
        E_init = load_endmembers_csv(init)
        if E_init.values.shape != (cube.bands, materials):
            raise DimensionError(
                f"--init có dạng {E_init.values.shape}, cần {(cube.bands, materials)}"
            )
        init_source = str(init)
    else:
        E_init = extract_by_method(cube, materials, "psvm").endmembers
        init_source = "psvm"

    report = train(cube, materials, net_cfg, train_cfg, E_init)

    out_dir = Path(out_dir)
    maps = store_abundance_maps(report.abundances.values, out_dir, prefix="abundance")
    hsc_path = store_cube(HsiCube(report.abundances.values), out_dir / "abundance.hsc")
    em_path = store_endmembers_csv(report.endmembers, out_dir / "endmembers.csv")
    loss_path = store_loss_csv(report.losses, out_dir / "loss.csv")
    manifest = RunManifest(
        command="unmix",
        seed=train_cfg.seed,
        options={
            "materials": materials,
            "preset": preset or "",
            "ablation": ablation or "",
            "init": init_source,
            **{f"net.{k}": v for k, v in net_cfg.as_dict().items()},
            **{f"train.{k}": v for k, v in train_cfg.as_dict().items()},
        },
        inputs={"cube": in_path},
        outputs={
            "abundance_dir": out_dir,
            "abundance_hsc": hsc_path,
            "endmembers": em_path,
            "loss": loss_path,
        },
        results={"final_loss": report.final_loss},
    )
    manifest_path = manifest.write(out_dir / MANIFEST_NAME)
    return {
        "abundance_dir": str(out_dir),
        "abundance_maps": [str(p) for p in maps],
        "endmembers": str(em_path),
        "loss_csv": str(loss_path),
        "manifest": str(manifest_path),
        "epochs": train_cfg.epochs,
        "t1": train_cfg.t1,
        "final_loss": report.final_loss,
        "config": {**net_cfg.as_dict(), **train_cfg.as_dict()},
    }

# ===== eval =====
def run_eval(
    est_endmembers: PathLike,
    est_abundances: PathLike,
    gt_endmembers: PathLike,
    gt_abundances: PathLike,
    out: Optional[PathLike] = None,
) -> EvalReport:
    E_est = load_endmembers_csv(est_endmembers)
    E_gt = load_endmembers_csv(gt_endmembers)
    A_est = load_abundance_maps(est_abundances)
    A_gt = load_abundance_maps(gt_abundances)
    report = evaluate(E_est, A_est, E_gt, A_gt)
    if out is not None:
        out = Path(out)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            report.to_frame().to_csv(out, index=False, float_format="%.17g", lineterminator="\n")
        except OSError as e:
            raise CubeIOError(f"Không ghi được {out}: {e}") from e
    return report

# ===== gradcheck =====
def run_gradcheck(seed: int = 0, eps: float = 1e-5, corrupt: Optional[str] = None):
    return gradient_check(seed=seed, eps=eps, corrupt=corrupt)

# ===== benchmark =====
def run_benchmark(
    seeds: Sequence[int],
    snr: Union[str, float],
    bands: int,
    height: int,
    width: int,
    materials: int,
    methods: Sequence[str] = METHODS,
    out: Optional[PathLike] = None,
    pure_pixels: bool = False,
) -> Dict:
    """So sánh psvm / psvm-nd / svm trên nhiều cảnh mô phỏng (SAD endmember sau ghép cặp)."""
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"Phương pháp không hợp lệ: {m!r} (có: {METHODS})")
    if not seeds:
        raise UsageError("Cần ít nhất một seed")
    snr_db = parse_snr(snr)
    rows: List[Dict] = []
    for seed in seeds:
        scene = simulate_scene(bands, height, width, materials, snr_db, seed, pure_pixels=pure_pixels)
        for method in methods:
            result = extract_by_method(scene.cube, materials, method)
            _, _, mean_sad = endmember_sad_only(result.endmembers, scene.gt_endmembers)
            rows.append({"seed": seed, "method": method, "mean_sad": mean_sad, "branch": result.branch})
            logger.info(f"[run_benchmark] seed={seed} {method}: SAD TB={mean_sad:.5f}")

    df = pd.DataFrame(rows)
    summary = {m: summarize_runs([r for r in rows if r["method"] == m]) for m in methods}
    if out is not None:
        out = Path(out)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            df.to_csv(out, index=False, float_format="%.17g", lineterminator="\n")
        except OSError as e:
            raise CubeIOError(f"Không ghi được {out}: {e}") from e
    return {"rows": rows, "summary": summary}
