# cli.py
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from services.config import (
    ABLATION_PRESETS,
    DATASET_PRESETS,
    DEFAULT_SEED,
    FIELD_AMPLITUDE,
    FIELD_SIGMA,
    LOG_LEVEL,
    PSVM_MAX_SWEEPS,
    PSVM_SIGMA,
    SNR_THRESHOLD_OFFSET,
    SVM_EXHAUSTIVE_LIMIT,
    apply_thread_limit,
    to_json,
)

# Giới hạn luồng BLAS phải đặt trước khi numpy được nạp
apply_thread_limit()

from services.error_handler import EXIT_FAILURE, EXIT_OK, handle_service_error  # noqa: E402
from services.pipeline import (  # noqa: E402
    METHODS,
    run_benchmark,
    run_eval,
    run_extract,
    run_gradcheck,
    run_simulate,
    run_unmix,
)
from services.report import (  # noqa: E402
    format_benchmark_summary,
    format_eval_table,
    format_gradcheck_table,
    format_train_summary,
)

logger = logging.getLogger("Unmix3D")

# ==============================
# Parser
# ==============================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unmix3d",
        description="Trích endmember bằng PSVM và ước lượng abundance bằng 3D-CSCNet",
    )
    parser.add_argument("--log-level", default=LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Sinh cảnh mô phỏng có ground truth")
    p.add_argument("--bands", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--materials", type=int, required=True)
    p.add_argument("--snr", default="noiseless", help="dB hoặc 'noiseless'")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--field-sigma", type=float, default=FIELD_SIGMA)
    p.add_argument("--amplitude", type=float, default=FIELD_AMPLITUDE)
    p.add_argument("--pure-pixels", action="store_true")
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("extract", help="Trích endmember (psvm | psvm-nd | svm)")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--materials", type=int, required=True)
    p.add_argument("--method", choices=METHODS, default="psvm")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sigma", type=float, default=PSVM_SIGMA)
    p.add_argument("--snr-formula", choices=("db", "as-written"), default="db")
    p.add_argument("--snr-offset", type=float, default=SNR_THRESHOLD_OFFSET)
    p.add_argument("--max-sweeps", type=int, default=PSVM_MAX_SWEEPS)
    p.add_argument("--exhaustive-limit", type=int, default=SVM_EXHAUSTIVE_LIMIT,
                   help="Đối chiếu vét cạn khi C(N,P) ≤ giá trị này (0 = tắt)")

    p = sub.add_parser("unmix", help="PSVM + huấn luyện 3D-CSCNet")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--materials", type=int, required=True)
    p.add_argument("--init", type=Path, default=None)
    p.add_argument("--preset", choices=sorted(DATASET_PRESETS), default=None)
    p.add_argument("--ablation", choices=sorted(ABLATION_PRESETS), default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr-e", type=float, default=None)
    p.add_argument("--lr-d", type=float, default=None)
    p.add_argument("--t1", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log-interval", type=int, default=None)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("eval", help="SAD/RMSE so với ground truth")
    p.add_argument("--est-endmembers", type=Path, required=True)
    p.add_argument("--est-abundances", type=Path, required=True)
    p.add_argument("--gt-endmembers", type=Path, required=True)
    p.add_argument("--gt-abundances", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("gradcheck", help="Kiểm tra gradient bằng sai phân hữu hạn")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("benchmark", help="So sánh các phương pháp trích endmember")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--snr", default="20")
    p.add_argument("--bands", type=int, default=120)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--materials", type=int, default=4)
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--pure-pixels", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    return parser

# ==============================
# Commands
# ==============================
def cmd_simulate(args) -> int:
    result = run_simulate(
        args.bands, args.height, args.width, args.materials, args.snr, args.seed, args.out_dir,
        field_sigma=args.field_sigma, amplitude=args.amplitude, pure_pixels=args.pure_pixels,
    )
    print(to_json({k: result[k] for k in ("cube", "gt_endmembers", "manifest", "summary")}))
    return EXIT_OK


def cmd_extract(args) -> int:
    result = run_extract(
        args.in_path, args.materials, args.out, method=args.method, sigma=args.sigma,
        snr_formula=args.snr_formula, snr_offset=args.snr_offset, max_sweeps=args.max_sweeps,
        exhaustive_limit=args.exhaustive_limit,
    )
    print(to_json(result))
    return EXIT_OK


def cmd_unmix(args) -> int:
    result = run_unmix(
        args.in_path, args.materials, args.out_dir, init=args.init,
        preset=args.preset, ablation=args.ablation, channels=args.channels, iters=args.iters,
        lr_e=args.lr_e, lr_d=args.lr_d, t1=args.t1, epochs=args.epochs, seed=args.seed,
        log_interval=args.log_interval,
    )
    print(format_train_summary(result))
    return EXIT_OK


def cmd_eval(args) -> int:
    report = run_eval(
        args.est_endmembers, args.est_abundances, args.gt_endmembers, args.gt_abundances, args.out
    )
    print(format_eval_table(report))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, eps=args.eps, corrupt=args.corrupt)
    print(format_gradcheck_table(report.as_rows()))
    if not report.passed:
        names = ", ".join(t.name for t in report.failures)
        print(f"❌ Gradient sai tại: {names}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_benchmark(args) -> int:
    result = run_benchmark(
        args.seeds, args.snr, args.bands, args.height, args.width, args.materials,
        methods=args.methods, out=args.out, pure_pixels=args.pure_pixels,
    )
    print(format_benchmark_summary(result["summary"]))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "unmix": cmd_unmix,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "benchmark": cmd_benchmark,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        info = handle_service_error("cli", args.command, e, extra_info={"argv": argv or sys.argv[1:]})
        print(f"❌ {info['message']}", file=sys.stderr)
        return info["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
