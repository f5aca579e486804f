"""``plenocal`` command line.

Exit codes: 0 success, 2 invalid input, 3 an optimisation did not converge,
4 input/output failure.  On failure a JSON error document is printed on
stderr (and written as ``error.json`` in the output directory when there is one).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import artifacts, pipeline
from .blurcalib import KappaError
from .mia import GridError
from .optim import CalibrationError
from .precalib import PrecalibError

log = logging.getLogger("plenocal")

EXIT_OK, EXIT_VALIDATION, EXIT_NOT_CONVERGED, EXIT_IO = 0, 2, 3, 4

PIPELINE_DEFAULTS = {
    "corners": "detect",
    "corner_noise": 0.0,
    "seed": 0,
    "freeze": [],
    "wavelength": 750e-9,
    "fnumbers": None,
    "devignette_whites": False,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (pipeline.NotConverged, CalibrationError)):
        return EXIT_NOT_CONVERGED
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ValueError, KeyError, TypeError, PrecalibError, GridError, KappaError)):
        return EXIT_VALIDATION
    raise exc


def _csv_floats(text):
    return [float(x) for x in text.split(",") if x.strip()] if text else None


def _csv_names(text):
    return [x.strip() for x in text.split(",") if x.strip()] if text else []


def _set_threads(jobs: int | None, deterministic: bool):
    import numba

    numba.config.THREADING_LAYER = "workqueue"
    n = numba.config.NUMBA_NUM_THREADS
    if deterministic:
        n = 1
    elif jobs:
        n = max(1, min(jobs, n))
    numba.set_num_threads(n)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    from .model import CameraIntrinsics
    from .presets import r12_like, upc_like
    from .simulator import DatasetPlan, generate_dataset

    cfg = artifacts.read_json(args.config)
    if "intrinsics" in cfg:
        intr = CameraIntrinsics.from_dict(cfg["intrinsics"])
    else:
        cam = cfg.get("camera", {})
        presets = {"r12_like": r12_like, "upc_like": upc_like}
        name = cam.get("preset", "r12_like")
        if name not in presets:
            raise pipeline.ValidationError(f"unknown camera preset {name!r}; choose from {sorted(presets)}")
        grid = cam.get("grid", [32, 28])
        intr = presets[name](int(grid[0]), int(grid[1]))
    if "plan" not in cfg:
        raise pipeline.ValidationError("simulation config lacks a 'plan' section")
    plan = DatasetPlan.from_dict(cfg["plan"])
    out = generate_dataset(intr, plan, args.out)
    print(out)


def cmd_precalibrate(args):
    desc = pipeline.DatasetDescriptor.load(args.dataset)
    doc = pipeline.stage_precalibrate(desc, args.out, _csv_floats(args.fnumbers), args.devignette_whites)
    om = doc["omega"]
    print(f"m = {om['m_um']:.3f} um, q' = {', '.join(f'{q:.3f}' for q in om['q_prime_um'])} um")


def cmd_detect(args):
    desc = pipeline.DatasetDescriptor.load(args.dataset)
    doc = pipeline.stage_detect(desc, args.omega, args.out, args.corners, args.corner_noise, args.seed)
    print(f"{len(doc['calibration'])} calibration features, {len(doc['motion'])} motion features")


def cmd_calibrate(args):
    desc = pipeline.DatasetDescriptor.load(args.dataset)
    features = args.features or Path(args.omega).with_name(pipeline.ARTIFACT["detect"])
    try:
        pipeline.stage_calibrate(desc, args.omega, features, args.out, _csv_names(args.freeze), args.max_iter)
    finally:
        txt = pipeline.report_paths(args.out)[1]
        if txt.exists():
            sys.stdout.write(txt.read_text())


def cmd_blurcalib(args):
    desc = pipeline.DatasetDescriptor.load(args.dataset)
    base = Path(args.intrinsics).parent
    omega = args.omega or base / pipeline.ARTIFACT["precalibrate"]
    features = args.features or base / pipeline.ARTIFACT["detect"]
    doc = pipeline.stage_blurcalib(desc, omega, features, args.out, args.intrinsics)
    print(f"kappa = {doc['kappa']:.4f} ({doc['n_samples']} samples)")


def cmd_profile(args):
    intr = pipeline.load_intrinsics(args.intrinsics)
    doc = pipeline.stage_profile(intr, args.out, args.wavelength, args.near, args.far)
    lo, hi = doc["total_dof_object"]
    print(f"total depth of field: {lo} .. {hi} mm")


def cmd_evaluate(args):
    desc = pipeline.DatasetDescriptor.load(args.dataset)
    base = Path(args.intrinsics).parent
    features = args.features or base / pipeline.ARTIFACT["detect"]
    out = args.out or base / f"{args.mode}.json"
    doc = pipeline.stage_evaluate(desc, args.intrinsics, features, out, args.mode)
    if args.mode == "reprojection":
        print(f"RMSE u,v {doc['rmse_uv']:.4f} px, rho {doc['rmse_rho']:.4f} px")
    else:
        print(f"epsilon_z mean {100 * doc['mean']:.3f} %, std {100 * doc['std']:.3f} %")


def cmd_pipeline(args):
    opts = dict(PIPELINE_DEFAULTS)
    if args.config:
        cfg = artifacts.read_json(args.config)
        unknown = set(cfg) - set(opts) - {"schema", "schema_version"}
        if unknown:
            raise pipeline.ValidationError(f"unknown pipeline config keys: {sorted(unknown)}")
        opts.update({k: v for k, v in cfg.items() if k in opts})
    for key, value in (("corners", args.corners), ("corner_noise", args.corner_noise), ("seed", args.seed),
                       ("wavelength", args.wavelength)):
        if value is not None:
            opts[key] = value
    if args.freeze is not None:
        opts["freeze"] = _csv_names(args.freeze)
    if args.fnumbers is not None:
        opts["fnumbers"] = _csv_floats(args.fnumbers)
    desc = pipeline.DatasetDescriptor.load(args.dataset)
    written = pipeline.run_pipeline(
        desc, args.out, resume=args.resume, corners=opts["corners"], noise=float(opts["corner_noise"]),
        seed=int(opts["seed"]), freeze=opts["freeze"], wavelength_m=float(opts["wavelength"]),
        f_numbers=opts["fnumbers"], devignette_whites=bool(opts["devignette_whites"]),
    )
    for stage, path in written.items():
        print(f"{stage:13s} {path}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plenocal", description="Plenoptic camera calibration with blur-aware features")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--jobs", type=int, default=None, help="cap on worker threads")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="cap on worker threads")
    common.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS,
                        help="single-threaded, reproducible run")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic dataset")
    s.add_argument("--config", required=True, help="simulation config (JSON)")
    s.add_argument("--out", required=True, help="dataset directory to create")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("precalibrate", parents=[common], help="grid and Omega coefficients from white images")
    s.add_argument("--dataset", required=True)
    s.add_argument("--fnumbers", help="comma-separated subset of white-image f-numbers")
    s.add_argument("--devignette-whites", action="store_true", help="divide whites by the widest-aperture white")
    s.add_argument("--out", required=True, help="output JSON (omega.json)")
    s.set_defaults(func=cmd_precalibrate)

    s = sub.add_parser("detect", parents=[common], help="BAP features of calibration and motion frames")
    s.add_argument("--dataset", required=True)
    s.add_argument("--omega", required=True, help="pre-calibration JSON")
    s.add_argument("--corners", choices=("detect", "inject"), default="detect",
                   help="detect corners or read them from ground-truth sidecars")
    s.add_argument("--corner-noise", type=float, default=0.0, help="Gaussian noise (px) on injected corners")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("calibrate", parents=[common], help="joint intrinsics and pose refinement")
    s.add_argument("--dataset", required=True)
    s.add_argument("--omega", required=True, help="pre-calibration JSON")
    s.add_argument("--features", help="features JSON (default: features.json next to --omega)")
    s.add_argument("--freeze", help="comma-separated parameters or groups: tilt, pitch, dist")
    s.add_argument("--max-iter", type=int, default=500)
    s.add_argument("--out", required=True, help="output intrinsics JSON")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("blurcalib", parents=[common], help="blur spread factor from relative blur")
    s.add_argument("--dataset", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--omega", help="pre-calibration JSON (default: next to --intrinsics)")
    s.add_argument("--features", help="features JSON (default: next to --intrinsics)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_blurcalib)

    s = sub.add_parser("profile", parents=[common], help="depth of field and blur-versus-distance profile")
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--wavelength", type=float, default=750e-9, help="metres")
    s.add_argument("--near", type=float, help="nearest object distance in mm (default 2F)")
    s.add_argument("--far", type=float, help="farthest object distance in mm (default 1000F)")
    s.add_argument("--out", required=True, help="output stem; .json, .csv and .svg are written")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("evaluate", parents=[common], help="hold-out reprojection or translation errors")
    s.add_argument("--dataset", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--features")
    s.add_argument("--mode", choices=("reprojection", "translation"), required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", parents=[common], help="run all stages")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="pipeline config (JSON); flags override it")
    s.add_argument("--resume", choices=pipeline.STAGES, help="skip stages before this one if their artifacts exist")
    s.add_argument("--corners", choices=("detect", "inject"))
    s.add_argument("--corner-noise", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--freeze")
    s.add_argument("--fnumbers")
    s.add_argument("--wavelength", type=float)
    s.set_defaults(func=cmd_pipeline)
    return p


def _error_dir(args) -> Path | None:
    out = getattr(args, "out", None)
    if out is None:
        return None
    out = Path(out)
    return out if args.command in ("pipeline", "simulate") else out.parent


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.jobs, args.deterministic)
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        doc = {"schema": "plenocal.error", "schema_version": 1, "command": args.command,
               "error": type(exc).__name__, "message": str(exc), "exit_code": code}
        sys.stderr.write(artifacts.dumps(doc))
        where = _error_dir(args)
        if where is not None and where.is_dir():
            try:
                artifacts.write_json(where / "error.json", doc)
            except OSError:
                pass
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
