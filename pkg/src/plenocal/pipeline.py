"""Dataset descriptor and the stage functions chained by the command line.

Every stage takes explicit artifact paths, so stages can be run one at a time.
:func:`run_pipeline` chains them inside one output directory using the file
names in :data:`ARTIFACT`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts
from .blurcalib import calibrate_kappa, collect_samples, white_support
from .features import (
    build_bap_features,
    cluster_observations,
    clustering_diagnostics,
    corners_from_sidecar,
    detect_corners,
    devignette,
)
from .mia import MIAGrid
from .model import BAPFeature, CameraIntrinsics, Checkerboard, InternalConfig, Pose, project_points
from .optim import (
    CalibrationProblem,
    barycenters_from_features,
    calibrate,
    evaluate_reprojection,
    evaluate_translation,
    init_extrinsics,
    label_board_corners,
)
from .precalib import OmegaCoefficients, f_number_from_av, run_precalibration
from .profile import build_blur_profile

log = logging.getLogger(__name__)

STAGES = ("precalibrate", "detect", "calibrate", "blurcalib", "profile")
ARTIFACT = {
    "precalibrate": "precalib.json",
    "detect": "features.json",
    "calibrate": "intrinsics.json",
    "blurcalib": "kappa.json",
    "profile": "profile.json",
}


class ValidationError(ValueError):
    pass


class NotConverged(RuntimeError):
    """Raised after a stage wrote its outputs but its optimisation did not converge."""


@dataclass
class FrameEntry:
    path: Path
    frame: int
    sidecar: Path | None = None
    role: str = "train"
    z: float = 0.0


@dataclass
class DatasetDescriptor:
    root: Path
    whites: list  # (path, f_number)
    calibration: list  # FrameEntry
    devignetting_white: tuple  # (path, f_number)
    motion: list  # FrameEntry with z
    board: Checkerboard
    pixel_size: float
    F: float
    focus_distance: float
    n_types: int
    config: InternalConfig
    arrangement: str = "hexagonal"
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, root) -> "DatasetDescriptor":
        root = Path(root)
        doc = artifacts.read_json(root / "dataset.json", schema="plenocal.dataset")

        def aperture(entry):
            if "f_number" in entry:
                return float(entry["f_number"])
            if "av" in entry:
                return f_number_from_av(float(entry["av"]))
            raise ValidationError(f"white image {entry.get('path')} has no aperture")

        def frames(entries):
            return [
                FrameEntry(root / e["path"], int(e.get("frame", i)),
                           root / e["sidecar"] if e.get("sidecar") else None,
                           e.get("role", "train"), float(e.get("z", 0.0)))
                for i, e in enumerate(entries)
            ]

        desc = cls(
            root=root,
            whites=[(root / e["path"], aperture(e)) for e in doc["whites"]],
            calibration=frames(doc.get("calibration", [])),
            devignetting_white=(root / doc["devignetting_white"]["path"], aperture(doc["devignetting_white"])),
            motion=frames(doc.get("motion", [])),
            board=Checkerboard.from_dict(doc["board"]),
            pixel_size=float(doc["pixel_size"]),
            F=float(doc["F"]),
            focus_distance=float(doc["focus_distance"]),
            n_types=int(doc["n_types"]),
            config=InternalConfig(doc["config"]),
            arrangement=doc.get("arrangement", "hexagonal"),
        )
        desc.validate()
        return desc

    def validate(self):
        missing = [str(p) for p, _ in self.whites if not p.exists()]
        missing += [str(f.path) for f in self.calibration + self.motion if not f.path.exists()]
        if not self.devignetting_white[0].exists():
            missing.append(str(self.devignetting_white[0]))
        if missing:
            raise artifacts.ArtifactError(f"missing dataset files: {', '.join(missing[:5])}")
        if len({N for _, N in self.whites}) < 2:
            raise ValidationError("need white images at two or more distinct apertures")


# ---------------------------------------------------------------------------
# stages


def _sibling(path: Path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.stem + suffix)


def stage_precalibrate(desc: DatasetDescriptor, out_path, f_numbers=None, devignette_whites: bool = False) -> dict:
    """Omega coefficients, grid and initial intrinsics; writes the radius scatter as CSV and SVG next to it."""
    whites = desc.whites
    if f_numbers:
        wanted = [float(x) for x in f_numbers]
        whites = [(p, N) for p, N in whites if any(abs(N - w) < 1e-2 * w for w in wanted)]
        if len({N for _, N in whites}) < 2:
            raise ValidationError(f"f-number selection {wanted} leaves fewer than two apertures")
    images = [(N, artifacts.load_image(p)) for p, N in whites]
    res = run_precalibration(
        images, n_types=desc.n_types, config=desc.config, F=desc.F, h=desc.focus_distance,
        s=desc.pixel_size, arrangement=desc.arrangement, devignette=devignette_whites,
    )
    doc = {
        "schema": "plenocal.precalib", "schema_version": 1,
        "omega": res.omega.to_dict(),
        "grid": res.grid.to_dict(),
        "intrinsics": res.intrinsics.to_dict(),
        "silhouettes": {f"{k:g}": v for k, v in sorted(res.silhouettes.items())},
        "used_f_numbers": list(res.used_f_numbers),
    }
    out_path = Path(out_path)
    artifacts.write_json(out_path, doc)
    _write_radius_plot(out_path, res.scatter, res.omega, desc.pixel_size, res.grid.pitch_pix)
    return doc


def _write_radius_plot(out_path: Path, scatter, omega: OmegaCoefficients, s: float, pitch_pix: float):
    lines = ["f_number,inv_f_number,k,l,type,rho_pix,R_mm"]
    lines += [f"{N:g},{iN:.6f},{k},{l},{t},{r:.6f},{R:.8f}" for N, iN, k, l, t, r, R in scatter]
    _sibling(out_path, "_radii.csv").write_text("\n".join(lines) + "\n")
    plt = _pyplot()
    arr = np.array([[iN, t, R] for _, iN, _, _, t, _, R in scatter]) if scatter else np.zeros((0, 3))
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.linspace(0, arr[:, 0].max() * 1.1 if len(arr) else 1, 10)
    for i in range(omega.n_types):
        sel = arr[:, 1] == i + 1
        ax.scatter(arr[sel, 0], arr[sel, 2] * 1e3, s=4, alpha=0.4, label=f"type {i + 1}")
        q = omega.q_prime[i] - s * pitch_pix / 2
        ax.plot(xs, (omega.m * xs + q) * 1e3)
    ax.set_xlabel("1 / N")
    ax.set_ylabel("R [um]")
    ax.legend()
    fig.savefig(_sibling(out_path, "_radii.svg"), format="svg", metadata={"Date": None})
    plt.close(fig)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "plenocal"  # stable element ids
    return plt


def load_precalib(path):
    doc = artifacts.read_json(path, schema="plenocal.precalib")
    return (OmegaCoefficients.from_dict(doc["omega"]), MIAGrid.from_dict(doc["grid"]),
            CameraIntrinsics.from_dict(doc["intrinsics"]))


def _feature_rows(features):
    return [[f.u, f.v, f.rho, f.k, f.l, f.type_i, f.frame_n, f.corner_id] for f in features]


def _features_from_rows(rows):
    return [BAPFeature(float(u), float(v), float(r), int(k), int(l), int(t), int(n), int(c))
            for u, v, r, k, l, t, n, c in rows]


def frame_features(img, entry: FrameEntry, grid: MIAGrid, omega: OmegaCoefficients, intr0: CameraIntrinsics,
                   board: Checkerboard, corners: str, noise: float, rng, support=None) -> tuple:
    """BAP features of one frame, plus clustering diagnostics."""
    if corners == "inject":
        if entry.sidecar is None:
            raise ValidationError(f"{entry.path}: ground-truth injection needs a sidecar")
        sidecar = artifacts.read_json(entry.sidecar, schema="plenocal.sidecar")
        obs = corners_from_sidecar(sidecar, grid, entry.frame, noise=noise, rng=rng)
        clusters = cluster_observations(obs, grid, use_ids=True)
    elif corners == "detect":
        obs = detect_corners(img, grid, entry.frame, mi_radius=0.5 * grid.pitch_pix, support=support)
        clusters = cluster_observations(obs, grid)
        if clusters:
            ids = label_board_corners(np.array([c.barycenter for c in clusters]), board)
            for c, cid in zip(clusters, ids):
                c.corner_id = int(cid)
            clusters = [c for c in clusters if c.corner_id >= 0]
    else:
        raise ValidationError(f"unknown corner source {corners!r}")
    feats = build_bap_features(clusters, omega, grid, intr0.lam, intr0.pixel_size)
    return feats, clustering_diagnostics(clusters, obs)


def stage_detect(desc: DatasetDescriptor, precalib_path, out_path, corners: str = "detect", noise: float = 0.0,
                 seed: int = 0) -> dict:
    """Corners, clusters, virtual depths and BAP features for calibration and motion frames.

    ``corners="inject"`` reads exact corners from the sidecars (optionally with
    Gaussian noise of ``noise`` pixels) instead of detecting them.
    """
    omega, grid, intr0 = load_precalib(precalib_path)
    white = artifacts.load_image(desc.devignetting_white[0]) if corners == "detect" else None
    support = white_support(white) if white is not None else None
    rng = np.random.default_rng(seed)
    doc = {"schema": "plenocal.features", "schema_version": 1, "corners": corners, "noise": noise, "seed": seed,
           "columns": ["u", "v", "rho", "k", "l", "type", "frame", "corner_id"],
           "calibration": [], "motion": [], "diagnostics": {}}
    for group, entries in (("calibration", desc.calibration), ("motion", desc.motion)):
        rows = []
        for entry in entries:
            img = devignette(artifacts.load_image(entry.path), white) if white is not None else None
            feats, diag = frame_features(img, entry, grid, omega, intr0, desc.board, corners, noise, rng, support)
            doc["diagnostics"][f"{group}/{entry.frame}"] = diag
            rows.extend(_feature_rows(feats))
            log.info("%s frame %d: %d features", group, entry.frame, len(feats))
        doc[group] = rows
    artifacts.write_json(out_path, doc)
    return doc


def load_features(path) -> tuple:
    """``(calibration features, motion features)`` from a features artifact."""
    doc = artifacts.read_json(path, schema="plenocal.features")
    return _features_from_rows(doc["calibration"]), _features_from_rows(doc["motion"])


def report_paths(intrinsics_path) -> tuple:
    return _sibling(intrinsics_path, "_report.json"), _sibling(intrinsics_path, "_report.txt")


def stage_calibrate(desc: DatasetDescriptor, precalib_path, features_path, out_path, freeze=(),
                    max_iter: int = 500) -> dict:
    """Joint refinement of intrinsics and poses on the training frames.

    Writes the intrinsics to ``out_path`` and the report (JSON and text, with
    the optimised poses) next to it.  Raises :class:`NotConverged` after
    writing when the optimiser ran out of iterations.
    """
    _, grid, intr0 = load_precalib(precalib_path)
    calib_feats, _ = load_features(features_path)
    train = {f.frame for f in desc.calibration if f.role == "train"}
    feats = [f for f in calib_feats if f.frame_n in train]
    poses = init_extrinsics(barycenters_from_features(feats), intr0, desc.board)
    feats = [f for f in feats if f.frame_n in poses]
    if not feats:
        raise ValidationError("no usable calibration frame")
    try:
        problem = CalibrationProblem(intr0, poses, feats, grid.indices, grid.centers, desc.board, frozen=freeze)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    result, report = calibrate(problem, max_iter=max_iter)
    artifacts.write_json(out_path, result.intrinsics.to_dict())
    doc = report.to_dict()
    doc["poses"] = {str(n): p.to_dict() for n, p in sorted(result.poses.items())}
    rep_json, rep_txt = report_paths(out_path)
    artifacts.write_json(rep_json, doc)
    rep_txt.write_text(report.text())
    if not report.converged:
        raise NotConverged(f"calibration did not converge: {report.message}")
    return doc


def load_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(artifacts.read_json(path, schema="plenocal.intrinsics"))


def load_poses(intrinsics_path) -> dict:
    doc = artifacts.read_json(report_paths(intrinsics_path)[0], schema="plenocal.calibration_report")
    return {int(k): Pose.from_dict(v) for k, v in doc["poses"].items()}


def model_radii(intr: CameraIntrinsics, poses: dict, features, board: Checkerboard) -> list:
    """Features with ``rho`` replaced by the calibrated model's prediction; unposed frames are dropped."""
    pts = board.corner_points()
    out = []
    for f in features:
        pose = poses.get(f.frame_n)
        if pose is None:
            continue
        rho = float(project_points(intr, pose, pts[f.corner_id], f.k, f.l)[0, 2])
        out.append(BAPFeature(f.u, f.v, rho, f.k, f.l, f.type_i, f.frame_n, f.corner_id))
    return out


def stage_blurcalib(desc: DatasetDescriptor, precalib_path, features_path, out_path, intrinsics_path=None) -> dict:
    """Fit the blur spread factor on corner windows seen through lenses of different types.

    With ``intrinsics_path`` the blur radii come from the calibrated model
    (and the poses in its report); otherwise from the detected features.
    """
    _, grid, _ = load_precalib(precalib_path)
    calib_feats, _ = load_features(features_path)
    source = "features"
    if intrinsics_path is not None and report_paths(intrinsics_path)[0].exists():
        calib_feats = model_radii(load_intrinsics(intrinsics_path), load_poses(intrinsics_path),
                                  calib_feats, desc.board)
        source = "model"
    white = artifacts.load_image(desc.devignetting_white[0])
    support = white_support(white)
    samples = []
    for entry in desc.calibration:
        if entry.role != "train":
            continue
        img = devignette(artifacts.load_image(entry.path), white)
        samples += collect_samples(img, calib_feats, grid, entry.frame, support=support)
    res = calibrate_kappa(samples)
    doc = res.to_dict()
    doc["rho_source"] = source
    artifacts.write_json(out_path, doc)
    return doc


def stage_profile(intr: CameraIntrinsics, out_path, wavelength_m: float = 750e-9,
                  near: float | None = None, far: float | None = None) -> dict:
    """Blur-versus-distance profile; ``out_path`` stem gets ``.json``, ``.csv`` and ``.svg``."""
    F = intr.main.F
    prof = build_blur_profile(intr, near or 2.0 * F, far or 1000.0 * F, wavelength=wavelength_m * 1e3)
    doc = prof.to_dict()
    doc["wavelength_m"] = wavelength_m
    out_path = Path(out_path)
    base = out_path.with_suffix("")
    artifacts.write_json(base.with_suffix(".json"), doc)
    base.with_suffix(".csv").write_text(prof.to_csv())
    base.with_suffix(".svg").write_text(prof.to_svg(intr.pixel_size))
    return doc


def stage_evaluate(desc: DatasetDescriptor, intrinsics_path, features_path, out_path, mode: str) -> dict:
    """Hold-out reprojection errors or motion-sequence translation errors."""
    intr = load_intrinsics(intrinsics_path)
    calib_feats, motion_feats = load_features(features_path)
    if mode == "reprojection":
        hold = {f.frame for f in desc.calibration if f.role == "holdout"}
        if not hold:
            hold = {f.frame for f in desc.calibration}
            log.warning("no hold-out frames listed; evaluating on all calibration frames")
        feats = [f for f in calib_feats if f.frame_n in hold]
        if not feats:
            raise ValidationError("no features on the evaluation frames")
        doc = evaluate_reprojection(intr, feats, desc.board).to_dict()
        artifacts.write_json(out_path, doc)
        return doc
    if mode == "translation":
        z = {f.frame: f.z for f in desc.motion}
        if len(z) < 2:
            raise ValidationError("translation evaluation needs a motion sequence of two or more frames")
        rep = evaluate_translation(intr, motion_feats, desc.board, z)
        doc = rep.to_dict()
        artifacts.write_json(out_path, doc)
        _write_translation_plot(Path(out_path), rep)
        return doc
    raise ValidationError(f"unknown evaluation mode {mode!r}")


def _write_translation_plot(out_path: Path, rep):
    steps = sorted(rep.by_step)
    _sibling(out_path, ".csv").write_text(
        "delta_z_mm,epsilon_z_percent\n" + "".join(f"{k:g},{100 * rep.by_step[k]:.6f}\n" for k in steps)
    )
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([f"{k:g}" for k in steps], [100 * rep.by_step[k] for k in steps])
    ax.set_xlabel("displacement [mm]")
    ax.set_ylabel("error [%]")
    fig.savefig(_sibling(out_path, ".svg"), format="svg", metadata={"Date": None})
    plt.close(fig)


def run_pipeline(desc: DatasetDescriptor, out_dir, *, resume: str | None = None, corners: str = "detect",
                 noise: float = 0.0, seed: int = 0, freeze=(), wavelength_m: float = 750e-9,
                 f_numbers=None, devignette_whites: bool = False) -> dict:
    """Run every stage in order inside ``out_dir``.

    With ``resume`` the stages before it are skipped, provided their
    artifacts exist; otherwise execution restarts at the first missing one.
    Returns the artifact paths that were (re)written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").unlink(missing_ok=True)
    path = {k: out / v for k, v in ARTIFACT.items()}
    start = 0
    if resume is not None:
        if resume not in STAGES:
            raise ValidationError(f"unknown stage {resume!r}; choose from {', '.join(STAGES)}")
        start = STAGES.index(resume)
        for prev in STAGES[:start]:
            if not path[prev].exists():
                log.warning("artifact of %s missing; resuming there", prev)
                start = STAGES.index(prev)
                break
    written = {}
    for stage in STAGES[start:]:
        log.info("stage %s", stage)
        if stage == "precalibrate":
            stage_precalibrate(desc, path[stage], f_numbers, devignette_whites)
        elif stage == "detect":
            stage_detect(desc, path["precalibrate"], path[stage], corners, noise, seed)
        elif stage == "calibrate":
            stage_calibrate(desc, path["precalibrate"], path["detect"], path[stage], freeze)
        elif stage == "blurcalib":
            if desc.n_types < 2:
                # every view of a corner has the same blur radius, so nothing constrains kappa
                log.warning("single lens type: kappa not applicable, writing a placeholder")
                artifacts.write_json(path[stage], {
                    "schema": "plenocal.kappa", "schema_version": 1, "kappa": None,
                    "status": "not-applicable: single lens type",
                })
            else:
                stage_blurcalib(desc, path["precalibrate"], path["detect"], path[stage], path["calibrate"])
        else:
            stage_profile(load_intrinsics(path["calibrate"]), path[stage], wavelength_m)
        written[stage] = path[stage]
    return written
