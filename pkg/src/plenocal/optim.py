"""Joint intrinsic/extrinsic refinement over BAP features and micro-image centres."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .lm import levenberg_marquardt
from .model import (
    POSE_PARAMS,
    BAPFeature,
    CameraIntrinsics,
    Checkerboard,
    Pose,
    ProjectionError,
    mic_jacobian,
    project_mics,
    project_points,
    projection_jacobian,
)

log = logging.getLogger(__name__)

FREEZE_GROUPS = {
    "tilt": ("theta_x", "theta_y"),
    "pitch": ("pitch_mu",),
    "dist": ("Q1", "Q2", "Q3", "P1", "P2"),
}
SENTINEL = 1.0e6  # residual assigned to observations that cannot be projected


class CalibrationError(RuntimeError):
    pass


def expand_frozen(names, n_types: int) -> frozenset:
    """Resolve group aliases (``tilt``, ``pitch``, ``dist``) to parameter names."""
    from .model import param_names

    universe = set(param_names(n_types))
    out = set()
    for name in names:
        name = name.strip()
        if not name:
            continue
        if name in FREEZE_GROUPS:
            out.update(FREEZE_GROUPS[name])
        elif name in universe:
            out.add(name)
        else:
            raise ValueError(f"unknown parameter or group {name!r}")
    return frozenset(out)


@dataclass
class CalibrationProblem:
    intrinsics: CameraIntrinsics
    poses: dict
    features: list
    mic_indices: np.ndarray
    mic_centers: np.ndarray
    board: Checkerboard
    frozen: frozenset = frozenset()
    mic_weight: float = 1.0

    def __post_init__(self):
        self.frozen = expand_frozen(self.frozen, self.intrinsics.n_types)
        self.mic_indices = np.asarray(self.mic_indices, dtype=int).reshape(-1, 2)
        self.mic_centers = np.asarray(self.mic_centers, dtype=float).reshape(-1, 2)
        if len(self.mic_indices) != len(self.mic_centers):
            raise ValueError("MIC indices and centres differ in length")
        n = self.board.n_corners
        for f in self.features:
            if not 0 <= f.corner_id < n:
                raise ValueError(f"feature refers to corner {f.corner_id}, board has {n}")
            if f.frame_n not in self.poses:
                raise ValueError(f"no pose for frame {f.frame_n}")

    @property
    def frames(self) -> list:
        return sorted(self.poses)

    def free_mask(self) -> np.ndarray:
        names = self.intrinsics.param_names()
        intr = [n not in self.frozen for n in names]
        return np.array(intr + [True] * (6 * len(self.poses)), dtype=bool)

    def with_state(self, intrinsics, poses) -> "CalibrationProblem":
        return replace(self, intrinsics=intrinsics, poses=dict(poses))


# ---------------------------------------------------------------------------
# extrinsics initialisation


def _pinhole(intr: CameraIntrinsics) -> np.ndarray:
    f = (intr.mla.D + intr.mla.d) / intr.pixel_size
    return np.array([[f, 0.0, intr.main.u0], [0.0, f, intr.main.v0], [0.0, 0.0, 1.0]])


def label_board_corners(points, board: Checkerboard, min_fraction: float = 0.5) -> np.ndarray:
    """Board corner id for each 2-D point of a perspective grid, ``-1`` if unplaced.

    Grids covering fewer than ``min_fraction`` of the board corners are left
    unlabelled: with many corners missing, the nearest neighbours used as grid
    steps may span two squares or a diagonal.

    The grid is grown from the most central point using a homography refitted
    as points are added.  The 180 degree ambiguity of a plain checkerboard is
    resolved by putting corner 0 at the point with the largest ``u + v``: the
    raw image is point-inverted, so this is the upper-left corner as seen
    from the camera.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    ids = -np.ones(n, dtype=int)
    if n < 4:
        return ids
    d2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    seed = int(np.argmin(((pts - np.median(pts, axis=0)) ** 2).sum(1)))
    order = np.argsort(d2[seed])
    e1 = pts[order[0]] - pts[seed]
    e2 = None
    for j in order[1:6]:
        cand = pts[j] - pts[seed]
        cos = abs(cand @ e1) / (np.linalg.norm(cand) * np.linalg.norm(e1))
        if cos < 0.5:
            e2 = cand
            break
    if e2 is None:
        return ids
    step = min(np.linalg.norm(e1), np.linalg.norm(e2))
    coords = {seed: (0, 0)}
    taken = {(0, 0): seed}
    frontier = [seed]
    while frontier:
        grid = np.array([coords[i] for i in coords], dtype=float)
        img = pts[list(coords)]
        H = None
        if len(coords) >= 6 and np.linalg.matrix_rank(grid - grid.mean(0)) == 2:
            H, _ = cv2.findHomography(grid, img, 0)
        new = []
        for i in frontier:
            gi, gj = coords[i]
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                key = (gi + di, gj + dj)
                if key in taken:
                    continue
                if H is not None:
                    q = H @ np.array([key[0], key[1], 1.0])
                    pred = q[:2] / q[2]
                else:
                    pred = pts[seed] + key[0] * e1 + key[1] * e2
                dist = np.hypot(*(pts - pred).T)
                j = int(np.argmin(dist))
                if dist[j] < 0.3 * step and j not in coords:
                    coords[j] = key
                    taken[key] = j
                    new.append(j)
        frontier = new
    if len(coords) < min_fraction * board.n_corners:
        log.warning("only %d of %d board corners placed; frame left unlabelled", len(coords), board.n_corners)
        return ids
    idx = np.array(list(coords))
    g = np.array([coords[i] for i in idx])
    g -= g.min(0)
    span = g.max(0) + 1
    if (span[0] > board.cols or span[1] > board.rows) and span[0] <= board.rows and span[1] <= board.cols:
        g = g[:, ::-1]
        span = span[::-1]
    if span[0] > board.cols or span[1] > board.rows:
        log.warning("grid of %dx%d points does not fit the %dx%d board", span[0], span[1], board.cols, board.rows)
        return ids
    # orient so corner 0 sits at the largest u + v and the labelling is right-handed
    best = None
    for flip_i in (False, True):
        for flip_j in (False, True):
            gi = span[0] - 1 - g[:, 0] if flip_i else g[:, 0]
            gj = span[1] - 1 - g[:, 1] if flip_j else g[:, 1]
            origin = pts[idx[(gi == 0) & (gj == 0)]]
            key = -origin[0].sum() if len(origin) else np.inf
            # a point inversion keeps handedness, so the (i, j) image axes must have det > 0
            A = np.linalg.lstsq(np.column_stack([gi, gj, np.ones(len(gi))]), pts[idx], rcond=None)[0]
            cand = (np.linalg.det(A[:2]) <= 0, key)
            if best is None or cand < best[0]:
                best = (cand, gi, gj)
    _, gi, gj = best
    ids[idx] = gj * board.cols + gi
    return ids


def _solve_pnp(obj, img, intr: CameraIntrinsics) -> Pose | None:
    K = _pinhole(intr)
    mirrored = np.column_stack([2 * intr.main.u0 - img[:, 0], 2 * intr.main.v0 - img[:, 1]])
    obj = np.ascontiguousarray(obj, dtype=np.float64)
    mirrored = np.ascontiguousarray(mirrored, dtype=np.float64)
    try:
        n_sol, rvecs, tvecs, errs = cv2.solvePnPGeneric(obj, mirrored, K, None, flags=cv2.SOLVEPNP_IPPE)
    except cv2.error:
        n_sol = 0
    best = None
    for r, t in zip(rvecs if n_sol else [], tvecs if n_sol else []):
        r, t = cv2.solvePnPRefineLM(obj, mirrored, K, None, r.copy(), t.copy())
        pose = Pose.from_rotvec(r.ravel(), t.ravel())
        cam = pose.apply(obj)
        if np.any(cam[:, 2] <= 0):
            continue
        proj = cam[:, :2] / cam[:, 2:] * K[0, 0] + K[:2, 2]
        err = float(np.sqrt(((proj - mirrored) ** 2).sum(1).mean()))
        if best is None or err < best[0]:
            best = (err, pose)
    return None if best is None else best[1]


def init_extrinsics(clusters, intrinsics: CameraIntrinsics, board: Checkerboard, min_clusters: int = 4) -> dict:
    """Initial board poses from cluster barycenters.

    A barycenter behaves like the image of the corner through a pinhole at the
    main-lens centre with focal length ``(D + d) / s``, mirrored about the
    principal point.  Clusters without a known corner id are labelled by
    :func:`label_board_corners`, which writes the id back onto the cluster.
    Frames with fewer than ``min_clusters`` usable clusters are dropped.
    """
    by_frame = {}
    for cl in clusters:
        by_frame.setdefault(cl.frame_n, []).append(cl)
    poses = {}
    for n, cls in sorted(by_frame.items()):
        bary = np.array([cl.barycenter for cl in cls])
        ids = np.array([cl.corner_id for cl in cls])
        if np.any(ids < 0) or len(set(ids)) != len(ids):
            ids = label_board_corners(bary, board)
            for cl, cid in zip(cls, ids):
                cl.corner_id = int(cid)
        ok = ids >= 0
        if ok.sum() < min_clusters:
            log.warning("frame %d dropped: %d usable clusters", n, int(ok.sum()))
            continue
        obj = board.corner_points()[ids[ok]]
        pose = _solve_pnp(obj, bary[ok], intrinsics)
        if pose is None:
            log.warning("frame %d dropped: PnP failed", n)
            continue
        poses[n] = pose
    return poses


def barycenters_from_features(features) -> list:
    """Cluster-like records (one per frame and corner) built from BAP features."""
    from .features import Cluster, CornerObservation

    groups = {}
    for f in features:
        groups.setdefault((f.frame_n, f.corner_id), []).append(
            CornerObservation(f.u, f.v, f.k, f.l, f.frame_n, f.corner_id)
        )
    return [Cluster(cid, m, frame_n=n) for (n, cid), m in sorted(groups.items())]


# ---------------------------------------------------------------------------
# cost


@dataclass
class _Frame:
    n: int
    rows: np.ndarray  # feature indices
    points: np.ndarray
    k: np.ndarray
    l: np.ndarray
    obs: np.ndarray  # (m, 3)


def _frames(problem: CalibrationProblem) -> list:
    pts = problem.board.corner_points()
    out = []
    for n in problem.frames:
        rows = np.array([i for i, f in enumerate(problem.features) if f.frame_n == n], dtype=int)
        feats = [problem.features[i] for i in rows]
        out.append(_Frame(
            n, rows,
            pts[[f.corner_id for f in feats]].reshape(-1, 3),
            np.array([f.k for f in feats], dtype=int),
            np.array([f.l for f in feats], dtype=int),
            np.array([[f.u, f.v, f.rho] for f in feats], dtype=float).reshape(-1, 3),
        ))
    return out


def _project_frame(intr, pose, fr: _Frame):
    """Projected (u, v, rho) and a mask of observations that could be projected."""
    if len(fr.rows) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    try:
        return project_points(intr, pose, fr.points, fr.k, fr.l), np.ones(len(fr.rows), dtype=bool)
    except ProjectionError:
        vals = np.zeros((len(fr.rows), 3))
        ok = np.ones(len(fr.rows), dtype=bool)
        for i in range(len(fr.rows)):
            try:
                vals[i] = project_points(intr, pose, fr.points[i : i + 1], fr.k[i], fr.l[i])[0]
            except ProjectionError:
                ok[i] = False
        return vals, ok


def _residuals(problem, intr, poses, frames):
    n_feat = len(problem.features)
    res = np.zeros(3 * n_feat + 2 * len(problem.mic_indices))
    flagged = []
    for fr in frames:
        vals, ok = _project_frame(intr, poses[fr.n], fr)
        r = vals - fr.obs
        r[~ok] = SENTINEL
        flagged.extend(fr.rows[~ok].tolist())
        res[(3 * fr.rows[:, None] + np.arange(3)).ravel()] = r.ravel()
    if len(problem.mic_indices):
        mics = project_mics(intr, problem.mic_indices[:, 0], problem.mic_indices[:, 1])
        res[3 * n_feat :] = math.sqrt(problem.mic_weight) * (mics - problem.mic_centers).ravel()
    return res, flagged


def total_cost(problem: CalibrationProblem) -> np.ndarray:
    """Residual vector: ``(u, v, rho)`` per feature, then ``(u, v)`` per MIC.

    Unprojectable observations get :data:`SENTINEL` residuals and a warning.
    """
    res, flagged = _residuals(problem, problem.intrinsics, problem.poses, _frames(problem))
    if flagged:
        log.warning("%d observations could not be projected", len(flagged))
    return res


def _jacobian(problem, intr, poses, frames):
    n_feat = len(problem.features)
    n_int = intr.n_params
    frame_col = {fr.n: n_int + 6 * i for i, fr in enumerate(frames)}
    J = np.zeros((3 * n_feat + 2 * len(problem.mic_indices), n_int + 6 * len(frames)))
    for fr in frames:
        if len(fr.rows) == 0:
            continue
        _, ok = _project_frame(intr, poses[fr.n], fr)
        sel = fr.rows[ok]
        if len(sel) == 0:
            continue
        _, ji, jp = projection_jacobian(intr, poses[fr.n], fr.points[ok], fr.k[ok], fr.l[ok])
        rows = (3 * sel[:, None] + np.arange(3)).ravel()
        J[rows, :n_int] = ji.reshape(-1, n_int)
        c = frame_col[fr.n]
        J[rows, c : c + 6] = jp.reshape(-1, 6)
    if len(problem.mic_indices):
        _, jm = mic_jacobian(intr, problem.mic_indices[:, 0], problem.mic_indices[:, 1])
        J[3 * n_feat :, :n_int] = math.sqrt(problem.mic_weight) * jm.reshape(-1, n_int)
    return J


def cost_jacobian(problem: CalibrationProblem) -> np.ndarray:
    """Jacobian of :func:`total_cost`; intrinsics columns first, then 6 per frame.

    Pose columns are left axis-angle increments followed by translation
    increments, frames in ascending order.
    """
    return _jacobian(problem, problem.intrinsics, problem.poses, _frames(problem))


def parameter_names(problem: CalibrationProblem) -> list:
    names = problem.intrinsics.param_names()
    for n in problem.frames:
        names += [f"{p}[{n}]" for p in POSE_PARAMS]
    return names


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class CalibrationReport:
    status: str
    message: str
    n_iter: int
    initial_cost: float
    final_cost: float
    rmse_uv: float
    rmse_rho: float
    rmse_mic: float
    rmse_all: float
    min_eigenvalue: float
    n_features: int
    n_frames: int
    frozen: list = field(default_factory=list)
    flagged: int = 0
    cost_history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict:
        return {
            "schema": "plenocal.calibration_report", "schema_version": 1,
            "status": self.status, "message": self.message, "n_iter": self.n_iter,
            "initial_cost": self.initial_cost, "final_cost": self.final_cost,
            "rmse": {"uv": self.rmse_uv, "rho": self.rmse_rho, "mic": self.rmse_mic, "all": self.rmse_all},
            "min_eigenvalue": self.min_eigenvalue, "n_features": self.n_features,
            "n_frames": self.n_frames, "frozen": sorted(self.frozen), "flagged": self.flagged,
            "cost_history": self.cost_history,
        }

    def text(self) -> str:
        lines = [
            f"status        {self.status} ({self.message})",
            f"iterations    {self.n_iter}",
            f"cost          {self.initial_cost:.6g} -> {self.final_cost:.6g}",
            f"RMSE u,v      {self.rmse_uv:.4f} px",
            f"RMSE rho      {self.rmse_rho:.4f} px",
            f"RMSE MIC      {self.rmse_mic:.4f} px",
            f"features      {self.n_features} in {self.n_frames} frames",
            f"frozen        {', '.join(sorted(self.frozen)) or 'none'}",
            f"min eigval    {self.min_eigenvalue:.3g}",
        ]
        return "\n".join(lines) + "\n"


def residual_summary(problem: CalibrationProblem, res=None) -> dict:
    """RMSE split into the corner, radius and MIC terms."""
    if res is None:
        res = total_cost(problem)
    n = len(problem.features)
    feat = res[: 3 * n].reshape(-1, 3)
    mic = res[3 * n :] / math.sqrt(problem.mic_weight) if problem.mic_weight > 0 else res[3 * n :]

    def rms(x):
        return float(np.sqrt(np.mean(np.square(x)))) if np.size(x) else 0.0

    return {"uv": rms(feat[:, :2]), "rho": rms(feat[:, 2]), "mic": rms(mic), "all": rms(res)}


def calibrate(problem: CalibrationProblem, *, max_iter: int = 500, ftol: float = 1e-10,
              gtol: float = 1e-12) -> tuple:
    """Minimise the total cost over the non-frozen intrinsics and all poses.

    Returns ``(optimised problem, CalibrationReport)``.  A result is returned
    even when the iteration budget is exhausted; its status says so.

    Raises
    ------
    CalibrationError
        If the cost is not finite at the starting point.
    """
    frames = _frames(problem)
    order = [fr.n for fr in frames]
    x0 = (problem.intrinsics.to_vector(), tuple(problem.poses[n] for n in order))
    base = problem.intrinsics

    def unpack(x):
        intr = base.from_vector(x[0])
        if intr.main.F <= 0 or min(intr.mla.focals) <= 0:
            raise ValueError("focal lengths must stay positive")
        return intr, dict(zip(order, x[1]))

    def residuals(x):
        try:
            intr, poses = unpack(x)
        except ValueError:
            # the step left the valid parameter domain; LM rejects non-finite costs
            return np.full(len(r0), np.inf)
        return _residuals(problem, intr, poses, frames)[0]

    def jacobian(x):
        intr, poses = unpack(x)
        return _jacobian(problem, intr, poses, frames)

    n_int = base.n_params

    def update(x, delta):
        vec = x[0] + delta[:n_int]
        poses = tuple(
            p.perturbed(delta[n_int + 6 * i : n_int + 6 * i + 3], delta[n_int + 6 * i + 3 : n_int + 6 * i + 6])
            for i, p in enumerate(x[1])
        )
        return vec, poses

    r0 = _residuals(problem, *unpack(x0), frames)[0]
    if not np.all(np.isfinite(r0)):
        raise CalibrationError("non-finite cost at the initial point; check intrinsics and poses")
    res = levenberg_marquardt(residuals, jacobian, x0, update=update, max_iter=max_iter,
                              ftol=ftol, gtol=gtol, mask=problem.free_mask())
    intr, poses = unpack(res.x)
    out = problem.with_state(intr, poses)
    final_res, flagged = _residuals(out, intr, poses, frames)
    summary = residual_summary(out, final_res)
    report = CalibrationReport(
        status=res.status, message=res.message, n_iter=res.n_iter,
        initial_cost=res.cost_history[0], final_cost=res.cost,
        rmse_uv=summary["uv"], rmse_rho=summary["rho"], rmse_mic=summary["mic"], rmse_all=summary["all"],
        min_eigenvalue=res.min_eigenvalue, n_features=len(problem.features), n_frames=len(frames),
        frozen=sorted(problem.frozen), flagged=len(flagged), cost_history=res.cost_history,
    )
    return out, report


def estimate_poses(intrinsics: CameraIntrinsics, features, board: Checkerboard,
                   initial: dict | None = None, max_iter: int = 100) -> dict:
    """Per-frame pose refinement with the intrinsics held fixed."""
    frozen = frozenset(intrinsics.param_names())
    if initial is None:
        initial = init_extrinsics(barycenters_from_features(features), intrinsics, board)
    poses = {}
    for n, pose in sorted(initial.items()):
        feats = [f for f in features if f.frame_n == n]
        prob = CalibrationProblem(intrinsics, {n: pose}, feats, np.zeros((0, 2)), np.zeros((0, 2)),
                                  board, frozen=frozen)
        out, _ = calibrate(prob, max_iter=max_iter)
        poses[n] = out.poses[n]
    return poses


@dataclass
class ReprojectionReport:
    rmse_uv: float
    rmse_rho: float
    per_frame: dict
    poses: dict

    def to_dict(self):
        return {
            "schema": "plenocal.reprojection", "schema_version": 1,
            "rmse_uv": self.rmse_uv, "rmse_rho": self.rmse_rho,
            "per_frame": {str(k): v for k, v in self.per_frame.items()},
            "poses": {str(k): p.to_dict() for k, p in self.poses.items()},
        }


def evaluate_reprojection(intrinsics: CameraIntrinsics, features, board: Checkerboard,
                          poses: dict | None = None) -> ReprojectionReport:
    """Corner and radius RMSE after fitting each frame's pose with fixed intrinsics.

    The corner RMSE pools the ``u`` and ``v`` residuals, so isotropic noise of
    standard deviation ``sigma`` per coordinate gives an RMSE close to ``sigma``.
    """
    poses = estimate_poses(intrinsics, features, board, initial=poses)
    feats = [f for f in features if f.frame_n in poses]
    prob = CalibrationProblem(intrinsics, poses, feats, np.zeros((0, 2)), np.zeros((0, 2)), board)
    res = total_cost(prob).reshape(-1, 3)
    frame_of = np.array([f.frame_n for f in feats])
    per_frame = {}
    for n in poses:
        r = res[frame_of == n]
        per_frame[n] = {"uv": float(np.sqrt(np.mean(r[:, :2] ** 2))), "rho": float(np.sqrt(np.mean(r[:, 2] ** 2)))}
    return ReprojectionReport(
        rmse_uv=float(np.sqrt(np.mean(res[:, :2] ** 2))),
        rmse_rho=float(np.sqrt(np.mean(res[:, 2] ** 2))),
        per_frame=per_frame, poses=poses,
    )


@dataclass
class TranslationReport:
    by_step: dict  # displacement (mm) -> mean relative error
    mean: float
    std: float
    estimated_z: dict

    def to_dict(self):
        return {
            "schema": "plenocal.translation", "schema_version": 1,
            "epsilon_z": {f"{k:g}": v for k, v in sorted(self.by_step.items())},
            "mean": self.mean, "std": self.std,
            "estimated_z": {str(k): v for k, v in self.estimated_z.items()},
        }


def translation_errors(z_true: dict, z_est: dict) -> TranslationReport:
    """Relative displacement error for every frame pair, grouped by true displacement."""
    frames = sorted(set(z_true) & set(z_est))
    groups = {}
    for i in frames:
        for j in frames:
            dz = z_true[i] - z_true[j]
            if dz <= 0:
                continue
            est = z_est[i] - z_est[j]
            groups.setdefault(round(dz, 9), []).append(abs(dz - est) / dz)
    by_step = {k: float(np.mean(v)) for k, v in groups.items()}
    allv = np.concatenate([v for v in groups.values()]) if groups else np.zeros(0)
    return TranslationReport(
        by_step=by_step,
        mean=float(allv.mean()) if allv.size else float("nan"),
        std=float(allv.std()) if allv.size else float("nan"),
        estimated_z={n: float(z_est[n]) for n in frames},
    )


def evaluate_translation(intrinsics: CameraIntrinsics, features, board: Checkerboard, z_true: dict,
                         poses: dict | None = None) -> TranslationReport:
    """Translation error along the optical axis on a sequence with known z positions."""
    poses = estimate_poses(intrinsics, features, board, initial=poses)
    return translation_errors(z_true, {n: float(p.translation[2]) for n, p in poses.items()})
