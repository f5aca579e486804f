"""Thin-lens Monte Carlo renderer for plenoptic raw images.

Each pixel integrates rays over the main-lens aperture disc.  For an aperture
sample ``M`` and a candidate micro-lens, the ray reaching the pixel is the line
through ``M`` and the micro-lens conjugate of the pixel; it contributes only if
it crosses the micro-lens plane inside that lens' disc.  The object-side ray is
recovered with the inverse main-lens mapping and intersected with the target
plane.  Vignetting therefore comes purely from aperture and lens-disc rejection.

Sampling is deterministic: every pixel uses one scrambled 4-D Sobol set
(pixel jitter and aperture position) shifted modulo one by a hash of
``(seed, row, col)``, so results do not depend on the thread schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numba

numba.config.THREADING_LAYER = "workqueue"  # TBB is often too old; workqueue always exists
import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from . import artifacts
from .model import (
    CameraIntrinsics,
    Checkerboard,
    Pose,
    mla_rotation,
    project_mics,
    project_points,
)

log = logging.getLogger(__name__)

WHITE = "white-diffuse"
TEXTURED = "textured"
SPOT = "spot"

BLACK_LEVEL = 0.1
WHITE_LEVEL = 0.9
_N_CANDIDATES = 4


@dataclass(frozen=True)
class SceneSpec:
    board: Checkerboard | None = None
    pose: Pose | None = None
    illumination: str = WHITE
    f_number: float = 4.0
    rng_seed: int = 0
    spot: tuple = (0.0, 0.0, 0.002)  # world x, y and radius (mm) for SPOT scenes

    def __post_init__(self):
        if not self.f_number > 0:
            raise ValueError("f-number must be positive")
        if self.illumination not in (WHITE, TEXTURED, SPOT):
            raise ValueError(f"unknown illumination {self.illumination!r}")
        if self.illumination != WHITE and (self.board is None or self.pose is None):
            raise ValueError("textured scenes need a board and a pose")


@dataclass(frozen=True)
class RenderSettings:
    spp: int = 64
    read_noise: float = 0.0
    roi: tuple | None = None  # (u_min, v_min, u_max, v_max), exclusive max


def sensor_size(intr: CameraIntrinsics) -> tuple[int, int]:
    if intr.sensor_size:
        return int(intr.sensor_size[0]), int(intr.sensor_size[1])
    mics = project_mics(intr, *intr.mla.indices())
    pitch = intr.mi_pitch_pix
    return int(math.ceil(mics[:, 0].max() + pitch)), int(math.ceil(mics[:, 1].max() + pitch))


@numba.njit(cache=True, inline="always")
def _hash01(a, b, c, salt):
    # splitmix64 finaliser on a combined key
    x = np.uint64(a) * np.uint64(0x9E3779B97F4A7C15)
    x ^= np.uint64(b) * np.uint64(0xBF58476D1CE4E5B9)
    x ^= np.uint64(c) * np.uint64(0x94D049BB133111EB)
    x ^= np.uint64(salt) * np.uint64(0xD6E8FEB86659FD93)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return (x >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _undistort(xu, yu, q1, q2, q3, p1, p2):
    x, y = xu, yu
    for _ in range(20):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (q1 + r2 * (q2 + r2 * q3))
        dx = p1 * (r2 + 2.0 * x * x) + 2.0 * p2 * x * y
        dy = p2 * (r2 + 2.0 * y * y) + 2.0 * p1 * x * y
        x = (xu - dx) / radial
        y = (yu - dy) / radial
    return x, y


@numba.njit(cache=True)
def _radiance(px, py, mode, square, cols, rows, spot_x, spot_y, spot_r):
    if mode == 1:
        if px < -square or py < -square or px > cols * square or py > rows * square:
            return WHITE_LEVEL
        ix = math.floor(px / square)
        iy = math.floor(py / square)
        return BLACK_LEVEL if (ix + iy) % 2 == 0 else WHITE_LEVEL
    dx = px - spot_x
    dy = py - spot_y
    return 1.0 if dx * dx + dy * dy <= spot_r * spot_r else 0.0


@numba.njit(cache=True, parallel=True)
def _render_kernel(
    out, u_lo, v_lo, cand, centres, focals, normal, Rmla,
    u0, v0, s, F, A, zs, mu, dist, mode, Rb, tb,
    square, cols, rows, spot, samples, seed,
):
    h, w = out.shape
    half_mu2 = (0.5 * mu) ** 2
    nx, ny, nz = normal[0], normal[1], normal[2]
    has_dist = dist[0] != 0.0 or dist[1] != 0.0 or dist[2] != 0.0 or dist[3] != 0.0 or dist[4] != 0.0
    spp = samples.shape[0]
    inv_spp = 1.0 / spp
    for row in numba.prange(h):
        for col in range(w):
            pu = u_lo + col
            pv = v_lo + row
            o1 = _hash01(seed, pv, pu, 1)
            o2 = _hash01(seed, pv, pu, 2)
            o3 = _hash01(seed, pv, pu, 3)
            o4 = _hash01(seed, pv, pu, 4)
            acc = 0.0
            for c in range(cand.shape[2]):
                li = cand[row, col, c]
                if li < 0:
                    continue
                cx, cy, cz = centres[li, 0], centres[li, 1], centres[li, 2]
                f = focals[li]
                for m in range(spp):
                    jx = (samples[m, 0] + o1) % 1.0 - 0.5
                    jy = (samples[m, 1] + o2) % 1.0 - 0.5
                    sx = (pu + jx - u0) * s
                    sy = (pv + jy - v0) * s
                    # pixel in the lens frame
                    ox, oy, oz = sx - cx, sy - cy, zs - cz
                    lx = Rmla[0, 0] * ox + Rmla[1, 0] * oy + Rmla[2, 0] * oz
                    ly = Rmla[0, 1] * ox + Rmla[1, 1] * oy + Rmla[2, 1] * oz
                    lz = Rmla[0, 2] * ox + Rmla[1, 2] * oy + Rmla[2, 2] * oz
                    dk = -lz
                    # homogeneous micro-lens conjugate of the pixel, back in the camera frame
                    qx, qy, qz = -lx * f, -ly * f, -lz * f
                    wq = dk - f
                    hx = Rmla[0, 0] * qx + Rmla[0, 1] * qy + Rmla[0, 2] * qz + cx * wq
                    hy = Rmla[1, 0] * qx + Rmla[1, 1] * qy + Rmla[1, 2] * qz + cy * wq
                    hz = Rmla[2, 0] * qx + Rmla[2, 1] * qy + Rmla[2, 2] * qz + cz * wq
                    # main-lens points reaching this pixel through the lens fill the lens disc projected
                    # from the conjugate; the pixel value is the fraction of that disc inside the aperture
                    pden = hz - wq * cz
                    if pden == 0.0:
                        continue
                    disc = abs(hz / pden) * 0.5 * mu
                    reach = disc * 1.005
                    rr = math.sqrt((samples[m, 2] + o3) % 1.0)
                    phi = 2.0 * math.pi * ((samples[m, 3] + o4) % 1.0)
                    if reach < 0.5 * A:
                        mx = (cx * hz - cz * hx) / pden + reach * rr * math.cos(phi)
                        my = (cy * hz - cz * hy) / pden + reach * rr * math.sin(phi)
                        if mx * mx + my * my > 0.25 * A * A:
                            continue
                        weight = (reach / disc) ** 2
                    else:
                        mx = 0.5 * A * rr * math.cos(phi)
                        my = 0.5 * A * rr * math.sin(phi)
                        weight = (0.5 * A / disc) ** 2
                    dx, dy, dz = hx - wq * mx, hy - wq * my, hz
                    den = nx * dx + ny * dy + nz * dz
                    if den == 0.0:
                        continue
                    tau = (nx * (cx - mx) + ny * (cy - my) + nz * cz) / den
                    xx = mx + tau * dx
                    xy = my + tau * dy
                    xz = tau * dz
                    ex, ey, ez = xx - cx, xy - cy, xz - cz
                    if ex * ex + ey * ey + ez * ez > half_mu2:
                        continue
                    if mode == 0:
                        acc += weight
                        continue
                    # image-space point whose object conjugate lies on this ray
                    if has_dist and abs(wq) > 1e-9:
                        yx, yy, yz = hx / wq, hy / wq, hz / wq
                        yx, yy = _undistort(yx, yy, dist[0], dist[1], dist[2], dist[3], dist[4])
                    else:
                        yx, yy, yz = xx, xy, xz
                    pw = 1.0 + yz / F
                    rx, ry, rz = yx - pw * mx, yy - pw * my, yz
                    if rz < 0.0:
                        rx, ry, rz = -rx, -ry, -rz
                    # intersect with the target plane (world z = 0)
                    bnx, bny, bnz = Rb[0, 2], Rb[1, 2], Rb[2, 2]
                    bden = bnx * rx + bny * ry + bnz * rz
                    if bden == 0.0:
                        continue
                    t = (bnx * (tb[0] - mx) + bny * (tb[1] - my) + bnz * tb[2]) / bden
                    if t <= 0.0:
                        continue
                    gx = mx + t * rx - tb[0]
                    gy = my + t * ry - tb[1]
                    gz = t * rz - tb[2]
                    wx = Rb[0, 0] * gx + Rb[1, 0] * gy + Rb[2, 0] * gz
                    wy = Rb[0, 1] * gx + Rb[1, 1] * gy + Rb[2, 1] * gz
                    acc += weight * _radiance(wx, wy, mode, square, cols, rows, spot[0], spot[1], spot[2])
            out[row, col] = acc * inv_spp


def _sample_set(spp: int, seed: int) -> np.ndarray:
    sobol = qmc.Sobol(d=4, scramble=True, seed=seed)
    m = int(round(math.log2(spp)))
    if 2**m == spp:
        return sobol.random_base2(m)
    return sobol.random(spp)


def _candidate_lenses(intr, u_lo, v_lo, w, h):
    """Indices of the few micro-images nearest each pixel centre."""
    k, l = intr.mla.indices()
    mics = project_mics(intr, k, l)
    tree = cKDTree(mics)
    vv, uu = np.mgrid[v_lo : v_lo + h, u_lo : u_lo + w]
    pts = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    dist, idx = tree.query(pts, k=_N_CANDIDATES)
    # a pixel can only see a lens whose micro-image disc (pitch/2) it touches
    reach = 0.5 * intr.mi_pitch_pix + 1.5
    idx = np.where(dist <= reach, idx, -1)
    return idx.reshape(h, w, _N_CANDIDATES).astype(np.int64), k, l


def lens_centres(intr: CameraIntrinsics, k, l) -> np.ndarray:
    """Micro-lens optical centres in the camera frame, ``(n, 3)``."""
    mla = intr.mla
    R = mla_rotation(mla.theta)
    lx, ly = mla.local_position(k, l)
    local = np.column_stack([lx, ly, np.zeros_like(lx)]) * mla.pitch_mu
    return local @ R.T + np.array([mla.t[0], mla.t[1], -mla.D])


def render(intr: CameraIntrinsics, scene: SceneSpec, settings: RenderSettings = RenderSettings()):
    """Render a raw image and its ground-truth sidecar.

    Returns
    -------
    image : 2-D float array in ``[0, 1]`` (before read noise)
    sidecar : dict with exact BAP projections of every visible corner and
        the model micro-image centres
    """
    W, H = sensor_size(intr)
    u_lo, v_lo, u_hi, v_hi = settings.roi if settings.roi else (0, 0, W, H)
    w, h = u_hi - u_lo, v_hi - v_lo
    cand, k, l = _candidate_lenses(intr, u_lo, v_lo, w, h)
    centres = lens_centres(intr, k, l)
    focals = np.asarray(intr.mla.focals)[intr.mla.lens_type(k, l) - 1]
    Rmla = mla_rotation(intr.mla.theta)
    m = intr.main
    mode = {WHITE: 0, TEXTURED: 1, SPOT: 2}[scene.illumination]
    pose = scene.pose or Pose.identity()
    board = scene.board or Checkerboard(2, 2, 1.0)
    out = np.zeros((h, w))
    _render_kernel(
        out, u_lo, v_lo, cand, centres, focals, Rmla[:, 2].copy(), Rmla,
        m.u0, m.v0, intr.pixel_size, m.F, m.F / scene.f_number,
        -(intr.mla.D + intr.mla.d), intr.mla.pitch_mu, np.array(m.distortion.as_tuple()),
        mode, pose.rotation, pose.translation,
        board.square, board.cols, board.rows, np.asarray(scene.spot, dtype=float),
        _sample_set(settings.spp, scene.rng_seed), scene.rng_seed,
    )
    if settings.read_noise > 0:
        rng = np.random.default_rng(scene.rng_seed)
        out = np.clip(out + rng.normal(0.0, settings.read_noise, out.shape), 0.0, 1.0)
    return out, ground_truth_sidecar(intr, scene)


def mi_radius_pix(intr: CameraIntrinsics, f_number: float) -> np.ndarray:
    """Outer micro-image radius per lens type from the aperture-image model."""
    m = intr.mla
    A = intr.main.F / f_number
    aperture_part = A * m.d / (2 * m.D)
    lens_part = np.abs(m.pitch_mu * m.d / 2 * (1 / np.asarray(m.focals) - 1 / m.D - 1 / m.d))
    return (aperture_part + lens_part) / intr.pixel_size


def lit_margin(intr: CameraIntrinsics, pose: Pose, points_w, k, l, f_number: float) -> np.ndarray:
    """How far (mm) each micro-lens disc sits inside the main-aperture light cone.

    Rays from a scene point fill the cone between the main aperture and the
    point's (distorted) virtual image.  Where the cone covers the whole
    micro-lens disc (margin >= 0) the blur spot is a full disc centred on the
    chief ray, which is what :func:`~plenocal.model.project_points` predicts.
    Elsewhere the spot is truncated and its centroid drifts outwards.
    """
    from .model import _distort_xy

    m = intr.main
    cam = pose.apply(points_w)
    w = 1.0 - cam[:, 2] / m.F
    pv = cam / w[:, None]
    xu, yu = _distort_xy(pv[:, 0], pv[:, 1], m.distortion.as_tuple())
    pu = np.column_stack([xu, yu, pv[:, 2]])
    C = lens_centres(intr, k, l)
    n = mla_rotation(intr.mla.theta)[:, 2]
    scale = (C @ n) / (pu @ n)
    X = pu * scale[:, None]
    r_cone = 0.5 * m.F / f_number * np.abs(1.0 - scale)
    return r_cone - 0.5 * intr.mla.pitch_mu - np.linalg.norm(X - C, axis=1)


def ground_truth_sidecar(intr: CameraIntrinsics, scene: SceneSpec, margin: float = 2.0) -> dict:
    """Exact observations implied by the scene.

    A corner is listed for lens ``(k, l)`` when its projection falls inside the
    micro-image disc, at least ``margin`` pixels from the border.  Each row is
    ``[corner_id, k, l, type, u, v, rho, fully_lit]``; see :func:`lit_margin`.
    """
    k, l = intr.mla.indices()
    mics = project_mics(intr, k, l)
    doc = {
        "f_number": scene.f_number,
        "illumination": scene.illumination,
        "seed": scene.rng_seed,
        "mics": [[int(a), int(b), float(u), float(v)] for a, b, (u, v) in zip(k, l, mics)],
        "corners": [],
    }
    if scene.pose is not None:
        doc["pose"] = scene.pose.to_dict()
    if scene.illumination != TEXTURED:
        return doc
    radius = np.minimum(mi_radius_pix(intr, scene.f_number), 0.5 * intr.mi_pitch_pix)
    types = intr.mla.lens_type(k, l)
    lens_radius = radius[types - 1] - margin
    pts = scene.board.corner_points()
    in_front = scene.pose.apply(pts)[:, 2] > 0
    n_lens = len(k)
    pw = np.repeat(pts, n_lens, axis=0)
    kk, ll = np.tile(k, len(pts)), np.tile(l, len(pts))
    proj = project_points(intr, scene.pose, pw, kk, ll)
    mic = np.tile(mics, (len(pts), 1))
    inside = np.hypot(proj[:, 0] - mic[:, 0], proj[:, 1] - mic[:, 1]) <= np.tile(lens_radius, len(pts))
    inside &= np.repeat(in_front, n_lens)
    idx = np.flatnonzero(inside)
    lit = lit_margin(intr, scene.pose, pw[idx], kk[idx], ll[idx], scene.f_number) >= 0
    tt = np.tile(types, len(pts))
    for j, full in zip(idx, lit):
        u, v, rho = proj[j]
        doc["corners"].append(
            [int(j // n_lens), int(kk[j]), int(ll[j]), int(tt[j]), float(u), float(v), float(rho), int(full)]
        )
    return doc


@dataclass
class DatasetPlan:
    """What :func:`generate_dataset` renders.

    Calibration poses put the board centre at a depth drawn from ``calib_z``
    with tilts up to ``max_tilt`` radians.  The motion sequence places a
    fronto-parallel board at each depth in ``eval_z``.
    """

    board: Checkerboard
    white_f_numbers: tuple = (4.0, 5.66, 8.0, 11.31, 16.0)
    calib_f_number: float | None = None
    n_calibration: int = 16
    n_holdout: int = 0
    calib_z: tuple = (335.0, 375.0)
    max_tilt: float = 0.25
    lateral: float = 1.0
    eval_z: tuple = ()
    spp: int = 64
    read_noise: float = 0.0
    seed: int = 0
    focus_distance: float | None = None
    nominal_F: float | None = None

    def to_dict(self):
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "board"}
        doc["board"] = self.board.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        board = Checkerboard.from_dict(doc.pop("board"))
        for key in ("white_f_numbers", "calib_z", "eval_z"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(board=board, **doc)


def sample_board_poses(board: Checkerboard, n: int, z_range, max_tilt: float, lateral: float,
                       rng: np.random.Generator) -> list:
    """Random board poses facing the camera with the board centre near the optical axis."""
    poses = []
    for _ in range(n):
        rotvec = np.array([rng.uniform(-max_tilt, max_tilt), rng.uniform(-max_tilt, max_tilt),
                           rng.uniform(-0.2, 0.2)])
        R = Pose.from_rotvec(rotvec, np.zeros(3)).rotation
        centre = np.array([rng.uniform(-lateral, lateral), rng.uniform(-lateral, lateral), rng.uniform(*z_range)])
        poses.append(Pose(R, centre - R @ board.centre()))
    return poses


def motion_poses(board: Checkerboard, z_positions) -> list:
    """Fronto-parallel board translated along the optical axis."""
    return [Pose(np.eye(3), np.array([0.0, 0.0, z]) - board.centre()) for z in z_positions]


def generate_dataset(intr: CameraIntrinsics, plan: DatasetPlan, out_dir) -> Path:
    """Render a complete synthetic dataset into ``out_dir``.

    Layout::

        whites/white_N<N>.png     white images, one per f-number
        devignette.png            white image at the calibration f-number
        calib/frame_<i>.png|json  calibration and hold-out frames with sidecars
        eval/step_<i>.png|json    motion sequence with sidecars
        dataset.json              descriptor read by the pipeline
        ground_truth.json         true intrinsics and poses
    """
    from .presets import focus_distance

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(plan.seed)
    calib_N = plan.calib_f_number or intr.main.F / intr.main.aperture_A
    settings = RenderSettings(spp=plan.spp, read_noise=plan.read_noise)
    counter = iter(range(1, 1 << 30))

    def shoot(scene_kwargs, path):
        scene = SceneSpec(rng_seed=plan.seed * 100003 + next(counter), **scene_kwargs)
        img, sidecar = render(intr, scene, settings)
        artifacts.save_image(out / path, img)
        return sidecar

    whites = []
    for N in plan.white_f_numbers:
        rel = f"whites/white_N{N:05.2f}.png"
        log.info("rendering %s", rel)
        shoot({"illumination": WHITE, "f_number": float(N)}, rel)
        whites.append({"path": rel, "f_number": float(N)})
    shoot({"illumination": WHITE, "f_number": calib_N}, "devignette.png")

    n_cal = plan.n_calibration + plan.n_holdout
    cal_poses = sample_board_poses(plan.board, n_cal, plan.calib_z, plan.max_tilt, plan.lateral, rng)
    calibration, truth_poses = [], {}
    for i, pose in enumerate(cal_poses):
        rel = f"calib/frame_{i:03d}"
        log.info("rendering %s", rel)
        sidecar = shoot({"illumination": TEXTURED, "board": plan.board, "pose": pose, "f_number": calib_N}, rel + ".png")
        artifacts.write_json(out / (rel + ".json"), {"schema": "plenocal.sidecar", "schema_version": 1, **sidecar})
        role = "train" if i < plan.n_calibration else "holdout"
        calibration.append({"path": rel + ".png", "sidecar": rel + ".json", "role": role, "frame": i})
        truth_poses[f"calib/{i}"] = pose.to_dict()
    motion = []
    z0 = plan.eval_z[0] if plan.eval_z else 0.0
    for i, (z, pose) in enumerate(zip(plan.eval_z, motion_poses(plan.board, plan.eval_z))):
        rel = f"eval/step_{i:03d}"
        log.info("rendering %s", rel)
        sidecar = shoot({"illumination": TEXTURED, "board": plan.board, "pose": pose, "f_number": calib_N}, rel + ".png")
        artifacts.write_json(out / (rel + ".json"), {"schema": "plenocal.sidecar", "schema_version": 1, **sidecar})
        motion.append({"path": rel + ".png", "sidecar": rel + ".json", "z": float(z - z0), "frame": i})
        truth_poses[f"eval/{i}"] = pose.to_dict()

    h = plan.focus_distance if plan.focus_distance is not None else focus_distance(intr)
    descriptor = {
        "schema": "plenocal.dataset", "schema_version": 1,
        "board": plan.board.to_dict(),
        "pixel_size": intr.pixel_size,
        "F": plan.nominal_F if plan.nominal_F is not None else intr.main.F,
        "focus_distance": h,
        "n_types": intr.n_types,
        "config": intr.config.value,
        "arrangement": intr.mla.arrangement,
        "whites": whites,
        "devignetting_white": {"path": "devignette.png", "f_number": calib_N},
        "calibration": calibration,
        "motion": motion,
    }
    artifacts.write_json(out / "dataset.json", descriptor)
    artifacts.write_json(out / "ground_truth.json", {
        "schema": "plenocal.ground_truth", "schema_version": 1,
        "intrinsics": intr.to_dict(), "poses": truth_poses, "plan": plan.to_dict(),
    })
    return out
