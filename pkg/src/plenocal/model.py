"""Camera geometry types and the blur-aware plenoptic projection model.

Conventions
-----------
* Camera frame: origin at the main-lens centre, ``z`` pointing out of the
  camera towards the scene, ``x`` right and ``y`` down in the image.
* The micro-lens array (MLA) sits at ``z = -D`` and the sensor at
  ``z = -(D + d)``.  Distances handed to the blur formula are signed: positive
  for real points, negative for virtual ones.
* Lengths are millimetres, image quantities are pixels, angles radians.

The intrinsic parameter vector has ``16 + I`` entries, ordered as in
:func:`param_names`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from . import dual
from .dual import Dual

SCHEMA_VERSION = 1
HEXAGONAL = "hexagonal"
ORTHOGONAL = "orthogonal"
_DEGENERATE_W = 1e-12

_BASE_PARAMS = (
    "F", "Q1", "Q2", "Q3", "P1", "P2", "D", "tx", "ty",
    "theta_x", "theta_y", "theta_z", "pitch_mu", "u0", "v0", "d",
)
POSE_PARAMS = ("omega_x", "omega_y", "omega_z", "pose_tx", "pose_ty", "pose_tz")


class ProjectionError(ValueError):
    """Raised when a point cannot be projected (infinite or degenerate)."""


class InternalConfig(str, enum.Enum):
    GALILEAN = "galilean-internal"
    KEPLERIAN = "keplerian-internal"
    UNFOCUSED = "unfocused"


def internal_configuration(f: float, d: float) -> InternalConfig:
    if f < d:
        return InternalConfig.KEPLERIAN
    if f > d:
        return InternalConfig.GALILEAN
    return InternalConfig.UNFOCUSED


def param_names(n_types: int) -> list[str]:
    return list(_BASE_PARAMS) + [f"f_{i + 1}" for i in range(n_types)]


@dataclass(frozen=True)
class DistortionCoeffs:
    Q1: float = 0.0
    Q2: float = 0.0
    Q3: float = 0.0
    P1: float = 0.0
    P2: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.as_tuple()):
            raise ValueError("distortion coefficients must be finite")

    def as_tuple(self):
        return (self.Q1, self.Q2, self.Q3, self.P1, self.P2)


@dataclass(frozen=True)
class MainLens:
    F: float
    aperture_A: float
    u0: float
    v0: float
    distortion: DistortionCoeffs = field(default_factory=DistortionCoeffs)

    def __post_init__(self):
        if self.F == 0:
            raise ValueError("main-lens focal length must be nonzero")
        if not self.aperture_A > 0:
            raise ValueError("main-lens aperture must be positive")


@dataclass(frozen=True)
class MLAGeometry:
    """Micro-lens array layout.

    Lens ``(k, l)`` sits at ``R(theta) @ local(k, l) + (tx, ty, -D)`` where
    ``local`` is the lattice position relative to the upper-left lens.  On a
    hexagonal array rows with ``(l + parity)`` odd are shifted by half a pitch.
    Lens types repeat periodically: ``type_of_color[c]`` is the type of lattice
    colour class ``c`` (see :func:`lens_color`).
    """

    D: float
    d: float
    pitch_mu: float
    focals: tuple
    grid_w: int
    grid_h: int
    theta: tuple = (0.0, 0.0, 0.0)
    t: tuple = (0.0, 0.0)
    arrangement: str = HEXAGONAL
    parity: int = 0
    type_of_color: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "focals", tuple(float(f) for f in self.focals))
        object.__setattr__(self, "theta", tuple(float(a) for a in self.theta))
        object.__setattr__(self, "t", tuple(float(a) for a in self.t))
        if self.type_of_color is None:
            object.__setattr__(self, "type_of_color", tuple(range(1, self.n_types + 1)))
        else:
            object.__setattr__(self, "type_of_color", tuple(int(i) for i in self.type_of_color))
        if self.D <= 0 or self.d <= 0:
            raise ValueError("D and d must be positive")
        if self.pitch_mu <= 0:
            raise ValueError("pitch_mu must be positive")
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError("grid must contain at least one lens")
        if self.n_types < 1:
            raise ValueError("at least one micro-lens type is required")
        if self.arrangement not in (HEXAGONAL, ORTHOGONAL):
            raise ValueError(f"unknown arrangement {self.arrangement!r}")
        if len(self.type_of_color) != self.n_types or any(
            not 1 <= i <= self.n_types for i in self.type_of_color
        ):
            raise ValueError("type_of_color must map every colour class to a type in 1..I")

    @property
    def n_types(self) -> int:
        return len(self.focals)

    def lens_type(self, k, l):
        """Type index (1-based) of lens ``(k, l)``; vectorised."""
        color = lens_color(k, l, self.n_types, self.arrangement, self.parity)
        return np.asarray(self.type_of_color)[color]

    def local_position(self, k, l):
        """Lattice position in pitch units, before rotation and translation."""
        return lattice_position(k, l, self.arrangement, self.parity)

    def indices(self):
        """All ``(k, l)`` pairs as two flat arrays, row-major."""
        ll, kk = np.mgrid[0 : self.grid_h, 0 : self.grid_w]
        return kk.ravel(), ll.ravel()


def lattice_position(k, l, arrangement=HEXAGONAL, parity=0):
    k = np.asarray(k, dtype=float)
    l_int = np.asarray(l, dtype=int)
    l = l_int.astype(float)
    if arrangement == HEXAGONAL:
        shift = 0.5 * ((l_int + parity) % 2)
        return k + shift, l * (math.sqrt(3.0) / 2.0)
    return k, l


def lens_color(k, l, n_types, arrangement=HEXAGONAL, parity=0):
    """Periodic colour class in ``[0, n_types)``.

    On a hexagonal lattice with three types this is a proper 3-colouring:
    no two adjacent lenses share a class.
    """
    k = np.asarray(k, dtype=int)
    l = np.asarray(l, dtype=int)
    if arrangement == HEXAGONAL:
        shift = (l + parity) % 2
        q = k + (shift - l + parity) // 2
        return (q - l) % n_types
    return (k + l) % n_types


@dataclass(frozen=True)
class CameraIntrinsics:
    main: MainLens
    mla: MLAGeometry
    pixel_size: float
    sensor_size: tuple | None = None  # (width, height) in pixels

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError("pixel size must be positive")

    @property
    def n_types(self) -> int:
        return self.mla.n_types

    @property
    def n_params(self) -> int:
        return 16 + self.n_types

    @property
    def config(self) -> InternalConfig:
        return internal_configuration(float(np.mean(self.mla.focals)), self.mla.d)

    @property
    def lam(self) -> float:
        """Ratio D / (D + d) between micro-lens pitch and micro-image pitch."""
        return self.mla.D / (self.mla.D + self.mla.d)

    @property
    def mi_pitch_pix(self) -> float:
        return self.mla.pitch_mu / (self.lam * self.pixel_size)

    def param_names(self) -> list[str]:
        return param_names(self.n_types)

    def to_vector(self) -> np.ndarray:
        m, a = self.main, self.mla
        return np.array(
            [m.F, *m.distortion.as_tuple(), a.D, *a.t, *a.theta, a.pitch_mu, m.u0, m.v0, a.d, *a.focals],
            dtype=float,
        )

    def from_vector(self, vec) -> "CameraIntrinsics":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        main = replace(
            self.main, F=vec[0], distortion=DistortionCoeffs(*vec[1:6]), u0=vec[13], v0=vec[14]
        )
        mla = replace(
            self.mla, D=vec[6], t=tuple(vec[7:9]), theta=tuple(vec[9:12]),
            pitch_mu=vec[12], d=vec[15], focals=tuple(vec[16:]),
        )
        return replace(self, main=main, mla=mla)

    def to_dict(self) -> dict:
        m, a = self.main, self.mla
        return {
            "schema": "plenocal.intrinsics",
            "schema_version": SCHEMA_VERSION,
            "units": {"length": "mm", "image": "pixel", "angle": "rad"},
            "main_lens": {
                "F": m.F, "aperture_A": m.aperture_A, "u0": m.u0, "v0": m.v0,
                "distortion": dict(zip(("Q1", "Q2", "Q3", "P1", "P2"), m.distortion.as_tuple())),
            },
            "mla": {
                "D": a.D, "d": a.d, "pitch_mu": a.pitch_mu,
                "theta": list(a.theta), "t": list(a.t),
                "grid_w": a.grid_w, "grid_h": a.grid_h,
                "arrangement": a.arrangement, "parity": a.parity,
                "focals": list(a.focals), "type_of_color": list(a.type_of_color),
            },
            "pixel_size": self.pixel_size,
            "sensor_size": list(self.sensor_size) if self.sensor_size else None,
            "config": self.config.value,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraIntrinsics":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported intrinsics schema version {doc.get('schema_version')!r}")
        ml, a = doc["main_lens"], doc["mla"]
        main = MainLens(
            F=ml["F"], aperture_A=ml["aperture_A"], u0=ml["u0"], v0=ml["v0"],
            distortion=DistortionCoeffs(**ml["distortion"]),
        )
        mla = MLAGeometry(
            D=a["D"], d=a["d"], pitch_mu=a["pitch_mu"], focals=tuple(a["focals"]),
            grid_w=a["grid_w"], grid_h=a["grid_h"], theta=tuple(a["theta"]), t=tuple(a["t"]),
            arrangement=a["arrangement"], parity=a["parity"], type_of_color=tuple(a["type_of_color"]),
        )
        size = doc.get("sensor_size")
        return cls(main=main, mla=mla, pixel_size=doc["pixel_size"],
                   sensor_size=tuple(size) if size else None)


@dataclass(frozen=True)
class Pose:
    """World-to-camera transform: ``p_cam = rotation @ p_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation must be special orthogonal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation):
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def perturbed(self, omega, dt) -> "Pose":
        """Compose an axis-angle increment on the left and shift the translation."""
        R = Rotation.from_rotvec(omega).as_matrix() @ self.rotation
        # re-orthonormalise to keep round-off from accumulating over many updates
        u, _, vt = np.linalg.svd(R)
        return Pose(u @ vt, self.translation + np.asarray(dt, dtype=float))

    def to_dict(self):
        return {"rotvec": self.rotvec().tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls.from_rotvec(doc["rotvec"], doc["translation"])


@dataclass(frozen=True)
class BAPFeature:
    u: float
    v: float
    rho: float
    k: int
    l: int
    type_i: int
    frame_n: int = 0
    corner_id: int = -1


# ---------------------------------------------------------------------------
# scalar building blocks


def thin_lens_image_distance(a: float, F: float) -> float:
    """Conjugate distance ``b`` with ``1/F = 1/a + 1/b``."""
    if math.isinf(a):
        return float(F)
    if a == F:
        raise ProjectionError("image at infinity")
    return a * F / (a - F)


def distort(p, c: DistortionCoeffs):
    """Brown-Conrady lateral distortion of a 3D point; ``z`` is untouched."""
    p = np.asarray(p, dtype=float)
    x, y = _distort_xy(p[..., 0], p[..., 1], c.as_tuple())
    return np.stack([x, y, p[..., 2]], axis=-1)


def _distort_xy(x, y, coeffs):
    q1, q2, q3, p1, p2 = coeffs
    r2 = x * x + y * y
    radial = 1.0 + r2 * (q1 + r2 * (q2 + r2 * q3))
    xu = x * radial + p1 * (r2 + 2.0 * x * x) + 2.0 * p2 * x * y
    yu = y * radial + p2 * (r2 + 2.0 * y * y) + 2.0 * p1 * x * y
    return xu, yu


def ml_principal_point(c_kl, intr: CameraIntrinsics):
    """Orthogonal projection of a micro-lens centre given its micro-image centre."""
    c = np.asarray(c_kl, dtype=float)
    D, d = intr.mla.D, intr.mla.d
    pp = np.array([intr.main.u0, intr.main.v0])
    return d / (D + d) * (pp - c) + c


def blur_circle_radius(a, d, f, A):
    """Signed radius of the blur circle of a point at distance ``a``."""
    return A * (d / 2.0) * (1.0 / f - 1.0 / a - 1.0 / d)


def convert_extern_params(f_x, f_y, c_x, c_y, K1, K2, s):
    """Map a pinhole-style plenoptic model onto ``(F, D, d, u0, v0)``."""
    F = s * (f_x + f_y) / 2.0
    try:
        D = -F / (K1 / K2 * F + 1.0)
        d = D - K2 * D / (D + K2)
    except ZeroDivisionError as exc:
        raise ValueError("degenerate conversion") from exc
    if not (math.isfinite(D) and math.isfinite(d)):
        raise ValueError("degenerate conversion")
    return F, D, d, c_x, c_y


# ---------------------------------------------------------------------------
# vectorised projection chain, generic over floats and Dual numbers


def _rotation_entries(tx, ty, tz):
    """Entries of Rz(tz) @ Ry(ty) @ Rx(tx) as a nested list."""
    cx, sx = dual.cos(tx), dual.sin(tx)
    cy, sy = dual.cos(ty), dual.sin(ty)
    cz, sz = dual.cos(tz), dual.sin(tz)
    return [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-1.0 * sy, cy * sx, cy * cx],
    ]


def mla_rotation(theta) -> np.ndarray:
    return np.array(_rotation_entries(*[float(a) for a in theta]), dtype=float)


def _lens_centres(p, intr, k, l):
    """Micro-lens optical centres in the camera frame and the MLA normal."""
    D, tx, ty, thx, thy, thz, mu = (p[i] for i in (6, 7, 8, 9, 10, 11, 12))
    R = _rotation_entries(thx, thy, thz)
    lx, ly = lattice_position(k, l, intr.mla.arrangement, intr.mla.parity)
    cx = (R[0][0] * lx + R[0][1] * ly) * mu + tx
    cy = (R[1][0] * lx + R[1][1] * ly) * mu + ty
    cz = (R[2][0] * lx + R[2][1] * ly) * mu - D
    normal = (R[0][2], R[1][2], R[2][2])
    return (cx, cy, cz), normal


def _chain_points(p, intr, points_cam, k, l, types):
    """BAP projection of camera-frame points given parameter list ``p``."""
    F = p[0]
    u0, v0, d, D, mu = p[13], p[14], p[15], p[6], p[12]
    s = intr.pixel_size
    x, y, z = points_cam
    w = 1.0 - z / F
    wv = dual.value(w)
    if np.any(np.abs(wv) < _DEGENERATE_W):
        raise ProjectionError("projection at infinity")
    xv, yv, zv = x / w, y / w, z / w
    xu, yu = _distort_xy(xv, yv, p[1:6])
    (cx, cy, cz), (nx, ny, nz) = _lens_centres(p, intr, k, l)
    zs = -1.0 * (D + d)
    denom = cz - zv
    if np.any(np.abs(dual.value(denom)) < _DEGENERATE_W):
        raise ProjectionError("degenerate micro-lens projection")
    tau = (zs - zv) / denom
    xs = xu + tau * (cx - xu)
    ys = yu + tau * (cy - yu)
    u = u0 + xs / s
    v = v0 + ys / s
    a = nx * (xu - cx) + ny * (yu - cy) + nz * (zv - cz)
    d_kl = cz - zs
    f = _take(p[16:], np.asarray(types) - 1)
    rho = mu * d_kl / (2.0 * s) * (1.0 / f - 1.0 / a - 1.0 / d_kl)
    return u, v, rho


def _chain_mics(p, intr, k, l):
    u0, v0, d, D = p[13], p[14], p[15], p[6]
    s = intr.pixel_size
    (cx, cy, cz), _ = _lens_centres(p, intr, k, l)
    scale = (D + d) / (-1.0 * cz)
    return u0 + cx * scale / s, v0 + cy * scale / s


def _take(params, idx):
    """Select per-feature entries from a short list of scalars or Duals."""
    idx = np.asarray(idx)
    if any(isinstance(q, Dual) for q in params):
        n = next(q.der.shape[-1] for q in params if isinstance(q, Dual))
        vals = np.array([dual.value(q) for q in params])
        ders = np.array([q.der if isinstance(q, Dual) else np.zeros(n) for q in params])
        return Dual(vals[idx], ders[idx])
    return np.asarray(params, dtype=float)[idx]


def _pose_apply(R0, t, pw, omega=None, dt=None):
    q = pw @ R0.T
    qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]
    if omega is None:
        return qx + t[0], qy + t[1], qz + t[2]
    # first-order left increment; exact for the derivative at omega = 0
    ox, oy, oz = omega
    return (
        qx + (oy * qz - oz * qy) + (dt[0] + t[0]),
        qy + (oz * qx - ox * qz) + (dt[1] + t[1]),
        qz + (ox * qy - oy * qx) + (dt[2] + t[2]),
    )


def _as_index_arrays(points_w, k, l):
    pw = np.atleast_2d(np.asarray(points_w, dtype=float))
    k = np.broadcast_to(np.asarray(k, dtype=int), (len(pw),))
    l = np.broadcast_to(np.asarray(l, dtype=int), (len(pw),))
    return pw, k, l


def project_points(intr: CameraIntrinsics, pose: Pose, points_w, k, l) -> np.ndarray:
    """Project world points through micro-lenses ``(k, l)``; returns ``(n, 3)`` of (u, v, rho)."""
    pw, k, l = _as_index_arrays(points_w, k, l)
    types = intr.mla.lens_type(k, l)
    p = list(intr.to_vector())
    cam = _pose_apply(pose.rotation, pose.translation, pw)
    return np.stack(_chain_points(p, intr, cam, k, l, types), axis=-1)


def project_bap(p_w, intr: CameraIntrinsics, pose: Pose, k: int, l: int) -> BAPFeature:
    u, v, rho = project_points(intr, pose, np.reshape(p_w, (1, 3)), k, l)[0]
    return BAPFeature(u=u, v=v, rho=rho, k=int(k), l=int(l), type_i=int(intr.mla.lens_type(k, l)))


def project_mics(intr: CameraIntrinsics, k, l) -> np.ndarray:
    """Image of the main-lens centre through each micro-lens: the model MIC."""
    k = np.atleast_1d(np.asarray(k, dtype=int))
    l = np.atleast_1d(np.asarray(l, dtype=int))
    u, v = _chain_mics(list(intr.to_vector()), intr, k, l)
    return np.stack([u, v], axis=-1)


def _dual_params(vec, n_total, offset=0):
    return [Dual.seed(x, offset + i, n_total) for i, x in enumerate(vec)]


def projection_jacobian(intr: CameraIntrinsics, pose: Pose, points_w, k, l):
    """Projected (u, v, rho) and their exact derivatives.

    Returns
    -------
    values : (n, 3) array
    jac_intr : (n, 3, 16 + I) array, columns in :func:`param_names` order
    jac_pose : (n, 3, 6) array, columns ``omega`` (left axis-angle increment)
        then translation increment
    """
    pw, k, l = _as_index_arrays(points_w, k, l)
    types = intr.mla.lens_type(k, l)
    n_int = intr.n_params
    n_tot = n_int + 6
    p = _dual_params(intr.to_vector(), n_tot)
    omega = _dual_params(np.zeros(3), n_tot, n_int)
    dt = _dual_params(np.zeros(3), n_tot, n_int + 3)
    cam = _pose_apply(pose.rotation, pose.translation, pw, omega, dt)
    u, v, rho = _chain_points(p, intr, cam, k, l, types)
    values = np.stack([u.val, v.val, rho.val], axis=-1)
    der = np.stack([u.der, v.der, rho.der], axis=1)
    return values, der[:, :, :n_int], der[:, :, n_int:]


def mic_jacobian(intr: CameraIntrinsics, k, l):
    """Model MICs ``(n, 2)`` and their derivatives ``(n, 2, 16 + I)``."""
    k = np.atleast_1d(np.asarray(k, dtype=int))
    l = np.atleast_1d(np.asarray(l, dtype=int))
    p = _dual_params(intr.to_vector(), intr.n_params)
    u, v = _chain_mics(p, intr, k, l)
    return np.stack([u.val, v.val], axis=-1), np.stack([u.der, v.der], axis=1)


@dataclass(frozen=True)
class Checkerboard:
    """Planar target in the world ``z = 0`` plane.

    Inner corners sit at ``(i * square, j * square)`` for ``i < cols`` and
    ``j < rows``; corner ``id = j * cols + i``.
    """

    rows: int
    cols: int
    square: float

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("board needs at least 2x2 inner corners")
        if not self.square > 0:
            raise ValueError("square size must be positive")

    @property
    def n_corners(self) -> int:
        return self.rows * self.cols

    def corner_points(self) -> np.ndarray:
        jj, ii = np.mgrid[0 : self.rows, 0 : self.cols]
        pts = np.zeros((self.n_corners, 3))
        pts[:, 0] = ii.ravel() * self.square
        pts[:, 1] = jj.ravel() * self.square
        return pts

    def centre(self) -> np.ndarray:
        return np.array([(self.cols - 1) * self.square / 2, (self.rows - 1) * self.square / 2, 0.0])

    def to_dict(self):
        return {"rows": self.rows, "cols": self.cols, "square": self.square}

    @classmethod
    def from_dict(cls, doc):
        return cls(int(doc["rows"]), int(doc["cols"]), float(doc["square"]))
