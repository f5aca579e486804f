"""Pre-calibration from white images.

Micro-image radii are measured with second-order image moments at several
apertures.  Their linear dependence on the inverse f-number gives a shared
slope ``m`` and one intercept per micro-lens type, from which an initial set
of intrinsics is synthesised.

All lengths are millimetres; ``OmegaCoefficients.to_dict`` also reports
micrometres for readability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .mia import MIAGrid, detect_mics, fit_grid
from .model import (
    CameraIntrinsics,
    DistortionCoeffs,
    InternalConfig,
    MainLens,
    MLAGeometry,
    lens_color,
)

DEFAULT_ALPHA = 2.357
ALPHA_RANGE = (2.33, 2.37)
MIN_SILHOUETTE = 0.5


class PrecalibError(RuntimeError):
    pass


@dataclass(frozen=True)
class RadiusMeasurement:
    rho_pix: float
    sigma_moment: float
    k: int = -1
    l: int = -1
    f_number: float = float("nan")


@dataclass(frozen=True)
class OmegaCoefficients:
    m: float  # mm per unit inverse f-number, signed
    q_prime: tuple  # mm, one per type
    type_of_color: tuple
    residual_rms: float = float("nan")
    f_numbers: tuple = ()

    @property
    def n_types(self):
        return len(self.q_prime)

    def to_dict(self):
        return {
            "m_mm": self.m, "q_prime_mm": list(self.q_prime),
            "m_um": self.m * 1e3, "q_prime_um": [q * 1e3 for q in self.q_prime],
            "type_of_color": list(self.type_of_color),
            "residual_rms_mm": self.residual_rms, "f_numbers": list(self.f_numbers),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            m=doc["m_mm"], q_prime=tuple(doc["q_prime_mm"]), type_of_color=tuple(doc["type_of_color"]),
            residual_rms=doc.get("residual_rms_mm", float("nan")), f_numbers=tuple(doc.get("f_numbers", ())),
        )


def f_number_from_av(av: float) -> float:
    """Aperture value to f-number."""
    return math.sqrt(2.0**av)


def check_alpha(alpha: float) -> float:
    if not ALPHA_RANGE[0] <= alpha <= ALPHA_RANGE[1]:
        raise ValueError(f"alpha must lie in {ALPHA_RANGE}, got {alpha}")
    return alpha


def moment_covariance(window) -> np.ndarray:
    """Intensity-weighted 2x2 covariance of pixel coordinates."""
    w = np.asarray(window, dtype=float)
    mass = w.sum()
    if not mass > 0:
        raise PrecalibError("empty micro-image")
    yy, xx = np.indices(w.shape, dtype=float)
    cx = (w * xx).sum() / mass
    cy = (w * yy).sum() / mass
    dx, dy = xx - cx, yy - cy
    cxx = (w * dx * dx).sum() / mass
    cyy = (w * dy * dy).sum() / mass
    cxy = (w * dx * dy).sum() / mass
    return np.array([[cxx, cxy], [cxy, cyy]])


def measure_mi_radius(window, alpha: float = DEFAULT_ALPHA, *, k=-1, l=-1, f_number=float("nan")) -> RadiusMeasurement:
    """Radius of a micro-image as ``alpha`` times its largest moment spread."""
    check_alpha(alpha)
    sigma = math.sqrt(max(np.linalg.eigvalsh(moment_covariance(window))[-1], 0.0))
    return RadiusMeasurement(alpha * sigma, sigma, k, l, f_number)


def signed_radius(rho_pix: float, s: float, config: InternalConfig) -> float:
    """Metric micro-image radius with the sign of the lens-dependent term.

    Keplerian-internal cameras take ``+rho*s``.  Galilean-internal and
    unfocused cameras take ``-rho*s``: in both the intercept
    ``q' - s*pitch/2`` is negative.
    """
    sign = 1.0 if InternalConfig(config) == InternalConfig.KEPLERIAN else -1.0
    return sign * rho_pix * s


def extract_window(img, center, half: int):
    u, v = center
    ui, vi = int(round(u)), int(round(v))
    h, w = img.shape
    if ui - half < 0 or vi - half < 0 or ui + half >= w or vi + half >= h:
        return None, None
    win = img[vi - half : vi + half + 1, ui - half : ui + half + 1]
    return win, (ui - half, vi - half)


def measure_white_radii(white, grid: MIAGrid, f_number: float, alpha: float = DEFAULT_ALPHA) -> list:
    """Moment radius of every detected micro-image, masked to a disc of half a pitch."""
    img = np.asarray(white, dtype=float)
    radius = 0.5 * grid.pitch_pix
    half = int(math.ceil(radius)) + 1
    out = []
    for (k, l), c in zip(grid.indices, grid.centers):
        win, origin = extract_window(img, c, half)
        if win is None:
            continue
        yy, xx = np.indices(win.shape)
        mask = (xx + origin[0] - c[0]) ** 2 + (yy + origin[1] - c[1]) ** 2 <= radius**2
        try:
            out.append(measure_mi_radius(win * mask, alpha, k=int(k), l=int(l), f_number=f_number))
        except PrecalibError:
            continue
    return out


@dataclass
class TypeClassification:
    type_of_color: tuple
    silhouette: float
    agreement: float  # fraction of lenses whose cluster matches their colour's type
    labels: np.ndarray  # per measurement, 1-based type


def classify_lens_types(measurements, n_types: int, config: InternalConfig, arrangement: str, parity: int,
                        s: float = 1.0) -> TypeClassification:
    """Cluster radii at one aperture into ``n_types`` groups.

    Types are numbered by increasing signed radius.  The cluster label is then
    voted per lattice colour class so the result is a periodic layout.
    """
    ks = np.array([m.k for m in measurements])
    ls = np.array([m.l for m in measurements])
    if n_types == 1:
        return TypeClassification((1,), 1.0, 1.0, np.ones(len(measurements), dtype=int))
    signed = np.array([signed_radius(m.rho_pix, s, config) for m in measurements])
    km = KMeans(n_clusters=n_types, n_init=10, random_state=0).fit(signed[:, None])
    order = np.argsort(km.cluster_centers_[:, 0])
    rank = np.empty(n_types, dtype=int)
    rank[order] = np.arange(1, n_types + 1)
    labels = rank[km.labels_]
    sil = float(silhouette_score(signed[:, None], labels)) if len(set(labels)) > 1 else -1.0
    colors = lens_color(ks, ls, n_types, arrangement, parity)
    type_of_color = []
    for c in range(n_types):
        votes = np.bincount(labels[colors == c], minlength=n_types + 1)
        type_of_color.append(int(np.argmax(votes)))
    if sil < MIN_SILHOUETTE or sorted(type_of_color) != list(range(1, n_types + 1)):
        raise PrecalibError(f"types indistinguishable at this aperture (silhouette {sil:.2f})")
    agreement = float(np.mean(np.asarray(type_of_color)[colors] == labels))
    return TypeClassification(tuple(type_of_color), sil, agreement, labels)


def estimate_omega(radii_mm, f_numbers, types, n_types: int, pitch_pix: float, s: float,
                   type_of_color=None) -> tuple[OmegaCoefficients, np.ndarray, np.ndarray]:
    """Least-squares fit of ``R = m / N + q_i`` with a shared slope.

    Returns the coefficients together with the design matrix and residual
    vector (useful for diagnostics).
    """
    R = np.asarray(radii_mm, dtype=float)
    N = np.asarray(f_numbers, dtype=float)
    types = np.asarray(types, dtype=int)
    if len(np.unique(N)) < 2:
        raise PrecalibError("insufficient aperture diversity: need at least two f-numbers")
    X = np.zeros((len(R), 1 + n_types))
    X[:, 0] = 1.0 / N
    X[np.arange(len(R)), types] = 1.0
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise PrecalibError("insufficient aperture diversity: rank-deficient design matrix")
    sol, *_ = np.linalg.lstsq(X, R, rcond=None)
    resid = R - X @ sol
    m, q = sol[0], sol[1:]
    q_prime = tuple(float(qi + s * pitch_pix / 2) for qi in q)
    omega = OmegaCoefficients(
        m=float(m), q_prime=q_prime,
        type_of_color=tuple(type_of_color) if type_of_color else tuple(range(1, n_types + 1)),
        residual_rms=float(np.sqrt(np.mean(resid**2))), f_numbers=tuple(sorted(set(N.tolist()))),
    )
    return omega, X, resid


def hyperfocal_image_distance(F: float, h: float) -> float:
    """Image distance of a main lens focused with object-to-image distance ``h``."""
    if math.isinf(h):
        return abs(F)
    if h <= 4 * F:
        raise PrecalibError("focus distance below hyperfocal constraint (h must exceed 4F)")
    return abs(h / 2 * (1 - math.sqrt(1 - 4 * F / h)))


def init_intrinsics(omega: OmegaCoefficients, F: float, h: float, s: float, grid: MIAGrid,
                    config: InternalConfig, sensor_size: tuple, aperture_A: float | None = None) -> CameraIntrinsics:
    """Closed-form initial intrinsics from the pre-calibration coefficients."""
    config = InternalConfig(config)
    m = abs(omega.m)
    if config == InternalConfig.UNFOCUSED:
        d, D = 2 * m, F
    else:
        xi = 1.0 if config == InternalConfig.GALILEAN else -1.0
        H = hyperfocal_image_distance(F, h)
        d = 2 * m * H / (F + 4 * xi * m)
        D = H - 2 * xi * d
    lam = F / (F + 2 * m)
    pitch_mu = lam * s * grid.pitch_pix
    focals = tuple(d * pitch_mu / (2 * q) for q in omega.q_prime)
    W, Hs = sensor_size
    u0, v0 = (W - 1) / 2.0, (Hs - 1) / 2.0
    t = ((grid.tau_x - u0) * s * lam, (grid.tau_y - v0) * s * lam)
    main = MainLens(F=F, aperture_A=aperture_A or F / 4.0, u0=u0, v0=v0, distortion=DistortionCoeffs())
    mla = MLAGeometry(
        D=D, d=d, pitch_mu=pitch_mu, focals=focals, grid_w=grid.grid_w, grid_h=grid.grid_h,
        theta=(0.0, 0.0, -grid.vartheta_z), t=t, arrangement=grid.arrangement, parity=grid.parity,
        type_of_color=omega.type_of_color,
    )
    return CameraIntrinsics(main=main, mla=mla, pixel_size=s, sensor_size=(int(W), int(Hs)))


@dataclass
class PrecalibResult:
    grid: MIAGrid
    omega: OmegaCoefficients
    intrinsics: CameraIntrinsics
    scatter: list = field(default_factory=list)  # (N, 1/N, k, l, type, rho_pix, R_mm)
    silhouettes: dict = field(default_factory=dict)
    used_f_numbers: tuple = ()


def devignette_white(white, reference):
    """Divide by the maximum-aperture white and clamp to ``[0, 1]``."""
    ref = np.asarray(reference, dtype=float)
    out = np.divide(np.asarray(white, dtype=float), ref, out=np.zeros_like(ref), where=ref > 1e-6)
    return np.clip(out, 0.0, 1.0)


def run_precalibration(whites, *, n_types: int, config, F: float, h: float, s: float,
                       alpha: float = DEFAULT_ALPHA, arrangement: str = "hexagonal",
                       devignette: bool = False) -> PrecalibResult:
    """Full pre-calibration from ``[(f_number, image), ...]``."""
    config = InternalConfig(config)
    check_alpha(alpha)
    whites = sorted(((float(N), np.asarray(img, dtype=float)) for N, img in whites), key=lambda x: x[0])
    if len({N for N, _ in whites}) < 2:
        raise PrecalibError("insufficient aperture diversity: need white images at two f-numbers")
    # the smallest aperture gives the least vignetted, most symmetric micro-images
    grid = fit_grid(detect_mics(whites[-1][1]), arrangement=arrangement)
    reference = whites[0][1]
    per_n = {}
    for N, img in whites:
        if devignette:
            img = devignette_white(img, reference)
        per_n[N] = measure_white_radii(img, grid, N, alpha)
    silhouettes, classes = {}, {}
    for N, meas in per_n.items():
        try:
            cls = classify_lens_types(meas, n_types, config, grid.arrangement, grid.parity, s)
        except PrecalibError:
            silhouettes[N] = float("nan")
            continue
        silhouettes[N] = cls.silhouette
        classes[N] = cls
    used = sorted(classes)
    if len(used) < 2:
        raise PrecalibError("types indistinguishable at all but one aperture")
    best = max(used, key=lambda N: classes[N].silhouette)
    type_of_color = classes[best].type_of_color
    radii, fnum, types, scatter = [], [], [], []
    for N in used:
        for meas in per_n[N]:
            t = int(type_of_color[lens_color(meas.k, meas.l, n_types, grid.arrangement, grid.parity)])
            R = signed_radius(meas.rho_pix, s, config)
            radii.append(R)
            fnum.append(N)
            types.append(t)
            scatter.append((N, 1.0 / N, meas.k, meas.l, t, meas.rho_pix, R))
    omega, _, _ = estimate_omega(radii, fnum, types, n_types, grid.pitch_pix, s, type_of_color)
    sensor = (whites[0][1].shape[1], whites[0][1].shape[0])
    intr = init_intrinsics(omega, F, h, s, grid, config, sensor)
    return PrecalibResult(grid, omega, intr, scatter, silhouettes, tuple(used))
