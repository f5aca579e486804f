"""Corner observations, clustering, virtual depth and BAP feature synthesis."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.cluster import DBSCAN

from .mia import MIAGrid
from .model import BAPFeature, lens_color
from .precalib import OmegaCoefficients

log = logging.getLogger(__name__)

DEFAULT_EPS_PITCH = 0.95
DEFAULT_MIN_SAMPLES = 3
RING_RADIUS = 3.0


@dataclass(frozen=True)
class CornerObservation:
    u: float
    v: float
    k: int
    l: int
    frame_n: int = 0
    corner_id: int = -1  # known only for injected ground truth


@dataclass
class Cluster:
    corner_id: int
    members: list
    virtual_depth: float = float("nan")
    frame_n: int = 0

    @property
    def barycenter(self) -> np.ndarray:
        return np.mean([[m.u, m.v] for m in self.members], axis=0)


def devignette(raw, white, min_white: float = 0.05):
    """Flat-field a raw image by a same-aperture white image.

    Both are normalised by the white maximum; pixels where the white falls
    below ``min_white`` of its maximum are set to zero.
    """
    raw = np.asarray(raw, dtype=float)
    white = np.asarray(white, dtype=float)
    if raw.shape != white.shape:
        raise ValueError(f"dimension mismatch: raw {raw.shape} vs white {white.shape}")
    peak = white.max()
    if not peak > 0:
        raise ValueError("white image is empty")
    ok = white > min_white * peak
    out = np.zeros_like(raw)
    np.divide(raw, white, out=out, where=ok)
    return np.clip(out, 0.0, 1.0)


def _saddle_refine(img, u, v, half=2, iters=3):
    """Sub-pixel saddle point of a quadratic fitted around ``(u, v)``."""
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1]
    X = np.column_stack([xx.ravel() ** 2, (xx * yy).ravel(), yy.ravel() ** 2, xx.ravel(), yy.ravel(), np.ones(xx.size)])
    cu, cv = int(round(u)), int(round(v))
    h, w = img.shape
    for _ in range(iters):
        if cu - half < 0 or cv - half < 0 or cu + half >= w or cv + half >= h:
            return None
        patch = img[cv - half : cv + half + 1, cu - half : cu + half + 1].ravel()
        a, b, c, d, e, _ = np.linalg.lstsq(X, patch, rcond=None)[0]
        H = np.array([[2 * a, b], [b, 2 * c]])
        if np.linalg.det(H) >= 0:
            return None
        dx, dy = np.linalg.solve(H, [-d, -e])
        if abs(dx) > 1.5 or abs(dy) > 1.5:
            return None
        nu, nv = cu + dx, cv + dy
        if int(round(nu)) == cu and int(round(nv)) == cv:
            return nu, nv
        cu, cv = int(round(nu)), int(round(nv))
    return cu + dx, cv + dy


def ring_sign_changes(img, u: float, v: float, radius: float = RING_RADIUS, n: int = 32,
                      min_swing: float = 0.0) -> int:
    """Sign changes of the mean-removed intensity on a circle around ``(u, v)``.

    Four at an X-junction, two at an L-junction or on an edge.  Rings whose
    intensity swing is below ``min_swing`` count as flat (0).
    """
    t = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    vals = ndimage.map_coordinates(img, [v + radius * np.sin(t), u + radius * np.cos(t)], order=1, mode="nearest")
    swing = np.ptp(vals)
    if swing <= min_swing or swing == 0:
        return 0
    vals = vals - vals.mean()
    signs = np.sign(vals[np.abs(vals) > 0.05 * swing])
    if len(signs) < 2:
        return 0
    return int(np.count_nonzero(signs != np.roll(signs, 1)))


def detect_corners(img, grid: MIAGrid, frame_n: int = 0, *, mi_radius: float | None = None,
                   border: float = 2.0, sigma: float = 1.2, rel_threshold: float = 0.15,
                   min_distance: int = 4, support=None, min_white: float = 0.3,
                   min_swing: float = 0.3) -> list:
    """Checkerboard corners inside each micro-image.

    Candidates are local maxima of the negative Hessian determinant (large at
    X-junctions, near zero on edges) within the micro-image disc minus a
    ``border`` band; each is refined by a quadratic saddle fit and must pass a
    ring test (four intensity sign changes with a swing of at least
    ``min_swing`` times the image contrast), which rejects the L-junctions at
    the board outline and noise peaks in flat regions.  With ``support`` (a unit-peak white image) candidates
    where it falls below ``min_white`` are dropped: there the light cone is
    clipped by the micro-lens rim and the spot centroid drifts outwards.
    """
    img = np.asarray(img, dtype=float)
    if img.max() <= 0:
        return []
    radius = (mi_radius or 0.5 * grid.pitch_pix) - border
    # extend each micro-image outwards so its rim does not read as an edge
    invalid = img <= 0
    if invalid.any():
        _, (iy, ix) = ndimage.distance_transform_edt(invalid, return_indices=True)
        img = img[iy, ix]
    smooth = ndimage.gaussian_filter(img, sigma)
    ixx = ndimage.gaussian_filter(img, sigma, order=(0, 2))
    iyy = ndimage.gaussian_filter(img, sigma, order=(2, 0))
    ixy = ndimage.gaussian_filter(img, sigma, order=(1, 1))
    resp = -(ixx * iyy - ixy * ixy)
    # the ideal junction response scales with contrast^2 / sigma^4
    contrast = np.percentile(img[img > 0], 95) - np.percentile(img[img > 0], 5) if (img > 0).any() else 0
    thresh = rel_threshold * contrast**2 / (2 * math.pi * sigma**2) ** 2
    if thresh <= 0:
        return []
    peaks = (resp == ndimage.maximum_filter(resp, size=2 * min_distance + 1)) & (resp > thresh)
    out = []
    half = int(math.ceil(radius))
    for (k, l), c in zip(grid.indices, grid.centers):
        cu, cv = int(round(c[0])), int(round(c[1]))
        r0, r1 = max(cv - half, 0), min(cv + half + 1, img.shape[0])
        c0, c1 = max(cu - half, 0), min(cu + half + 1, img.shape[1])
        ys, xs = np.nonzero(peaks[r0:r1, c0:c1])
        for y, x in zip(ys + r0, xs + c0):
            if (x - c[0]) ** 2 + (y - c[1]) ** 2 > radius**2:
                continue
            ref = _saddle_refine(smooth, x, y)
            if ref is None or (ref[0] - c[0]) ** 2 + (ref[1] - c[1]) ** 2 > radius**2:
                continue
            if support is not None and support[int(round(ref[1])), int(round(ref[0]))] < min_white:
                continue
            if ring_sign_changes(smooth, ref[0], ref[1], min_swing=min_swing * contrast) != 4:
                continue
            out.append(CornerObservation(float(ref[0]), float(ref[1]), int(k), int(l), frame_n))
    return out


def corners_from_sidecar(sidecar: dict, grid: MIAGrid, frame_n: int = 0, noise: float = 0.0,
                         rng: np.random.Generator | None = None) -> list:
    """Ground-truth injection: sidecar corners re-indexed to the detected grid.

    Optional Gaussian ``noise`` (pixels) is added to each coordinate.
    """
    rows = np.asarray(sidecar["corners"], dtype=float)
    if len(rows) == 0:
        return []
    uv = rows[:, 4:6].copy()
    kl = grid.nearest_index(uv)
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        uv = uv + rng.normal(0.0, noise, uv.shape)
    return [
        CornerObservation(float(u), float(v), int(k), int(l), frame_n, int(cid))
        for (u, v), (k, l), cid in zip(uv, kl, rows[:, 0].astype(int))
    ]


def cluster_observations(corners, grid: MIAGrid, eps: float | None = None,
                         min_samples: int = DEFAULT_MIN_SAMPLES, use_ids: bool = False) -> list:
    """Group observations of the same scene point, per frame.

    DBSCAN on image positions; noise points are dropped.  With ``use_ids`` the
    injected ground-truth ids are used instead.  A cluster containing two
    members from one micro-image indicates that ``eps`` merged distinct corners
    and is split back into singletons (logged).
    """
    eps = eps if eps is not None else DEFAULT_EPS_PITCH * grid.pitch_pix
    clusters = []
    frames = sorted({c.frame_n for c in corners})
    for n in frames:
        obs = [c for c in corners if c.frame_n == n]
        if use_ids:
            by_id = {}
            for c in obs:
                by_id.setdefault(c.corner_id, []).append(c)
            clusters.extend(Cluster(cid, m, frame_n=n) for cid, m in sorted(by_id.items()) if len(m) >= 2)
            continue
        if len(obs) < min_samples:
            continue
        xy = np.array([[c.u, c.v] for c in obs])
        labels = DBSCAN(eps=eps, min_samples=min_samples).fit(xy).labels_
        merged = 0
        for lab in sorted(set(labels) - {-1}):
            members = [o for o, lb in zip(obs, labels) if lb == lab]
            lenses = [(m.k, m.l) for m in members]
            if len(set(lenses)) != len(lenses):
                merged += 1
                continue
            clusters.append(Cluster(-1, members, frame_n=n))
        if merged:
            log.warning("frame %d: %d clusters mixed several corners (eps %.1f px too large?)", n, merged, eps)
    return clusters


def clustering_diagnostics(clusters, corners) -> dict:
    """Counts that reveal over-segmentation (many tiny clusters, many noise points)."""
    n_obs = len(corners)
    clustered = sum(len(c.members) for c in clusters)
    sizes = [len(c.members) for c in clusters]
    return {
        "observations": n_obs,
        "clusters": len(clusters),
        "noise_fraction": 1.0 - clustered / n_obs if n_obs else 0.0,
        "median_size": float(np.median(sizes)) if sizes else 0.0,
        "over_segmented": bool(n_obs and (1.0 - clustered / n_obs > 0.5)),
    }


def baseline_multiple(grid: MIAGrid, k1, l1, k2, l2) -> float:
    """Distance between two lattice vertices in units of the pitch."""
    a, b = grid.vertex(np.array([k1, k2]), np.array([l1, l2]))
    return float(np.hypot(*(b - a)) / grid.pitch_pix)


def virtual_depth_from_pair(disparity: float, eta: float, lam: float, pitch_pix: float) -> float:
    baseline = eta * lam * pitch_pix
    if baseline == disparity:
        return math.inf
    return baseline / (baseline - disparity)


def virtual_depth(cluster: Cluster, grid: MIAGrid, lam: float) -> float:
    """Median virtual depth over all member pairs.

    The disparity of a pair is the displacement between the two observations
    projected on the direction joining their micro-image centres.
    """
    if len(cluster.members) < 2:
        raise ValueError("virtual depth needs at least two observations")
    values = []
    for a, b in itertools.combinations(cluster.members, 2):
        va, vb = grid.vertex(np.array([a.k, b.k]), np.array([a.l, b.l]))
        base = vb - va
        norm = math.hypot(*base)
        if norm == 0:
            continue
        disparity = ((b.u - a.u) * base[0] + (b.v - a.v) * base[1]) / norm
        v = virtual_depth_from_pair(disparity, norm / grid.pitch_pix, lam, grid.pitch_pix)
        if math.isfinite(v):
            values.append(v)
    if not values:
        raise ValueError("no usable observation pair")
    return float(np.median(values))


def bap_radius(v: float, type_i: int, omega: OmegaCoefficients, lam: float, grid: MIAGrid, s: float) -> float:
    """Blur radius in pixels for a point at virtual depth ``v`` seen by type ``type_i``."""
    half_mu = lam * s * grid.pitch_pix / 2.0
    r = half_mu / v + omega.q_prime[type_i - 1] - half_mu
    return r / s


def build_bap_features(clusters, omega: OmegaCoefficients, grid: MIAGrid, lam: float, s: float) -> list:
    """One BAP feature per clustered observation."""
    out = []
    n_types = omega.n_types
    for cl in clusters:
        if not math.isfinite(cl.virtual_depth):
            try:
                cl.virtual_depth = virtual_depth(cl, grid, lam)
            except ValueError:
                continue
        for m in cl.members:
            color = int(lens_color(m.k, m.l, n_types, grid.arrangement, grid.parity))
            t = omega.type_of_color[color] if color < len(omega.type_of_color) else None
            if t is None or not 1 <= t <= n_types:
                log.warning("unknown lens type for (%d, %d); feature skipped", m.k, m.l)
                continue
            rho = bap_radius(cl.virtual_depth, t, omega, lam, grid, s)
            out.append(BAPFeature(m.u, m.v, rho, m.k, m.l, int(t), cl.frame_n, cl.corner_id))
    return out
