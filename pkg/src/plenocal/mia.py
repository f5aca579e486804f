"""Micro-image centre detection and regular-grid fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.filters import threshold_otsu

from .lm import levenberg_marquardt
from .model import HEXAGONAL, ORTHOGONAL, lattice_position


class GridError(RuntimeError):
    pass


@dataclass
class MIAGrid:
    """Regular micro-image grid.

    ``vertex(k, l) = tau + pitch_pix * Rot(-vartheta_z) @ lattice(k, l)``.
    Indices are anchored at the upper-left detected lens; ``tau`` is the
    lattice origin, which coincides with lens ``(0, 0)`` unless row 0 carries
    the half-pitch shift (``parity = 1``).
    """

    pitch_pix: float
    tau_x: float
    tau_y: float
    vartheta_z: float
    arrangement: str = HEXAGONAL
    parity: int = 0
    grid_w: int = 0
    grid_h: int = 0
    indices: np.ndarray | None = None  # (n, 2) int, (k, l) of each detected centre
    centers: np.ndarray | None = None  # (n, 2) float, detected (u, v)
    mean_residual: float = float("nan")
    cost_history: list | None = None

    def vertex(self, k, l):
        lx, ly = lattice_position(k, l, self.arrangement, self.parity)
        c, s = math.cos(self.vartheta_z), math.sin(self.vartheta_z)
        # rotation by -vartheta_z in image coordinates
        x = c * lx + s * ly
        y = -s * lx + c * ly
        return np.stack([self.tau_x + self.pitch_pix * x, self.tau_y + self.pitch_pix * y], axis=-1)

    def nearest_index(self, uv):
        """Lattice index of the detected centre nearest each query point."""
        tree = cKDTree(self.centers)
        _, idx = tree.query(np.atleast_2d(uv))
        return self.indices[idx]

    def center_of(self, k, l):
        lookup = self.center_lookup()
        return lookup[(int(k), int(l))]

    def center_lookup(self) -> dict:
        return {(int(a), int(b)): c for (a, b), c in zip(self.indices, self.centers)}

    def to_dict(self):
        return {
            "pitch_pix": self.pitch_pix, "tau_x": self.tau_x, "tau_y": self.tau_y,
            "vartheta_z": self.vartheta_z, "arrangement": self.arrangement, "parity": self.parity,
            "grid_w": self.grid_w, "grid_h": self.grid_h, "mean_residual": self.mean_residual,
            "centers": [[int(k), int(l), float(u), float(v)] for (k, l), (u, v) in zip(self.indices, self.centers)],
        }

    @classmethod
    def from_dict(cls, doc):
        rows = np.asarray(doc["centers"], dtype=float).reshape(-1, 4)
        return cls(
            pitch_pix=doc["pitch_pix"], tau_x=doc["tau_x"], tau_y=doc["tau_y"],
            vartheta_z=doc["vartheta_z"], arrangement=doc["arrangement"], parity=doc["parity"],
            grid_w=doc["grid_w"], grid_h=doc["grid_h"], mean_residual=doc.get("mean_residual", float("nan")),
            indices=rows[:, :2].astype(int), centers=rows[:, 2:],
        )


def detect_mics(white, area_tolerance: float = 0.4) -> np.ndarray:
    """Sub-pixel intensity centroids of the micro-images in a white image.

    Segments at the Otsu level, drops components whose area deviates from the
    median by more than ``area_tolerance`` and components touching the image
    border, then takes intensity-weighted centroids over each component grown
    by one pixel (so partially covered edge pixels count).
    """
    img = np.asarray(white, dtype=float)
    if img.ndim != 2 or img.max() <= 0:
        raise GridError("grid undetectable: empty image")
    img = img / img.max()
    mask = img > threshold_otsu(img)
    labels, n = ndimage.label(mask)
    if n == 0:
        raise GridError("grid undetectable: no micro-images")
    ids = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(img), labels, ids)
    med = np.median(areas)
    keep = np.abs(areas - med) <= area_tolerance * med
    slices = ndimage.find_objects(labels)
    h, w = img.shape
    dilated = ndimage.grey_dilation(labels, size=(3, 3))
    # background pixels claimed by two components stay out of both
    contested = ndimage.grey_erosion(np.where(labels > 0, labels, n + 1), size=(3, 3))
    grown = np.where(labels > 0, labels, np.where(contested != dilated, 0, dilated))
    centroids = []
    for lab, ok, sl in zip(ids, keep, slices):
        if not ok or sl is None:
            continue
        if sl[0].start == 0 or sl[1].start == 0 or sl[0].stop == h or sl[1].stop == w:
            continue
        r0, r1 = max(sl[0].start - 1, 0), min(sl[0].stop + 1, h)
        c0, c1 = max(sl[1].start - 1, 0), min(sl[1].stop + 1, w)
        sub = grown[r0:r1, c0:c1] == lab
        wts = img[r0:r1, c0:c1] * sub
        mass = wts.sum()
        if not mass > 0:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        centroids.append(((wts * xx).sum() / mass, (wts * yy).sum() / mass))
    if len(centroids) < 4:
        raise GridError("grid undetectable: fewer than 4 micro-images")
    return np.asarray(centroids)


def _initial_orientation(centroids, arrangement):
    tree = cKDTree(centroids)
    dist, idx = tree.query(centroids, k=2)
    pitch = float(np.median(dist[:, 1]))
    # all neighbours within 1.3 pitch give the lattice directions
    pairs = tree.query_pairs(1.3 * pitch, output_type="ndarray")
    vec = centroids[pairs[:, 1]] - centroids[pairs[:, 0]]
    period = math.pi / 3 if arrangement == HEXAGONAL else math.pi / 2
    ang = np.arctan2(vec[:, 1], vec[:, 0])
    folded = (ang + period / 2) % period - period / 2
    # circular mean on the folded period
    mean = math.atan2(np.sin(folded * 2 * math.pi / period).mean(), np.cos(folded * 2 * math.pi / period).mean())
    theta = mean * period / (2 * math.pi)
    lengths = np.hypot(vec[:, 0], vec[:, 1])
    pitch = float(np.median(lengths[lengths < 1.3 * pitch]))
    return pitch, -theta  # lattice rows along +theta, i.e. vartheta_z = -theta


def _assign_indices(centroids, pitch, vartheta, arrangement):
    """Integer lattice indices with the top row as ``l = 0`` and ``k >= 0``.

    On a hexagonal lattice both row parities are consistent modulo one pitch;
    the one giving the narrowest index range (ties: top-left lens gets
    ``k = 0``) is kept.
    """
    c, s = math.cos(vartheta), math.sin(vartheta)
    x = (c * centroids[:, 0] - s * centroids[:, 1]) / pitch
    y = (s * centroids[:, 0] + c * centroids[:, 1]) / pitch
    row_step = math.sqrt(3) / 2 if arrangement == HEXAGONAL else 1.0
    rows = np.round((y - y.min()) / row_step).astype(int)
    best = None
    for parity in (0, 1) if arrangement == HEXAGONAL else (0,):
        shift = 0.5 * ((rows + parity) % 2) if arrangement == HEXAGONAL else 0.0
        kf = x - shift
        ref = np.angle(np.exp(2j * np.pi * kf).mean()) / (2 * np.pi)
        cols = np.round(kf - ref).astype(int)
        cols -= cols.min()
        top = rows == 0
        score = (cols.max(), cols[top].min())
        if best is None or score < best[0]:
            best = (score, cols, parity)
    _, cols, parity = best
    return np.column_stack([cols, rows]), parity


def fit_grid(centroids, arrangement: str = HEXAGONAL, max_iter: int = 200) -> MIAGrid:
    """Fit ``(pitch, tau_x, tau_y, vartheta_z)`` to detected centres."""
    pts = np.asarray(centroids, dtype=float)
    if len(pts) < 4:
        raise GridError("grid fit failed: need at least 4 centroids")
    pitch0, vartheta0 = _initial_orientation(pts, arrangement)
    indices, parity = _assign_indices(pts, pitch0, vartheta0, arrangement)
    if len(np.unique(indices[:, 1])) < 2 or len(np.unique(indices[:, 0])) < 2:
        raise GridError("grid fit failed: centroids span fewer than 2 rows or columns")
    for _ in range(2):
        grid = _solve(pts, indices, parity, arrangement, pitch0, vartheta0, max_iter)
        # re-index with the refined geometry and anchor at the upper-left lens
        new_idx, new_parity = _reindex(pts, grid)
        if np.array_equal(new_idx, indices) and new_parity == parity:
            break
        indices, parity = new_idx, new_parity
        pitch0, vartheta0 = grid.pitch_pix, grid.vartheta_z
    return grid


def _lattice_residual(params, pts, lx, ly):
    pitch, tx, ty, th = params
    c, s = math.cos(th), math.sin(th)
    u = tx + pitch * (c * lx + s * ly)
    v = ty + pitch * (-s * lx + c * ly)
    return np.concatenate([u - pts[:, 0], v - pts[:, 1]])


def _lattice_jacobian(params, lx, ly):
    pitch, _, _, th = params
    c, s = math.cos(th), math.sin(th)
    n = len(lx)
    J = np.zeros((2 * n, 4))
    J[:n, 0] = c * lx + s * ly
    J[n:, 0] = -s * lx + c * ly
    J[:n, 1] = 1.0
    J[n:, 2] = 1.0
    J[:n, 3] = pitch * (-s * lx + c * ly)
    J[n:, 3] = pitch * (-c * lx - s * ly)
    return J


def _solve(pts, indices, parity, arrangement, pitch0, vartheta0, max_iter):
    lx, ly = lattice_position(indices[:, 0], indices[:, 1], arrangement, parity)
    c, s = math.cos(vartheta0), math.sin(vartheta0)
    # linear initial offset given pitch and angle
    tx0 = np.mean(pts[:, 0] - pitch0 * (c * lx + s * ly))
    ty0 = np.mean(pts[:, 1] - pitch0 * (-s * lx + c * ly))
    res = levenberg_marquardt(
        lambda p: _lattice_residual(p, pts, lx, ly),
        lambda p: _lattice_jacobian(p, lx, ly),
        np.array([pitch0, tx0, ty0, vartheta0]),
        max_iter=max_iter,
        ftol=1e-15,
    )
    if res.status == "failed" or not np.isfinite(res.cost):
        raise GridError(f"grid fit failed: {res.message} (cost {res.cost:.3g})")
    if res.status != "converged":
        r = _lattice_residual(res.x, pts, lx, ly)
        raise GridError(f"grid fit failed after {max_iter} iterations, mean residual {np.abs(r).mean():.3g} px")
    pitch, tx, ty, th = res.x
    r = _lattice_residual(res.x, pts, lx, ly).reshape(2, -1)
    if abs(th) >= 0.1:
        raise GridError(f"grid rotation {th:.3f} rad outside the supported range")
    return MIAGrid(
        pitch_pix=float(pitch), tau_x=float(tx), tau_y=float(ty), vartheta_z=float(th),
        arrangement=arrangement, parity=parity,
        grid_w=int(indices[:, 0].max() + 1), grid_h=int(indices[:, 1].max() + 1),
        indices=indices.copy(), centers=pts.copy(),
        mean_residual=float(np.hypot(r[0], r[1]).mean()), cost_history=res.cost_history,
    )


def _reindex(pts, grid: MIAGrid):
    """Re-derive indices from the refined pitch and angle."""
    return _assign_indices(pts - [grid.tau_x, grid.tau_y], grid.pitch_pix, grid.vartheta_z, grid.arrangement)
