"""Relative blur between micro-images and calibration of the Gaussian spread factor kappa."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .lm import levenberg_marquardt

log = logging.getLogger(__name__)

WINDOW = 9
MAX_RELATIVE_BLUR = 2.5
MIN_SAMPLES = 10
MIN_WHITE = 0.1  # fraction of the white peak marking the micro-image border


class KappaError(RuntimeError):
    pass


def relative_blur_radius(rho_i: float, rho_j: float) -> float:
    """Radius of the kernel relating two blur levels: ``sqrt(|rho_i^2 - rho_j^2|)``."""
    return math.sqrt(abs(rho_i * rho_i - rho_j * rho_j))


def relative_blur_sign(rho_i: float, rho_j: float) -> int:
    """``+1`` when window ``i`` is the more blurred one, ``-1`` when ``j`` is, else 0."""
    diff = rho_i * rho_i - rho_j * rho_j
    return int(np.sign(diff))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete isotropic Gaussian, truncated at 3 sigma, at least 3x3, unit sum."""
    half = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-half, half + 1, dtype=float)
    if sigma <= 0:
        g = (x == 0).astype(float)
    else:
        g = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def extract_window(img, u: float, v: float, size: int = WINDOW) -> np.ndarray:
    """``size x size`` patch centred on sub-pixel ``(u, v)``, bilinear interpolation."""
    if size % 2 == 0:
        raise ValueError("window side must be odd")
    half = size // 2
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1]
    coords = np.array([yy.ravel() + v, xx.ravel() + u])
    return ndimage.map_coordinates(np.asarray(img, dtype=float), coords, order=1, mode="nearest").reshape(size, size)


def normalise(window) -> np.ndarray:
    w = np.asarray(window, dtype=float)
    m = w.mean()
    return w / m if m > 0 else w


@dataclass
class RelativeBlurSample:
    window_i: np.ndarray
    window_j: np.ndarray
    rho_i: float
    rho_j: float
    type_i: int = 0
    type_j: int = 0
    frame_n: int = 0

    @property
    def informative(self) -> bool:
        return abs(abs(self.rho_i) - abs(self.rho_j)) > 1e-9

    def ordered(self) -> "RelativeBlurSample":
        """Same sample with the sharper window first."""
        if abs(self.rho_i) <= abs(self.rho_j):
            return self
        return RelativeBlurSample(self.window_j, self.window_i, self.rho_j, self.rho_i,
                                  self.type_j, self.type_i, self.frame_n)


def blur_window(window, sigma: float) -> np.ndarray:
    return ndimage.convolve(np.asarray(window, dtype=float), gaussian_kernel(sigma), mode="nearest")


def _residual(samples, kappa):
    out = []
    for s in samples:
        sigma = kappa * relative_blur_radius(s.rho_i, s.rho_j)
        out.append((normalise(s.window_j) - normalise(blur_window(s.window_i, sigma))).ravel())
    return np.concatenate(out)


@dataclass
class KappaResult:
    kappa: float
    rms: float
    n_samples: int
    n_rejected: int
    status: str

    def to_dict(self):
        return {
            "schema": "plenocal.kappa", "schema_version": 1, "kappa": self.kappa, "rms": self.rms,
            "n_samples": self.n_samples, "n_rejected": self.n_rejected, "status": self.status,
        }


def calibrate_kappa(samples, kappa0: float = 1.0, max_relative_blur: float = MAX_RELATIVE_BLUR,
                    min_samples: int = MIN_SAMPLES) -> KappaResult:
    """Fit ``kappa`` so that blurring the sharper window reproduces the blurrier one.

    Both windows are mean-normalised before comparison.  Samples with equal
    blur, or with a relative blur radius above ``max_relative_blur`` pixels,
    are dropped.
    """
    kept, rejected = [], 0
    for s in samples:
        if not s.informative or relative_blur_radius(s.rho_i, s.rho_j) > max_relative_blur:
            rejected += 1
            continue
        kept.append(s.ordered())
    if not kept:
        raise KappaError("kappa unidentifiable: no informative sample")
    if len(kept) < min_samples:
        raise KappaError(f"kappa unidentifiable: {len(kept)} informative samples, need {min_samples}")

    def jac(x):
        h = 1e-6 * max(1.0, abs(x[0]))
        return ((_residual(kept, x[0] + h) - _residual(kept, x[0] - h)) / (2 * h))[:, None]

    res = levenberg_marquardt(lambda x: _residual(kept, x[0]), jac, np.array([float(kappa0)]), max_iter=100)
    r = _residual(kept, res.x[0])
    return KappaResult(float(abs(res.x[0])), float(np.sqrt(np.mean(r**2))), len(kept), rejected, res.status)


def white_support(white, smooth: float = 1.0) -> np.ndarray:
    """Devignetting white, lightly smoothed against sampling noise and scaled to a unit peak."""
    w = ndimage.gaussian_filter(np.asarray(white, dtype=float), smooth)
    peak = w.max()
    if not peak > 0:
        raise ValueError("white image is empty")
    return w / peak


def collect_samples(image, features, grid, frame_n: int = 0, size: int = WINDOW, *, support=None,
                    min_white: float = MIN_WHITE, mi_radius: float | None = None) -> list:
    """Window pairs from observations of the same corner through lenses of different types.

    A window is kept only if it lies inside its micro-image: with ``support``
    (see :func:`white_support`) every window pixel must exceed ``min_white``;
    otherwise the whole square must fit in a disc of ``mi_radius`` around the
    detected centre.
    """
    if support is None and mi_radius is None:
        raise ValueError("need a white support image or a micro-image radius")
    lookup = grid.center_lookup()
    reach = (mi_radius or 0.0) - (size // 2) * math.sqrt(2)
    by_corner = {}
    for f in features:
        if f.frame_n != frame_n:
            continue
        c = lookup.get((f.k, f.l))
        if c is None:
            continue
        if support is not None:
            if extract_window(support, f.u, f.v, size).min() <= min_white:
                continue
        elif math.hypot(f.u - c[0], f.v - c[1]) > reach:
            continue
        by_corner.setdefault(f.corner_id, []).append(f)
    out = []
    for _, obs in sorted(by_corner.items()):
        for a, b in itertools.combinations(obs, 2):
            if a.type_i == b.type_i:
                continue
            out.append(RelativeBlurSample(
                extract_window(image, a.u, a.v, size), extract_window(image, b.u, b.v, size),
                a.rho, b.rho, a.type_i, b.type_i, frame_n,
            ))
    return out
