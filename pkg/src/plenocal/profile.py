"""Depth-of-field profiling: focus planes, per-type DoF and blur-versus-distance curves.

MLA-space distances ``a`` are measured from the micro-lens plane towards the
main lens; virtual points behind the array (Galilean case) have ``a < 0``.
Object distances are measured from the main lens.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .model import CameraIntrinsics


def min_coc_radius(s: float, wavelength: float, d: float, A: float) -> float:
    """Smallest acceptable circle-of-confusion radius (mm).

    The larger of the Airy first-null radius at working f-number ``d / A``
    and half a pixel.  ``wavelength`` is in mm.
    """
    if not (wavelength > 0 and A > 0):
        raise ValueError("wavelength and aperture must be positive")
    airy = 1.22 * wavelength * d / A
    return max(airy, s / 2.0)


def focus_plane(f: float, d: float) -> float:
    """MLA-space distance imaged sharply on the sensor by a micro-lens of focal ``f``."""
    if f == d:
        return math.inf
    return d * f / (d - f)


def dof_bounds(f: float, d: float, A: float, r0: float, a0: float | None = None) -> tuple:
    """Far and near MLA-space limits ``(a_plus, a_minus)`` where the blur radius equals ``r0``.

    An unbounded side (vanishing denominator or sign flip past infinity) is
    returned as ``inf`` with the sign of ``a0``.
    """
    if a0 is None:
        a0 = focus_plane(f, d)
    if math.isinf(a0):
        return a0, a0
    x = 2.0 * r0 * (a0 - f)
    num = A * f * a0

    def side(den):
        if den == 0 or den * (A * f) < 0:
            return math.copysign(math.inf, a0)
        return num / den

    return side(A * f - x), side(A * f + x)


def dof_length(f: float, d: float, A: float, r0: float) -> float:
    """Closed-form per-type DoF, equal to ``|a_plus - a_minus|``."""
    a0 = focus_plane(f, d)
    x = 2.0 * r0 * (a0 - f)
    af = A * f
    return abs(af * a0 * 2.0 * x / (af**2 - x**2))


def back_project_to_object(a_mla: float, D: float, F: float) -> float:
    """Object distance conjugate (through the main lens) to MLA-space distance ``a_mla``."""
    b = D - a_mla
    if b == F:
        return math.inf
    return b * F / (b - F)


def object_to_mla(a_obj, D: float, F: float):
    """Inverse of :func:`back_project_to_object`."""
    a_obj = np.asarray(a_obj, dtype=float)
    b = a_obj * F / (a_obj - F)
    return D - b


def blur_radius_mla(a, f: float, d: float, pitch: float, s: float):
    """Signed blur radius in pixels for a point at MLA-space distance ``a``."""
    a = np.asarray(a, dtype=float)
    return pitch * d / (2.0 * s) * (1.0 / f - 1.0 / a - 1.0 / d)


@dataclass
class BlurProfile:
    object_distance: np.ndarray
    virtual_depth: np.ndarray
    rho: np.ndarray  # (n_samples, n_types), pixels
    focal_planes: list  # per type: (a0 in MLA space, object distance)
    dof_bounds: list  # per type: dict with MLA and object-space limits
    total_dof_mla: tuple  # (min |a|, max |a|)
    total_dof: tuple  # object space (near, far)
    r0: float
    extra: dict = field(default_factory=dict)

    @property
    def total_dof_length(self) -> float:
        return self.total_dof[1] - self.total_dof[0]

    def to_dict(self) -> dict:
        def num(x):
            return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")

        return {
            "schema": "plenocal.blur_profile", "schema_version": 1,
            "r0_mm": self.r0,
            "focal_planes": [{"type": i + 1, "a0_mla": num(a), "a0_object": num(o)}
                             for i, (a, o) in enumerate(self.focal_planes)],
            "dof": [{"type": i + 1, **{k: num(v) for k, v in b.items()}} for i, b in enumerate(self.dof_bounds)],
            "total_dof_mla": [num(x) for x in self.total_dof_mla],
            "total_dof_object": [num(x) for x in self.total_dof],
            "total_dof_length": num(self.total_dof_length),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["object_distance_mm", "virtual_depth"] + [f"rho_type{i + 1}_px" for i in range(self.rho.shape[1])])
        for a, v, row in zip(self.object_distance, self.virtual_depth, self.rho):
            w.writerow([f"{a:.6f}", f"{v:.6f}"] + [f"{r:.6f}" for r in row])
        return buf.getvalue()

    def to_svg(self, s: float) -> str:
        """Blur radius against object distance, focus planes and DoF bands."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        matplotlib.rcParams["svg.hashsalt"] = "plenocal"  # stable element ids
        fig, ax = plt.subplots(figsize=(8, 4.5))
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for i in range(self.rho.shape[1]):
            c = colors[i % len(colors)]
            ax.plot(self.object_distance, np.abs(self.rho[:, i]), color=c, label=f"type {i + 1}")
            a_obj = self.focal_planes[i][1]
            if math.isfinite(a_obj):
                ax.axvline(a_obj, color=c, ls=":", lw=0.8)
            lo, hi = self.dof_bounds[i]["near_object"], self.dof_bounds[i]["far_object"]
            if math.isfinite(lo) and math.isfinite(hi):
                ax.axvspan(min(lo, hi), max(lo, hi), color=c, alpha=0.12)
        ax.axhline(self.r0 / s, color="k", ls="--", lw=0.8, label="r0")
        ax.set_xscale("log")
        ax.set_xlabel("object distance [mm]")
        ax.set_ylabel("blur radius [px]")
        ax.legend(loc="upper right")
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
        return buf.getvalue()


def build_blur_profile(intr: CameraIntrinsics, near: float, far: float, wavelength: float = 750e-6,
                       n_samples: int = 2000) -> BlurProfile:
    """Sample the per-type blur radius between object distances ``near`` and ``far`` (mm)."""
    if not 0 < near < far:
        raise ValueError("need 0 < near < far")
    F, D, d, mu, s = intr.main.F, intr.mla.D, intr.mla.d, intr.mla.pitch_mu, intr.pixel_size
    focals = intr.mla.focals
    r0 = min_coc_radius(s, wavelength, d, mu)
    obj = np.geomspace(near, far, n_samples)
    a = object_to_mla(obj, D, F)
    rho = np.column_stack([blur_radius_mla(a, f, d, mu, s) for f in focals])
    planes, bounds, extents = [], [], []
    for f in focals:
        a0 = focus_plane(f, d)
        planes.append((a0, back_project_to_object(a0, D, F) if math.isfinite(a0) else F))
        a_far, a_near = dof_bounds(f, d, mu, r0, a0)
        o_far = back_project_to_object(a_far, D, F) if math.isfinite(a_far) else F
        o_near = back_project_to_object(a_near, D, F) if math.isfinite(a_near) else F
        bounds.append({
            "far_mla": a_far, "near_mla": a_near,
            "far_object": o_far, "near_object": o_near,
            "dof_mla": abs(abs(a_far) - abs(a_near)),
        })
        extents += [abs(a_far), abs(a_near)]
    lo_mla, hi_mla = min(extents), max(extents)
    sign = -1.0 if planes[0][0] < 0 else 1.0
    ends = [back_project_to_object(sign * x, D, F) if math.isfinite(x) else math.inf for x in (lo_mla, hi_mla)]
    ends = [e if e > 0 else math.inf for e in ends]  # conjugates beyond infinity
    return BlurProfile(
        object_distance=obj, virtual_depth=-a / d, rho=rho,
        focal_planes=planes, dof_bounds=bounds,
        total_dof_mla=(lo_mla, hi_mla), total_dof=(min(ends), max(ends)), r0=r0,
    )
