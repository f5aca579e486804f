"""Ground-truth camera presets for the simulator.

Both presets keep full-size optics (pitch, distances, focal lengths) and only
shrink the number of micro-lenses so that renders stay fast.
"""

from __future__ import annotations

import math

from .model import (
    HEXAGONAL,
    CameraIntrinsics,
    DistortionCoeffs,
    MainLens,
    MLAGeometry,
)


def _layout(F, D, d, pitch_mu, focals, s, grid_w, grid_h, theta, f_number, margin=4.0, pp_offset=(0.37, -0.21)):
    lam = D / (D + d)
    pitch_pix = pitch_mu / (lam * s)
    first = 0.5 * pitch_pix + margin
    width = math.ceil(first + (grid_w - 0.5) * pitch_pix + 0.5 * pitch_pix + margin)
    height = math.ceil(first + (grid_h - 1) * pitch_pix * math.sqrt(3) / 2 + 0.5 * pitch_pix + margin)
    u0 = width / 2 + pp_offset[0]
    v0 = height / 2 + pp_offset[1]
    t = ((first - u0) * s * lam, (first - v0) * s * lam)
    main = MainLens(F=F, aperture_A=F / f_number, u0=u0, v0=v0, distortion=DistortionCoeffs())
    mla = MLAGeometry(
        D=D, d=d, pitch_mu=pitch_mu, focals=focals, grid_w=grid_w, grid_h=grid_h,
        theta=theta, t=t, arrangement=HEXAGONAL,
    )
    return CameraIntrinsics(main=main, mla=mla, pixel_size=s, sensor_size=(width, height))


def r12_like(grid_w: int = 32, grid_h: int = 28) -> CameraIntrinsics:
    """Multi-focus Galilean camera with three lens types.

    Types are numbered by increasing ``q' = pitch_mu * d / (2 f)``, i.e. by
    decreasing focal length.
    """
    return _layout(
        F=49.71448, D=56.700741, d=0.324774, pitch_mu=0.12745529,
        focals=(0.57818, 0.55208, 0.50542), s=0.0055,
        grid_w=grid_w, grid_h=grid_h, theta=(2.0e-4, -3.0e-4, 1.5e-3), f_number=4.0,
    )


def upc_like(grid_w: int = 32, grid_h: int = 28) -> CameraIntrinsics:
    """Unfocused camera (``f = d``) focused at infinity (``D`` close to ``F``)."""
    return _layout(
        F=9.98445, D=9.847916, d=0.040087, pitch_mu=0.020,
        focals=(0.040087,), s=0.0014,
        grid_w=grid_w, grid_h=grid_h, theta=(0.0, 0.0, 1.0e-3), f_number=2.0,
    )


def focus_distance(intr: CameraIntrinsics, xi: int = 1) -> float:
    """Object-to-image distance ``h`` for which the init formulas are exact.

    The main lens images the plane at object distance ``a`` to ``b = D + 2 xi d``;
    ``h = a + b``.  Returns ``inf`` for a camera focused at infinity.
    """
    F, D, d = intr.main.F, intr.mla.D, intr.mla.d
    b = D + 2 * xi * d
    if b <= F:
        return math.inf
    return b * F / (b - F) + b
