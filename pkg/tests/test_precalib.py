import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plenocal.mia import MIAGrid
from plenocal.model import InternalConfig
from plenocal.precalib import (
    ALPHA_RANGE, DEFAULT_ALPHA, OmegaCoefficients, PrecalibError, check_alpha, classify_lens_types,
    estimate_omega, f_number_from_av, hyperfocal_image_distance, init_intrinsics, measure_mi_radius,
    moment_covariance, signed_radius,
)


def _raster_disc(r, centre, size, ss=8):
    """Pixel-area coverage of a disc, supersampled ``ss x ss`` per pixel."""
    o = (np.arange(ss) + 0.5) / ss - 0.5
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    acc = np.zeros((size, size))
    for a in o:
        for b in o:
            acc += (xx + a - centre[0]) ** 2 + (yy + b - centre[1]) ** 2 <= r * r
    return acc / ss**2


def _brute_force_sigma(img):
    """Double loop over pixels, independent of the vectorised implementation."""
    h, w = img.shape
    m = sx = sy = 0.0
    for y in range(h):
        for x in range(w):
            m += img[y, x]
            sx += img[y, x] * x
            sy += img[y, x] * y
    cx, cy = sx / m, sy / m
    cxx = cyy = cxy = 0.0
    for y in range(h):
        for x in range(w):
            cxx += img[y, x] * (x - cx) ** 2
            cyy += img[y, x] * (y - cy) ** 2
            cxy += img[y, x] * (x - cx) * (y - cy)
    cxx, cyy, cxy = cxx / m, cyy / m, cxy / m
    lam = 0.5 * (cxx + cyy) + math.sqrt(0.25 * (cxx - cyy) ** 2 + cxy**2)
    return math.sqrt(lam)


def test_default_alpha():
    assert DEFAULT_ALPHA == 2.357
    assert ALPHA_RANGE == (2.33, 2.37)


def test_alpha_outside_range_rejected():
    with pytest.raises(ValueError):
        check_alpha(2.0)


def test_moment_radius_matches_brute_force():
    rng = np.random.default_rng(4)
    img = _raster_disc(6.3, (11.2, 10.7), 23) * (0.8 + 0.2 * rng.random((23, 23)))
    meas = measure_mi_radius(img)
    assert meas.sigma_moment == pytest.approx(_brute_force_sigma(img), rel=0, abs=1e-12)
    assert meas.rho_pix == pytest.approx(DEFAULT_ALPHA * meas.sigma_moment, rel=1e-15)


def test_uniform_disc_moment_radius():
    # oracle: exact moments of the rasterised disc; a continuous disc has sigma = r / 2
    img = _raster_disc(10.0, (15.5, 15.5), 32, ss=16)
    sigma = _brute_force_sigma(img)
    assert sigma == pytest.approx(5.0, rel=2e-3)
    assert measure_mi_radius(img).rho_pix == pytest.approx(DEFAULT_ALPHA * sigma, rel=1e-12)
    assert measure_mi_radius(img).rho_pix == pytest.approx(11.79, abs=0.03)


def test_isotropic_spot_has_equal_eigenvalues():
    yy, xx = np.mgrid[0:41, 0:41]
    g = np.exp(-((xx - 20.3) ** 2 + (yy - 19.6) ** 2) / (2 * 3.0**2))
    ev = np.linalg.eigvalsh(moment_covariance(g))
    assert ev[1] / ev[0] == pytest.approx(1.0, abs=0.01)


def test_empty_window_rejected():
    with pytest.raises(PrecalibError, match="empty micro-image"):
        measure_mi_radius(np.zeros((5, 5)))


def test_signed_radius_examples():
    assert signed_radius(7.0, 0.0055, InternalConfig.GALILEAN) == pytest.approx(-0.0385)
    assert signed_radius(7.0, 0.0055, InternalConfig.KEPLERIAN) == pytest.approx(0.0385)
    assert signed_radius(0.0, 0.0055, InternalConfig.GALILEAN) == 0.0
    assert signed_radius(0.0, 0.0055, InternalConfig.KEPLERIAN) == 0.0
    assert abs(signed_radius(7.172, 0.0014, InternalConfig.UNFOCUSED)) == pytest.approx(0.01004, abs=1e-6)


def test_f_number_from_aperture_value():
    assert f_number_from_av(4.0) == pytest.approx(4.0)
    assert f_number_from_av(5.0) == pytest.approx(math.sqrt(2**5))


def test_omega_two_apertures_exact():
    m, q = -0.1406, (-0.028, -0.023, -0.027)
    N = np.array([8.0] * 3 + [11.31] * 3)
    types = np.array([1, 2, 3] * 2)
    R = m / N + np.array(q)[types - 1]
    omega, X, resid = estimate_omega(R, N, types, 3, pitch_pix=23.3, s=0.0055)
    assert np.abs(resid).max() < 1e-10
    assert omega.m == pytest.approx(m, rel=1e-10)
    for qi, qp in zip(q, omega.q_prime):
        assert qp == pytest.approx(qi + 0.0055 * 23.3 / 2, rel=1e-10)


def test_omega_needs_two_apertures():
    with pytest.raises(PrecalibError, match="insufficient aperture diversity"):
        estimate_omega([0.1, 0.2], [4.0, 4.0], [1, 1], 1, 20.0, 0.0055)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_omega_noisy_slope_property(seed):
    rng = np.random.default_rng(seed)
    s, m, q = 0.0055, -0.15956, np.array([-0.0272, -0.0216, -0.0255])
    Ns = np.array([4.0, 5.66, 8.0, 11.31, 16.0])
    n_lens = 300
    N = np.repeat(Ns, n_lens)
    types = np.tile(np.arange(1, 4), len(N) // 3)
    R = m / N + q[types - 1] + rng.normal(0.0, 0.1 * s, len(N))
    omega, _, _ = estimate_omega(R, N, types, 3, 23.3, s)
    assert abs(omega.m - m) / abs(m) < 0.02


def _grid(pitch_pix):
    return MIAGrid(pitch_pix=pitch_pix, tau_x=10.0, tau_y=12.0, vartheta_z=0.0, grid_w=4, grid_h=4,
                   indices=np.zeros((0, 2), dtype=int), centers=np.zeros((0, 2)))


def test_lambda_init_desk_dataset():
    # Delta * s = 128.2216 um, m = -140.5955 um, F = 50 mm
    s = 0.0055
    omega = OmegaCoefficients(m=-0.1405955, q_prime=(0.035135, 0.040268, 0.036822), type_of_color=(1, 2, 3))
    intr = init_intrinsics(omega, 50.0, 450.0, s, _grid(0.1282216 / s), InternalConfig.GALILEAN, (4080, 3068))
    assert intr.lam == pytest.approx(0.99441, abs=1e-5)


def test_initial_intrinsics_desk_dataset():
    s = 0.0055
    omega = OmegaCoefficients(m=-0.1405955, q_prime=(0.035135, 0.040268, 0.036822), type_of_color=(1, 2, 3))
    intr = init_intrinsics(omega, 50.0, 450.0, s, _grid(0.1282216 / s), InternalConfig.GALILEAN, (4080, 3068))
    assert intr.mla.d * 1e3 == pytest.approx(318.632, rel=2e-4)
    assert intr.mla.D == pytest.approx(56.6576, rel=2e-5)
    assert intr.mla.pitch_mu * 1e3 == pytest.approx(127.505, rel=2e-5)
    for f, ref in zip(intr.mla.focals, (578.154, 504.456, 551.667)):
        assert f * 1e3 == pytest.approx(ref, rel=5e-4)
    assert (intr.main.u0, intr.main.v0) == (4079 / 2, 3067 / 2)
    assert intr.main.distortion.as_tuple() == (0.0,) * 5


def test_unfocused_override():
    omega = OmegaCoefficients(m=-0.023639, q_prime=(0.0099,), type_of_color=(1,))
    intr = init_intrinsics(omega, 9.98445, math.inf, 0.0014, _grid(14.34), InternalConfig.UNFOCUSED, (475, 358))
    assert intr.mla.d == pytest.approx(2 * 0.023639)
    assert intr.mla.D == pytest.approx(9.98445)


def test_hyperfocal_constraint():
    with pytest.raises(PrecalibError, match="hyperfocal"):
        hyperfocal_image_distance(50.0, 150.0)


def test_single_type_classification():
    from plenocal.precalib import RadiusMeasurement

    meas = [RadiusMeasurement(5.0 + 0.01 * i, 2.0, i, 0, 4.0) for i in range(6)]
    cls = classify_lens_types(meas, 1, InternalConfig.UNFOCUSED, "hexagonal", 0)
    assert cls.type_of_color == (1,)
    assert set(cls.labels) == {1}
