import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plenocal.model import HEXAGONAL, CameraIntrinsics, DistortionCoeffs, MainLens, MLAGeometry
from plenocal.profile import (
    back_project_to_object, blur_radius_mla, build_blur_profile, dof_bounds, dof_length, focus_plane,
    min_coc_radius, object_to_mla,
)


def _camera(F, D, d, mu, focals):
    main = MainLens(F=F, aperture_A=F / 4, u0=2039, v0=1533, distortion=DistortionCoeffs())
    mla = MLAGeometry(D=D, d=d, pitch_mu=mu, focals=focals, grid_w=10, grid_h=10, theta=(0, 0, 0), t=(0, 0),
                      arrangement=HEXAGONAL)
    return CameraIntrinsics(main=main, mla=mla, pixel_size=0.0055, sensor_size=(4080, 3068))


@pytest.fixture(scope="module")
def desk_calibrated():
    return _camera(49.714480, 56.700741, 0.324774361, 0.12745529,
                   (0.5781820898851387, 0.50541641184977304, 0.552079041044199))


@pytest.fixture(scope="module")
def far_calibrated():
    return _camera(50.0471219361, 52.124834510, 0.336384159, 0.127454102,
                   (0.580489071, 0.50431477775233, 0.5463569893828))


def test_min_coc_radius_pixel_bound():
    # Airy radius 1.22 * 750 nm * d / A stays below half a 5.5 um pixel
    r = min_coc_radius(0.0055, 750e-6, 0.3248, 0.12745)
    assert 1.22 * 750e-6 * 0.3248 / 0.12745 == pytest.approx(0.00233, abs=1e-5)
    assert r == 0.00275


def test_min_coc_radius_diffraction_bound():
    assert min_coc_radius(0.0014, 750e-6, 0.04, 0.01) == pytest.approx(1.22 * 750e-6 * 4)


def test_focus_plane_special_cases():
    assert focus_plane(0.04, 0.04) == math.inf
    assert focus_plane(0.1, 0.2) == pytest.approx(0.2)
    assert focus_plane(0.58, 0.3248) < 0


def test_galilean_focus_plane_example():
    # oracle: exact rational arithmetic
    f, d = Fraction("0.580"), Fraction("0.326")
    ref = d * f / (d - f)
    assert focus_plane(0.580, 0.326) == pytest.approx(float(ref), rel=1e-12)
    assert float(ref) == pytest.approx(-0.744, abs=1e-3)


def test_blur_radius_rational_oracle():
    f, d, mu, s, a = (Fraction("0.580"), Fraction("0.326"), Fraction("0.1275"), Fraction("0.0055"), Fraction(-1))
    ref = mu * d / (2 * s) * (1 / f - 1 / a - 1 / d)
    assert float(blur_radius_mla(-1.0, 0.580, 0.326, 0.1275, 0.0055)) == pytest.approx(float(ref), rel=1e-12)


@given(f=st.floats(0.3, 0.8), d=st.floats(0.2, 0.45), r0=st.floats(0.001, 0.004))
@settings(max_examples=60, deadline=None)
def test_blur_equals_r0_at_dof_bounds(f, d, r0):
    mu, s = 0.1275, 0.0055
    if abs(f - d) < 0.02:
        return
    a_far, a_near = dof_bounds(f, d, mu, r0)
    a0 = focus_plane(f, d)
    for a in (a_far, a_near):
        if math.isfinite(a):
            assert abs(float(blur_radius_mla(a, f, d, mu, s))) == pytest.approx(r0 / s, rel=1e-6)
    if math.isfinite(a_far) and math.isfinite(a_near) and a_far * a_near > 0:
        assert abs(a_far - a_near) == pytest.approx(dof_length(f, d, mu, r0), rel=1e-9)
    assert float(blur_radius_mla(a0, f, d, mu, s)) == pytest.approx(0.0, abs=1e-9)


def test_object_mla_round_trip():
    obj = np.array([300.0, 1000.0, 5e4])
    a = object_to_mla(obj, 56.7, 49.7)
    back = [back_project_to_object(x, 56.7, 49.7) for x in a]
    np.testing.assert_allclose(back, obj, rtol=1e-10)


def test_desk_total_dof(desk_calibrated):
    prof = build_blur_profile(desk_calibrated, 100, 1e6)
    assert prof.total_dof_length == pytest.approx(14.44, rel=0.01)


def test_far_total_dof(far_calibrated):
    prof = build_blur_profile(far_calibrated, 100, 1e6)
    assert prof.total_dof_length == pytest.approx(120.0, rel=0.1)


def test_far_virtual_depth_span(far_calibrated):
    prof = build_blur_profile(far_calibrated, 100, 1e6)
    lo, hi = (x / far_calibrated.mla.d for x in prof.total_dof_mla)
    assert lo == pytest.approx(2.15, abs=0.02)
    assert hi == pytest.approx(3.45, abs=0.02)


def test_far_field_blur_magnitude(far_calibrated):
    prof = build_blur_profile(far_calibrated, 100, 1e7)
    assert np.abs(prof.rho[-1]).mean() == pytest.approx(6.0, abs=0.5)
    # the radius has levelled off far away
    np.testing.assert_allclose(prof.rho[-1], prof.rho[-50], atol=0.02)


def test_zero_crossing_matches_conjugate(desk_calibrated):
    prof = build_blur_profile(desk_calibrated, 200, 2000, n_samples=20000)
    for i, (a0, obj) in enumerate(prof.focal_planes):
        rho = prof.rho[:, i]
        j = np.nonzero(np.diff(np.sign(rho)))[0][0]
        x0, x1 = prof.object_distance[j], prof.object_distance[j + 1]
        crossing = x0 - rho[j] * (x1 - x0) / (rho[j + 1] - rho[j])
        assert crossing == pytest.approx(obj, rel=1e-3)


def test_third_type_dof_covered_by_others(desk_calibrated, far_calibrated):
    for cam in (desk_calibrated, far_calibrated):
        b = build_blur_profile(cam, 100, 1e6).dof_bounds
        lo = lambda t: min(b[t]["near_object"], b[t]["far_object"])
        hi = lambda t: max(b[t]["near_object"], b[t]["far_object"])
        assert min(lo(0), lo(1)) <= lo(2) and hi(2) <= max(hi(0), hi(1))


def test_invalid_range(desk_calibrated):
    with pytest.raises(ValueError):
        build_blur_profile(desk_calibrated, 500, 100)


def test_outputs_serialise(desk_calibrated):
    prof = build_blur_profile(desk_calibrated, 200, 2000, n_samples=50)
    doc = prof.to_dict()
    assert doc["schema"] == "plenocal.blur_profile"
    csv = prof.to_csv().splitlines()
    assert csv[0].startswith("object_distance_mm,virtual_depth,rho_type1_px")
    assert len(csv) == 51
    assert prof.to_svg(0.0055).lstrip().startswith("<?xml")
