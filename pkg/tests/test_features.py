import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plenocal.features import (
    Cluster, CornerObservation, baseline_multiple, bap_radius, build_bap_features, cluster_observations,
    corners_from_sidecar, detect_corners, devignette, ring_sign_changes, virtual_depth, virtual_depth_from_pair,
)
from plenocal.mia import MIAGrid
from plenocal.model import lens_color
from plenocal.precalib import OmegaCoefficients

S = 0.0055


def _grid(pitch=23.3, w=6, h=6, tau=(30.0, 30.0), angle=0.0):
    g = MIAGrid(pitch_pix=pitch, tau_x=tau[0], tau_y=tau[1], vartheta_z=angle, grid_w=w, grid_h=h)
    k, l = np.meshgrid(np.arange(w), np.arange(h))
    g.indices = np.stack([k.ravel(), l.ravel()], 1)
    g.centers = g.vertex(g.indices[:, 0], g.indices[:, 1])
    return g


def _checker(shape, u, v, ss=8, angle=0.3):
    """Area-sampled checker junction at ``(u, v)``."""
    o = (np.arange(ss) + 0.5) / ss - 0.5
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    c, s = math.cos(angle), math.sin(angle)
    acc = np.zeros(shape)
    for a in o:
        for b in o:
            x, y = xx + a - u, yy + b - v
            acc += ((c * x + s * y) * (-s * x + c * y)) > 0
    return 0.1 + 0.8 * acc / ss**2


def test_devignette_divides_and_masks():
    white = np.array([[1.0, 0.5], [0.01, 0.0]])
    raw = np.array([[0.5, 0.25], [0.01, 0.3]])
    out = devignette(raw, white)
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.0, 0.0]])


def test_devignette_shape_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        devignette(np.ones((3, 3)), np.ones((3, 4)))


def test_ring_counts_junction_types():
    x = _checker((31, 31), 15.2, 14.8)
    assert ring_sign_changes(x, 15.2, 14.8) == 4
    yy, xx = np.mgrid[0:31, 0:31]
    edge = (xx > 15).astype(float)
    assert ring_sign_changes(edge, 15.0, 15.0) == 2
    ell = ((xx > 15) & (yy > 15)).astype(float)
    assert ring_sign_changes(ell, 15.5, 15.5) == 2
    assert ring_sign_changes(np.full((31, 31), 0.4), 15, 15) == 0


def test_ring_min_swing_flattens_weak_pattern():
    x = _checker((31, 31), 15.0, 15.0) * 0.01
    assert ring_sign_changes(x, 15, 15, min_swing=0.1) == 0


def test_detect_single_junction_sub_pixel():
    g = _grid(w=1, h=1, tau=(40.0, 40.0), pitch=40.0)
    img = _checker((80, 80), 41.37, 38.62)
    found = detect_corners(img, g, frame_n=3)
    assert len(found) == 1
    c = found[0]
    assert (c.k, c.l, c.frame_n) == (0, 0, 3)
    assert math.hypot(c.u - 41.37, c.v - 38.62) < 0.1


def test_virtual_depth_pair_values():
    eta, lam, pitch = 1.0, 0.99, 23.3
    assert virtual_depth_from_pair(0.0, eta, lam, pitch) == 1.0
    assert virtual_depth_from_pair(eta * lam * pitch / 2, eta, lam, pitch) == pytest.approx(2.0)
    assert virtual_depth_from_pair(eta * lam * pitch, eta, lam, pitch) == math.inf


def test_baseline_multiple_hexagonal():
    g = _grid()
    assert baseline_multiple(g, 0, 0, 1, 0) == pytest.approx(1.0)
    assert baseline_multiple(g, 1, 1, 1, 0) == pytest.approx(1.0)
    assert baseline_multiple(g, 0, 0, 2, 0) == pytest.approx(2.0)
    assert baseline_multiple(g, 0, 0, 0, 2) == pytest.approx(math.sqrt(3))


def _synthetic_cluster(g, v, lam, point, lenses, frame_n=0, corner_id=-1):
    # observation x_k = lam * c_k * (1 - 1/v) + point / v reproduces the pair model exactly
    members = []
    for k, l in lenses:
        c = g.vertex(k, l)
        x = lam * c * (1 - 1 / v) + np.asarray(point) / v
        members.append(CornerObservation(float(x[0]), float(x[1]), k, l, frame_n, corner_id))
    return Cluster(corner_id, members, frame_n=frame_n)


@given(v=st.floats(1.5, 6.0), angle=st.floats(-0.02, 0.02))
@settings(max_examples=40, deadline=None)
def test_virtual_depth_recovered(v, angle):
    g = _grid(angle=angle)
    lam = 0.9944
    cl = _synthetic_cluster(g, v, lam, (80.0, 70.0), [(1, 1), (2, 1), (1, 2), (2, 2), (3, 1)])
    assert virtual_depth(cl, g, lam) == pytest.approx(v, rel=1e-9)


def test_virtual_depth_needs_pairs():
    with pytest.raises(ValueError):
        virtual_depth(Cluster(0, [CornerObservation(1, 1, 0, 0)]), _grid(), 1.0)


def test_bap_radius_far_dataset_example():
    omega = OmegaCoefficients(m=-0.15956, q_prime=(0.03649, 0.04207, 0.03881), type_of_color=(1, 2, 3))
    g = _grid(pitch=0.12747 / S)
    rho = bap_radius(3.0, 1, omega, 1.0, g, S)
    assert rho * S * 1e3 == pytest.approx(0.12747 / 6 * 1e3 + 36.49 - 127.47 / 2, abs=1e-9)
    assert rho == pytest.approx(-1.09, abs=0.01)


def test_bap_radius_at_unit_depth_is_q_prime():
    omega = OmegaCoefficients(m=-0.15, q_prime=(0.03, 0.04), type_of_color=(1, 2))
    assert bap_radius(1.0, 2, omega, 0.99, _grid(), S) == pytest.approx(0.04 / S)


def test_build_bap_features_types_and_depth():
    g = _grid()
    lam = 0.99
    omega = OmegaCoefficients(m=-0.15, q_prime=(0.036, 0.042, 0.039), type_of_color=(2, 3, 1))
    cl = _synthetic_cluster(g, 2.5, lam, (80.0, 70.0), [(1, 1), (2, 1), (1, 2)], frame_n=4, corner_id=7)
    feats = build_bap_features([cl], omega, g, lam, S)
    assert len(feats) == 3
    assert cl.virtual_depth == pytest.approx(2.5)
    for f, m in zip(feats, cl.members):
        t = omega.type_of_color[int(lens_color(m.k, m.l, 3))]
        assert f.type_i == t
        assert f.rho == pytest.approx(bap_radius(2.5, t, omega, lam, g, S))
        assert (f.frame_n, f.corner_id) == (4, 7)


def test_clustering_separates_corners():
    g = _grid()
    lam = 0.99
    a = _synthetic_cluster(g, 2.5, lam, (60.0, 60.0), [(1, 1), (2, 1), (1, 2)], corner_id=0)
    b = _synthetic_cluster(g, 2.5, lam, (140.0, 120.0), [(4, 4), (5, 4), (4, 5)], corner_id=1)
    obs = a.members + b.members
    clusters = cluster_observations(obs, g)
    groups = sorted(sorted((m.k, m.l) for m in c.members) for c in clusters)
    assert groups == [sorted((m.k, m.l) for m in a.members), sorted((m.k, m.l) for m in b.members)]


def test_clustering_by_ids_and_frames():
    obs = [CornerObservation(0, 0, 0, 0, 0, 5), CornerObservation(1, 0, 1, 0, 0, 5),
           CornerObservation(0, 0, 0, 0, 1, 5), CornerObservation(9, 9, 3, 3, 1, 6)]
    clusters = cluster_observations(obs, _grid(), use_ids=True)
    assert [(c.frame_n, c.corner_id, len(c.members)) for c in clusters] == [(0, 5, 2)]


def test_cluster_with_repeated_lens_is_dropped():
    g = _grid()
    obs = [CornerObservation(50.0, 50.0, 1, 1), CornerObservation(51.0, 50.0, 1, 1),
           CornerObservation(52.0, 50.0, 2, 1)]
    assert cluster_observations(obs, g) == []


def test_sidecar_passthrough():
    g = _grid()
    uv = g.vertex(np.array([1, 3]), np.array([2, 4])) + 1.5
    sidecar = {"corners": [[11, 1, 2, 1, uv[0, 0], uv[0, 1], -1.0, 1], [12, 3, 4, 2, uv[1, 0], uv[1, 1], -2.0, 1]]}
    out = corners_from_sidecar(sidecar, g, frame_n=2)
    assert [(c.corner_id, c.k, c.l, c.frame_n) for c in out] == [(11, 1, 2, 2), (12, 3, 4, 2)]
    np.testing.assert_allclose([[c.u, c.v] for c in out], uv)
    noisy = corners_from_sidecar(sidecar, g, noise=0.3, rng=np.random.default_rng(0))
    assert not np.allclose([[c.u, c.v] for c in noisy], uv)
    assert corners_from_sidecar({"corners": []}, g) == []
