"""Acceptance criteria, each checked at its stated tolerance.

Every check prints one ``PASS`` or ``FAIL`` line (collected again in the
terminal summary).  The synthetic datasets are rendered once per session from
``configs/sim_r12.json`` and ``configs/sim_upc.json``; expect a few minutes.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from plenocal import artifacts, pipeline
from plenocal.blurcalib import RelativeBlurSample, blur_window, calibrate_kappa, relative_blur_radius
from plenocal.cli import main
from plenocal.lm import levenberg_marquardt
from plenocal.model import (
    HEXAGONAL, CameraIntrinsics, DistortionCoeffs, MainLens, MLAGeometry, Pose, mic_jacobian, project_mics,
    project_points, projection_jacobian,
)
from plenocal.precalib import estimate_omega, measure_mi_radius
from plenocal.profile import blur_radius_mla, build_blur_profile, dof_bounds

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(request, capsys):
    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
        request.config.acceptance_verdicts.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def _simulate(config, out):
    assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
    return out


def _pipeline(dataset, out, *extra):
    t0 = time.perf_counter()
    code = main(["pipeline", "--dataset", str(dataset), "--out", str(out), "--corners", "inject", *extra])
    return code, time.perf_counter() - t0


@pytest.fixture(scope="session")
def r12_dataset(tmp_path_factory):
    return _simulate(CONFIGS / "sim_r12.json", tmp_path_factory.mktemp("accept") / "r12")


@pytest.fixture(scope="session")
def r12_run(r12_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "r12_out"
    code, seconds = _pipeline(r12_dataset, out)
    return out, code, seconds


@pytest.fixture(scope="session")
def upc_dataset(tmp_path_factory):
    return _simulate(CONFIGS / "sim_upc.json", tmp_path_factory.mktemp("accept") / "upc")


@pytest.fixture(scope="session")
def upc_run(upc_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "upc_out"
    code, _ = _pipeline(upc_dataset, out, "--corner-noise", "0.3")
    return out, code


def _truth(dataset):
    return CameraIntrinsics.from_dict(artifacts.read_json(dataset / "ground_truth.json")["intrinsics"])


def _rel(a, b):
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------------------
# 1. round trip on the multi-focus camera


def test_criterion_1_round_trip(r12_dataset, r12_run, verdict):
    out, code, seconds = r12_run
    truth = _truth(r12_dataset)
    assert code == 0, "pipeline failed"
    got = pipeline.load_intrinsics(out / "intrinsics.json")
    checks = [
        ("F", _rel(got.main.F, truth.main.F), 0.005),
        *[(f"f{i + 1}", _rel(a, b), 0.01) for i, (a, b) in enumerate(zip(got.mla.focals, truth.mla.focals))],
        ("d", _rel(got.mla.d, truth.mla.d), 0.02),
        ("pitch", _rel(got.mla.pitch_mu, truth.mla.pitch_mu), 0.001),
    ]
    ok = True
    for name, err, tol in checks:
        ok &= verdict("1", err < tol, f"{name} relative error {100 * err:.3f}% (limit {100 * tol:g}%)")
    ok &= verdict("1", seconds < 600, f"pipeline runtime {seconds:.0f} s on this machine (limit 600 s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. unfocused camera


def test_criterion_2_unfocused(upc_dataset, upc_run, verdict):
    out, code = upc_run
    assert code == 0, "pipeline failed"
    _, _, init = pipeline.load_precalib(out / "precalib.json")
    gap = abs(init.mla.d - init.mla.focals[0]) / init.mla.focals[0]
    ok = verdict("2", gap < 0.02, f"pre-calibration |d - f| / f = {100 * gap:.2f}% (limit 2%)")
    tr = pipeline.stage_evaluate(pipeline.DatasetDescriptor.load(upc_dataset), out / "intrinsics.json",
                                 out / "features.json", out / "translation.json", "translation")
    ok &= verdict("2", tr["mean"] <= 0.02, f"epsilon_z = {100 * tr['mean']:.2f}% (limit 2%, reference 1.64%)")
    assert ok


# ---------------------------------------------------------------------------
# 3. hold-out reprojection with noisy corners


def test_criterion_3_holdout_reprojection(r12_dataset, r12_run, tmp_path, verdict):
    desc = pipeline.DatasetDescriptor.load(r12_dataset)
    precalib = r12_run[0] / "precalib.json"
    ok = True
    for seed in range(5):
        feats, intr = tmp_path / f"features_{seed}.json", tmp_path / f"intrinsics_{seed}.json"
        pipeline.stage_detect(desc, precalib, feats, "inject", 0.3, seed)
        pipeline.stage_calibrate(desc, precalib, feats, intr)
        doc = pipeline.stage_evaluate(desc, intr, feats, tmp_path / f"reprojection_{seed}.json", "reprojection")
        good = doc["rmse_uv"] < 1.0 and doc["rmse_rho"] < 0.2
        ok &= verdict("3", good, f"seed {seed}: corner RMSE {doc['rmse_uv']:.3f} px (limit 1), "
                                 f"radius RMSE {doc['rmse_rho']:.3f} px (limit 0.2)")
    assert ok


# ---------------------------------------------------------------------------
# 4. line fit of the micro-image radius model


def test_criterion_4_omega_estimation(verdict):
    s, pitch_pix = 0.0055, 23.3
    m, q = -0.15956, np.array([-0.0272, -0.0216, -0.0255])
    types = np.tile([1, 2, 3], 2)
    N = np.repeat([8.0, 11.31], 3)
    _, _, resid = estimate_omega(m / N + q[types - 1], N, types, 3, pitch_pix, s)
    worst = float(np.abs(resid).max())
    ok = verdict("4", worst < 1e-10, f"two exact apertures: max residual {worst:.2e} (limit 1e-10)")
    rng = np.random.default_rng(0)
    Ns = np.repeat([4.0, 5.66, 8.0, 11.31, 16.0], 600)
    types = np.tile([1, 2, 3], len(Ns) // 3)
    errs = []
    for _ in range(20):
        R = m / Ns + q[types - 1] + rng.normal(0.0, 0.1 * s, len(Ns))
        errs.append(abs(estimate_omega(R, Ns, types, 3, pitch_pix, s)[0].m - m) / abs(m))
    ok &= verdict("4", max(errs) < 0.02, f"5 apertures, 0.1 px noise: worst |m error| {100 * max(errs):.3f}% "
                                          f"over 20 draws (limit 2%)")
    assert ok


# ---------------------------------------------------------------------------
# 5. blur spread factor


def _junction(rng, size=41):
    yy, xx = np.mgrid[0:size, 0:size] - size // 2
    a = rng.uniform(0, math.pi)
    x = np.cos(a) * xx + np.sin(a) * yy + rng.uniform(-2, 2)
    y = -np.sin(a) * xx + np.cos(a) * yy + rng.uniform(-2, 2)
    return 0.1 + 0.8 * ((x * y) > 0)


def test_criterion_5_kappa(verdict):
    kappa, rng = 0.70, np.random.default_rng(5)
    samples = []
    for _ in range(40):
        sharp = blur_window(_junction(rng), rng.uniform(0.4, 0.9))
        rho_i = rng.uniform(0.3, 1.5)
        rho_j = rho_i + rng.uniform(0.3, 1.5)
        blurred = blur_window(sharp, kappa * relative_blur_radius(rho_i, rho_j))
        noise = rng.normal(0, 0.005, (2, 9, 9))
        samples.append(RelativeBlurSample(sharp[16:25, 16:25] + noise[0], blurred[16:25, 16:25] + noise[1],
                                          rho_i, rho_j, 1, 2))
    res = calibrate_kappa(samples)
    ok = verdict("5", abs(res.kappa - kappa) <= 0.05, f"kappa {res.kappa:.4f} from {res.n_samples} samples "
                                                        f"(true 0.70, tolerance 0.05)")
    assert ok


# ---------------------------------------------------------------------------
# 6. depth-of-field profile


def _far_focus_camera():
    main_lens = MainLens(F=50.0471219361, aperture_A=50.0471219361 / 4, u0=2039, v0=1533,
                         distortion=DistortionCoeffs())
    mla = MLAGeometry(D=52.124834510, d=0.336384159, pitch_mu=0.127454102,
                      focals=(0.580489071, 0.50431477775233, 0.5463569893828), grid_w=10, grid_h=10,
                      theta=(0, 0, 0), t=(0, 0), arrangement=HEXAGONAL)
    return CameraIntrinsics(main=main_lens, mla=mla, pixel_size=0.0055, sensor_size=(4080, 3068))


def test_criterion_6_blur_profile(verdict):
    cam = _far_focus_camera()
    s, d, mu = cam.pixel_size, cam.mla.d, cam.mla.pitch_mu
    prof = build_blur_profile(cam, 100, 1e6, n_samples=200000)
    worst = 0.0
    for f in cam.mla.focals:
        for a in dof_bounds(f, d, mu, prof.r0):
            worst = max(worst, abs(abs(float(blur_radius_mla(a, f, d, mu, s))) * s / prof.r0 - 1))
    ok = verdict("6", worst < 1e-6, f"|rho(a)| = r0/s at DoF bounds, worst relative gap {worst:.1e} (limit 1e-6)")
    worst = 0.0
    for i, (_, obj) in enumerate(prof.focal_planes):
        rho = prof.rho[:, i]
        j = int(np.nonzero(np.diff(np.sign(rho)))[0][0])
        x0, x1 = prof.object_distance[j], prof.object_distance[j + 1]
        crossing = x0 - rho[j] * (x1 - x0) / (rho[j + 1] - rho[j])
        worst = max(worst, abs(crossing - obj) / obj)
    ok &= verdict("6", worst < 1e-3, f"profile zero crossing vs focus-plane conjugate, worst {100 * worst:.4f}% "
                                      f"(limit 0.1%)")
    total = prof.total_dof_length
    ok &= verdict("6", abs(total - 120.0) / 120.0 < 0.1, f"total DoF {total:.2f} mm (target 120 mm within 10%)")
    assert ok


# ---------------------------------------------------------------------------
# 7. ablation by parameter freezing


def test_criterion_7_ablation(r12_dataset, r12_run, tmp_path, verdict):
    desc = pipeline.DatasetDescriptor.load(r12_dataset)
    precalib = r12_run[0] / "precalib.json"
    feats = tmp_path / "features.json"
    pipeline.stage_detect(desc, precalib, feats, "inject", 0.3, 0)
    reports = {}
    for name, freeze in (("full", ()), ("dist", ("dist",)), ("tilt+pitch", ("tilt", "pitch"))):
        out = tmp_path / f"intrinsics_{name}.json"
        try:
            pipeline.stage_calibrate(desc, precalib, feats, out, freeze)
        except pipeline.NotConverged:
            pass
        reports[name] = artifacts.read_json(pipeline.report_paths(out)[0])
    full = reports["full"]
    tp = reports["tilt+pitch"]
    inflation = tp["rmse"]["all"] / full["rmse"]["all"] - 1
    cost_ratio = tp["final_cost"] / full["final_cost"] - 1
    ok = verdict("7", tp["status"] != "converged" or inflation >= 0.2,
                 f"freezing tilt and pitch: status {tp['status']}, residual RMSE +{100 * inflation:.1f}% "
                 f"(needs non-convergence or >= 20%; cost +{100 * cost_ratio:.1f}%, "
                 f"MIC RMSE {tp['rmse']['mic']:.3f} vs {full['rmse']['mic']:.3f} px)")
    change = abs(reports["dist"]["rmse"]["uv"] / full["rmse"]["uv"] - 1)
    ok &= verdict("7", change < 0.05, f"freezing distortion: corner RMSE change {100 * change:.2f}% (limit 5%)")
    assert ok


# ---------------------------------------------------------------------------
# 8. numerical hygiene


def test_criterion_8_numerical_hygiene(r12, verdict):
    pose = Pose.from_rotvec([0.05, -0.08, 0.02], [-7.0, -6.0, 350.0])
    k, l = r12.mla.indices()
    sel = slice(300, 306)
    pts = np.array([[1.0, 2.0, 0.0]] * 6)
    _, j_intr, j_pose = projection_jacobian(r12, pose, pts, k[sel], l[sel])
    x0 = r12.to_vector()
    worst = 0.0
    for c in range(len(x0)):
        h = 1e-6 * max(1.0, abs(x0[c]))
        xp, xm = x0.copy(), x0.copy()
        xp[c] += h
        xm[c] -= h
        fd = (project_points(r12.from_vector(xp), pose, pts, k[sel], l[sel])
              - project_points(r12.from_vector(xm), pose, pts, k[sel], l[sel])) / (2 * h)
        scale = max(np.abs(j_intr[..., c]).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - j_intr[..., c]).max() / scale))
    for c in range(6):
        h = 1e-7
        dp = np.zeros(6)
        dp[c] = h
        fd = (project_points(r12, pose.perturbed(dp[:3], dp[3:]), pts, k[sel], l[sel])
              - project_points(r12, pose.perturbed(-dp[:3], -dp[3:]), pts, k[sel], l[sel])) / (2 * h)
        scale = max(np.abs(j_pose[..., c]).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - j_pose[..., c]).max() / scale))
    _, j_mic = mic_jacobian(r12, k[sel], l[sel])
    for c in range(len(x0)):
        h = 1e-6 * max(1.0, abs(x0[c]))
        xp, xm = x0.copy(), x0.copy()
        xp[c] += h
        xm[c] -= h
        fd = (project_mics(r12.from_vector(xp), k[sel], l[sel]) - project_mics(r12.from_vector(xm), k[sel], l[sel])) / (2 * h)
        scale = max(np.abs(j_mic[..., c]).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - j_mic[..., c]).max() / scale))
    ok = verdict("8", worst < 1e-4, f"Jacobian vs finite differences, worst relative gap {worst:.1e} (limit 1e-4)")

    rng = np.random.default_rng(8)
    img = rng.random((15, 15))
    yy, xx = np.mgrid[0:15, 0:15]
    m00 = img.sum()
    cx, cy = (img * xx).sum() / m00, (img * yy).sum() / m00
    cov = np.array([[(img * (xx - cx) ** 2).sum(), (img * (xx - cx) * (yy - cy)).sum()],
                    [(img * (xx - cx) * (yy - cy)).sum(), (img * (yy - cy) ** 2).sum()]]) / m00
    gap = abs(measure_mi_radius(img).sigma_moment - math.sqrt(np.linalg.eigvalsh(cov)[-1]))
    ok &= verdict("8", gap < 1e-12, f"moment radius vs direct moment sums, gap {gap:.1e} (limit 1e-12)")

    sharp = _junction(rng, 61)
    chained = blur_window(blur_window(sharp, 1.1), math.sqrt(2.0**2 - 1.1**2))
    rms = float(np.sqrt(np.mean((chained - blur_window(sharp, 2.0))[15:46, 15:46] ** 2)))
    ok &= verdict("8", rms < 1e-3, f"Gaussian composition RMS {rms:.1e} (limit 1e-3)")

    res = levenberg_marquardt(lambda x: np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]]),
                              lambda x: np.array([[-20 * x[0], 10.0], [-1.0, 0.0]]), np.array([-1.2, 1.0]))
    steps = np.diff(res.cost_history)
    ok &= verdict("8", bool(np.all(steps < 0)), f"LM accepted steps all decrease the cost ({len(steps)} steps)")
    assert ok


# ---------------------------------------------------------------------------
# 9. published real data


@pytest.mark.network
def test_criterion_9_real_datasets(request):
    line = "SKIP  criterion 9: needs the published R12 raw datasets, not available offline"
    request.config.acceptance_verdicts.append(line)
    pytest.skip(line)
