"""Simulate a dataset, calibrate it, and score the result.

Drives the command-line tool the way a user would: render the desk-scale
dataset from ``configs/sim_r12.json``, run every pipeline stage, evaluate on
the hold-out frames and on the motion sequence, and compare the calibrated
camera with the ground truth the simulator saved.  Rendering takes a minute
or two on one core.

    python demos/end_to_end.py [work_dir]
"""

import os
import sys
import tempfile
from pathlib import Path

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from plenocal import artifacts, pipeline
from plenocal.cli import main
from plenocal.model import CameraIntrinsics

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="plenocal-demo-"))
config = Path(__file__).resolve().parents[1] / "configs" / "sim_r12.json"
dataset, out = root / "dataset", root / "out"


def run(*argv):
    print("\n$ plenocal", " ".join(argv))
    code = main(list(argv))
    if code != 0:
        sys.exit(code)


run("simulate", "--config", str(config), "--out", str(dataset))
# Sidecar corners with 0.3 px noise; swap in "--corners detect" to find them in the images.
run("pipeline", "--dataset", str(dataset), "--out", str(out), "--corners", "inject", "--corner-noise", "0.3")
run("evaluate", "--dataset", str(dataset), "--intrinsics", str(out / "intrinsics.json"), "--mode", "reprojection")
run("evaluate", "--dataset", str(dataset), "--intrinsics", str(out / "intrinsics.json"), "--mode", "translation")

truth = CameraIntrinsics.from_dict(artifacts.read_json(dataset / "ground_truth.json")["intrinsics"])
got = pipeline.load_intrinsics(out / "intrinsics.json")
print("\ncalibrated vs true")
for name, a, b in [("F", got.main.F, truth.main.F), ("D", got.mla.D, truth.mla.D), ("d", got.mla.d, truth.mla.d),
                   ("pitch", got.mla.pitch_mu, truth.mla.pitch_mu)] + [
        (f"f{i + 1}", x, y) for i, (x, y) in enumerate(zip(got.mla.focals, truth.mla.focals))]:
    print(f"  {name:6s}{a:12.6f}{b:12.6f}  {100 * (a / b - 1):+7.3f}%")
print(f"\nartifacts in {out}")
