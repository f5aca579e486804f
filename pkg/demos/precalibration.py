"""From white images to an initial camera model.

Renders white images of a small multi-focus camera at several apertures,
measures every micro-image radius, fits the radius-versus-aperture line per
lens type and turns it into a first guess of the intrinsics.  Compare the
printed guess with the true camera at the end.

    python demos/precalibration.py
"""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from plenocal.precalib import run_precalibration
from plenocal.presets import focus_distance, r12_like
from plenocal.simulator import RenderSettings, SceneSpec, render

camera = r12_like(16, 14)
apertures = [4.0, 5.66, 8.0, 11.31, 16.0]

# The first render compiles the ray tracer; later ones are quick.
whites = []
for N in apertures:
    image, _ = render(camera, SceneSpec(f_number=N), RenderSettings(spp=32))
    whites.append((N, image))
    print(f"rendered white at f/{N:<5}  mean level {image.mean():.3f}")

result = run_precalibration(
    whites, n_types=3, config="galilean-internal", F=camera.main.F, h=focus_distance(camera),
    s=camera.pixel_size,
)

grid = result.grid
print(f"\nlattice: {len(grid.indices)} micro-images, pitch {grid.pitch_pix:.3f} px")
print(f"radius slope m = {1e3 * result.omega.m:.2f} um per unit 1/N")
print("offsets q' per type (um):", ", ".join(f"{1e3 * q:.2f}" for q in result.omega.q_prime))

guess, truth = result.intrinsics, camera
rows = [
    ("main-lens focal F (mm)", guess.main.F, truth.main.F),
    ("main lens to MLA D (mm)", guess.mla.D, truth.mla.D),
    ("MLA to sensor d (um)", 1e3 * guess.mla.d, 1e3 * truth.mla.d),
    ("pitch (um)", 1e3 * guess.mla.pitch_mu, 1e3 * truth.mla.pitch_mu),
] + [
    (f"focal of type {i + 1} (um)", 1e3 * g, 1e3 * t)
    for i, (g, t) in enumerate(zip(guess.mla.focals, truth.mla.focals))
]
print(f"\n{'':26s}{'initial':>12s}{'true':>12s}")
for name, g, t in rows:
    print(f"{name:26s}{g:12.3f}{t:12.3f}")
print("\nThe bundle adjustment refines these; see demos/end_to_end.py.")
