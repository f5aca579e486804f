"""How sharp is each lens type at a given distance?

Builds the blur-versus-distance profile of a calibrated multi-focus camera
focused far away, prints where each lens type is in focus and how far its
depth of field reaches, and writes the profile plot to ``blur_profile.svg``.

    python demos/blur_profile.py
"""

from pathlib import Path

from plenocal.model import HEXAGONAL, CameraIntrinsics, DistortionCoeffs, MainLens, MLAGeometry
from plenocal.profile import build_blur_profile

F = 50.0471219361
camera = CameraIntrinsics(
    main=MainLens(F=F, aperture_A=F / 4, u0=2039, v0=1533, distortion=DistortionCoeffs()),
    mla=MLAGeometry(D=52.124834510, d=0.336384159, pitch_mu=0.127454102,
                    focals=(0.580489071, 0.50431477775233, 0.5463569893828),
                    grid_w=10, grid_h=10, theta=(0, 0, 0), t=(0, 0), arrangement=HEXAGONAL),
    pixel_size=0.0055, sensor_size=(4080, 3068),
)

profile = build_blur_profile(camera, near=100.0, far=1e6)
print(f"smallest resolvable blur radius r0 = {1e3 * profile.r0:.2f} um")
for i, ((_, focused_at), bounds) in enumerate(zip(profile.focal_planes, profile.dof_bounds)):
    near, far = bounds["near_object"], bounds["far_object"]
    print(f"type {i + 1}: sharpest at {focused_at:8.1f} mm, depth of field {near:8.1f} .. {far:8.1f} mm")
print(f"all types together cover {profile.total_dof_length:.1f} mm of depth")

out = Path("blur_profile.svg")
out.write_text(profile.to_svg(camera.pixel_size))
print(f"plot written to {out.resolve()}")
