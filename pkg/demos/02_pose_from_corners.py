"""How much does a PnP fix improve with more visible modules?

Module corners from the plant model are projected through a 1920x1080 camera
12 m away, Gaussian pixel noise is added, and EPnP recovers the camera
position. The median error is reported per noise level and per number of
visible modules. More rows in view means more reference points, and the
error drops accordingly.
"""
import numpy as np

from pvnav.camera import CameraIntrinsics, Pose, project_points
from pvnav.pose import CorrespondenceSet, solve_epnp
from pvnav.synthetic import LayoutSpec, generate_layout, inspection_trajectory

K = CameraIntrinsics(1164.0, 1164.0, 960.0, 540.0, 1920, 1080)
rng = np.random.default_rng(0)
sigmas = (0.25, 0.5, 1.0)

print(f"{'modules':>8} {'corners':>8} " + " ".join(f"{f'sigma {s}':>11}" for s in sigmas))
for rows, cols in ((2, 1), (2, 2), (2, 5), (2, 10), (5, 10)):
    model = generate_layout(LayoutSpec(benches=1, rows=rows, columns=cols))
    W = np.vstack([m.corners() for m in model.modules])
    traj = inspection_trajectory(model, 12.0)
    errs = {s: [] for s in sigmas}
    for _ in range(300):
        center = traj.position_at(traj.length / 2) + rng.normal(0, 0.5, 3)
        uv, _ = project_points(W, Pose.from_center(traj.rotation, center), K)
        unit = rng.normal(0, 1, uv.shape)
        for s in sigmas:
            est = solve_epnp(CorrespondenceSet(uv + s * unit, W), K)
            errs[s].append(np.linalg.norm(est.position - center))
    print(f"{rows}x{cols:<6} {len(W):>8} " + " ".join(f"{np.median(errs[s]):10.3f}m" for s in sigmas))

# Without noise the solver is exact up to floating point.
model = generate_layout(LayoutSpec(benches=1, rows=2, columns=2))
W = np.vstack([m.corners() for m in model.modules])
traj = inspection_trajectory(model, 20.0)
pose = Pose.from_center(traj.rotation, traj.position_at(0.0))
est = solve_epnp(CorrespondenceSet(project_points(W, pose, K)[0], W), K)
print(f"\nnoise-free: position error {np.linalg.norm(est.position - pose.center):.1e} m, "
      f"reprojection error {est.reprojection_error:.1e} px")
