"""Descriptor distance between each benchmark room and copies rotated by arbitrary yaws."""

import numpy as np

from multisgraph.descriptor import describe, sc_distance, voxel_downsample
from multisgraph.geometry import Pose3
from multisgraph.world import generate_floorplan, simulate_scan

plan = generate_floorplan(6, seed=7, clutter=3)
rng = np.random.default_rng(0)
for idx, room in enumerate(plan.rooms):
    c = np.array([*room.center, 0.0])
    scans = []
    for i, (dx, dy) in enumerate(((1, 1), (-1, 1), (-1, -1), (1, -1), (0, 0))):
        pose = Pose3.from_xyz_yaw(c[0] + dx, c[1] + dy, 0.0, 0.4 * i)
        scans.append((Pose3(t=c).inverse() @ pose).act(simulate_scan(plan, pose, range_sigma=0.01, seed=i)))
    cloud = voxel_downsample(np.vstack(scans), 0.1)
    a = describe(cloud, idx, 1).matrix
    d = np.array([sc_distance(a, describe(Pose3.from_xyz_yaw(0, 0, 0, y).act(cloud), idx, 1).matrix)[0] for y in rng.uniform(-np.pi, np.pi, 100)])
    print(f"room {idx}: mean {d.mean():.3f} p90 {np.percentile(d, 90):.3f} max {d.max():.3f}")
