import copy

import numpy as np
import pytest
from scipy.linalg import logm

from multisgraph.agent import ate_rmse
from multisgraph.errors import SingularSystem
from multisgraph.geometry import Pose3, points_on_plane, sphere_retract
from multisgraph.optimizer import (
    OptimizerConfig,
    jacobian_odometry,
    jacobian_plane_prior,
    jacobian_pose_plane,
    jacobian_room_plane,
    optimize,
    residual_odometry,
    residual_pose_plane,
    residual_room_plane,
    total_cost,
)
from multisgraph.sgraph import AgentGraph, FactorEdge, PlaneParam, add_keyframe, kf_key, order_room_planes, plane_key

EPS = 1e-6


def random_pose(rng, s=2.0):
    return Pose3.exp(np.r_[rng.uniform(-s, s, 3), rng.uniform(-1.2, 1.2, 3)])


def random_plane(rng):
    n = rng.normal(size=3)
    return PlaneParam(n, rng.uniform(0.5, 5.0)).canonical()


def retract_plane(p, d):
    return PlaneParam(sphere_retract(p.n, d[:2]), p.d + d[2])


def numeric(f, x, retract, dim):
    cols = []
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = EPS
        cols.append((f(retract(x, e)) - f(retract(x, -e))) / (2 * EPS))
    return np.array(cols).T


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-8)


# -- residual examples -----------------------------------------------------


def test_odometry_residual_examples():
    rng = np.random.default_rng(0)
    Ti, Z = random_pose(rng), random_pose(rng)
    assert np.allclose(residual_odometry(Ti, Ti @ Z, Z), 0.0, atol=1e-12)
    r = residual_odometry(Pose3(), Pose3(t=[0.1, 0, 0]), Pose3())
    assert np.allclose(r, [0.1, 0, 0, 0, 0, 0])
    for _ in range(20):
        Ti, Tj, Z = random_pose(rng, 1.0), random_pose(rng, 1.0), random_pose(rng, 1.0)
        M = np.linalg.inv(Z.matrix()) @ np.linalg.inv(Ti.matrix()) @ Tj.matrix()
        L = np.real(logm(M))
        if np.linalg.norm([L[2, 1], L[0, 2], L[1, 0]]) > 3.0:
            continue
        oracle = np.r_[L[:3, 3], L[2, 1], L[0, 2], L[1, 0]]
        assert np.allclose(residual_odometry(Ti, Tj, Z), oracle, atol=1e-10)


def test_pose_plane_residual_examples():
    p = PlaneParam([1, 0, 0], 2.0)
    assert np.allclose(residual_pose_plane(Pose3(), p, p), 0.0)
    obs = PlaneParam([1, 0, 0], 1.0)
    assert np.allclose(residual_pose_plane(Pose3(t=[1.0, 0, 0]), p, obs), 0.0, atol=1e-15)


def fit_plane(points):
    c = points.mean(axis=0)
    n = np.linalg.svd(points - c)[2][-1]
    return PlaneParam(n, n @ c).canonical()


def test_pose_plane_residual_point_transport():
    rng = np.random.default_rng(1)
    for _ in range(50):
        T, plane = random_pose(rng), random_plane(rng)
        world = points_on_plane(plane.n, plane.d, 100, rng)
        local = (world - T.t) @ T.R  # same points in the keyframe frame
        obs = fit_plane(local)
        assert np.allclose(residual_pose_plane(T, plane, obs), 0.0, atol=1e-9)
        moved = PlaneParam(obs.n, obs.d + 0.1)
        assert abs(residual_pose_plane(T, plane, moved)[2]) > 0.05


def rect(center, size, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    u, v = np.array([c, s, 0.0]), np.array([-s, c, 0.0])
    p = np.array([*center, 0.0])
    planes = [
        PlaneParam(u, u @ p + size[0] / 2),
        PlaneParam(-u, -u @ p + size[0] / 2),
        PlaneParam(v, v @ p + size[1] / 2),
        PlaneParam(-v, -v @ p + size[1] / 2),
    ]
    return [q.canonical() for q in planes]


def test_room_plane_residual_examples():
    planes = rect((2.0, 2.5), (4.0, 5.0), 0.0)
    assert np.allclose(residual_room_plane([2.0, 2.5], planes), 0.0)
    assert np.allclose(residual_room_plane([2.3, 2.5], planes), [0.3, 0.0])
    rng = np.random.default_rng(2)
    for _ in range(100):
        c = rng.uniform(-10, 10, 2)
        planes = rect(c, rng.uniform(2, 12, 2), rng.uniform(-np.pi, np.pi))
        order = order_room_planes(planes)
        assert np.allclose(residual_room_plane(c, [planes[i] for i in order]), 0.0, atol=1e-12)


# -- Jacobians against central differences --------------------------------


def pose_retract(T, d):
    return T @ Pose3.exp(d)


def test_odometry_jacobians():
    rng = np.random.default_rng(3)
    for _ in range(100):
        Ti, Z = random_pose(rng), random_pose(rng, 1.0)
        Tj = Ti @ Z @ Pose3.exp(rng.normal(size=6) * 0.3)
        _, Ji, Jj = jacobian_odometry(Ti, Tj, Z)
        Ni = numeric(lambda x: residual_odometry(x, Tj, Z), Ti, pose_retract, 6)
        Nj = numeric(lambda x: residual_odometry(Ti, x, Z), Tj, pose_retract, 6)
        assert rel_err(Ji, Ni) < 1e-5
        assert rel_err(Jj, Nj) < 1e-5


def test_pose_plane_jacobians():
    rng = np.random.default_rng(4)
    for _ in range(100):
        T, plane = random_pose(rng), random_plane(rng)
        truth = plane.transformed(T.inverse())
        obs = PlaneParam(truth.n + rng.normal(size=3) * 0.05, truth.d + rng.normal() * 0.1)
        _, JT, Jp = jacobian_pose_plane(T, plane, obs)
        NT = numeric(lambda x: residual_pose_plane(x, plane, obs), T, pose_retract, 6)
        Np = numeric(lambda x: residual_pose_plane(T, x, obs), plane, retract_plane, 3)
        assert rel_err(JT, NT) < 1e-5
        assert rel_err(Jp, Np) < 1e-5


def test_room_plane_jacobians():
    rng = np.random.default_rng(5)
    for _ in range(100):
        c = rng.uniform(-8, 8, 2)
        planes = rect(c, rng.uniform(2, 10, 2), rng.uniform(-np.pi, np.pi))
        planes = [PlaneParam(p.n + rng.normal(size=3) * 0.03, p.d + rng.normal() * 0.1) for p in planes]
        planes = [planes[i] for i in order_room_planes(planes)]
        center = c + rng.normal(size=2) * 0.2
        _, Jc, Jps = jacobian_room_plane(center, planes)
        Nc = numeric(lambda x: residual_room_plane(x, planes), center, lambda x, d: x + d, 2)
        assert rel_err(Jc, Nc) < 1e-5
        for k in range(4):

            def f(x, k=k):
                ps = list(planes)
                ps[k] = x
                return residual_room_plane(center, ps)

            Nk = numeric(f, planes[k], retract_plane, 3)
            assert rel_err(Jps[k], Nk) < 1e-5


def test_plane_prior_jacobian():
    rng = np.random.default_rng(6)
    for _ in range(20):
        p = random_plane(rng)
        m = PlaneParam(p.n + rng.normal(size=3) * 0.05, p.d + 0.1)
        _, J = jacobian_plane_prior(p, m)
        from multisgraph.optimizer import residual_plane_prior

        N = numeric(lambda x: residual_plane_prior(x, m), p, retract_plane, 3)
        assert rel_err(J, N) < 1e-5


# -- optimization -----------------------------------------------------------


def room_world():
    """Four walls of a 6 x 5 room and a loop of true keyframe poses inside it."""
    planes = rect((0.0, 0.0), (6.0, 5.0), 0.0)
    poses = []
    for k in range(24):
        a = 2 * np.pi * k / 24
        poses.append(Pose3.from_xyz_yaw(1.5 * np.cos(a), 1.2 * np.sin(a), 0.0, a + np.pi / 2))
    return planes, poses


def build_graph(planes, poses, noise_rng=None, sigma=(0.05, 0.02)):
    g = AgentGraph(1)
    ids = [g.add_plane(p) for p in planes]
    for k, T in enumerate(poses):
        if k == 0:
            add_keyframe(g, T, np.ones((1, 3)))
        else:
            delta = poses[k - 1].inverse() @ T
            if noise_rng is not None:
                delta = delta @ Pose3.from_xyz_yaw(*noise_rng.normal(0, sigma[0], 2), 0.0, noise_rng.normal(0, sigma[1]))
            add_keyframe(g, delta, np.ones((1, 3)))
        for pid, p in zip(ids, planes):
            g.factors.append(
                FactorEdge("pose_plane", (kf_key(k), plane_key(pid)), p.transformed(T.inverse()), g.config.plane_information(), robust=True)
            )
    order = order_room_planes(planes)
    g.add_room(np.zeros(2), [ids[i] for i in order])
    return g


def test_zero_residual_graph():
    planes, poses = room_world()
    g = build_graph(planes, poses)
    rep = optimize(g)
    assert rep.initial_cost < 1e-12
    assert rep.iterations <= 1
    assert rep.final_cost <= rep.initial_cost


def perturb_poses(g, rng, sigma=(0.05, 0.02)):
    for k, kf in g.keyframes.items():
        if k:
            kf.pose = kf.pose @ Pose3.from_xyz_yaw(*rng.normal(0, sigma[0], 2), 0.0, rng.normal(0, sigma[1]))


def test_noisy_poses_are_corrected():
    planes, poses = room_world()
    g = build_graph(planes, poses)
    perturb_poses(g, np.random.default_rng(7))
    before = ate_rmse([kf.pose for kf in g.keyframes.values()], poses)
    rep = optimize(g)
    after = ate_rmse([kf.pose for kf in g.keyframes.values()], poses)
    assert rep.final_cost <= 0.1 * rep.initial_cost
    assert after < before
    hist = rep.cost_history
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    for p in g.planes.values():
        assert abs(np.linalg.norm(p.param.n) - 1.0) < 1e-12


def test_noisy_odometry_is_pulled_towards_planes():
    planes, poses = room_world()
    g = build_graph(planes, poses, np.random.default_rng(7))
    before = ate_rmse([kf.pose for kf in g.keyframes.values()], poses)
    rep = optimize(g)
    after = ate_rmse([kf.pose for kf in g.keyframes.values()], poses)
    assert rep.final_cost < rep.initial_cost
    assert after < 0.5 * before


def test_gauge_invariance():
    planes, poses = room_world()
    g = build_graph(planes, poses, np.random.default_rng(8))
    moved = copy.deepcopy(g)
    G = Pose3.from_xyz_yaw(0.7, -0.4, 0.0, 0.3)
    for kf in moved.keyframes.values():
        kf.pose = G @ kf.pose
    for p in moved.planes.values():
        p.param = p.param.transformed(G)
    for r in moved.rooms.values():
        r.center = G.act(np.r_[r.center, 0.0])[:2]
    a = optimize(g)
    b = optimize(moved)
    assert abs(a.final_cost - b.final_cost) < 1e-6
    for k in g.keyframes:
        assert g.keyframes[k].pose.almost_equal(moved.keyframes[k].pose, 1e-5)


def test_missing_prior_is_singular():
    planes, poses = room_world()
    g = build_graph(planes, poses)
    g.factors = [f for f in g.factors if f.kind != "prior"]
    with pytest.raises(SingularSystem):
        optimize(g)


def test_underconstrained_keyframe_is_singular():
    g = AgentGraph(1)
    pid = g.add_plane(PlaneParam([1, 0, 0], 2.0))
    add_keyframe(g, Pose3(), np.ones((1, 3)))
    add_keyframe(g, Pose3(t=[1, 0, 0]), np.ones((1, 3)))
    g.factors = [f for f in g.factors if f.kind != "odometry"]
    g.factors.append(FactorEdge("pose_plane", (kf_key(0), plane_key(pid)), PlaneParam([1, 0, 0], 2.0), g.config.plane_information()))
    g.factors.append(FactorEdge("pose_plane", (kf_key(1), plane_key(pid)), PlaneParam([1, 0, 0], 1.0), g.config.plane_information()))
    with pytest.raises(SingularSystem):
        optimize(g)


def test_lm_never_increases_cost_on_random_graphs():
    rng = np.random.default_rng(9)
    planes, poses = room_world()
    for _ in range(5):
        g = build_graph(planes, poses, rng, sigma=(0.1, 0.05))
        for p in g.planes.values():
            p.param = PlaneParam(p.param.n + rng.normal(size=3) * 0.05, p.param.d + rng.normal() * 0.2)
        start = total_cost(g)
        rep = optimize(g, OptimizerConfig(max_iterations=30))
        assert np.isclose(rep.initial_cost, start)
        hist = rep.cost_history
        assert all(b <= a for a, b in zip(hist, hist[1:]))
