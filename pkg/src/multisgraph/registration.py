"""Voxelized GICP-style fine alignment of room keyframes and transform validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoOverlap
from .geometry import Pose3, quat_to_matrix, skew_batch

# offsets of a voxel and its six face neighbours
_FACE = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


@dataclass
class RegistrationConfig:
    voxel: float = 0.5
    eigen_floor: float = 1e-3
    max_iterations: int = 50
    tolerance: float = 1e-6
    min_overlap: float = 0.1
    cap: float = 0.25  # m^2, residual ceiling (and cost of unmatched points)
    inlier_residual: float = 0.01  # m^2
    damping: float = 1e-6
    max_halvings: int = 12
    fitness_threshold: float = 0.01  # d_t, m^2
    inlier_gate: float = 0.6
    refine_iterations: int = 10  # point-level polish after the voxel stage, 0 disables
    refine_radius: float = 0.25


@dataclass
class VoxelGaussianGrid:
    voxel: float
    keys: np.ndarray  # sorted packed voxel keys
    means: np.ndarray  # (M, 3)
    covariances: np.ndarray  # (M, 3, 3), regularized
    counts: np.ndarray
    weights: np.ndarray  # (M, 3, 3): smallest eigenvalue times inverse covariance
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    point_voxel: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    _tree: Optional[cKDTree] = field(default=None, repr=False)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Index of each packed key in the grid, -1 when absent."""
        if len(self.keys) == 0:
            return np.full(keys.shape, -1, dtype=int)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, pos, -1)


@dataclass
class AlignmentResult:
    transform: Pose3  # source room frame -> target room frame
    fitness: float
    inlier_fraction: float
    iterations: int
    converged: bool


@dataclass
class InterAgentTransform:
    local_agent: int
    remote_agent: int
    transform: Pose3  # remote map frame -> local map frame
    fitness: float
    local_room: int
    remote_room: int
    inlier_fraction: float = 1.0

    def inverse(self) -> InterAgentTransform:
        return InterAgentTransform(
            self.remote_agent,
            self.local_agent,
            self.transform.inverse(),
            self.fitness,
            self.remote_room,
            self.local_room,
            self.inlier_fraction,
        )


def _pack(idx: np.ndarray) -> np.ndarray:
    idx = idx.astype(np.int64) + _KEY_OFFSET
    return (idx[..., 0] << (2 * _KEY_BITS)) | (idx[..., 1] << _KEY_BITS) | idx[..., 2]


def voxel_index(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(np.asarray(points) / voxel).astype(np.int64)


def build_voxel_gaussians(cloud: np.ndarray, voxel: float = 0.5, eigen_floor: float = 1e-3) -> VoxelGaussianGrid:
    """Per-voxel Gaussians with eigenvalues floored at ``eigen_floor`` times the largest."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        e = np.zeros((0, 3, 3))
        return VoxelGaussianGrid(voxel, np.zeros(0, np.int64), np.zeros((0, 3)), e, np.zeros(0, int), e)
    keys = _pack(voxel_index(pts, voxel))
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]
    centered = pts - means[inverse]
    outer = np.zeros((m, 3, 3))
    np.add.at(outer, inverse, centered[:, :, None] * centered[:, None, :])
    covs = outer / np.maximum(counts - 1, 1)[:, None, None]

    vals, vecs = np.linalg.eigh(covs)
    top = vals[:, -1:]
    vals = np.maximum(vals, eigen_floor * top)
    sparse = counts < 4
    vals[sparse] = eigen_floor
    vecs[sparse] = np.eye(3)
    # guard voxels whose points coincide
    vals = np.maximum(vals, 1e-12)
    covs = np.einsum("mij,mj,mkj->mik", vecs, vals, vecs)
    inv = np.einsum("mij,mj,mkj->mik", vecs, 1.0 / vals, vecs)
    weights = vals[:, :1, None] * inv
    return VoxelGaussianGrid(voxel, uniq, means, covs, counts, weights, pts.copy(), inverse)


def _correspond(grid: VoxelGaussianGrid, pts: np.ndarray):
    """Own voxel when occupied, otherwise the best face neighbour by weighted residual.

    Preferring the own voxel makes the true pose an exact stationary point of
    the objective when source and target come from the same cloud.
    """
    base = voxel_index(pts, grid.voxel)
    best_j = grid.lookup(_pack(base))
    best_w = np.full(len(pts), np.inf)
    own = best_j >= 0
    e = pts[own] - grid.means[best_j[own]]
    best_w[own] = np.einsum("ni,nij,nj->n", e, grid.weights[best_j[own]], e)
    rest = np.flatnonzero(~own)
    for off in _FACE[1:]:
        if len(rest) == 0:
            break
        j = grid.lookup(_pack(base[rest] + off))
        ok = j >= 0
        if not ok.any():
            continue
        sub = rest[ok]
        e = pts[sub] - grid.means[j[ok]]
        w = np.einsum("ni,nij,nj->n", e, grid.weights[j[ok]], e)
        better = w < best_w[sub]
        best_w[sub[better]] = w[better]
        best_j[sub[better]] = j[ok][better]
    return best_j, best_w


def _evaluate(grid: VoxelGaussianGrid, source: np.ndarray, T: Pose3, cap: float):
    pts = T.act(source)
    j, w = _correspond(grid, pts)
    capped = np.where(j >= 0, np.minimum(w, cap), cap)
    return float(capped.mean()), pts, j, w


def alignment_cost(source: np.ndarray, target: VoxelGaussianGrid, T: Pose3, config: RegistrationConfig | None = None) -> float:
    config = config or RegistrationConfig()
    return _evaluate(target, np.asarray(source, dtype=float), T, config.cap)[0]


def _gn_delta(p: np.ndarray, W: np.ndarray, e: np.ndarray, damping: float) -> np.ndarray:
    """Damped Gauss-Newton step for residuals ``e`` of points ``p`` (left perturbation)."""
    J = np.zeros((len(p), 3, 6))
    J[:, :, :3] = np.eye(3)
    J[:, :, 3:] = -skew_batch(p)
    JtW = np.einsum("nki,nkl->nil", J, W)
    H = np.einsum("nil,nlj->ij", JtW, J)
    g = np.einsum("nil,nl->i", JtW, e)
    H += damping * (np.trace(H) / 6.0 + 1.0) * np.eye(6)
    return -np.linalg.solve(H, g)


def _descend(evaluate, T: Pose3, iterations: int, config: RegistrationConfig):
    """Step-halving Gauss-Newton on ``evaluate(T) -> (cost, p, W, e)``.

    Returns the final pose, its cost, the iteration count and whether the
    update norm fell below tolerance (or no step could lower the cost).
    """
    cost, p, W, e = evaluate(T)
    it = 0
    for it in range(1, iterations + 1):
        if len(p) < 6:
            return T, cost, it, False
        delta = _gn_delta(p, W, e, config.damping)
        step = 1.0
        for _ in range(config.max_halvings):
            cand = Pose3.exp(step * delta) @ T
            c = evaluate(cand)
            if c[0] <= cost:
                break
            step *= 0.5
        else:
            return T, cost, it, True
        T, (cost, p, W, e) = cand, c
        if np.linalg.norm(step * delta) < config.tolerance:
            return T, cost, it, True
    return T, cost, it, False


def vgicp_align(
    source: np.ndarray,
    target: VoxelGaussianGrid,
    init: Pose3 | None = None,
    config: RegistrationConfig | None = None,
) -> AlignmentResult:
    """Gauss-Newton on SE(3) (left perturbation) with step halving.

    The voxel stage matches points to voxel Gaussians. A short point-level
    stage then matches each point to its nearest target point, weighted by
    that point's voxel Gaussian, which removes the few-millimetre bias of
    voxel boundaries. It is kept only if it does not raise the voxel cost
    above its value at ``init``.
    """
    config = config or RegistrationConfig()
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    if len(src) == 0 or len(target) == 0:
        raise NoOverlap("empty source or target")
    T0 = init if init is not None else Pose3()
    own = target.lookup(_pack(voxel_index(T0.act(src), target.voxel)))
    if np.mean(own >= 0) < config.min_overlap:
        raise NoOverlap(f"only {np.mean(own >= 0):.1%} of source points overlap the target")

    def voxel_stage(T):
        cost, pts, j, w = _evaluate(target, src, T, config.cap)
        use = (j >= 0) & (w < config.cap)
        return cost, pts[use], target.weights[j[use]], pts[use] - target.means[j[use]]

    def point_stage(T):
        pts = T.act(src)
        d, i = target.tree.query(pts, distance_upper_bound=config.refine_radius)
        ok = np.isfinite(d)
        e = pts[ok] - target.points[i[ok]]
        W = target.weights[target.point_voxel[i[ok]]]
        w = np.einsum("ni,nij,nj->n", e, W, e)
        cost = (np.minimum(w, config.cap).sum() + config.cap * (~ok).sum()) / len(src)
        use = w < config.cap
        return cost, pts[ok][use], W[use], e[use]

    init_cost = voxel_stage(T0)[0]
    T, _, it, converged = _descend(voxel_stage, T0, config.max_iterations, config)
    if config.refine_iterations and len(target.points):
        T_ref, _, _, _ = _descend(point_stage, T, config.refine_iterations, config)
        if voxel_stage(T_ref)[0] <= init_cost:
            T = T_ref

    cost, _, j, w = _evaluate(target, src, T, config.cap)
    inliers = (j >= 0) & (w < config.inlier_residual)
    return AlignmentResult(T, cost, float(inliers.mean()), it, converged)


def seed_initial_guess(shift: int, n_sectors: int = 60) -> Pose3:
    """Room-to-room guess from the descriptor shift: pure yaw, no translation."""
    return Pose3.from_xyz_yaw(0.0, 0.0, 0.0, shift * 2.0 * np.pi / n_sectors)


def validate_and_lift(
    result: AlignmentResult,
    local_room_pose: Pose3,
    remote_room_pose: Pose3,
    config: RegistrationConfig | None = None,
    *,
    local_agent: int = 0,
    remote_agent: int = 1,
    local_room: int = 0,
    remote_room: int = 0,
) -> Optional[InterAgentTransform]:
    """Gate an alignment and lift it to a map-to-map transform."""
    config = config or RegistrationConfig()
    if not (result.converged and result.fitness < config.fitness_threshold and result.inlier_fraction > config.inlier_gate):
        return None
    T = local_room_pose @ result.transform @ remote_room_pose.inverse()
    return InterAgentTransform(
        local_agent, remote_agent, T, result.fitness, local_room, remote_room, result.inlier_fraction
    )


def average_transforms(poses: Sequence[Pose3], weights: Sequence[float]) -> Pose3:
    """Weighted mean: linear for translation, eigenvector method for rotation.

    Symmetric in its inputs, so the result does not depend on arrival order.
    """
    w = np.asarray(weights, dtype=float)
    if len(poses) == 0 or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("need at least one pose with positive total weight")
    w = w / w.sum()
    t = np.einsum("i,ij->j", w, np.array([p.t for p in poses]))
    M = np.zeros((4, 4))
    for wi, p in zip(w, poses):
        M += wi * np.outer(p.q, p.q)
    _, vecs = np.linalg.eigh(M)
    q = vecs[:, -1]
    R = quat_to_matrix(q)
    return Pose3.from_rt(R, t)


def fitness_weight(fitness: float) -> float:
    return 1.0 / max(fitness, 1e-6)


__all__ = [
    "AlignmentResult",
    "InterAgentTransform",
    "RegistrationConfig",
    "VoxelGaussianGrid",
    "alignment_cost",
    "average_transforms",
    "build_voxel_gaussians",
    "fitness_weight",
    "seed_initial_guess",
    "validate_and_lift",
    "vgicp_align",
]
