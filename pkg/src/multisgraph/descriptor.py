"""Room keyframes and room-centred scan-context descriptors."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import DimensionMismatch, EmptyRoom
from .sgraph import AgentGraph

# guards floor() against values a hair below an integer after a rotation
_BIN_EPS = 1e-9


@dataclass
class DescriptorConfig:
    n_rings: int = 20
    n_sectors: int = 60
    max_radius: float = 8.0
    voxel: float = 0.1
    threshold: float = 0.25


@dataclass
class RoomKeyframe:
    room_id: int
    cloud: np.ndarray  # room frame: origin at the centre, map axes
    n_keyframes: int


@dataclass
class RoomDescriptor:
    matrix: np.ndarray  # (n_rings, n_sectors), max height per bin
    room_id: int
    agent_id: int
    max_radius: float = 8.0

    @property
    def n_rings(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_sectors(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class MatchCandidate:
    local_room: int
    remote_agent: int
    remote_room: int
    distance: float
    shift: int  # sectors rotating the remote descriptor onto the local one


def assemble_room_keyframe(graph: AgentGraph, room_id: int) -> RoomKeyframe:
    """Union of the room's keyframe scans expressed in the room frame."""
    room = graph.rooms[room_id]
    if not room.keyframe_ids:
        raise EmptyRoom(f"room {room_id} has no keyframes")
    to_room = room.pose().inverse()
    clouds = []
    for kid in room.keyframe_ids:
        kf = graph.keyframes[kid]
        clouds.append((to_room @ kf.pose).act(kf.scan))
    return RoomKeyframe(room_id, np.vstack(clouds), len(room.keyframe_ids))


def voxel_downsample(cloud: np.ndarray, voxel: float) -> np.ndarray:
    """One centroid per occupied voxel."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return pts.copy()
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


def scan_context(cloud: np.ndarray, n_rings: int = 20, n_sectors: int = 60, max_radius: float = 8.0) -> np.ndarray:
    """Ring x sector matrix holding the highest point per bin (0 when empty)."""
    if n_rings <= 0 or n_sectors <= 0 or max_radius <= 0:
        raise ValueError("descriptor parameters must be positive")
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    out = np.zeros((n_rings, n_sectors))
    if len(pts) == 0:
        return out
    rho = np.hypot(pts[:, 0], pts[:, 1])
    keep = rho < max_radius
    pts, rho = pts[keep], rho[keep]
    theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi)
    ring = np.minimum(np.floor(rho * n_rings / max_radius + _BIN_EPS).astype(int), n_rings - 1)
    sector = np.floor(theta * n_sectors / (2 * np.pi) + _BIN_EPS).astype(int) % n_sectors
    np.maximum.at(out, (ring, sector), pts[:, 2])
    return out


def sc_distance(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """Column-shift scan-context distance.

    Returns the smallest mean cosine distance over all shifts ``k`` of
    ``roll(a, k)`` against ``b`` together with that ``k``. Columns empty in
    both matrices are left out of the mean.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionMismatch(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    n_s = a.shape[1]
    shifts = np.arange(n_s)
    # rolled[k] = np.roll(a, k, axis=1)
    idx = (np.arange(n_s)[None, :] - shifts[:, None]) % n_s
    rolled = np.transpose(a[:, idx], (1, 0, 2))  # (shift, ring, sector)
    dots = np.einsum("kri,ri->ki", rolled, b)
    na = np.einsum("kri,kri->ki", rolled, rolled)
    nb = np.einsum("ri,ri->i", b, b)[None, :]
    both = na * nb
    cos = np.where(both > 0, dots / np.sqrt(np.where(both > 0, both, 1.0)), 0.0)
    used = (na > 0) | (nb > 0)
    n_used = used.sum(axis=1)
    dist = np.where(n_used > 0, ((1.0 - cos) * used).sum(axis=1) / np.maximum(n_used, 1), 0.0)
    dist[dist < 1e-12] = 0.0  # round-off of identical columns
    k = int(np.argmin(dist))
    return float(np.clip(dist[k], 0.0, 1.0)), k


def describe(cloud: np.ndarray, room_id: int, agent_id: int, config: DescriptorConfig | None = None) -> RoomDescriptor:
    config = config or DescriptorConfig()
    m = scan_context(cloud, config.n_rings, config.n_sectors, config.max_radius)
    return RoomDescriptor(m, room_id, agent_id, config.max_radius)


def describe_room(
    graph: AgentGraph, room_id: int, config: DescriptorConfig | None = None
) -> tuple[RoomDescriptor, np.ndarray]:
    """Descriptor and downsampled room-frame cloud for a local room."""
    config = config or DescriptorConfig()
    rk = assemble_room_keyframe(graph, room_id)
    cloud = voxel_downsample(rk.cloud, config.voxel)
    return describe(cloud, room_id, graph.agent_id, config), cloud


def match_descriptor(
    store: Iterable[RoomDescriptor], incoming: RoomDescriptor, threshold: float = 0.25
) -> Optional[MatchCandidate]:
    """Best local descriptor for ``incoming`` if its distance is below ``threshold``."""
    best = None
    for local in store:
        dist, shift = sc_distance(incoming.matrix, local.matrix)
        if best is None or dist < best.distance:
            best = MatchCandidate(local.room_id, incoming.agent_id, incoming.room_id, dist, shift)
    if best is None or not best.distance < threshold:
        return None
    return best


class DescriptorStore:
    """Room descriptors keyed by (agent, room). Reads are lock-free snapshots."""

    def __init__(self) -> None:
        self._items: dict[tuple[int, int], RoomDescriptor] = {}
        self._lock = threading.Lock()

    def put(self, desc: RoomDescriptor) -> None:
        with self._lock:
            items = dict(self._items)
            items[(desc.agent_id, desc.room_id)] = desc
            self._items = items

    def get(self, agent_id: int, room_id: int) -> Optional[RoomDescriptor]:
        return self._items.get((agent_id, room_id))

    def by_agent(self, agent_id: int) -> list[RoomDescriptor]:
        return [d for (a, _), d in sorted(self._items.items()) if a == agent_id]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter([d for _, d in sorted(self._items.items())])
