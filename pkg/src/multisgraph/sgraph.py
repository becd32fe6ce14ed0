"""Per-agent semantic graph: keyframes, wall planes, four-wall rooms and a floor node."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegeneratePlanes, EmptyScan
from .geometry import Pose3, canonical_plane, transform_plane_params

# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlaneParam:
    """Plane ``n . x = d`` with unit normal."""

    n: np.ndarray
    d: float

    def __post_init__(self) -> None:
        n = np.asarray(self.n, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        object.__setattr__(self, "n", n if abs(norm - 1.0) <= 1e-12 else n / norm)
        object.__setattr__(self, "d", float(self.d))

    def canonical(self) -> PlaneParam:
        n, d = canonical_plane(self.n, self.d)
        return PlaneParam(n, d)

    def flipped(self) -> PlaneParam:
        return PlaneParam(-self.n, -self.d)

    def transformed(self, T: Pose3) -> PlaneParam:
        """Same plane expressed in the parent frame of ``T`` (canonical)."""
        n, d = transform_plane_params(T, self.n, self.d)
        return PlaneParam(n, d)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.n - self.d

    def oriented_towards(self, point: np.ndarray) -> PlaneParam:
        """Sign chosen so that ``point`` lies on the positive side."""
        p = np.asarray(point, dtype=float)
        return self if float(self.n @ p - self.d) >= 0.0 else self.flipped()

    def to_list(self) -> list[float]:
        return [float(v) for v in self.n] + [self.d]


class PlaneObservation(NamedTuple):
    plane: PlaneParam  # in the keyframe frame, canonical
    support: int
    points: np.ndarray  # inlier points, keyframe frame


@dataclass
class Keyframe:
    id: int
    pose: Pose3
    scan: np.ndarray
    room_id: Optional[int] = None


@dataclass
class Plane:
    id: int
    param: PlaneParam
    source: Optional[int] = None  # None = local, else the originating agent id
    observations: int = 0
    footprint: set = field(default_factory=set, repr=False)  # occupied xy cells


@dataclass
class Room:
    id: int
    center: np.ndarray
    plane_ids: tuple[int, int, int, int]  # ordered as two pairs (a1, b1, a2, b2)
    keyframe_ids: list[int] = field(default_factory=list)
    source: Optional[int] = None

    def pose(self) -> Pose3:
        """Room frame: translation to the centre, map-axis aligned."""
        return Pose3(t=[self.center[0], self.center[1], 0.0])


@dataclass
class FloorNode:
    center: np.ndarray


@dataclass
class FactorEdge:
    """kinds: odometry, pose_plane, room_plane, prior."""

    kind: str
    vertices: tuple
    measurement: object
    information: np.ndarray
    robust: bool = False
    source: Optional[int] = None


@dataclass
class ExtractionConfig:
    inlier_dist: float = 0.05
    min_support: int = 150
    max_planes: int = 8
    iterations: int = 160
    max_normal_z: float = 0.2  # walls only
    min_extent: float = 0.85  # longest gap-free run; furniture faces are shorter
    max_gap: float = 0.3
    segment_gap: float = 1.5  # wider than a door, narrower than a corridor
    seed: int = 0


@dataclass
class RoomConfig:
    min_width: float = 1.5
    max_width: float = 15.0
    max_aspect: float = 3.0
    antiparallel_dot: float = -0.9
    perpendicular_dot: float = 0.2
    min_coverage: float = 0.4
    coverage_step: float = 0.25
    coverage_radius: float = 0.15
    max_hole: float = 3.0
    interior_margin: float = 0.3
    interior_length: float = 1.0
    merge_radius: float = 1.0


@dataclass
class GraphConfig:
    odom_sigma_t: tuple[float, float, float] = (0.01, 0.01, 0.001)
    odom_sigma_r: tuple[float, float, float] = (0.001, 0.001, np.deg2rad(0.2))
    plane_sigma_n: float = 0.02
    plane_sigma_d: float = 0.05
    room_sigma: float = 0.1
    prior_sigma: float = 1e-4
    assoc_angle_deg: float = 10.0
    assoc_dist: float = 0.35
    footprint_cell: float = 0.25
    min_overlap: float = 0.2  # share of observed cells next to the plane's footprint

    def odometry_information(self) -> np.ndarray:
        sig = np.maximum(np.r_[self.odom_sigma_t, self.odom_sigma_r], 1e-4)
        return np.diag(1.0 / sig**2)

    def plane_information(self) -> np.ndarray:
        return np.diag(
            [1 / self.plane_sigma_n**2, 1 / self.plane_sigma_n**2, 1 / self.plane_sigma_d**2]
        )

    def room_information(self) -> np.ndarray:
        return np.eye(2) / self.room_sigma**2


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


def kf_key(i: int) -> tuple[str, int]:
    return ("kf", i)


def plane_key(i: int) -> tuple[str, int]:
    return ("plane", i)


def room_key(i: int) -> tuple[str, int]:
    return ("room", i)


@dataclass
class AgentGraph:
    agent_id: int
    config: GraphConfig = field(default_factory=GraphConfig)
    keyframes: dict[int, Keyframe] = field(default_factory=dict)
    planes: dict[int, Plane] = field(default_factory=dict)
    rooms: dict[int, Room] = field(default_factory=dict)
    floor: Optional[FloorNode] = None
    factors: list[FactorEdge] = field(default_factory=list)
    _next_plane: int = 0
    _next_room: int = 0

    # -- vertex creation -------------------------------------------------
    def add_plane(self, param: PlaneParam, source: Optional[int] = None) -> int:
        pid = self._next_plane
        self._next_plane += 1
        self.planes[pid] = Plane(pid, param.canonical(), source)
        return pid

    def add_room(self, center, plane_ids, source: Optional[int] = None) -> Room:
        rid = self._next_room
        self._next_room += 1
        room = Room(rid, np.asarray(center, dtype=float).copy(), tuple(plane_ids), [], source)
        self.rooms[rid] = room
        self.factors.append(
            FactorEdge(
                "room_plane",
                (room_key(rid),) + tuple(plane_key(p) for p in plane_ids),
                None,
                self.config.room_information(),
                robust=True,
                source=source,
            )
        )
        self.recompute_floor()
        return room

    def add_factor(self, factor: FactorEdge) -> None:
        for v in factor.vertices:
            if not self.has_vertex(v):
                raise KeyError(f"factor references missing vertex {v}")
        self.factors.append(factor)

    def has_vertex(self, key) -> bool:
        kind, i = key
        return i in {"kf": self.keyframes, "plane": self.planes, "room": self.rooms}[kind]

    def recompute_floor(self) -> None:
        if self.rooms:
            self.floor = FloorNode(np.mean([r.center for r in self.rooms.values()], axis=0))
        else:
            self.floor = None

    # -- queries ---------------------------------------------------------
    def local_planes(self) -> dict[int, Plane]:
        return {k: p for k, p in self.planes.items() if p.source is None}

    def local_rooms(self) -> dict[int, Room]:
        return {k: r for k, r in self.rooms.items() if r.source is None}

    def last_keyframe(self) -> Optional[Keyframe]:
        if not self.keyframes:
            return None
        return self.keyframes[max(self.keyframes)]

    def room_planes(self, room: Room) -> list[PlaneParam]:
        return [self.planes[p].param for p in room.plane_ids]

    def room_contains(self, room: Room, point, margin: float = 0.0) -> bool:
        p = np.array([point[0], point[1], 0.0])
        c = np.array([room.center[0], room.center[1], 0.0])
        for plane in self.room_planes(room):
            o = plane.oriented_towards(c)
            if float(o.n @ p - o.d) <= margin:
                return False
        return True

    def census(self) -> dict:
        def count(items):
            out = {"local": 0, "external": 0}
            for it in items:
                out["local" if it.source is None else "external"] += 1
            return out

        return {
            "keyframes": len(self.keyframes),
            "planes": count(self.planes.values()),
            "rooms": count(self.rooms.values()),
        }

    def to_json(self) -> dict:
        def prov(src):
            return {"provenance": "local"} if src is None else {"provenance": "external", "agent": src}

        return {
            "agent_id": self.agent_id,
            "keyframes": [
                {"id": k.id, "pose": k.pose.to_dict(), "room_id": k.room_id, "points": int(len(k.scan))}
                for k in self.keyframes.values()
            ],
            "planes": [
                {"id": p.id, "n": [float(v) for v in p.param.n], "d": p.param.d, **prov(p.source)}
                for p in self.planes.values()
            ],
            "rooms": [
                {
                    "id": r.id,
                    "center": [float(v) for v in r.center],
                    "plane_ids": list(r.plane_ids),
                    "keyframe_ids": list(r.keyframe_ids),
                    **prov(r.source),
                }
                for r in self.rooms.values()
            ],
            "floor": None if self.floor is None else [float(v) for v in self.floor.center],
            "factors": [
                {"kind": f.kind, "vertices": [list(v) for v in f.vertices], **prov(f.source)}
                for f in self.factors
            ],
            "census": self.census(),
        }


# ---------------------------------------------------------------------------
# keyframes
# ---------------------------------------------------------------------------


def add_keyframe(graph: AgentGraph, odom_delta: Pose3, scan: np.ndarray) -> int:
    """Append a keyframe at ``previous pose @ odom_delta``.

    The first keyframe is placed at ``odom_delta`` itself (usually identity) and
    anchored with a prior factor, which fixes the gauge of the map frame.
    """
    scan = np.asarray(scan, dtype=float).reshape(-1, 3)
    if len(scan) == 0:
        raise EmptyScan("scan has no points")
    if not (np.all(np.isfinite(odom_delta.q)) and np.all(np.isfinite(odom_delta.t))):
        raise ValueError("odometry delta is not finite")
    prev = graph.last_keyframe()
    kid = 0 if prev is None else prev.id + 1
    pose = odom_delta if prev is None else prev.pose @ odom_delta
    graph.keyframes[kid] = Keyframe(kid, pose, scan)
    if prev is None:
        info = np.eye(6) / graph.config.prior_sigma**2
        graph.factors.append(FactorEdge("prior", (kf_key(kid),), pose, info))
    else:
        graph.factors.append(
            FactorEdge(
                "odometry",
                (kf_key(prev.id), kf_key(kid)),
                odom_delta,
                graph.config.odometry_information(),
            )
        )
    return kid


# ---------------------------------------------------------------------------
# plane extraction
# ---------------------------------------------------------------------------


def _fit_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    return n, float(n @ c)


def extract_planes(scan: np.ndarray, config: ExtractionConfig | None = None) -> list[PlaneObservation]:
    """Iterative RANSAC wall extraction from one scan (keyframe frame)."""
    config = config or ExtractionConfig()
    pts = np.asarray(scan, dtype=float).reshape(-1, 3)
    rng = np.random.default_rng(config.seed)
    out: list[PlaneObservation] = []
    remaining = pts
    for _ in range(3 * config.max_planes):
        if len(out) >= config.max_planes or len(remaining) < max(config.min_support, 3):
            break
        n_best, d_best, count = _ransac(remaining, config, rng)
        if count < config.min_support:
            break
        inl = np.abs(remaining @ n_best - d_best) < config.inlier_dist
        for _refit in range(2):
            inl = _largest_segment(remaining, inl, n_best, config.segment_gap)
            n_best, d_best = _fit_plane(remaining[inl])
            inl = np.abs(remaining @ n_best - d_best) < config.inlier_dist
        inl = _largest_segment(remaining, inl, n_best, config.segment_gap)
        support = remaining[inl]
        remaining = remaining[~inl]
        if len(support) < config.min_support or abs(n_best[2]) > config.max_normal_z:
            continue
        if _longest_run(support, n_best, config.max_gap) < config.min_extent:
            continue
        plane = PlaneParam(n_best, d_best).canonical()
        out.append(PlaneObservation(plane, int(len(support)), support))
    return out


def _horizontal(n: np.ndarray) -> Optional[np.ndarray]:
    h = np.cross(n, [0.0, 0.0, 1.0])
    norm = np.linalg.norm(h)
    return None if norm < 1e-9 else h / norm


def _largest_segment(points: np.ndarray, mask: np.ndarray, n: np.ndarray, gap: float) -> np.ndarray:
    """Restrict ``mask`` to its most populated gap-free stretch along the wall."""
    h = _horizontal(n)
    idx = np.flatnonzero(mask)
    if h is None or len(idx) == 0:
        return mask
    s = points[idx] @ h
    order = np.argsort(s)
    breaks = np.flatnonzero(np.diff(s[order]) > gap)
    groups = np.split(order, breaks + 1)
    keep = max(groups, key=len)
    out = np.zeros_like(mask)
    out[idx[keep]] = True
    return out


def _longest_run(points: np.ndarray, n: np.ndarray, max_gap: float) -> float:
    h = _horizontal(n)
    if h is None:
        return np.inf
    s = np.sort(points @ h)
    breaks = np.flatnonzero(np.diff(s) > max_gap)
    starts = np.r_[0, breaks + 1]
    ends = np.r_[breaks, len(s) - 1]
    return float(np.max(s[ends] - s[starts]))


def _ransac(points: np.ndarray, config: ExtractionConfig, rng: np.random.Generator):
    n_pts = len(points)
    idx = rng.integers(0, n_pts, size=(config.iterations, 3))
    p0, p1, p2 = points[idx[:, 0]], points[idx[:, 1]], points[idx[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-9
    normals = normals[ok] / norms[ok, None]
    if config.max_normal_z < 1.0:
        vertical = np.abs(normals[:, 2]) <= config.max_normal_z
        normals = normals[vertical]
        p0 = p0[ok][vertical]
    else:
        p0 = p0[ok]
    if len(normals) == 0:
        return np.array([1.0, 0.0, 0.0]), 0.0, 0
    d = np.einsum("ij,ij->i", normals, p0)
    counts = (np.abs(points @ normals.T - d) < config.inlier_dist).sum(axis=0)
    best = int(np.argmax(counts))
    return normals[best], float(d[best]), int(counts[best])


# ---------------------------------------------------------------------------
# rooms
# ---------------------------------------------------------------------------


def pair_sign(a: PlaneParam, b: PlaneParam) -> float:
    """Factor that flips ``b`` so that it faces ``a`` across the room."""
    return -1.0 if float(a.n @ b.n) > 0.0 else 1.0


def order_room_planes(planes: list[PlaneParam], parallel_dot: float = 0.9) -> tuple[int, int, int, int]:
    """Indices (a1, b1, a2, b2) grouping four planes into two parallel pairs."""
    if len(planes) != 4:
        raise DegeneratePlanes("a room needs exactly four planes")
    for (i, j), (k, l) in (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))):
        a, b, c, e = planes[i], planes[j], planes[k], planes[l]
        if abs(a.n @ b.n) < parallel_dot or abs(c.n @ e.n) < parallel_dot:
            continue
        if abs(a.n @ c.n) > 0.5:
            continue
        for x, y in ((a, b), (c, e)):
            s = pair_sign(x, y)
            if abs(x.d + s * y.d) < 1e-6:
                raise DegeneratePlanes("zero-width plane pair")
        return (i, j, k, l)
    raise DegeneratePlanes("planes do not form two antiparallel pairs")


def room_center_ordered(planes: list[PlaneParam]) -> np.ndarray:
    """Centre of planes already ordered (a1, b1, a2, b2)."""
    center = np.zeros(2)
    for a, b in ((planes[0], planes[1]), (planes[2], planes[3])):
        s = pair_sign(a, b)
        u = 0.5 * (a.n - s * b.n)
        m = 0.5 * (a.d - s * b.d)
        center += u[:2] * m
    return center


def compute_room_center(planes: list[PlaneParam]) -> np.ndarray:
    order = order_room_planes(planes)
    return room_center_ordered([planes[i] for i in order])


def _line_intersection(p: PlaneParam, q: PlaneParam) -> np.ndarray:
    A = np.array([p.n[:2], q.n[:2]])
    return np.linalg.solve(A, [p.d, q.d])


def _side_coverage(
    a: PlaneParam, c1: PlaneParam, c2: PlaneParam, tree: cKDTree, cfg: RoomConfig
) -> tuple[float, float]:
    """Fraction of the side segment with support nearby, and its largest hole."""
    p0 = _line_intersection(a, c1)
    p1 = _line_intersection(a, c2)
    length = float(np.linalg.norm(p1 - p0))
    k = max(int(length / cfg.coverage_step), 2)
    samples = p0 + np.linspace(0.0, 1.0, k)[:, None] * (p1 - p0)
    dist, _ = tree.query(samples, distance_upper_bound=cfg.coverage_radius)
    hit = np.isfinite(dist)
    # longest run of uncovered samples, in metres
    run = longest = 0
    for h in hit:
        run = 0 if h else run + 1
        longest = max(longest, run)
    gap = longest * length / (k - 1)
    return float(np.mean(hit)), gap


def _wall_inside(oriented: dict, sides: tuple, walls: dict, cfg: RoomConfig) -> bool:
    """True when another wall has real extent strictly inside the rectangle.

    ``walls`` maps plane ids to xy samples spaced roughly ``coverage_step``.
    """
    normals = np.array([oriented[x].n[:2] for x in sides])
    offsets = np.array([oriented[x].d for x in sides])
    for pid, xy in walls.items():
        if pid in sides or len(xy) == 0:
            continue
        inside = np.all(xy @ normals.T - offsets > cfg.interior_margin, axis=1)
        if inside.sum() * cfg.coverage_step >= cfg.interior_length:
            return True
    return False


def _thin(points: np.ndarray, cell: float) -> np.ndarray:
    xy = np.asarray(points)[:, :2]
    _, first = np.unique(np.floor(xy / cell).astype(np.int64), axis=0, return_index=True)
    return xy[first]


def find_room_candidate(
    planes: dict[int, PlaneParam],
    position: np.ndarray,
    support: dict[int, np.ndarray] | None = None,
    cfg: RoomConfig | None = None,
    walls: dict[int, np.ndarray] | None = None,
) -> Optional[tuple[np.ndarray, tuple[int, int, int, int]]]:
    """Tightest four-wall rectangle around ``position`` built from ``planes``.

    With ``support`` every side must be well covered by its inlier points.
    With ``walls`` (xy samples of known walls) no other wall may cut through
    the rectangle.
    """
    cfg = cfg or RoomConfig()
    if walls is None and support is not None:
        walls = {pid: _thin(pts, cfg.coverage_step) for pid, pts in support.items() if pts is not None}
    p = np.array([position[0], position[1], 0.0])
    oriented = {
        pid: pl.oriented_towards(p) for pid, pl in planes.items() if abs(pl.n[2]) < 0.2
    }
    ids = sorted(oriented)
    pairs = []
    for i, j in itertools.combinations(ids, 2):
        a, b = oriented[i], oriented[j]
        if float(a.n @ b.n) >= cfg.antiparallel_dot:
            continue
        width = float(a.n @ p - a.d) + float(b.n @ p - b.d)
        if cfg.min_width <= width <= cfg.max_width:
            pairs.append((i, j, width))
    best = None
    trees = {}
    for (i, j, w1), (k, l, w2) in itertools.combinations(pairs, 2):
        if len({i, j, k, l}) < 4:
            continue
        u1 = oriented[i].n - oriented[j].n
        u2 = oriented[k].n - oriented[l].n
        if abs(u1 @ u2) / (np.linalg.norm(u1) * np.linalg.norm(u2)) > cfg.perpendicular_dot:
            continue
        if max(w1, w2) / min(w1, w2) > cfg.max_aspect:
            continue
        area = w1 * w2
        if best is not None and area >= best[0]:
            continue
        if support is not None:
            ok = True
            sides = ((i, k, l), (j, k, l), (k, i, j), (l, i, j))
            for side, c1, c2 in sides:
                pts = support.get(side)
                if pts is None or len(pts) == 0:
                    ok = False
                    break
                if side not in trees:
                    trees[side] = cKDTree(np.asarray(pts)[:, :2])
                cov, gap = _side_coverage(oriented[side], oriented[c1], oriented[c2], trees[side], cfg)
                if cov < cfg.min_coverage or gap > cfg.max_hole:
                    ok = False
                    break
            if not ok:
                continue
        if walls is not None and _wall_inside(oriented, (i, j, k, l), walls, cfg):
                continue
        best = (area, (i, j, k, l))
    if best is None:
        return None
    order = best[1]
    center = room_center_ordered([oriented[x] for x in order])
    return center, order


def detect_room(
    graph: AgentGraph,
    recent: dict[int, np.ndarray | None],
    position: np.ndarray,
    cfg: RoomConfig | None = None,
) -> Optional[Room]:
    """Detect (or re-identify) the room enclosing ``position``.

    ``recent`` maps plane ids observed at the current keyframe to their
    supporting points in the map frame (``None`` skips the coverage test).
    New rooms are added to the graph; enclosed, unassigned keyframes are
    attached to the returned room.
    """
    cfg = cfg or RoomConfig()
    if len(recent) < 4:
        return None
    planes = {pid: graph.planes[pid].param for pid in recent}
    support = None if any(v is None for v in recent.values()) else recent
    walls = None
    if support is not None:
        cell = graph.config.footprint_cell
        walls = {}
        for pid, pl in graph.local_planes().items():
            pts = [np.array(sorted(pl.footprint), dtype=float).reshape(-1, 2) * cell + 0.5 * cell]
            if pid in support:
                pts.append(np.asarray(support[pid])[:, :2])
            walls[pid] = _thin(np.vstack(pts), cfg.coverage_step)
    found = find_room_candidate(planes, position, support, cfg, walls)
    if found is None:
        return None
    center, order = found
    room = None
    for r in graph.local_rooms().values():
        if np.linalg.norm(r.center - center) < cfg.merge_radius:
            room = r
            break
    if room is None:
        room = graph.add_room(center, order)
    assign_keyframes(graph, room)
    return room


def assign_keyframes(graph: AgentGraph, room: Room) -> None:
    for kf in graph.keyframes.values():
        if kf.room_id is None and graph.room_contains(room, kf.pose.t):
            kf.room_id = room.id
            room.keyframe_ids.append(kf.id)
    room.keyframe_ids.sort()


# ---------------------------------------------------------------------------
# plane mapping
# ---------------------------------------------------------------------------


def planes_match(a: PlaneParam, b: PlaneParam, angle_deg: float, dist: float) -> tuple[bool, float]:
    """Similarity test on unoriented planes; returns (match, |d difference|)."""
    s = 1.0 if float(a.n @ b.n) >= 0.0 else -1.0
    cos = float(np.clip(s * (a.n @ b.n), -1.0, 1.0))
    dd = abs(a.d - s * b.d)
    return (np.degrees(np.arccos(cos)) < angle_deg and dd < dist), dd


def _cells(points: np.ndarray, cell: float) -> set:
    idx = np.floor(np.asarray(points)[:, :2] / cell).astype(np.int64)
    return set(map(tuple, np.unique(idx, axis=0)))


_NEIGHBOURS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]


def _overlap(cells: set, footprint: set) -> float:
    if not cells:
        return 0.0
    near = sum(
        any((cx + dx, cy + dy) in footprint for dx, dy in _NEIGHBOURS) for cx, cy in cells
    )
    return near / len(cells)


def map_observations(graph: AgentGraph, kf_id: int, observations: list[PlaneObservation]) -> dict[int, np.ndarray]:
    """Associate keyframe plane observations with local map planes.

    A match needs similar parameters and spatial overlap with the points
    already attributed to the plane, so that coplanar walls of different
    rooms stay apart. Adds pose-plane factors; returns
    ``{plane_id: support points in map frame}``.
    """
    cfg = graph.config
    kf = graph.keyframes[kf_id]
    seen: dict[int, np.ndarray] = {}
    for obs in observations:
        world = obs.plane.transformed(kf.pose)
        pts = kf.pose.act(obs.points)
        cells = _cells(pts, cfg.footprint_cell)
        candidates = []
        for pid, pl in graph.local_planes().items():
            ok, dd = planes_match(world, pl.param, cfg.assoc_angle_deg, cfg.assoc_dist)
            if ok:
                candidates.append((dd, pid))
        best = None
        for _, pid in sorted(candidates):
            if _overlap(cells, graph.planes[pid].footprint) >= cfg.min_overlap:
                best = pid
                break
        if best is None:
            best = graph.add_plane(world)
        plane = graph.planes[best]
        plane.observations += 1
        plane.footprint |= cells
        graph.factors.append(
            FactorEdge(
                "pose_plane",
                (kf_key(kf_id), plane_key(best)),
                obs.plane,
                cfg.plane_information(),
                robust=True,
            )
        )
        seen[best] = pts if best not in seen else np.vstack([seen[best], pts])
    return seen
