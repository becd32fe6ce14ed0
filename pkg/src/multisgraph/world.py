"""Synthetic indoor floors, a VLP-16-like ray caster and noisy odometry.

Floors are two rows of rectangular rooms on either side of a straight
corridor.  Walls are zero-thickness vertical segments, so both faces of a
wall are one plane.  Optional furniture boxes add clutter.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import PoseInsideWall
from .geometry import Pose3

# ---------------------------------------------------------------------------
# geometry primitives
# ---------------------------------------------------------------------------


def _rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass
class Rect:
    center: tuple[float, float]
    size: tuple[float, float]  # extent along the rect's local x, y
    yaw: float = 0.0

    def corners(self) -> np.ndarray:
        hx, hy = self.size[0] / 2, self.size[1] / 2
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        return local @ _rot2(self.yaw).T + np.asarray(self.center)

    def to_local(self, xy) -> np.ndarray:
        return (np.asarray(xy, dtype=float) - np.asarray(self.center)) @ _rot2(self.yaw)

    def contains(self, xy, margin: float = 0.0) -> bool:
        lx, ly = self.to_local(xy)
        return abs(lx) <= self.size[0] / 2 - margin and abs(ly) <= self.size[1] / 2 - margin


@dataclass
class Box:
    """Furniture: a rectangular prism standing on the floor."""

    footprint: Rect
    height: float

    def faces(self) -> np.ndarray:
        c = self.footprint.corners()
        return np.array([[*c[i], *c[(i + 1) % 4]] for i in range(4)])


@dataclass
class Door:
    room: int
    point: tuple[float, float]  # centre of the gap, on the wall line
    inward: tuple[float, float]  # unit vector pointing into the room
    width: float = 1.0


@dataclass
class Floorplan:
    rooms: list[Rect]
    corridors: list[Rect]
    walls: np.ndarray  # (M, 4) segments x0, y0, x1, y1
    doors: list[Door]
    furniture: list[Box] = field(default_factory=list)
    wall_height: float = 2.5

    def room_at(self, xy) -> int:
        """Index of the room containing ``xy``, -1 for corridor / outside."""
        for i, r in enumerate(self.rooms):
            if r.contains(xy):
                return i
        return -1

    def in_free_space(self, xy, clearance: float = 0.0) -> bool:
        inside = any(r.contains(xy) for r in self.rooms) or any(c.contains(xy) for c in self.corridors)
        if not inside:
            return False
        if any(b.footprint.contains(xy, margin=-clearance) for b in self.furniture):
            return False
        return wall_distance(self.walls, xy) > clearance

    def connectivity(self) -> list[set[int]]:
        """Adjacency over rooms (0..n-1) and corridors (n..)."""
        n = len(self.rooms)
        adj: list[set[int]] = [set() for _ in range(n + len(self.corridors))]
        for door in self.doors:
            outside = np.asarray(door.point) - 0.5 * np.asarray(door.inward)
            for ci, c in enumerate(self.corridors):
                if c.contains(outside):
                    adj[door.room].add(n + ci)
                    adj[n + ci].add(door.room)
        return adj

    def to_dict(self) -> dict:
        return {
            "rooms": [asdict(r) for r in self.rooms],
            "corridors": [asdict(c) for c in self.corridors],
            "walls": self.walls.tolist(),
            "doors": [asdict(d) for d in self.doors],
            "furniture": [{"footprint": asdict(b.footprint), "height": b.height} for b in self.furniture],
            "wall_height": self.wall_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Floorplan:
        def rect(x):
            return Rect(tuple(x["center"]), tuple(x["size"]), x["yaw"])

        return cls(
            rooms=[rect(r) for r in d["rooms"]],
            corridors=[rect(c) for c in d["corridors"]],
            walls=np.array(d["walls"], dtype=float).reshape(-1, 4),
            doors=[Door(x["room"], tuple(x["point"]), tuple(x["inward"]), x["width"]) for x in d["doors"]],
            furniture=[Box(rect(b["footprint"]), b["height"]) for b in d.get("furniture", [])],
            wall_height=d["wall_height"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def wall_distance(walls: np.ndarray, xy) -> float:
    if len(walls) == 0:
        return np.inf
    p = np.asarray(xy, dtype=float)
    a, b = walls[:, :2], walls[:, 2:]
    ab = b - a
    u = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return float(np.min(np.linalg.norm(a + u[:, None] * ab - p, axis=1)))


def bfs_reachable(adj: list[set[int]], start: int = 0) -> set[int]:
    seen = {start}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return seen


# ---------------------------------------------------------------------------
# floorplan generation
# ---------------------------------------------------------------------------


def _union(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for lo, hi in sorted(intervals):
        if out and lo <= out[-1][1] + 1e-9:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return [(a, b) for a, b in out]


def _subtract(intervals, holes) -> list[tuple[float, float]]:
    out = list(intervals)
    for hlo, hhi in holes:
        nxt = []
        for lo, hi in out:
            if hhi <= lo or hlo >= hi:
                nxt.append((lo, hi))
                continue
            if hlo > lo:
                nxt.append((lo, hlo))
            if hhi < hi:
                nxt.append((hhi, hi))
        out = nxt
    return [iv for iv in out if iv[1] - iv[0] > 1e-6]


@dataclass
class LayoutSpec:
    """Axis-aligned layout before the global rotation."""

    widths: list[float]  # per room, along the corridor
    depths: list[float]
    rows: list[int]  # +1 north, -1 south
    door_offsets: list[float]  # door centre as a fraction of the room width
    corridor_width: float = 2.0
    corridor_margin: float = 2.0
    door_width: float = 1.0
    wall_height: float = 2.5


def build_floorplan(layout: LayoutSpec, yaw: float = 0.0, furniture: Optional[list[Box]] = None) -> Floorplan:
    n = len(layout.widths)
    hc = layout.corridor_width / 2
    horiz: dict[float, list] = {}
    vert: dict[float, list] = {}
    holes: dict[float, list] = {}
    rooms, doors = [], []

    def add(store, key, lo, hi):
        store.setdefault(round(key, 9), []).append((min(lo, hi), max(lo, hi)))

    if n == 1:
        w, dep = layout.widths[0], layout.depths[0]
        rooms.append(Rect((w / 2, dep / 2), (w, dep)))
        add(horiz, 0.0, 0.0, w)
        add(horiz, dep, 0.0, w)
        add(vert, 0.0, 0.0, dep)
        add(vert, w, 0.0, dep)
        corridors = []
    else:
        x = {1: 0.0, -1: 0.0}
        for i in range(n):
            row, w, dep = layout.rows[i], layout.widths[i], layout.depths[i]
            x0 = x[row]
            x[row] += w
            y_near = row * hc
            y_far = row * (hc + dep)
            rooms.append(Rect((x0 + w / 2, (y_near + y_far) / 2), (w, dep)))
            add(horiz, y_near, x0, x0 + w)
            add(horiz, y_far, x0, x0 + w)
            add(vert, x0, y_near, y_far)
            add(vert, x0 + w, y_near, y_far)
            xd = x0 + w * layout.door_offsets[i]
            holes.setdefault(round(y_near, 9), []).append((xd - layout.door_width / 2, xd + layout.door_width / 2))
            doors.append(Door(i, (xd, y_near), (0.0, float(row)), layout.door_width))
        length = max(x.values())
        m = layout.corridor_margin
        add(horiz, hc, -m, length + m)
        add(horiz, -hc, -m, length + m)
        add(vert, -m, -hc, hc)
        add(vert, length + m, -hc, hc)
        corridors = [Rect(((length) / 2, 0.0), (length + 2 * m, layout.corridor_width))]

    segs = []
    for y, ivs in horiz.items():
        for lo, hi in _subtract(_union(ivs), holes.get(y, [])):
            segs.append([lo, y, hi, y])
    for xk, ivs in vert.items():
        for lo, hi in _union(ivs):
            segs.append([xk, lo, xk, hi])
    walls = np.array(sorted(segs), dtype=float).reshape(-1, 4)

    R = _rot2(yaw)

    def rot_rect(r: Rect) -> Rect:
        c = R @ np.asarray(r.center)
        return Rect((float(c[0]), float(c[1])), r.size, r.yaw + yaw)

    walls = np.hstack([walls[:, :2] @ R.T, walls[:, 2:] @ R.T])
    rooms = [rot_rect(r) for r in rooms]
    corridors = [rot_rect(c) for c in corridors]
    doors = [
        Door(d.room, tuple((R @ np.asarray(d.point)).tolist()), tuple((R @ np.asarray(d.inward)).tolist()), d.width)
        for d in doors
    ]
    boxes = [Box(rot_rect(b.footprint), b.height) for b in (furniture or [])]
    return Floorplan(rooms, corridors, walls, doors, boxes, layout.wall_height)


def random_layout(n_rooms: int, rng: np.random.Generator) -> LayoutSpec:
    rows = [1 if i < (n_rooms + 1) // 2 else -1 for i in range(n_rooms)]
    return LayoutSpec(
        widths=[round(float(rng.uniform(4.0, 6.0)), 2) for _ in range(n_rooms)],
        depths=[round(float(rng.uniform(4.0, 5.5)), 2) for _ in range(n_rooms)],
        rows=rows,
        door_offsets=[round(float(rng.uniform(0.3, 0.7)), 2) for _ in range(n_rooms)],
    )


def room_clutter(room: Rect, door: Optional[Door], rng: np.random.Generator, count: int) -> list[Box]:
    """Boxes along the back and side walls, clear of the corridor-side wall."""
    boxes: list[Box] = []
    w, dep = room.size
    # local frame: +y points away from the corridor
    if door is not None:
        inward = np.asarray(door.inward) @ _rot2(room.yaw)
        sign = 1.0 if inward[1] >= 0 else -1.0
    else:
        sign = 1.0
    attempts = 0
    while len(boxes) < count and attempts < 200:
        attempts += 1
        bw, bd = float(rng.uniform(0.4, 0.7)), float(rng.uniform(0.4, 0.7))
        h = float(rng.uniform(1.0, 2.2))
        side = int(rng.integers(0, 3))  # 0 back, 1 left, 2 right
        gap = float(rng.uniform(0.1, 0.3))
        if side == 0:
            lx = float(rng.uniform(-w / 2 + 0.4 + bw / 2, w / 2 - 0.4 - bw / 2))
            ly = sign * (dep / 2 - gap - bd / 2)
            size = (bw, bd)
        else:
            lx = (-1 if side == 1 else 1) * (w / 2 - gap - bd / 2)
            ly = float(rng.uniform(-dep / 2 + 1.6, dep / 2 - 0.4 - bw / 2)) * sign
            size = (bd, bw)
        center = np.array([lx, ly]) @ _rot2(room.yaw).T + np.asarray(room.center)
        cand = Rect((float(center[0]), float(center[1])), size, room.yaw)
        if any(_rects_close(cand, b.footprint, 0.3) for b in boxes):
            continue
        boxes.append(Box(cand, round(h, 2)))
    return boxes


def _rects_close(a: Rect, b: Rect, gap: float) -> bool:
    ra = 0.5 * math.hypot(*a.size)
    rb = 0.5 * math.hypot(*b.size)
    return float(np.linalg.norm(np.subtract(a.center, b.center))) < ra + rb + gap


def generate_floorplan(
    n_rooms: int,
    seed: int = 0,
    yaw: float = 0.0,
    clutter: int = 0,
) -> Floorplan:
    """Deterministic random floor with ``n_rooms`` rooms off one corridor."""
    if n_rooms < 1:
        raise ValueError("need at least one room")
    rng = np.random.default_rng(seed)
    layout = random_layout(n_rooms, rng)
    plan = build_floorplan(layout)
    furniture: list[Box] = []
    if clutter:
        door_of = {d.room: d for d in plan.doors}
        for i, room in enumerate(plan.rooms):
            furniture += room_clutter(room, door_of.get(i), rng, clutter)
    return build_floorplan(layout, yaw, furniture)


def symmetric_corridor_floorplan(
    n_per_row: int = 2,
    width: float = 5.0,
    depth: float = 4.5,
    clutter: int = 4,
    seed: int = 3,
    yaw: float = 0.0,
) -> Floorplan:
    """Identical rooms facing each other across a corridor, centred doors.

    Rooms differ only in their furniture.
    """
    n = 2 * n_per_row
    layout = LayoutSpec(
        widths=[width] * n,
        depths=[depth] * n,
        rows=[1] * n_per_row + [-1] * n_per_row,
        door_offsets=[0.5] * n,
    )
    plan = build_floorplan(layout)
    rng = np.random.default_rng(seed)
    furniture: list[Box] = []
    door_of = {d.room: d for d in plan.doors}
    for i, room in enumerate(plan.rooms):
        furniture += room_clutter(room, door_of.get(i), rng, clutter)
    return build_floorplan(layout, yaw, furniture)


# ---------------------------------------------------------------------------
# lidar
# ---------------------------------------------------------------------------


@dataclass
class LidarConfig:
    n_rings: int = 16
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    n_azimuth: int = 360
    max_range: float = 30.0
    sensor_height: float = 0.5
    floor_ceiling_returns: bool = False

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, ring-major."""
        elev = np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.n_rings))
        az = np.arange(self.n_azimuth) * (2 * np.pi / self.n_azimuth)
        E, A = np.meshgrid(elev, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass
class NoiseModel:
    trans_sigma: tuple[float, float, float] = (0.01, 0.01, 0.0)
    yaw_sigma: float = float(np.deg2rad(0.2))
    range_sigma: float = 0.01

    def __post_init__(self) -> None:
        if min(self.trans_sigma) < 0 or self.yaw_sigma < 0 or self.range_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")

    @classmethod
    def zero(cls) -> NoiseModel:
        return cls((0.0, 0.0, 0.0), 0.0, 0.0)


def _segments(plan: Floorplan) -> tuple[np.ndarray, np.ndarray]:
    segs = [plan.walls]
    tops = [np.full(len(plan.walls), plan.wall_height)]
    for b in plan.furniture:
        segs.append(b.faces())
        tops.append(np.full(4, b.height))
    return np.vstack(segs), np.concatenate(tops)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def simulate_scan(
    plan: Floorplan,
    pose: Pose3,
    lidar: LidarConfig | None = None,
    range_sigma: float = 0.0,
    seed=None,
) -> np.ndarray:
    """Ray-cast one sweep; returns points in the robot base frame."""
    lidar = lidar or LidarConfig()
    if not plan.in_free_space(pose.t[:2], clearance=0.05):
        raise PoseInsideWall(f"pose {pose.t.tolist()} is not in free space")
    R = pose.R
    origin = pose.t + R @ np.array([0.0, 0.0, lidar.sensor_height])
    dirs = lidar.directions() @ R.T
    segs, tops = _segments(plan)
    a = segs[:, :2]
    e = segs[:, 2:] - a
    dh = dirs[:, :2]
    denom = dh[:, 0:1] * e[None, :, 1] - dh[:, 1:2] * e[None, :, 0]
    ao = a[None, :, :] - origin[None, None, :2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (ao[..., 0] * e[None, :, 1] - ao[..., 1] * e[None, :, 0]) / denom
        u = (ao[..., 0] * dh[:, 1:2] - ao[..., 1] * dh[:, 0:1]) / denom
        z = origin[2] + s * dirs[:, 2:3]
    valid = (np.abs(denom) > 1e-12) & (s > 1e-9) & (u >= 0.0) & (u <= 1.0) & (z >= 0.0) & (z <= tops[None, :])
    s = np.where(valid, s, np.inf)
    hit = s.min(axis=1)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_floor = np.where(dz < 0, -origin[2] / dz, np.inf)
        s_ceil = np.where(dz > 0, (plan.wall_height - origin[2]) / dz, np.inf)
    s_fc = np.minimum(s_floor, s_ceil)
    if lidar.floor_ceiling_returns:
        hit = np.minimum(hit, s_fc)
    else:
        hit = np.where(hit < s_fc, hit, np.inf)
    keep = np.isfinite(hit) & (hit <= lidar.max_range)
    r = hit[keep]
    if range_sigma > 0:
        r = r + _rng(seed).normal(0.0, range_sigma, size=r.shape)
    world = origin + r[:, None] * dirs[keep]
    return (world - pose.t) @ R


def simulate_odometry(true_delta: Pose3, noise: NoiseModel, seed=None) -> Pose3:
    """Perturb a relative motion with per-axis translation and yaw noise."""
    if max(noise.trans_sigma) == 0.0 and noise.yaw_sigma == 0.0:
        return true_delta
    rng = _rng(seed)
    dt = rng.normal(0.0, 1.0, size=3) * np.asarray(noise.trans_sigma, dtype=float)
    dyaw = float(rng.normal(0.0, 1.0)) * noise.yaw_sigma
    return Pose3(true_delta.q, true_delta.t + dt) @ Pose3.from_xyz_yaw(0.0, 0.0, 0.0, dyaw)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryScript:
    agent_id: int
    waypoints: list[tuple[float, float]]
    start_yaw: float = 0.0
    rooms: list[int] = field(default_factory=list)  # visit order, informational

    def start_pose(self) -> Pose3:
        x, y = self.waypoints[0]
        return Pose3.from_xyz_yaw(x, y, 0.0, self.start_yaw)

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "waypoints": [list(w) for w in self.waypoints],
            "start_yaw": self.start_yaw,
            "rooms": list(self.rooms),
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrajectoryScript:
        return cls(d["agent_id"], [tuple(w) for w in d["waypoints"]], d.get("start_yaw", 0.0), d.get("rooms", []))


def keyframe_poses(script: TrajectoryScript, step: float = 1.0, turn_deg: float = 30.0) -> list[Pose3]:
    """Ground-truth keyframe poses: a new keyframe every ``step`` m or ``turn_deg``."""
    turn = math.radians(turn_deg)
    x, y = script.waypoints[0]
    yaw = script.start_yaw
    poses = [Pose3.from_xyz_yaw(x, y, 0.0, yaw)]
    for wx, wy in script.waypoints[1:]:
        while True:
            dx, dy = wx - x, wy - y
            dist = math.hypot(dx, dy)
            if dist < 1e-9:
                break
            err = (math.atan2(dy, dx) - yaw + math.pi) % (2 * math.pi) - math.pi
            if abs(err) > 1e-9:
                yaw += max(-turn, min(turn, err))
            else:
                k = min(step, dist)
                x += k * math.cos(yaw)
                y += k * math.sin(yaw)
                if k >= dist:
                    x, y = wx, wy
            poses.append(Pose3.from_xyz_yaw(x, y, 0.0, yaw))
    return poses


def room_loop(room: Rect, clearance: float = 1.3) -> list[tuple[float, float]]:
    hx = max(min(room.size[0] / 2 - clearance, 1.5), 0.4)
    hy = max(min(room.size[1] / 2 - clearance, 1.5), 0.4)
    local = [(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy), (hx, hy)]
    R = _rot2(room.yaw)
    c = np.asarray(room.center)
    return [tuple((R @ np.array(p) + c).tolist()) for p in local]


def plan_route(plan: Floorplan, rooms: list[int]) -> list[tuple[float, float]]:
    """Waypoints that start at the first room's centre and loop every listed room."""
    door_of = {d.room: d for d in plan.doors}
    pts: list[tuple[float, float]] = [tuple(map(float, plan.rooms[rooms[0]].center))]
    for k, ri in enumerate(rooms):
        room = plan.rooms[ri]
        if k > 0:
            door = door_of[ri]
            pts.append(_door_point(door, -1.0))
            pts.append(_door_point(door, 0.8))
            pts.append(tuple(map(float, room.center)))
        pts += room_loop(room)
        if k + 1 < len(rooms):
            door = door_of[ri]
            pts.append(_door_point(door, 0.8))
            pts.append(_door_point(door, -1.0))
    return pts


def _door_point(door: Door, offset: float) -> tuple[float, float]:
    p = np.asarray(door.point) + offset * np.asarray(door.inward)
    return (float(p[0]), float(p[1]))
