"""One simulated robot: sensing, local graph construction, optimization and its broker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .broker import BrokerConfig, GraphBroker
from .geometry import Pose3
from .optimizer import OptimizationReport, OptimizerConfig, optimize
from .sgraph import (
    AgentGraph,
    ExtractionConfig,
    GraphConfig,
    RoomConfig,
    add_keyframe,
    detect_room,
    extract_planes,
    map_observations,
)
from .transport import HELLO, BrokerMessage
from .world import Floorplan, LidarConfig, NoiseModel, TrajectoryScript, keyframe_poses, simulate_odometry, simulate_scan

RAW_POINT_BYTES = 12  # float32 x, y, z per LiDAR return


@dataclass
class AgentConfig:
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    room: RoomConfig = field(default_factory=RoomConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    broker: BrokerConfig = field(default_factory=BrokerConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    optimize_every: int = 10
    step: float = 1.0
    turn_deg: float = 30.0


class Agent:
    """Advances one keyframe per tick along a scripted route."""

    def __init__(
        self,
        plan: Floorplan,
        script: TrajectoryScript,
        noise: NoiseModel | None = None,
        config: AgentConfig | None = None,
        seed: int = 0,
        communicate: bool = True,
    ):
        self.plan = plan
        self.script = script
        self.noise = noise or NoiseModel()
        self.config = config or AgentConfig()
        self.seed = seed
        self.communicate = communicate
        self.agent_id = script.agent_id
        self.truth = keyframe_poses(script, self.config.step, self.config.turn_deg)
        self.start = self.truth[0]
        self.graph = AgentGraph(self.agent_id, self.config.graph)
        self.broker = GraphBroker(self.graph, self.config.broker)
        self.tick = 0
        self.raw_scan_bytes = 0
        self.room_trace: list[int] = []  # ground-truth room per tick (-1 outside rooms)
        self.reports: list[OptimizationReport] = []
        self._seq = 0
        self._published: dict[int, int] = {}
        self._last_room: Optional[int] = None

    @property
    def done(self) -> bool:
        return self.tick >= len(self.truth)

    def _next_seq(self, n: int = 1) -> int:
        s = self._seq
        self._seq += n
        return s

    def _rng(self, *salt: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, self.agent_id, *salt]))

    def hello(self) -> list[BrokerMessage]:
        if not self.communicate:
            return []
        return [BrokerMessage(HELLO, self.agent_id, self._next_seq(), {"agent": self.agent_id})]

    # -- per tick --------------------------------------------------------
    def step(self) -> list[BrokerMessage]:
        """Take the next keyframe; returns messages to send."""
        if self.done:
            return []
        i = self.tick
        truth = self.truth[i]
        if i == 0:
            delta = Pose3()
        else:
            delta = simulate_odometry(self.truth[i - 1].inverse() @ truth, self.noise, self._rng(0, i))
        scan = simulate_scan(self.plan, truth, self.config.lidar, self.noise.range_sigma, self._rng(1, i))
        self.raw_scan_bytes += RAW_POINT_BYTES * len(scan)
        self.room_trace.append(self.plan.room_at(truth.t[:2]))

        g = self.graph
        kid = add_keyframe(g, delta, scan)
        ex = ExtractionConfig(**{**self.config.extraction.__dict__, "seed": i})
        recent = map_observations(g, kid, extract_planes(scan, ex))
        kf = g.keyframes[kid]
        for r in g.local_rooms().values():
            if g.room_contains(r, kf.pose.t):
                kf.room_id = r.id
                r.keyframe_ids.append(kid)
                break
        new_room = False
        if kf.room_id is None:
            new_room = detect_room(g, recent, kf.pose.t, self.config.room) is not None
        self.tick += 1

        out: list[BrokerMessage] = []
        left = self._last_room is not None and kf.room_id != self._last_room
        if new_room or left or (self.config.optimize_every and i % self.config.optimize_every == 0):
            self._optimize()
        if left:
            out += self._publish(self._last_room)
        self._last_room = kf.room_id
        return out

    def _optimize(self) -> None:
        if len(self.graph.keyframes) > 1:
            self.reports.append(optimize(self.graph, self.config.optimizer))

    def _publish(self, room_id: int) -> list[BrokerMessage]:
        room = self.graph.rooms[room_id]
        if not self.communicate or self._published.get(room_id) == len(room.keyframe_ids):
            return []
        self._published[room_id] = len(room.keyframe_ids)
        return list(self.broker.publish(room_id, self._next_seq(2)))

    def finish(self) -> list[BrokerMessage]:
        """Final optimization and publication of rooms with unshared keyframes."""
        self._optimize()
        out: list[BrokerMessage] = []
        for rid in sorted(self.graph.local_rooms()):
            out += self._publish(rid)
        return out

    def receive(self, messages: list[BrokerMessage]) -> list:
        actions = []
        for m in messages:
            actions += self.broker.handle_message(m)
        return actions

    def settle(self) -> None:
        """Re-merge against the final local graph and optimize once more."""
        self.broker.refresh()
        self._optimize()

    # -- ground truth helpers -------------------------------------------
    def truth_in_map(self) -> list[Pose3]:
        """Ground-truth keyframe poses in this agent's map frame (its start pose)."""
        inv = self.start.inverse()
        return [inv @ p for p in self.truth[: self.tick]]

    def estimates(self) -> list[Pose3]:
        return [self.graph.keyframes[k].pose for k in sorted(self.graph.keyframes)]

    def covered_rooms(self) -> set[int]:
        """Floorplan rooms containing the centre of some room vertex in this graph."""
        out = set()
        for r in self.graph.rooms.values():
            world = self.start.act(np.array([r.center[0], r.center[1], 0.0]))
            gi = self.plan.room_at(world[:2])
            if gi >= 0:
                out.add(gi)
        return out


def ate_rmse(estimates: list[Pose3], truth: list[Pose3], align: bool = True) -> float:
    """Position RMSE after the best rigid fit of estimates onto truth."""
    P = np.array([p.t for p in estimates])
    Q = np.array([p.t for p in truth])
    if len(P) != len(Q) or len(P) == 0:
        raise ValueError("trajectories must be non-empty and of equal length")
    if align and len(P) >= 3:
        pc, qc = P.mean(axis=0), Q.mean(axis=0)
        U, _, Vt = np.linalg.svd((P - pc).T @ (Q - qc))
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
        R = Vt.T @ D @ U.T
        P = (P - pc) @ R.T + qc
    return float(np.sqrt(np.mean(np.sum((P - Q) ** 2, axis=1))))
