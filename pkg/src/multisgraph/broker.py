"""Graph broker: peer descriptors, inter-agent alignment and merging of shared vertices.

Each peer's contribution to the local graph is derived state. Whenever the
stored inputs for a peer change (a newer room share, a different transform)
the peer's external vertices and factors are dropped and merged again from
scratch in a fixed order, which makes the end state independent of message
order and of duplicates.
"""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .descriptor import DescriptorConfig, RoomDescriptor, describe_room, sc_distance, voxel_downsample
from .errors import MissingTransform, NoOverlap, ProtocolViolation
from .geometry import Pose3
from .registration import (
    AlignmentResult,
    InterAgentTransform,
    RegistrationConfig,
    VoxelGaussianGrid,
    average_transforms,
    build_voxel_gaussians,
    fitness_weight,
    seed_initial_guess,
    validate_and_lift,
    vgicp_align,
)
from .sgraph import AgentGraph, FactorEdge, PlaneParam, order_room_planes, plane_key, planes_match, room_key
from .transport import GRAPH_SHARE, HELLO, ROOM_DESC, BrokerMessage


@dataclass
class BrokerConfig:
    assoc_angle_deg: float = 10.0
    assoc_dist: float = 0.35
    room_radius: float = 1.0
    use_descriptors: bool = True
    message_voxel: float = 0.5  # voxel of the cloud carried by ROOM_DESC
    max_cloud_points: int = 256
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)


# ---------------------------------------------------------------------------
# shared vertices
# ---------------------------------------------------------------------------


@dataclass
class SharedVertexSet:
    rooms: list[tuple[int, Pose3]] = field(default_factory=list)
    planes: list[tuple[int, PlaneParam]] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> None:
        rooms = {r for r, _ in self.rooms}
        planes = {p for p, _ in self.planes}
        for r, p in self.edges:
            if r not in rooms or p not in planes:
                raise ProtocolViolation(f"edge ({r}, {p}) references a vertex missing from the share")
        for r in rooms:
            if sum(1 for er, _ in self.edges if er == r) != 4:
                raise ProtocolViolation(f"room {r} must reference exactly four planes")

    def room_planes(self, room_id: int) -> list[int]:
        return [p for r, p in self.edges if r == room_id]

    def to_payload(self) -> dict:
        return {
            "rooms": [{"id": int(r), **pose.to_dict()} for r, pose in self.rooms],
            "planes": [{"id": int(p), "n": [float(v) for v in pl.n], "d": float(pl.d)} for p, pl in self.planes],
            "edges": [[int(r), int(p)] for r, p in self.edges],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> SharedVertexSet:
        out = cls(
            [(r["id"], Pose3.from_dict(r)) for r in payload["rooms"]],
            [(p["id"], PlaneParam(p["n"], p["d"])) for p in payload["planes"]],
            [(int(a), int(b)) for a, b in payload["edges"]],
        )
        out.validate()
        return out


def shared_vertices(graph: AgentGraph, room_id: int) -> SharedVertexSet:
    """The room's centre pose, its four planes and the room-plane edges."""
    room = graph.rooms[room_id]
    return SharedVertexSet(
        [(room.id, room.pose())],
        [(p, graph.planes[p].param) for p in room.plane_ids],
        [(room.id, p) for p in room.plane_ids],
    )


def publish_room(
    graph: AgentGraph, room_id: int, config: BrokerConfig | None = None, seq: int = 0
) -> tuple[BrokerMessage, BrokerMessage]:
    """ROOM_DESC (descriptor and downsampled room cloud) and GRAPH_SHARE for a room.

    Keyframe scans never leave the agent; only the room-frame cloud does.
    """
    config = config or BrokerConfig()
    desc, cloud = describe_room(graph, room_id, config.descriptor)
    return _room_messages(graph, room_id, desc, cloud, config, seq)


def message_cloud(cloud: np.ndarray, config: BrokerConfig) -> np.ndarray:
    """Coarser copy of the room cloud for the wire: voxel centroids, then an even stride."""
    if config.message_voxel > config.descriptor.voxel:
        cloud = voxel_downsample(cloud, config.message_voxel)
    if config.max_cloud_points and len(cloud) > config.max_cloud_points:
        idx = np.linspace(0, len(cloud) - 1, config.max_cloud_points).round().astype(int)
        cloud = cloud[idx]
    return cloud


def _room_messages(graph, room_id, desc, cloud, config: BrokerConfig, seq: int):
    cloud = message_cloud(cloud, config)
    room = graph.rooms[room_id]
    payload = {
        "room_id": int(room_id),
        "center": [float(v) for v in room.center],
        "n_keyframes": len(room.keyframe_ids),
        "cloud": cloud.ravel().tolist(),
        "n_rings": desc.n_rings,
        "n_sectors": desc.n_sectors,
        "max_radius": float(desc.max_radius),
        "matrix": desc.matrix.ravel().tolist() if config.use_descriptors else None,
    }
    share = shared_vertices(graph, room_id).to_payload()
    return (
        BrokerMessage(ROOM_DESC, graph.agent_id, seq, payload),
        BrokerMessage(GRAPH_SHARE, graph.agent_id, seq + 1, share),
    )


# ---------------------------------------------------------------------------
# transforms and association
# ---------------------------------------------------------------------------


def transform_room(T: Pose3, room_pose: Pose3) -> Pose3:
    return T @ room_pose


def transform_plane(T: Pose3, plane: PlaneParam) -> PlaneParam:
    """``n' = R n``, ``d' = d + n' . t`` for points mapped by ``x' = R x + t``."""
    return plane.transformed(T)


def associate_planes(
    local: dict[int, PlaneParam], external: PlaneParam, angle_deg: float = 10.0, dist: float = 0.35
) -> Optional[int]:
    """Local plane id closest in ``d`` among those within both thresholds."""
    best = None
    for pid in sorted(local):
        ok, dd = planes_match(external, local[pid], angle_deg, dist)
        if ok and (best is None or dd < best[0]):
            best = (dd, pid)
    return None if best is None else best[1]


def associate_rooms(local: dict[int, np.ndarray], external_center, radius: float = 1.0) -> Optional[int]:
    """Nearest local room whose centre is closer than ``radius``."""
    c = np.asarray(external_center, dtype=float)[:2]
    best = None
    for rid in sorted(local):
        dist = float(np.linalg.norm(np.asarray(local[rid])[:2] - c))
        if dist < radius and (best is None or dist < best[0]):
            best = (dist, rid)
    return None if best is None else best[1]


@dataclass
class MergeReport:
    added_rooms: int = 0
    added_planes: int = 0
    associated_rooms: int = 0
    associated_planes: int = 0

    def total(self) -> int:
        return self.added_rooms + self.added_planes + self.associated_rooms + self.associated_planes

    def __iadd__(self, other: MergeReport) -> MergeReport:
        for k in asdict(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))
        return self


# ---------------------------------------------------------------------------
# peer state
# ---------------------------------------------------------------------------


@dataclass
class RemoteRoom:
    room_id: int
    seq: int
    center: np.ndarray
    cloud: np.ndarray
    descriptor: Optional[RoomDescriptor]


@dataclass
class LocalRoom:
    room_id: int
    center: np.ndarray  # centre the cloud was expressed around
    descriptor: RoomDescriptor
    grid: VoxelGaussianGrid


@dataclass
class PairResult:
    sc_distance: float
    shift: int
    alignment: Optional[AlignmentResult]
    accepted: Optional[InterAgentTransform]


@dataclass
class PeerState:
    agent_id: int
    hello: bool = False
    descriptors: dict[int, RemoteRoom] = field(default_factory=dict)
    shares: dict[int, tuple[int, SharedVertexSet]] = field(default_factory=dict)
    pairs: dict[tuple[int, int], PairResult] = field(default_factory=dict)
    transform: Optional[InterAgentTransform] = None
    id_map: dict[tuple[str, int], int] = field(default_factory=dict)
    seen: set[int] = field(default_factory=set)


def merge_external(
    graph: AgentGraph, peer: PeerState, shared: SharedVertexSet, config: BrokerConfig | None = None
) -> MergeReport:
    """Transform a peer's vertices into the local frame, associate, add the rest.

    Associations become robust prior factors on the local vertex; unmatched
    vertices are added with the peer as provenance and anchored by a prior.
    Vertices already in ``peer.id_map`` are skipped, so re-delivery is a no-op.
    """
    if peer.transform is None:
        raise MissingTransform(f"no transform to agent {peer.agent_id} yet")
    config = config or BrokerConfig()
    gc = graph.config
    T = peer.transform.transform
    src = peer.agent_id
    report = MergeReport()
    planes = {p: transform_plane(T, pl) for p, pl in shared.planes}
    taken = {v for (kind, _), v in peer.id_map.items() if kind == "plane"}

    def candidates(ids=None) -> dict[int, PlaneParam]:
        pool = graph.planes if ids is None else {i: graph.planes[i] for i in ids}
        return {i: p.param for i, p in pool.items() if p.source != src and i not in taken}

    def bind_plane(remote: int, local_id: Optional[int]) -> None:
        if local_id is None:
            local_id = graph.add_plane(planes[remote], source=src)
            report.added_planes += 1
        else:
            report.associated_planes += 1
        taken.add(local_id)
        peer.id_map[("plane", remote)] = local_id
        graph.factors.append(
            FactorEdge(
                "prior",
                (plane_key(local_id),),
                planes[remote],
                gc.plane_information(),
                robust=graph.planes[local_id].source != src,
                source=src,
            )
        )

    for rid, pose in sorted(shared.rooms, key=lambda x: x[0]):
        if ("room", rid) in peer.id_map:
            continue
        center = transform_room(T, pose).t[:2]
        local_centers = {i: r.center for i, r in graph.rooms.items() if r.source != src}
        match = associate_rooms(local_centers, center, config.room_radius)
        remote_planes = shared.room_planes(rid)
        if match is not None:
            room = graph.rooms[match]
            for p in remote_planes:
                if ("plane", p) not in peer.id_map:
                    local_id = associate_planes(
                        candidates(room.plane_ids), planes[p], config.assoc_angle_deg, config.assoc_dist
                    )
                    if local_id is None:
                        local_id = associate_planes(candidates(), planes[p], config.assoc_angle_deg, config.assoc_dist)
                    bind_plane(p, local_id)
            peer.id_map[("room", rid)] = match
            report.associated_rooms += 1
            graph.factors.append(
                FactorEdge("prior", (room_key(match),), center.copy(), gc.room_information(), robust=True, source=src)
            )
            continue
        for p in remote_planes:
            if ("plane", p) not in peer.id_map:
                bind_plane(p, associate_planes(candidates(), planes[p], config.assoc_angle_deg, config.assoc_dist))
        local_ids = [peer.id_map[("plane", p)] for p in remote_planes]
        order = order_room_planes([graph.planes[i].param for i in local_ids])
        room = graph.add_room(center, [local_ids[i] for i in order], source=src)
        peer.id_map[("room", rid)] = room.id
        report.added_rooms += 1
        graph.factors.append(
            FactorEdge("prior", (room_key(room.id),), center.copy(), gc.room_information(), source=src)
        )

    # planes shared outside any room
    for p in sorted(planes):
        if ("plane", p) not in peer.id_map:
            bind_plane(p, associate_planes(candidates(), planes[p], config.assoc_angle_deg, config.assoc_dist))
    return report


def remove_external(graph: AgentGraph, agent_id: int) -> None:
    """Drop every vertex and factor contributed by ``agent_id``."""
    graph.factors = [f for f in graph.factors if f.source != agent_id]
    graph.rooms = {k: r for k, r in graph.rooms.items() if r.source != agent_id}
    graph.planes = {k: p for k, p in graph.planes.items() if p.source != agent_id}
    graph.recompute_floor()


# ---------------------------------------------------------------------------
# broker
# ---------------------------------------------------------------------------


@dataclass
class Action:
    kind: str  # register, duplicate, stale, store, align, transform, buffer, merge
    detail: dict = field(default_factory=dict)


class GraphBroker:
    """Per-agent broker. Messages are handled one at a time under a lock."""

    def __init__(self, graph: AgentGraph, config: BrokerConfig | None = None):
        self.graph = graph
        self.config = config or BrokerConfig()
        self.peers: dict[int, PeerState] = {}
        self.local: dict[int, LocalRoom] = {}
        self._lock = threading.RLock()
        self.on_transform: Optional[Callable[[InterAgentTransform], None]] = None

    # -- local side ------------------------------------------------------
    def publish(self, room_id: int, seq: int = 0) -> tuple[BrokerMessage, BrokerMessage]:
        """Messages for a local room; also refreshes its alignment target."""
        with self._lock:
            desc, cloud = describe_room(self.graph, room_id, self.config.descriptor)
            desc_msg, share_msg = _room_messages(self.graph, room_id, desc, cloud, self.config, seq)
            room = self.graph.rooms[room_id]
            reg = self.config.registration
            self.local[room_id] = LocalRoom(
                room_id, room.center.copy(), desc, build_voxel_gaussians(cloud, reg.voxel, reg.eigen_floor)
            )
            for peer in self.peers.values():
                changed = False
                for rr in peer.descriptors.values():
                    changed |= self._evaluate_pair(peer, room_id, rr)
                self._refresh(peer, force=changed)
            return desc_msg, share_msg

    def refresh(self) -> None:
        """Re-merge every peer against the current local graph."""
        with self._lock:
            for peer in self.peers.values():
                self._refresh(peer, force=True)

    # -- remote side -----------------------------------------------------
    def peer(self, agent_id: int) -> PeerState:
        if agent_id not in self.peers:
            self.peers[agent_id] = PeerState(agent_id)
        return self.peers[agent_id]

    def handle_message(self, message: BrokerMessage) -> list[Action]:
        with self._lock:
            if message.sender == self.graph.agent_id:
                return []
            if message.type == HELLO and message.seq != 0:
                raise ProtocolViolation(f"HELLO from agent {message.sender} must open its sequence")
            peer = self.peer(message.sender)
            if message.seq in peer.seen:
                return [Action("duplicate", {"seq": message.seq})]
            peer.seen.add(message.seq)
            if message.type == HELLO:
                peer.hello = True
                return [Action("register", {"agent": peer.agent_id})]
            if message.type == ROOM_DESC:
                return self._on_room_desc(peer, message)
            if message.type == GRAPH_SHARE:
                return self._on_graph_share(peer, message)
            return []

    def _on_room_desc(self, peer: PeerState, message: BrokerMessage) -> list[Action]:
        p = message.payload
        rid = p["room_id"]
        old = peer.descriptors.get(rid)
        if old is not None and old.seq > message.seq:
            return [Action("stale", {"room": rid})]
        desc = None
        if p.get("matrix") is not None:
            m = np.asarray(p["matrix"], dtype=float).reshape(p["n_rings"], p["n_sectors"])
            desc = RoomDescriptor(m, rid, peer.agent_id, p["max_radius"])
        rr = RemoteRoom(rid, message.seq, np.asarray(p["center"], dtype=float), np.asarray(p["cloud"], dtype=float).reshape(-1, 3), desc)
        peer.descriptors[rid] = rr
        actions = [Action("store", {"room": rid})]
        changed = False
        for lid in sorted(self.local):
            changed |= self._evaluate_pair(peer, lid, rr)
            res = peer.pairs.get((lid, rid))
            if res is not None and res.alignment is not None:
                actions.append(
                    Action("align", {"local_room": lid, "remote_room": rid, "accepted": res.accepted is not None})
                )
        before = peer.transform
        self._refresh(peer, force=changed)
        if peer.transform is not None and peer.transform is not before:
            actions.append(Action("transform", {"agent": peer.agent_id}))
        return actions

    def _on_graph_share(self, peer: PeerState, message: BrokerMessage) -> list[Action]:
        shared = SharedVertexSet.from_payload(message.payload)
        rooms = sorted(r for r, _ in shared.rooms) or [-1]
        key = rooms[0]
        old = peer.shares.get(key)
        if old is not None and old[0] > message.seq:
            return [Action("stale", {"room": key})]
        peer.shares[key] = (message.seq, shared)
        if peer.transform is None:
            return [Action("buffer", {"room": key})]
        report = self._refresh(peer, force=True)
        return [Action("merge", asdict(report))]

    # -- alignment ------------------------------------------------------
    def _evaluate_pair(self, peer: PeerState, local_id: int, remote: RemoteRoom) -> bool:
        """(Re)align one room pair; True when the accepted state may have changed."""
        local = self.local[local_id]
        key = (local_id, remote.room_id)
        prev = peer.pairs.get(key)
        if self.config.use_descriptors:
            if remote.descriptor is None:
                return prev is not None
            dist, shift = sc_distance(remote.descriptor.matrix, local.descriptor.matrix)
            if not dist < self.config.descriptor.threshold:
                peer.pairs[key] = PairResult(dist, shift, None, None)
                return prev is not None and prev.accepted is not None
            init = seed_initial_guess(shift, local.descriptor.n_sectors)
        else:
            dist, shift, init = float("nan"), 0, Pose3()
        try:
            result = vgicp_align(remote.cloud, local.grid, init, self.config.registration)
        except NoOverlap:
            peer.pairs[key] = PairResult(dist, shift, None, None)
            return prev is not None and prev.accepted is not None
        lifted = validate_and_lift(
            result,
            Pose3(t=[local.center[0], local.center[1], 0.0]),
            Pose3(t=[remote.center[0], remote.center[1], 0.0]),
            self.config.registration,
            local_agent=self.graph.agent_id,
            remote_agent=peer.agent_id,
            local_room=local_id,
            remote_room=remote.room_id,
        )
        peer.pairs[key] = PairResult(dist, shift, result, lifted)
        return lifted is not None or (prev is not None and prev.accepted is not None)

    def _select_transform(self, peer: PeerState) -> Optional[InterAgentTransform]:
        """Best accepted pair per remote room, fused by fitness-weighted averaging."""
        best: dict[int, InterAgentTransform] = {}
        for (lid, rid), res in sorted(peer.pairs.items()):
            a = res.accepted
            if a is not None and (rid not in best or a.fitness < best[rid].fitness):
                best[rid] = a
        if not best:
            return None
        chosen = [best[r] for r in sorted(best)]
        if len(chosen) == 1:
            return chosen[0]
        T = average_transforms([c.transform for c in chosen], [fitness_weight(c.fitness) for c in chosen])
        lead = min(chosen, key=lambda c: c.fitness)
        return InterAgentTransform(
            self.graph.agent_id,
            peer.agent_id,
            T,
            float(np.mean([c.fitness for c in chosen])),
            lead.local_room,
            lead.remote_room,
            float(np.mean([c.inlier_fraction for c in chosen])),
        )

    def _refresh(self, peer: PeerState, force: bool = False) -> MergeReport:
        new = self._select_transform(peer)
        old = peer.transform
        same = (
            (new is None and old is None)
            or (new is not None and old is not None and new.transform.almost_equal(old.transform, 0.0))
        )
        if same and not force:
            return MergeReport()
        if not same:
            peer.transform = new
            if new is not None and self.on_transform is not None:
                self.on_transform(new)
        remove_external(self.graph, peer.agent_id)
        peer.id_map.clear()
        report = MergeReport()
        if peer.transform is None:
            return report
        for key in sorted(peer.shares):
            report += merge_external(self.graph, peer, peer.shares[key][1], self.config)
        return report

    # -- inspection -----------------------------------------------------
    def transforms(self) -> dict[int, InterAgentTransform]:
        return {a: p.transform for a, p in sorted(self.peers.items()) if p.transform is not None}

    def signature(self, decimals: int = 9) -> dict:
        """Id-free summary of the merged state, for order-independence checks."""
        g = self.graph

        def rnd(v):
            return [round(float(x), decimals) + 0.0 for x in np.ravel(v)]

        ext_planes = sorted((p.source, *rnd(p.param.to_list())) for p in g.planes.values() if p.source is not None)
        ext_rooms = sorted((r.source, *rnd(r.center)) for r in g.rooms.values() if r.source is not None)
        kinds: dict[str, int] = {}
        for f in g.factors:
            if f.source is not None:
                k = f"{f.kind}:{f.source}"
                kinds[k] = kinds.get(k, 0) + 1
        priors = sorted(
            (f.source, f.vertices[0][0], *rnd(f.measurement.to_list() if isinstance(f.measurement, PlaneParam) else f.measurement))
            for f in g.factors
            if f.kind == "prior" and f.source is not None
        )
        return {
            "planes": ext_planes,
            "rooms": ext_rooms,
            "factors": dict(sorted(kinds.items())),
            "priors": priors,
            "transforms": {
                a: rnd(np.r_[t.transform.q * np.sign(t.transform.q[0] or 1.0), t.transform.t]) for a, t in self.transforms().items()
            },
        }


__all__ = [
    "Action",
    "BrokerConfig",
    "GraphBroker",
    "MergeReport",
    "PeerState",
    "SharedVertexSet",
    "associate_planes",
    "associate_rooms",
    "merge_external",
    "message_cloud",
    "publish_room",
    "remove_external",
    "shared_vertices",
    "transform_plane",
    "transform_room",
]
