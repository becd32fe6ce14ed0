import copy

import numpy as np
import pytest

from multisgraph.agent import RAW_POINT_BYTES
from multisgraph.broker import (
    BrokerConfig,
    GraphBroker,
    PeerState,
    SharedVertexSet,
    associate_planes,
    associate_rooms,
    merge_external,
    remove_external,
    transform_plane,
    transform_room,
)
from multisgraph.errors import MissingTransform, ProtocolViolation
from multisgraph.geometry import Pose3, points_on_plane
from multisgraph.registration import InterAgentTransform
from multisgraph.sgraph import AgentGraph, PlaneParam
from multisgraph.transport import GRAPH_SHARE, HELLO, ROOM_DESC, BrokerMessage, encode


def test_transform_room_examples():
    T = Pose3.from_xyz_yaw(0, 0, 0, np.pi / 2)
    out = transform_room(T, Pose3(t=[1.0, 0.0, 0.0]))
    assert np.allclose(out.t, [0.0, 1.0, 0.0], atol=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = Pose3.exp(rng.normal(size=6))
        R = Pose3.exp(rng.normal(size=6))
        assert transform_room(T.inverse(), transform_room(T, R)).almost_equal(R, 1e-12)


def test_transform_plane_examples():
    p = PlaneParam([1, 0, 0], 2.0)
    moved = transform_plane(Pose3(t=[1.0, 0, 0]), p)
    assert np.allclose(moved.n, [1, 0, 0]) and np.isclose(moved.d, 3.0)
    turned = transform_plane(Pose3.from_xyz_yaw(0, 0, 0, np.pi / 2), p)
    assert np.allclose(turned.n, [0, 1, 0], atol=1e-15) and np.isclose(turned.d, 2.0)


def test_transform_plane_point_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        T = Pose3.exp(np.r_[rng.uniform(-5, 5, 3), rng.normal(size=3)])
        p = PlaneParam(rng.normal(size=3), rng.uniform(-4, 4))
        pts = T.act(points_on_plane(p.n, p.d, 50, rng))
        q = transform_plane(T, p)
        assert np.all(np.abs(pts @ q.n - q.d) < 1e-9)


def test_associate_planes_examples():
    local = {0: PlaneParam([1, 0, 0], 2.0), 1: PlaneParam([0, 1, 0], 3.0)}
    a = np.deg2rad(15)
    assert associate_planes(local, PlaneParam([np.cos(a), np.sin(a), 0], 2.0)) is None
    a = np.deg2rad(5)
    assert associate_planes(local, PlaneParam([np.cos(a), np.sin(a), 0], 2.1)) == 0
    assert associate_planes(local, PlaneParam([0, 1, 0], 3.5)) is None
    # the closest in offset wins when two qualify
    local[2] = PlaneParam([1, 0, 0], 2.25)
    assert associate_planes(local, PlaneParam([1, 0, 0], 2.2)) == 2


def test_associate_rooms_examples():
    local = {0: np.array([0.0, 0.0]), 1: np.array([5.0, 0.0])}
    assert associate_rooms(local, [2.0, 0.0]) is None
    assert associate_rooms(local, [0.5, 0.2]) == 0
    assert associate_rooms(local, [4.6, 0.0]) == 1


def test_shared_vertex_validation():
    good = {
        "rooms": [{"id": 0, **Pose3().to_dict()}],
        "planes": [{"id": i, "n": [1, 0, 0], "d": float(i)} for i in range(4)],
        "edges": [[0, i] for i in range(4)],
    }
    assert len(SharedVertexSet.from_payload(good).room_planes(0)) == 4
    bad = copy.deepcopy(good)
    bad["edges"] = bad["edges"][:3]
    with pytest.raises(ProtocolViolation):
        SharedVertexSet.from_payload(bad)
    bad = copy.deepcopy(good)
    bad["edges"][0] = [0, 9]
    with pytest.raises(ProtocolViolation):
        SharedVertexSet.from_payload(bad)


def test_merge_requires_transform():
    with pytest.raises(MissingTransform):
        merge_external(AgentGraph(1), PeerState(2), SharedVertexSet())


def square_share(center=(0.0, 0.0), half=2.0, rid=0, first_plane=0):
    cx, cy = center
    planes = [
        PlaneParam([1, 0, 0], cx + half),
        PlaneParam([-1, 0, 0], -cx + half),
        PlaneParam([0, 1, 0], cy + half),
        PlaneParam([0, -1, 0], -cy + half),
    ]
    ids = list(range(first_plane, first_plane + 4))
    return SharedVertexSet([(rid, Pose3(t=[cx, cy, 0.0]))], list(zip(ids, planes)), [(rid, i) for i in ids])


def peer_with(T, agent=2):
    peer = PeerState(agent)
    peer.transform = InterAgentTransform(1, agent, T, 0.001, 0, 0, 0.9)
    return peer


def test_merge_into_empty_graph_and_redelivery():
    g = AgentGraph(1)
    T = Pose3.from_xyz_yaw(3.0, 1.0, 0.0, np.pi / 2)
    peer = peer_with(T)
    share = square_share((1.0, 0.0))
    rep = merge_external(g, peer, share)
    assert rep.added_rooms == 1 and rep.added_planes == 4
    room = next(iter(g.rooms.values()))
    assert room.source == 2
    assert np.allclose(room.center, T.act([1.0, 0.0, 0.0])[:2])
    assert all(p.source == 2 for p in g.planes.values())
    n_factors = len(g.factors)
    again = merge_external(g, peer, share)
    assert again.total() == 0 and len(g.factors) == n_factors


def test_merge_associates_with_local_room():
    g = AgentGraph(1)
    ids = [g.add_plane(p) for _, p in square_share((5.0, 5.0)).planes]
    g.add_room([5.0, 5.0], ids)
    peer = peer_with(Pose3(t=[5.05, 4.95, 0.0]))
    rep = merge_external(g, peer, square_share((0.0, 0.0)))
    assert rep.associated_rooms == 1 and rep.associated_planes == 4
    assert rep.added_rooms == 0 and rep.added_planes == 0
    assert len(g.rooms) == 1 and len(g.planes) == 4
    assert all(f.robust for f in g.factors if f.source == 2)
    remove_external(g, 2)
    assert not any(f.source == 2 for f in g.factors)


# -- broker on a real run ------------------------------------------------------


def replay_broker(run, messages):
    """Fresh broker on agent 1's final local graph, fed the given messages."""
    a1 = run.agents[0]
    g = copy.deepcopy(a1.graph)
    remove_external(g, 2)
    b = GraphBroker(g, a1.broker.config)
    for rid, room in sorted(g.rooms.items()):
        if room.source is None and room.keyframe_ids:
            b.publish(rid)
    for m in messages:
        b.handle_message(m)
    return b


def from_agent(run, agent=2):
    return [m for m in run.messages if m.sender == agent]


def test_live_run_found_transform(small_run):
    a1, a2 = small_run.agents
    assert 2 in a1.broker.transforms() and 1 in a2.broker.transforms()
    assert any(r.source == 2 for r in a1.graph.rooms.values())


def test_order_and_duplicate_invariance(small_run):
    msgs = from_agent(small_run)
    ref = replay_broker(small_run, msgs).signature()
    assert ref["transforms"]
    rng = np.random.default_rng(3)
    orders = [msgs[::-1]]
    for _ in range(3):
        orders.append([msgs[i] for i in rng.permutation(len(msgs))])
    orders.append(msgs + msgs)
    orders.append([m for m in msgs for _ in range(3)])
    for order in orders:
        assert replay_broker(small_run, order).signature() == ref


def test_share_before_descriptor_is_buffered(small_run):
    msgs = from_agent(small_run)
    shares = [m for m in msgs if m.type == GRAPH_SHARE]
    descs = [m for m in msgs if m.type == ROOM_DESC]
    b = replay_broker(small_run, [])
    for m in shares:
        assert b.handle_message(m)[0].kind == "buffer"
    assert not any(r.source == 2 for r in b.graph.rooms.values())
    for m in descs:
        b.handle_message(m)
    assert b.transforms()
    assert any(r.source == 2 for r in b.graph.rooms.values())
    assert b.signature() == replay_broker(small_run, msgs).signature()


def test_refresh_is_idempotent(small_run):
    b = replay_broker(small_run, from_agent(small_run))
    sig = b.signature()
    n = len(b.graph.factors)
    b.refresh()
    b.refresh()
    assert b.signature() == sig and len(b.graph.factors) == n


def test_duplicates_are_reported(small_run):
    msgs = from_agent(small_run)
    b = replay_broker(small_run, msgs)
    for m in msgs:
        assert [a.kind for a in b.handle_message(m)] == ["duplicate"]


def test_hello_must_open_sequence():
    b = GraphBroker(AgentGraph(1))
    assert b.handle_message(BrokerMessage(HELLO, 2, 0, {"agent_id": 2}))[0].kind == "register"
    with pytest.raises(ProtocolViolation):
        b.handle_message(BrokerMessage(HELLO, 3, 4, {"agent_id": 3}))


def test_own_messages_are_ignored(small_run):
    b = replay_broker(small_run, [])
    before = b.signature()
    for m in from_agent(small_run, 1):
        assert b.handle_message(m) == []
    assert b.signature() == before and not b.peers


def test_publish_payload(small_run):
    a1 = small_run.agents[0]
    g = copy.deepcopy(a1.graph)
    rid = next(r for r, room in sorted(g.rooms.items()) if room.source is None and room.keyframe_ids)
    b = GraphBroker(g, BrokerConfig())
    desc, share = b.publish(rid, seq=5)
    assert (desc.type, desc.seq, share.type, share.seq) == (ROOM_DESC, 5, GRAPH_SHARE, 6)
    s = share.payload
    assert len(s["rooms"]) == 1 and len(s["planes"]) == 4 and len(s["edges"]) == 4
    p = desc.payload
    cloud = np.asarray(p["cloud"]).reshape(-1, 3)
    assert 0 < len(cloud) <= BrokerConfig().max_cloud_points
    assert not {"scan", "scans", "keyframes"} & set(p)
    # no keyframe scan travels verbatim
    for k in g.rooms[rid].keyframe_ids:
        assert len(g.keyframes[k].scan) > len(cloud)
    assert np.asarray(p["matrix"]).size == p["n_rings"] * p["n_sectors"]


def test_provenance_of_merged_vertices(small_run):
    a1 = small_run.agents[0]
    ext_rooms = [r for r in a1.graph.rooms.values() if r.source is not None]
    assert ext_rooms and all(r.source == 2 for r in ext_rooms)
    for f in a1.graph.factors:
        if f.source == 2:
            assert f.kind in ("prior", "room_plane")
            for kind, vid in f.vertices:
                pool = a1.graph.rooms if kind == "room" else a1.graph.planes
                assert vid in pool


def test_descriptor_free_mode_gates_transforms(small_run):
    a1 = small_run.agents[0]
    cfg = copy.deepcopy(a1.broker.config)
    cfg.use_descriptors = False
    g = copy.deepcopy(a1.graph)
    remove_external(g, 2)
    b = GraphBroker(g, cfg)
    for rid, room in sorted(g.rooms.items()):
        if room.source is None and room.keyframe_ids:
            b.publish(rid)
    for m in from_agent(small_run):
        b.handle_message(m)
    # agents start 1.4 rad apart; from an identity guess no pair gets through the gates
    pairs = b.peers[2].pairs
    assert pairs and all(res.alignment is not None for res in pairs.values())
    assert all(res.accepted is None for res in pairs.values())
    assert not b.transforms()
    assert not any(r.source == 2 for r in b.graph.rooms.values())


def test_graph_share_is_small_against_its_scans(small_run):
    for agent in small_run.agents:
        g = agent.graph
        for m in small_run.messages:
            if m.sender != agent.agent_id or m.type != GRAPH_SHARE:
                continue
            rid = m.payload["rooms"][0]["id"]
            raw = sum(RAW_POINT_BYTES * len(g.keyframes[k].scan) for k in g.rooms[rid].keyframe_ids)
            assert len(encode(m)) < 0.01 * raw


def test_unmatched_descriptor_is_stored_without_alignment(small_run):
    desc = next(m for m in from_agent(small_run) if m.type == ROOM_DESC)
    rng = np.random.default_rng(4)
    payload = dict(desc.payload, matrix=rng.uniform(0, 3, len(desc.payload["matrix"])).tolist())
    b = replay_broker(small_run, [])
    actions = b.handle_message(BrokerMessage(ROOM_DESC, 2, desc.seq, payload))
    assert [a.kind for a in actions] == ["store"]
    assert all(res.alignment is None for res in b.peers[2].pairs.values())
    assert payload["room_id"] in b.peers[2].descriptors
