"""Scenario definition, the multi-agent runner and run comparison."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .agent import Agent, AgentConfig, ate_rmse
from .broker import BrokerConfig
from .descriptor import DescriptorConfig, voxel_downsample
from .errors import InvalidScenario, MismatchedWorlds, PeerUnreachable
from .geometry import Pose3, pose_error
from .optimizer import OptimizerConfig
from .registration import RegistrationConfig
from .sgraph import ExtractionConfig, GraphConfig, RoomConfig
from .transport import GRAPH_SHARE, ROOM_DESC, ByteCounter, InMemoryBus, LinkModel, SocketEndpoint, base_port
from .world import (
    Floorplan,
    LidarConfig,
    NoiseModel,
    TrajectoryScript,
    generate_floorplan,
    plan_route,
    symmetric_corridor_floorplan,
)

_SECTIONS = {
    "extraction": ExtractionConfig,
    "room": RoomConfig,
    "graph": GraphConfig,
    "optimizer": OptimizerConfig,
    "descriptor": DescriptorConfig,
    "registration": RegistrationConfig,
    "broker": BrokerConfig,
    "lidar": LidarConfig,
}


@dataclass
class AgentSpec:
    agent_id: int
    rooms: list[int] = field(default_factory=list)
    waypoints: Optional[list[tuple[float, float]]] = None
    start_yaw: float = 0.0


@dataclass
class Scenario:
    """Everything a run needs. ``floorplan`` is one of
    ``{"generate": {...}}``, ``{"symmetric": {...}}``, ``{"file": path}`` or an
    inline floorplan dictionary."""

    name: str
    floorplan: dict
    agents: list[AgentSpec]
    noise: dict = field(default_factory=dict)
    seed: int = 0
    transport: str = "mem"
    descriptors: bool = True
    communicate: bool = True
    link: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    base_dir: str = "."

    # -- construction ----------------------------------------------------
    def build_floorplan(self) -> Floorplan:
        fp = self.floorplan
        try:
            if "generate" in fp:
                return generate_floorplan(**fp["generate"])
            if "symmetric" in fp:
                return symmetric_corridor_floorplan(**fp["symmetric"])
            if "file" in fp:
                path = Path(self.base_dir) / fp["file"]
                if not path.exists():
                    raise InvalidScenario(f"floorplan.file: {path} does not exist")
                return Floorplan.from_dict(json.loads(path.read_text()))
            return Floorplan.from_dict(fp)
        except InvalidScenario:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenario(f"floorplan: {exc}") from None

    def noise_model(self) -> NoiseModel:
        n = self.noise
        try:
            return NoiseModel(
                tuple(n.get("trans_sigma", (0.01, 0.01, 0.0))),
                float(np.deg2rad(n.get("yaw_sigma_deg", 0.2))),
                float(n.get("range_sigma", 0.01)),
            )
        except (TypeError, ValueError) as exc:
            raise InvalidScenario(f"noise: {exc}") from None

    def agent_config(self) -> AgentConfig:
        sections = {}
        for name, cls in _SECTIONS.items():
            values = self.config.get(name, {})
            if not isinstance(values, dict):
                raise InvalidScenario(f"config.{name}: expected an object")
            known = {f.name for f in fields(cls)}
            unknown = set(values) - known
            if unknown:
                raise InvalidScenario(f"config.{name}: unknown field(s) {sorted(unknown)}")
            sections[name] = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
        extra = set(self.config) - set(_SECTIONS) - {"optimize_every"}
        if extra:
            raise InvalidScenario(f"config: unknown section(s) {sorted(extra)}")
        broker = sections["broker"]
        broker.descriptor = sections["descriptor"]
        broker.registration = sections["registration"]
        broker.use_descriptors = self.descriptors
        return AgentConfig(
            extraction=sections["extraction"],
            room=sections["room"],
            graph=sections["graph"],
            optimizer=sections["optimizer"],
            broker=broker,
            lidar=sections["lidar"],
            optimize_every=int(self.config.get("optimize_every", 10)),
        )

    def scripts(self, plan: Floorplan) -> list[TrajectoryScript]:
        out = []
        for i, a in enumerate(self.agents):
            if a.waypoints:
                wps = [tuple(map(float, w)) for w in a.waypoints]
            else:
                bad = [r for r in a.rooms if not 0 <= r < len(plan.rooms)]
                if not a.rooms or bad:
                    raise InvalidScenario(f"agents[{i}].rooms: invalid room list {a.rooms}")
                wps = plan_route(plan, a.rooms)
            out.append(TrajectoryScript(a.agent_id, wps, a.start_yaw, list(a.rooms)))
        return out

    def validate(self) -> None:
        if not self.agents:
            raise InvalidScenario("agents: at least one agent is required")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise InvalidScenario("agents: agent ids must be unique")
        if self.transport not in ("mem", "socket"):
            raise InvalidScenario(f"transport: expected 'mem' or 'socket', got {self.transport!r}")

    # -- (de)serialization -----------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> Scenario:
        if not isinstance(d, dict):
            raise InvalidScenario("scenario must be a JSON object")
        for key in ("name", "floorplan", "agents"):
            if key not in d:
                raise InvalidScenario(f"{key}: missing required field")
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise InvalidScenario(f"unknown field(s) {sorted(unknown)}")
        agents = []
        for i, a in enumerate(d["agents"]):
            try:
                agents.append(AgentSpec(**a))
            except TypeError as exc:
                raise InvalidScenario(f"agents[{i}]: {exc}") from None
        sc = cls(**{**d, "agents": agents, "base_dir": base_dir})
        sc.validate()
        return sc

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise InvalidScenario(f"scenario file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise InvalidScenario(f"scenario file {path}: {exc}") from None
        return cls.from_dict(data, str(path.parent))


# ---------------------------------------------------------------------------
# stock scenarios
# ---------------------------------------------------------------------------

BENCHMARK_FLOOR = {"generate": {"n_rooms": 6, "seed": 7, "clutter": 3}}


def benchmark_scenario(seed: int = 0, descriptors: bool = True, communicate: bool = True) -> Scenario:
    """Six rooms, two kidnapped agents sharing room 1."""
    return Scenario(
        "benchmark",
        BENCHMARK_FLOOR,
        [AgentSpec(1, [2, 5, 4, 1], start_yaw=0.3), AgentSpec(2, [0, 3, 1], start_yaw=-1.1)],
        seed=seed,
        descriptors=descriptors,
        communicate=communicate,
    )


def single_agent_scenario(seed: int = 0) -> Scenario:
    """One agent covering the benchmark floor alone."""
    return Scenario("benchmark-single", BENCHMARK_FLOOR, [AgentSpec(1, [2, 5, 4, 1, 0, 3], start_yaw=0.3)], seed=seed)


def symmetric_scenario(seed: int = 0) -> Scenario:
    """Four identical rooms around a corridor; only furniture tells them apart."""
    return Scenario(
        "symmetric",
        {"symmetric": {"clutter": 4}},
        [AgentSpec(1, [0, 1, 2], start_yaw=0.4), AgentSpec(2, [3, 2], start_yaw=-0.9)],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    scenario: str
    seed: int
    floorplan_digest: str
    ticks: int
    coverage_ticks: Optional[int]
    agents: dict[str, dict]
    transforms: list[dict]
    bytes_sent: dict
    semantic_bytes: int
    raw_scan_bytes: int
    room_traces: dict[str, list[int]]

    @property
    def semantic_ratio(self) -> float:
        return self.semantic_bytes / self.raw_scan_bytes if self.raw_scan_bytes else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["semantic_ratio"] = self.semantic_ratio
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), sort_keys=True, indent=1)


def _plain(obj: Any):
    if is_dataclass(obj):
        obj = asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def floorplan_digest(plan: Floorplan) -> str:
    return hashlib.sha256(plan.to_json().encode()).hexdigest()[:16]


class _SocketNet:
    """Agents on loopback sockets, synchronized per tick by frame counts."""

    def __init__(self, ids: list[int], timeout: float = 10.0):
        self.counter = ByteCounter()
        port = base_port(0)
        self.ends = {a: SocketEndpoint(a, port=(port + k) if port else 0, counter=self.counter) for k, a in enumerate(ids)}
        for a, e in self.ends.items():
            for b, f in self.ends.items():
                if a != b:
                    e.add_peer(b, f.host, f.port)
        self.expected = {a: 0 for a in ids}
        self.timeout = timeout

    def send(self, m) -> None:
        n = self.ends[m.sender].send(m)
        for a in self.ends:
            if a != m.sender:
                self.expected[a] += 1
        assert n == len(self.ends) - 1

    def deliver(self, agent_id: int):
        end = self.ends[agent_id]
        deadline = time.monotonic() + self.timeout
        while end.received < self.expected[agent_id]:
            if time.monotonic() > deadline:
                raise PeerUnreachable(f"agent {agent_id} is missing frames")
            time.sleep(0.001)
        return end.deliver()

    def close(self) -> None:
        for e in self.ends.values():
            e.close()


@dataclass
class RunResult:
    report: RunReport
    agents: list[Agent]
    messages: list  # every message sent, in send order


def run_agents(scenario: Scenario, transport: str | None = None, verbose: bool = False) -> RunResult:
    """Run every agent tick by tick, exchange messages, then settle."""
    scenario.validate()
    plan = scenario.build_floorplan()
    noise = scenario.noise_model()
    cfg = scenario.agent_config()
    scripts = scenario.scripts(plan)
    agents = [Agent(plan, s, noise, cfg, scenario.seed, scenario.communicate) for s in scripts]
    mode = transport or scenario.transport
    if mode == "mem":
        net = InMemoryBus(LinkModel(**scenario.link))
        for a in agents:
            net.register(a.agent_id)
    elif mode == "socket":
        net = _SocketNet([a.agent_id for a in agents])
    else:
        raise InvalidScenario(f"transport: unknown mode {mode!r}")
    sent = []

    def exchange(outgoing):
        for m in outgoing:
            net.send(m)
            sent.append(m)
        for a in agents:
            a.receive(net.deliver(a.agent_id))

    all_rooms = set(range(len(plan.rooms)))
    coverage = None
    t0 = time.perf_counter()
    try:
        exchange([m for a in agents for m in a.hello()])
        tick = 0
        finished: set[int] = set()
        while len(finished) < len(agents):
            tick += 1
            out = []
            for a in agents:
                out += a.step()
                if a.done and a.agent_id not in finished:
                    finished.add(a.agent_id)
                    out += a.finish()
            exchange(out)
            if coverage is None and all(a.covered_rooms() >= all_rooms for a in agents):
                coverage = tick
            if verbose and tick % 25 == 0:
                print(f"tick {tick}: {time.perf_counter() - t0:.1f}s", flush=True)
        for a in agents:
            a.settle()
        if coverage is None and all(a.covered_rooms() >= all_rooms for a in agents):
            coverage = tick
    finally:
        if mode == "socket":
            net.close()

    report = _report(scenario, plan, agents, net.counter, tick, coverage)
    return RunResult(report, agents, sent)


def run(
    scenario: Scenario,
    out_dir: str | Path | None = None,
    transport: str | None = None,
    verbose: bool = False,
) -> RunReport:
    """Run a scenario; writes artifacts when ``out_dir`` is given."""
    result = run_agents(scenario, transport, verbose)
    if out_dir is not None:
        write_artifacts(Path(out_dir), result.report, result.agents)
    return result.report


def transform_truth(a: Agent, b: Agent) -> Pose3:
    """Ground truth of b's map frame in a's map frame."""
    return a.start.inverse() @ b.start


def _report(scenario, plan, agents, counter: ByteCounter, ticks: int, coverage) -> RunReport:
    per_agent = {}
    for a in agents:
        final = a.reports[-1].to_dict() if a.reports else None
        per_agent[str(a.agent_id)] = {
            "ate_rmse": ate_rmse(a.estimates(), a.truth_in_map()),
            "keyframes": len(a.graph.keyframes),
            "census": a.graph.census(),
            "covered_rooms": sorted(a.covered_rooms()),
            "raw_scan_bytes": a.raw_scan_bytes,
            "optimizations": len(a.reports),
            "final_optimization": final,
        }
    transforms = []
    by_id = {a.agent_id: a for a in agents}
    for a in agents:
        for peer, T in a.broker.transforms().items():
            gt = transform_truth(a, by_id[peer])
            et, er = pose_error(T.transform, gt)
            transforms.append(
                {
                    "local": a.agent_id,
                    "remote": peer,
                    "transform": T.transform.to_dict(),
                    "fitness": T.fitness,
                    "inlier_fraction": T.inlier_fraction,
                    "rooms": [T.local_room, T.remote_room],
                    "error_m": et,
                    "error_deg": float(np.degrees(er)),
                    "yaw_error_deg": float(np.degrees(abs((T.transform.yaw - gt.yaw + np.pi) % (2 * np.pi) - np.pi))),
                }
            )
    summary = counter.summary()
    semantic = sum(summary.get(k, {}).get("bytes", 0) for k in (ROOM_DESC, GRAPH_SHARE))
    return RunReport(
        scenario=scenario.name,
        seed=scenario.seed,
        floorplan_digest=floorplan_digest(plan),
        ticks=ticks,
        coverage_ticks=coverage,
        agents=per_agent,
        transforms=transforms,
        bytes_sent=summary,
        semantic_bytes=semantic,
        raw_scan_bytes=sum(a.raw_scan_bytes for a in agents),
        room_traces={str(a.agent_id): list(map(int, a.room_trace)) for a in agents},
    )


def write_artifacts(out: Path, report: RunReport, agents: list[Agent]) -> None:
    """report.json, per-agent graph JSON, map points (x y z) and planes."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    for a in agents:
        g = a.graph
        (out / f"graph_agent{a.agent_id}.json").write_text(json.dumps(_plain(g.to_json()), sort_keys=True))
        clouds = [g.keyframes[k].pose.act(g.keyframes[k].scan) for k in sorted(g.keyframes)]
        pts = voxel_downsample(np.vstack(clouds), 0.1) if clouds else np.zeros((0, 3))
        np.savetxt(out / f"map_agent{a.agent_id}_points.xyz", pts, fmt="%.4f")
        planes = [
            {"id": p.id, "n": p.param.n.tolist(), "d": p.param.d, "source": p.source}
            for p in sorted(g.planes.values(), key=lambda p: p.id)
        ]
        (out / f"map_agent{a.agent_id}_planes.json").write_text(json.dumps(planes, sort_keys=True))


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------


def overlap_fraction(report: RunReport) -> float:
    """Share of agent ticks spent in rooms that more than one agent visits."""
    visits: dict[int, set[str]] = {}
    for agent, trace in report.room_traces.items():
        for r in trace:
            if r >= 0:
                visits.setdefault(r, set()).add(agent)
    shared = {r for r, who in visits.items() if len(who) > 1}
    total = sum(len(t) for t in report.room_traces.values())
    inside = sum(1 for t in report.room_traces.values() for r in t if r in shared)
    return inside / total if total else 0.0


def compare(single: RunReport, multi: RunReport, threshold: float = 0.75) -> dict:
    """Coverage-tick ratio multi / single and the overlap fraction of the multi run."""
    if single.floorplan_digest != multi.floorplan_digest:
        raise MismatchedWorlds("reports were produced on different floorplans")
    if not single.coverage_ticks or not multi.coverage_ticks:
        raise MismatchedWorlds("both runs must reach full coverage")
    ratio = multi.coverage_ticks / single.coverage_ticks
    return {
        "single_ticks": single.coverage_ticks,
        "multi_ticks": multi.coverage_ticks,
        "ratio": ratio,
        "overlap_fraction": overlap_fraction(multi),
        "below_threshold": ratio < threshold,
        "threshold": threshold,
    }
