"""Multi-agent semantic graph SLAM: room descriptors, inter-agent alignment and graph merging."""

from .agent import Agent, AgentConfig, ate_rmse
from .broker import BrokerConfig, GraphBroker, SharedVertexSet, merge_external, publish_room, transform_plane, transform_room
from .descriptor import DescriptorConfig, RoomDescriptor, describe_room, sc_distance, scan_context
from .geometry import Pose3
from .optimizer import OptimizerConfig, optimize
from .registration import RegistrationConfig, build_voxel_gaussians, vgicp_align
from .scenario import (
    RunReport,
    Scenario,
    benchmark_scenario,
    compare,
    run,
    run_agents,
    single_agent_scenario,
    symmetric_scenario,
)
from .sgraph import AgentGraph, PlaneParam
from .transport import BrokerMessage, InMemoryBus, LinkModel, decode, encode

__version__ = "0.1.0"
