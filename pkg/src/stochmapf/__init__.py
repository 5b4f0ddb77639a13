"""Online multi-agent path finding under gamma-distributed travel delays."""
from .delay_model import GammaParams, PosteriorState, PriorConfig, map_estimate, observe
from .graph_model import AgentTask, Command, Graph, Instance, Path, build_graph, generate_instance
from .kernels import BACKEND
from .planner import FixedCommand, OnlineInstance, PlannerConfig, high_level_search
from .simulator import SimConfig, init_sim, simulate

__version__ = "0.1.0"

__all__ = [
    "AgentTask", "BACKEND", "Command", "FixedCommand", "GammaParams", "Graph", "Instance",
    "OnlineInstance", "Path", "PlannerConfig", "PosteriorState", "PriorConfig", "SimConfig",
    "build_graph", "generate_instance", "high_level_search", "init_sim", "map_estimate", "observe",
    "simulate",
]
