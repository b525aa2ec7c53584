from .engine import NS_PER_MS, NS_PER_S, NS_PER_US, SimulationError, Simulator, seconds_to_ns
from .network import (
    Connection,
    Leg,
    LinkDirection,
    Network,
    RoutingError,
    SrPolicy,
    TrafficLog,
    Train,
    build_topology,
)
from .topology import (
    ConfigError,
    DisconnectedGraph,
    LinkSpec,
    NodeSpec,
    Resources,
    ScheduleSpec,
    TopologyConfig,
    ten_node_topology,
    load_topology,
    parse_topology,
    shortest_path,
)
