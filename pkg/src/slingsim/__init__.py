"""slingsim: flow-level dragonfly interconnect simulator and validation harness."""

from slingsim.topology import (
    FabricAddress,
    LinkState,
    StateOverlay,
    Topology,
    TopologyError,
    TopologyMetrics,
    TopologySpec,
    aurora_spec,
    build_topology,
    endpoint_address,
    endpoint_at_address,
    load_spec,
    set_link_state,
    topology_metrics,
)

__version__ = "0.1.0"
