"""Shared fixtures: small dragonfly configurations reused across suites."""

import pytest

from slingsim.topology import TopologySpec, build_topology


def make_spec(**kw) -> TopologySpec:
    base = dict(
        compute_groups=4, storage_groups=0, service_groups=0,
        switches_per_group=4, nodes_per_switch=1, nics_per_node=2,
        local_links_per_switch_pair=1, global_links_per_compute_pair=1,
        global_links_compute_to_noncompute=1, global_links_per_storage_pair=2,
    )
    base.update(kw)
    return TopologySpec(**base)


# the fabric used by the throughput-style acceptance runs: 8 groups of
# 4 switches, 2 nodes x 2 NICs per switch (128 endpoints), 2 global links
# per group pair
def bench_spec(**kw) -> TopologySpec:
    base = dict(
        compute_groups=8, storage_groups=0, service_groups=0,
        switches_per_group=4, nodes_per_switch=2, nics_per_node=2,
        local_links_per_switch_pair=1, global_links_per_compute_pair=2,
        global_links_compute_to_noncompute=2, global_links_per_storage_pair=2,
    )
    base.update(kw)
    return TopologySpec(**base)


@pytest.fixture(scope="session")
def small_topo():
    return build_topology(make_spec())


@pytest.fixture(scope="session")
def bench_topo():
    return build_topology(bench_spec())
