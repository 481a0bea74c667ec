"""Dragonfly route enumeration and congestion-aware route selection.

Minimal routes take at most three switch-to-switch hops (local, global,
local); non-minimal routes detour through exactly one intermediate group and
take at most five.  Selection compares congestion-weighted costs in the
UGAL style: cost ranks by ``weight x (hops+1) x max queue occupancy`` along
the route, where non-minimal candidates carry a configurable bias weight.
Ties rank by the occupancy-free weight and then by candidate index, so the
choice is deterministic and invariant under uniform scaling of occupancies.

Route sets are recomputed by periodic sweeps: enumeration consults the last
swept snapshot of link states, not the live overlay, so a link that flaps
between sweeps keeps its pre-flap routability until the next sweep.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from slingsim.topology import GLOBAL, StateOverlay, Topology


class RoutingError(ValueError):
    pass


class NoRouteError(RoutingError):
    """All candidate links between the pair are down or in maintenance."""


@dataclass(frozen=True, slots=True)
class Route:
    """An ordered sequence of fabric links between two switches.

    ``dirs[i]`` is 0 when hop i travels from the link's a-side to its b-side.
    ``switches`` lists the visited switches (len(hops) + 1 entries).
    """

    hops: tuple[int, ...]
    dirs: tuple[int, ...]
    switches: tuple[int, ...]
    kind: str  # 'minimal' | 'nonminimal'
    intermediate_group: int | None = None

    @property
    def hop_count(self) -> int:
        return len(self.hops)


MINIMAL = "minimal"
NONMINIMAL = "nonminimal"


@dataclass(slots=True)
class RoutingPolicy:
    mode: str = "adaptive"  # 'minimal' | 'adaptive'
    nonminimal_bias: float = 2.0
    group_load_enabled: bool = False
    intermediate_samples: int = 4
    sweep_interval_s: float = 5.0

    def validate(self) -> None:
        if self.mode not in ("minimal", "adaptive"):
            raise RoutingError(f"unknown routing mode {self.mode!r}")
        if self.nonminimal_bias <= 0:
            raise RoutingError("nonminimal_bias must be > 0")
        if self.intermediate_samples < 1:
            raise RoutingError("intermediate_samples must be >= 1")


class CongestionView:
    """Read-only snapshot of directed queue occupancies and group loads."""

    __slots__ = ("time", "_occ", "_group_load")

    def __init__(self, time: float = 0.0,
                 occ: dict[tuple[int, int], float] | None = None,
                 group_load: dict[int, float] | None = None):
        self.time = time
        self._occ = occ or {}
        self._group_load = group_load or {}

    def occupancy(self, link: int, direction: int) -> float:
        return self._occ.get((link, direction), 0.0)

    def estimated_delay(self, link: int, direction: int, bw: float) -> float:
        return self.occupancy(link, direction) / bw if bw > 0 else 0.0

    def group_load(self, group: int) -> float:
        return self._group_load.get(group, 0.0)

    def route_max_occupancy(self, route: Route) -> float:
        occ = 0.0
        for link, d in zip(route.hops, route.dirs):
            v = self._occ.get((link, d), 0.0)
            if v > occ:
                occ = v
        return occ

    def scaled(self, factor: float) -> "CongestionView":
        return CongestionView(
            self.time,
            {k: v * factor for k, v in self._occ.items()},
            {k: v * factor for k, v in self._group_load.items()},
        )


class FlowTable:
    """Pinned routes for ordered traffic, keyed by (src, dst, class).

    An entry lives only while its pending-traffic count is positive.
    """

    def __init__(self):
        self._entries: dict[tuple, list] = {}  # key -> [route, pending]

    def pinned(self, key) -> Route | None:
        ent = self._entries.get(key)
        return ent[0] if ent and ent[1] > 0 else None

    def pin(self, key, route: Route) -> None:
        self._entries[key] = [route, 0]

    def add_pending(self, key) -> None:
        ent = self._entries.get(key)
        if ent is None:
            raise RoutingError(f"no pinned route for {key}")
        ent[1] += 1

    def release(self, key) -> None:
        ent = self._entries.get(key)
        if ent is None:
            return
        ent[1] -= 1
        if ent[1] <= 0:
            del self._entries[key]

    def drop(self, key) -> None:
        self._entries.pop(key, None)

    def __len__(self) -> int:
        return len(self._entries)


# -- enumeration ---------------------------------------------------------------


def _hop(topo: Topology, link_id: int, from_switch: int) -> tuple[int, int, int]:
    """(link, dir, to_switch) for traveling link_id out of from_switch."""
    link = topo.links[link_id]
    if link.switch_a == from_switch:
        return link_id, 0, link.switch_b
    return link_id, 1, link.switch_a


def _first_usable_local(topo: Topology, view, sa: int, sb: int) -> int | None:
    key = (sa, sb) if sa < sb else (sb, sa)
    for lid in topo.local_links.get(key, ()):
        if view.link_usable(lid):
            return lid
    return None


def _usable_globals(topo: Topology, view, ga: int, gb: int) -> list[int]:
    key = (ga, gb) if ga < gb else (gb, ga)
    return [l for l in topo.global_links.get(key, ()) if view.link_usable(l)]


def enumerate_minimal_routes(topo: Topology, view, src_switch: int,
                             dst_switch: int) -> tuple[Route, ...]:
    """All minimal routes between two switches under the given link-state view.

    Same switch yields one empty route; an intra-group pair yields one route
    per usable direct local link; an inter-group pair yields one route per
    usable global link between the groups (prefixed/suffixed with the direct
    local hop when the global port sits on another switch).

    Raises:
        NoRouteError: every candidate is down or in maintenance.
    """
    if src_switch == dst_switch:
        return (Route((), (), (src_switch,), MINIMAL),)
    ga = topo.group_of_switch(src_switch)
    gb = topo.group_of_switch(dst_switch)
    routes: list[Route] = []
    if ga == gb:
        key = (min(src_switch, dst_switch), max(src_switch, dst_switch))
        for lid in topo.local_links.get(key, ()):
            if not view.link_usable(lid):
                continue
            link, d, _ = _hop(topo, lid, src_switch)
            routes.append(Route((link,), (d,), (src_switch, dst_switch), MINIMAL))
    else:
        for gl in _usable_globals(topo, view, ga, gb):
            link = topo.links[gl]
            a_sw, b_sw = link.switch_a, link.switch_b
            if topo.group_of_switch(a_sw) != ga:
                a_sw, b_sw = b_sw, a_sw
            hops: list[int] = []
            dirs: list[int] = []
            sws: list[int] = [src_switch]
            if a_sw != src_switch:
                lid = _first_usable_local(topo, view, src_switch, a_sw)
                if lid is None:
                    continue
                _, d, _ = _hop(topo, lid, src_switch)
                hops.append(lid)
                dirs.append(d)
                sws.append(a_sw)
            _, d, _ = _hop(topo, gl, a_sw)
            hops.append(gl)
            dirs.append(d)
            sws.append(b_sw)
            if b_sw != dst_switch:
                lid = _first_usable_local(topo, view, b_sw, dst_switch)
                if lid is None:
                    continue
                _, d, _ = _hop(topo, lid, b_sw)
                hops.append(lid)
                dirs.append(d)
                sws.append(dst_switch)
            routes.append(Route(tuple(hops), tuple(dirs), tuple(sws), MINIMAL))
    if not routes:
        raise NoRouteError(
            f"no usable minimal route between switches {src_switch} and {dst_switch}")
    return tuple(routes)


def enumerate_nonminimal_routes(topo: Topology, view, src_switch: int,
                                dst_switch: int,
                                intermediate_group: int) -> tuple[Route, ...]:
    """All detour routes through ``intermediate_group`` (<= 5 hops).

    Raises:
        RoutingError: the intermediate group equals the source or destination
            group (precondition violation).
        NoRouteError: the intermediate group is unreachable on usable links.
    """
    ga = topo.group_of_switch(src_switch)
    gb = topo.group_of_switch(dst_switch)
    if intermediate_group in (ga, gb):
        raise RoutingError(
            f"intermediate group {intermediate_group} must differ from "
            f"source group {ga} and destination group {gb}")
    if not 0 <= intermediate_group < len(topo.group_kinds):
        raise RoutingError(f"unknown group {intermediate_group}")

    routes: list[Route] = []
    for gl_in in _usable_globals(topo, view, ga, intermediate_group):
        link_in = topo.links[gl_in]
        a_sw = link_in.switch_a if topo.group_of_switch(link_in.switch_a) == ga \
            else link_in.switch_b
        i1 = link_in.peer(a_sw)
        for gl_out in _usable_globals(topo, view, intermediate_group, gb):
            link_out = topo.links[gl_out]
            i2 = link_out.switch_a \
                if topo.group_of_switch(link_out.switch_a) == intermediate_group \
                else link_out.switch_b
            b_sw = link_out.peer(i2)
            hops: list[int] = []
            dirs: list[int] = []
            sws: list[int] = [src_switch]

            def push(lid: int) -> bool:
                _, d, to = _hop(topo, lid, sws[-1])
                hops.append(lid)
                dirs.append(d)
                sws.append(to)
                return True

            if a_sw != src_switch:
                lid = _first_usable_local(topo, view, src_switch, a_sw)
                if lid is None:
                    continue
                push(lid)
            push(gl_in)
            if i1 != i2:
                lid = _first_usable_local(topo, view, i1, i2)
                if lid is None:
                    continue
                push(lid)
            push(gl_out)
            if b_sw != dst_switch:
                lid = _first_usable_local(topo, view, b_sw, dst_switch)
                if lid is None:
                    continue
                push(lid)
            routes.append(Route(tuple(hops), tuple(dirs), tuple(sws),
                                NONMINIMAL, intermediate_group))
    if not routes:
        raise NoRouteError(
            f"intermediate group {intermediate_group} unreachable between "
            f"switches {src_switch} and {dst_switch}")
    return tuple(routes)


# -- swept tables -----------------------------------------------------------------


class RoutingTables:
    """Frozen link-usability snapshot plus memoized route sets.

    Produced by :func:`routing_sweep`; route enumeration against the tables
    reflects the fabric state at sweep time.
    """

    def __init__(self, topo: Topology, excluded: frozenset[int], generation: int = 0):
        self.topo = topo
        self.excluded = excluded
        self.generation = generation
        self._minimal: dict[tuple[int, int], tuple[Route, ...]] = {}
        self._nonminimal: dict[tuple[int, int, int], tuple[Route, ...]] = {}

    def link_usable(self, link: int) -> bool:
        return link not in self.excluded

    def minimal_routes(self, src_switch: int, dst_switch: int) -> tuple[Route, ...]:
        key = (src_switch, dst_switch)
        routes = self._minimal.get(key)
        if routes is None:
            routes = enumerate_minimal_routes(self.topo, self, src_switch, dst_switch)
            self._minimal[key] = routes
        return routes

    def nonminimal_routes(self, src_switch: int, dst_switch: int,
                          intermediate_group: int) -> tuple[Route, ...]:
        key = (src_switch, dst_switch, intermediate_group)
        routes = self._nonminimal.get(key)
        if routes is None:
            routes = enumerate_nonminimal_routes(
                self.topo, self, src_switch, dst_switch, intermediate_group)
            self._nonminimal[key] = routes
        return routes


def routing_sweep(topo: Topology, overlay: StateOverlay,
                  previous: RoutingTables | None = None) -> RoutingTables:
    """Recompute routing tables from the current overlay state.

    Returns ``previous`` unchanged when nothing changed since the last sweep,
    so repeated sweeps without fabric events are free and idempotent.
    """
    excluded = overlay.excluded_links()
    if previous is not None and previous.excluded == excluded:
        return previous
    gen = previous.generation + 1 if previous is not None else 0
    return RoutingTables(topo, excluded, gen)


# -- selection ----------------------------------------------------------------------


class Router:
    """Per-simulation route selector: swept tables + flow pinning + sampling RNG."""

    def __init__(self, topo: Topology, overlay: StateOverlay,
                 policy: RoutingPolicy | None = None, seed: int = 0):
        self.topo = topo
        self.overlay = overlay
        self.policy = policy or RoutingPolicy()
        self.policy.validate()
        self.tables = routing_sweep(topo, overlay)
        self.flow_table = FlowTable()
        self.rng = random.Random(seed)

    def sweep(self) -> RoutingTables:
        self.tables = routing_sweep(self.topo, self.overlay, self.tables)
        return self.tables

    # candidate intermediate groups, sampled without replacement
    def _sample_intermediates(self, ga: int, gb: int) -> list[int]:
        pool = [g for g in range(len(self.topo.group_kinds)) if g not in (ga, gb)]
        k = min(self.policy.intermediate_samples, len(pool))
        if k <= 0:
            return []
        if k == len(pool):
            return pool
        return self.rng.sample(pool, k)

    def select_route(self, src_endpoint: int, dst_endpoint: int,
                     traffic_class: int, ordered: bool,
                     view: CongestionView | None = None) -> Route:
        """Pick a route for one chunk (unordered) or one flow (ordered).

        Ordered traffic reuses the pinned route while the flow has pending
        traffic; otherwise the decision is made fresh and pinned.  Adaptive
        decisions rank candidates by congestion-weighted cost; minimal-only
        mode considers minimal candidates exclusively.
        """
        key = (src_endpoint, dst_endpoint, traffic_class)
        if ordered:
            pinned = self.flow_table.pinned(key)
            if pinned is not None:
                return pinned
        view = view or CongestionView()
        route = self._decide(src_endpoint, dst_endpoint, view)
        if ordered:
            self.flow_table.pin(key, route)
        return route

    def repin(self, src_endpoint: int, dst_endpoint: int, traffic_class: int,
              view: CongestionView | None = None) -> Route:
        """Drop a stale pin (e.g. its route lost a link) and decide afresh."""
        key = (src_endpoint, dst_endpoint, traffic_class)
        ent = self.flow_table._entries.get(key)
        pending = ent[1] if ent else 0
        self.flow_table.drop(key)
        route = self._decide(src_endpoint, dst_endpoint, view or CongestionView())
        self.flow_table.pin(key, route)
        self.flow_table._entries[key][1] = pending
        return route

    def route_usable(self, route: Route) -> bool:
        return all(self.tables.link_usable(l) for l in route.hops)

    def _decide(self, src_endpoint: int, dst_endpoint: int,
                view: CongestionView) -> Route:
        src_sw = self.topo.switch_of_endpoint(src_endpoint)
        dst_sw = self.topo.switch_of_endpoint(dst_endpoint)
        try:
            minimal = self.tables.minimal_routes(src_sw, dst_sw)
        except NoRouteError:
            if self.policy.mode == "minimal":
                raise
            minimal = ()

        if self.policy.mode == "minimal":
            return self._argmin(minimal, (), view)

        ga = self.topo.group_of_switch(src_sw)
        gb = self.topo.group_of_switch(dst_sw)
        sampled = self._sample_intermediates(ga, gb)
        if self.policy.group_load_enabled and sampled:
            best = min(sampled, key=lambda g: (view.group_load(g), g))
            sampled = [best]
        nonminimal: list[Route] = []
        for g in sampled:
            try:
                nonminimal.extend(self.tables.nonminimal_routes(src_sw, dst_sw, g))
            except NoRouteError:
                continue
        if not minimal and not nonminimal:
            raise NoRouteError(
                f"no usable route between endpoints {src_endpoint} and {dst_endpoint}")
        return self._argmin(minimal, tuple(nonminimal), view)

    def _argmin(self, minimal: tuple[Route, ...], nonminimal: tuple[Route, ...],
                view: CongestionView) -> Route:
        bias = self.policy.nonminimal_bias
        best = None
        best_key = None
        idx = 0
        for routes, weight in ((minimal, 1.0), (nonminimal, bias)):
            for r in routes:
                w = weight * (r.hop_count + 1)
                cost = (w * view.route_max_occupancy(r), w, idx)
                if best_key is None or cost < best_key:
                    best_key = cost
                    best = r
                idx += 1
        if best is None:
            raise NoRouteError("no candidate routes")
        return best
