"""Directed road networks carrying multi-commodity flow.

A network is a finite set of nodes joined by directed unit-length links.
Traffic is split into commodities (routed or habit-driven, each bound for
one destination node).  At every junction a time-dependent row of turning
fractions distributes arriving flux over the outgoing links, and source
schedules inject new demand directly onto links.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CycleDetected, Disconnected, SplitRowInvalid

Link = tuple[int, int]

#: tolerance for turning-fraction row sums; rows further from 1 are refused,
#: never renormalized silently
ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Commodity:
    """One flow class bound for a single destination node.

    ``group`` is ``"routed"`` for populations steered by an information
    policy and ``"non_routed"`` for habit-driven background traffic.
    """

    group: str
    destination: int

    def __post_init__(self) -> None:
        if self.group not in ("routed", "non_routed"):
            raise ValueError(f"unknown commodity group {self.group!r}")

    def label(self) -> str:
        return f"{self.group}->{self.destination}"


class PiecewiseConstant:
    """Right-open step function of time, zero outside its segments."""

    def __init__(self, segments: Iterable[tuple[float, float, float]]):
        segs = sorted((float(a), float(b), float(v)) for a, b, v in segments)
        for a, b, _ in segs:
            if not b > a:
                raise ValueError(f"segment [{a}, {b}) is empty")
        for (_, b0, _), (a1, _, _) in zip(segs, segs[1:]):
            if a1 < b0 - 1e-15:
                raise ValueError("segments overlap")
        self.segments = segs
        self._starts = np.array([s[0] for s in segs])
        self._ends = np.array([s[1] for s in segs])
        self._values = np.array([s[2] for s in segs])

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls([(-math.inf, math.inf, value)])

    @classmethod
    def zero(cls) -> "PiecewiseConstant":
        return cls([(-math.inf, math.inf, 0.0)])

    def sample(self, t):
        """Value at time(s) ``t``; scalar in, scalar out."""
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self._starts, t_arr, side="right") - 1
        idx_c = np.clip(idx, 0, len(self._starts) - 1)
        inside = (idx >= 0) & (t_arr >= self._starts[idx_c]) & (t_arr < self._ends[idx_c])
        out = np.where(inside, self._values[idx_c], 0.0)
        return out if out.ndim else float(out)

    def integral(self, t0: float, t1: float) -> float:
        """Exact integral over ``[t0, t1]``."""
        lo = np.maximum(self._starts, t0)
        hi = np.minimum(self._ends, t1)
        return float(np.sum(np.clip(hi - lo, 0.0, None) * self._values))

    def scaled(self, factor: float) -> "PiecewiseConstant":
        return PiecewiseConstant([(a, b, v * factor) for a, b, v in self.segments])

    def covers(self, t: float) -> bool:
        """True when some segment contains ``t`` (data exists there)."""
        return any(a <= t < b for a, b, _ in self.segments)

    def is_nonnegative(self) -> bool:
        return bool(np.all(self._values >= 0.0))


class RoadNetwork:
    """Immutable directed graph of unit-length links.

    Nodes are integers; links are ordered node pairs (no self loops, no
    parallel links).  Destination reachability is memoized because routing
    validity checks consult it for every junction row.
    """

    def __init__(self, nodes: Iterable[int], links: Iterable[Link]):
        self.nodes: tuple[int, ...] = tuple(sorted(set(int(v) for v in nodes)))
        node_set = set(self.nodes)
        seen: list[Link] = []
        for tail, head in links:
            link = (int(tail), int(head))
            if link[0] == link[1]:
                raise ValueError(f"self loop at node {link[0]}")
            if link[0] not in node_set or link[1] not in node_set:
                raise ValueError(f"link {link} uses an unknown node")
            if link in seen:
                raise ValueError(f"duplicate link {link}")
            seen.append(link)
        self.links: tuple[Link, ...] = tuple(seen)
        self._out: dict[int, tuple[Link, ...]] = {v: () for v in self.nodes}
        self._in: dict[int, tuple[Link, ...]] = {v: () for v in self.nodes}
        for link in self.links:
            self._out[link[0]] = self._out[link[0]] + (link,)
            self._in[link[1]] = self._in[link[1]] + (link,)
        self._reach_cache: dict[int, frozenset[int]] = {}

    def out_links(self, node: int) -> tuple[Link, ...]:
        return self._out[node]

    def in_links(self, node: int) -> tuple[Link, ...]:
        return self._in[node]

    def reaches(self, destination: int) -> frozenset[int]:
        """Nodes from which ``destination`` is reachable (itself included)."""
        cached = self._reach_cache.get(destination)
        if cached is not None:
            return cached
        seen = {destination}
        stack = [destination]
        while stack:
            v = stack.pop()
            for tail, _ in self._in[v]:
                if tail not in seen:
                    seen.add(tail)
                    stack.append(tail)
        result = frozenset(seen)
        self._reach_cache[destination] = result
        return result

    def link_leads_to(self, link: Link, destination: int) -> bool:
        """True when traffic on ``link`` can still arrive at ``destination``."""
        return link[1] == destination or link[1] in self.reaches(destination)

    def __repr__(self) -> str:
        return f"RoadNetwork(nodes={len(self.nodes)}, links={len(self.links)})"


def validate_acyclic(net: RoadNetwork) -> list[Link]:
    """Check connectivity and acyclicity; return links in topological order.

    The order lists every link after all links feeding its tail node.
    Raises :class:`Disconnected` or :class:`CycleDetected` (with one witness
    cycle attached).
    """
    if not net.nodes:
        raise Disconnected("network has no nodes")
    # weak connectivity
    seen = {net.nodes[0]}
    stack = [net.nodes[0]]
    while stack:
        v = stack.pop()
        for link in net.out_links(v) + net.in_links(v):
            for w in link:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
    if len(seen) != len(net.nodes):
        missing = sorted(set(net.nodes) - seen)
        raise Disconnected(f"nodes unreachable from node {net.nodes[0]}: {missing}")

    indeg = {v: len(net.in_links(v)) for v in net.nodes}
    frontier = [v for v in net.nodes if indeg[v] == 0]
    order: list[int] = []
    while frontier:
        frontier.sort()
        v = frontier.pop(0)
        order.append(v)
        for _, head in net.out_links(v):
            indeg[head] -= 1
            if indeg[head] == 0:
                frontier.append(head)
    if len(order) != len(net.nodes):
        raise CycleDetected(_find_cycle(net, {v for v in net.nodes if indeg[v] > 0}))

    rank = {v: i for i, v in enumerate(order)}
    return sorted(net.links, key=lambda link: (rank[link[0]], rank[link[1]]))


def _find_cycle(net: RoadNetwork, residual: set[int]) -> list[int]:
    """Walk forward inside the residual node set until a node repeats."""
    start = min(residual)
    path = [start]
    index = {start: 0}
    v = start
    while True:
        v = next(head for _, head in net.out_links(v) if head in residual)
        if v in index:
            return path[index[v]:] + [v]
        index[v] = len(path)
        path.append(v)


class SplitSchedule:
    """Turning-fraction rows per (junction, commodity) over time.

    ``rows`` maps ``(node, commodity)`` to ``{out_link: PiecewiseConstant}``.
    Missing entries sample as zero.  Rows must sum to one over the outgoing
    links of the junction wherever the commodity can be present; rows that
    do not are refused, never renormalized.
    """

    def __init__(self, rows: Mapping[tuple[int, Commodity], Mapping[Link, PiecewiseConstant]]):
        self._rows = {key: dict(entry) for key, entry in rows.items()}

    @classmethod
    def empty(cls) -> "SplitSchedule":
        return cls({})

    def entries(self, node: int, commodity: Commodity) -> dict[Link, PiecewiseConstant]:
        return self._rows.get((node, commodity), {})

    def has_row(self, node: int, commodity: Commodity) -> bool:
        return bool(self._rows.get((node, commodity)))

    def row(self, node: int, commodity: Commodity, t: float,
            out_links: Sequence[Link]) -> dict[Link, float]:
        """Sampled row at time ``t``; validates simplex membership."""
        entry = self.entries(node, commodity)
        vals = {a: (entry[a].sample(t) if a in entry else 0.0) for a in out_links}
        _check_row(vals, node, commodity, t)
        return vals

    def grid_row(self, node: int, commodity: Commodity, times: np.ndarray,
                 out_links: Sequence[Link]) -> np.ndarray:
        """Row sampled on a whole time grid, shape ``(n_out, len(times))``."""
        entry = self.entries(node, commodity)
        out = np.zeros((len(out_links), len(times)))
        for i, a in enumerate(out_links):
            if a in entry:
                out[i] = entry[a].sample(times)
        sums = out.sum(axis=0)
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if np.any(bad) or np.any(out < -ROW_SUM_TOL):
            k = int(np.argmax(bad)) if np.any(bad) else 0
            raise SplitRowInvalid(
                f"row at node {node} for {commodity.label()} sums to "
                f"{sums[k]:.17g} at t={times[k]:.6g} (must be 1 within {ROW_SUM_TOL})")
        return out

    def validate(self, net: RoadNetwork, commodities: Sequence[Commodity],
                 times: np.ndarray) -> None:
        """Refuse positive fractions on links that cannot reach the destination.

        Also checks simplex membership at the supplied sample times for every
        junction where the commodity can appear.
        """
        for commodity in commodities:
            reach = net.reaches(commodity.destination)
            for node in net.nodes:
                if node == commodity.destination or node not in reach:
                    # absorbed at the destination; unreachable nodes carry no flow
                    entry = self.entries(node, commodity)
                    for a, series in entry.items():
                        if np.any(np.asarray(series.sample(times)) > ROW_SUM_TOL):
                            raise SplitRowInvalid(
                                f"positive fraction at node {node} for {commodity.label()} "
                                "but the destination is not reachable from there")
                    continue
                for a in net.out_links(node):
                    if not net.link_leads_to(a, commodity.destination):
                        entry = self.entries(node, commodity)
                        if a in entry and np.any(np.asarray(entry[a].sample(times)) > ROW_SUM_TOL):
                            raise SplitRowInvalid(
                                f"fraction on link {a} routes {commodity.label()} "
                                "toward a node that cannot reach the destination")
                self.grid_row(node, commodity, times, net.out_links(node))


def _check_row(vals: Mapping[Link, float], node: int, commodity: Commodity,
               t: float) -> None:
    total = sum(vals.values())
    if abs(total - 1.0) > ROW_SUM_TOL or any(v < -ROW_SUM_TOL for v in vals.values()):
        raise SplitRowInvalid(
            f"row at node {node} for {commodity.label()} sums to {total:.17g} "
            f"at t={t:.6g} (must be 1 within {ROW_SUM_TOL})")


class SourceSchedule:
    """Demand injected directly onto links, per commodity.

    ``entries`` maps ``(node, link, commodity)`` to a nonnegative flux
    series; ``node`` must be the tail of ``link``.
    """

    def __init__(self, entries: Mapping[tuple[int, Link, Commodity], PiecewiseConstant]):
        self._entries: dict[tuple[int, Link, Commodity], PiecewiseConstant] = {}
        for (node, link, commodity), series in entries.items():
            if link[0] != node:
                raise ValueError(f"source at node {node} must feed a link leaving it, got {link}")
            if not series.is_nonnegative():
                raise ValueError(f"negative source rate at node {node} on {link}")
            self._entries[(node, link, commodity)] = series

    @classmethod
    def empty(cls) -> "SourceSchedule":
        return cls({})

    def items(self):
        return self._entries.items()

    def rate(self, node: int, link: Link, commodity: Commodity, t: float) -> float:
        series = self._entries.get((node, link, commodity))
        return 0.0 if series is None else float(series.sample(t))

    def grid(self, link: Link, commodity: Commodity, times: np.ndarray) -> np.ndarray:
        """Total injection onto ``link`` for ``commodity`` over a time grid."""
        out = np.zeros(len(times))
        for (node, lk, com), series in self._entries.items():
            if lk == link and com == commodity:
                out += series.sample(times)
        return out

    def total(self, commodity: Commodity, t0: float, t1: float) -> float:
        return sum(series.integral(t0, t1)
                   for (_, _, com), series in self._entries.items() if com == commodity)

    def validate(self, net: RoadNetwork, commodities: Sequence[Commodity]) -> None:
        """Sources must feed links from which the destination stays reachable."""
        for (node, link, commodity), _ in self._entries.items():
            if link not in net.links:
                raise ValueError(f"source on unknown link {link}")
            if commodity not in commodities:
                raise ValueError(f"source for undeclared commodity {commodity.label()}")
            if not net.link_leads_to(link, commodity.destination):
                raise SplitRowInvalid(
                    f"source on link {link} strands {commodity.label()}: "
                    "destination unreachable from the link head")


def junction_inflows(net: RoadNetwork, node: int, t: float,
                     outfluxes: Mapping[Link, float], splits: SplitSchedule,
                     sources: SourceSchedule, commodity: Commodity) -> dict[Link, float]:
    """Conservation exchange at one junction for one commodity.

    ``outfluxes`` holds the flux arriving on each in-link at time ``t``.
    Returns the flux departing on each out-link: source injection plus the
    turning fraction applied to the total arriving flux.  At the commodity's
    destination the arriving flux is absorbed and the result only carries
    source injections (normally none).
    """
    total_in = float(sum(outfluxes.get(a, 0.0) for a in net.in_links(node)))
    out = net.out_links(node)
    if node == commodity.destination or not out:
        return {a: sources.rate(node, a, commodity, t) for a in out}
    row = splits.row(node, commodity, t, out)
    return {a: sources.rate(node, a, commodity, t) + row[a] * total_in for a in out}
