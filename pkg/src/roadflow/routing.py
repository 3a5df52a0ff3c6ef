"""Split-schedule construction from information policies, and day-to-day
equilibration.

Routed traffic picks paths by a logit rule over path costs evaluated on the
simulated state (current, delayed, forecast, surcharged, or read from a
historical table); habit-driven traffic follows fixed or mildly perturbed
rows.  Path choice probabilities at the origin are folded into per-junction
turning rows as conditional next-link frequencies, so the same plan drives
the junction exchange of the simulator.  Repeated simulation with averaged
row updates serves as the equilibration loop; the reported diagnostic is
the spread of frozen-state travel times over the paths the plan uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import SplitRowInvalid
from .network import (Commodity, Link, PiecewiseConstant, RoadNetwork,
                      SourceSchedule, SplitSchedule)
from .network_sim import (PATH_CAP, GridSplits, NetworkState, enumerate_paths,
                          simulate)
from .nonlocal_solver import GridSpec

ROUTED_KINDS = ("full_information", "delayed", "incentivized", "database",
                "simplified_forecast")
NON_ROUTED_KINDS = ("static", "ex_ante", "local", "sub_network")

#: default plan-share threshold below which a path counts as unused
USED_PATH_EPS = 1e-6


@dataclass(frozen=True)
class LogitRule:
    """Map path costs to choice fractions via exp(-beta * cost).

    beta = 0 gives the uniform split; large beta concentrates on the
    cheapest path.  Costs are shifted by their minimum before
    exponentiation so large beta stays finite.
    """

    beta: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.beta) and self.beta >= 0.0):
            raise ValueError("logit sensitivity must be finite and >= 0")

    def split(self, costs) -> np.ndarray:
        """Fractions over axis 0; accepts shape (n,) or (n, T)."""
        c = np.asarray(costs, dtype=float)
        if c.shape[0] == 0:
            raise ValueError("no alternatives to split over")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite path cost")
        z = np.exp(-self.beta * (c - c.min(axis=0, keepdims=True)))
        return z / z.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class RoutingPolicy:
    """One information principle plus its parameters.

    Routed kinds: full_information (costs frozen at the current instant),
    delayed (costs at t - delay, static fallback before history exists),
    incentivized (cost = traversal time + congestion_weight * windowed mass),
    database (costs read from a historical table, static fallback where the
    table has no data), simplified_forecast (windowed mass extrapolated
    linearly over the forecast horizon, then costed through the link's own
    speed law).

    Non-routed kinds: static (the scenario's fixed rows), ex_ante
    (full-information rows frozen at the commodity's first departure),
    local (static rows reweighted by mass within a downstream link radius),
    sub_network (full information restricted to a link mask).
    """

    kind: str
    logit: LogitRule = field(default_factory=LogitRule)
    delay: float = 0.0
    radius: int = 1
    mask: Optional[frozenset] = None
    forecast: float = 0.0
    congestion_weight: float = 0.0
    table: Optional[Mapping] = None
    base: object = None

    def __post_init__(self) -> None:
        if self.kind not in ROUTED_KINDS + NON_ROUTED_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "delayed":
            if not (math.isfinite(self.delay) and self.delay >= 0.0):
                raise ValueError("delay must be finite and >= 0")
            if self.base is None:
                raise ValueError("delayed policy needs base rows to fall back on")
        if self.kind == "database":
            if self.table is None:
                raise ValueError("database policy needs a cost table")
            for link, series in self.table.items():
                if not series.is_nonnegative():
                    raise ValueError(f"negative historical cost on link {link}")
            if self.base is None:
                raise ValueError("database policy needs base rows to fall back on")
        if self.kind == "simplified_forecast" and not (
                math.isfinite(self.forecast) and self.forecast >= 0.0):
            raise ValueError("forecast horizon must be finite and >= 0")
        if self.kind == "incentivized" and not (
                math.isfinite(self.congestion_weight) and self.congestion_weight >= 0.0):
            raise ValueError("congestion weight must be finite and >= 0")
        if self.kind == "local" and (self.radius < 1 or self.radius != int(self.radius)):
            raise ValueError("lookahead radius must be a positive integer")
        if self.kind in ("static", "local") and self.base is None:
            raise ValueError(f"{self.kind} policy needs base rows")
        if self.kind == "sub_network" and self.mask is None:
            raise ValueError("sub_network policy needs a link mask")

    def is_routed(self) -> bool:
        return self.kind in ROUTED_KINDS


@dataclass
class SplitDecision:
    """Turning rows at one instant plus the fallback marker."""

    rows: dict           # node -> {out_link: fraction} (absent links mean 0)
    used_fallback: bool


@dataclass
class _PathPlan:
    """Paths and row bookkeeping reused across evaluation times."""

    net: RoadNetwork
    origin: int
    destination: int
    paths: tuple
    links: tuple                 # union of path links
    row_nodes: tuple             # nodes that get a row
    preferred: dict              # node -> ordered out-links for the uniform guard
    through: dict                # node -> [(path index, next link), ...]


def _build_plan(net: RoadNetwork, origin: int, destination: int, *,
                cap: int = PATH_CAP, mask=None) -> _PathPlan:
    allowed = set(mask) if mask is not None else None
    if allowed is not None and not allowed <= set(net.links):
        raise ValueError("mask contains links outside the network")
    paths = tuple(enumerate_paths(net, origin, destination, cap=cap,
                                  allowed_links=allowed))
    links = tuple(sorted({a for p in paths for a in p}))
    reach = net.reaches(destination)
    through: dict = {}
    for pi, path in enumerate(paths):
        for a in path:
            through.setdefault(a[0], []).append((pi, a))
    row_nodes = []
    preferred = {}
    for v in net.nodes:
        if v == destination or v not in reach:
            continue
        feasible = [a for a in net.out_links(v) if net.link_leads_to(a, destination)]
        if not feasible:
            continue
        # the uniform guard for nodes the plan never reaches stays inside the
        # mask when the mask admits any feasible continuation
        masked = [a for a in feasible if allowed is None or a in allowed]
        row_nodes.append(v)
        preferred[v] = masked if masked else feasible
    return _PathPlan(net=net, origin=origin, destination=destination,
                     paths=paths, links=links, row_nodes=tuple(row_nodes),
                     preferred=preferred, through=through)


def _rows_from_path_probs(plan: _PathPlan, probs: np.ndarray) -> dict:
    """Per-junction conditional next-link rows from path probabilities."""
    rows = {}
    for v in plan.row_nodes:
        visits = plan.through.get(v, ())
        total = float(sum(probs[pi] for pi, _ in visits))
        if total > 0.0:
            row: dict = {}
            for pi, a in visits:
                row[a] = row.get(a, 0.0) + float(probs[pi]) / total
        else:
            links = plan.preferred[v]
            row = {a: 1.0 / len(links) for a in links}
        rows[v] = row
    return rows


def _rows_from_base(base, plan: _PathPlan, commodity: Commodity, t: float) -> dict:
    """Sample fixed rows at ``t``; uniform guard where the base is silent."""
    rows = {}
    for v in plan.row_nodes:
        out = plan.net.out_links(v)
        sampled = None
        if isinstance(base, SplitSchedule):
            if base.has_row(v, commodity):
                sampled = base.row(v, commodity, t, out)
        elif base is not None and v in base:
            entry = base[v]
            sampled = {}
            for a in out:
                val = entry.get(a, 0.0)
                sampled[a] = float(val.sample(t)) if isinstance(
                    val, PiecewiseConstant) else float(val)
            total = sum(sampled.values())
            if abs(total - 1.0) > 1e-9 or any(x < -1e-12 for x in sampled.values()):
                raise SplitRowInvalid(
                    f"base row at node {v} sums to {total:.17g} (must be 1)")
        if sampled is None:
            links = plan.preferred[v]
            sampled = {a: 1.0 / len(links) for a in links}
        rows[v] = {a: x for a, x in sampled.items() if x != 0.0}
    return rows


def _first_departure(state: NetworkState, commodity: Commodity) -> float:
    """Earliest grid time with positive injection for the commodity."""
    best = None
    for (link, com), series in state.source_grid.items():
        if com != commodity:
            continue
        hot = np.nonzero(series > 0.0)[0]
        if hot.size:
            t = float(state.times[hot[0]])
            best = t if best is None else min(best, t)
    return float(state.times[0]) if best is None else best


def infer_origin(state: NetworkState, commodity: Commodity) -> int:
    """Tail node of the commodity's injection links; must be unique."""
    tails = set()
    for (link, com), series in state.source_grid.items():
        if com == commodity and np.any(series > 0.0):
            tails.add(link[0])
    if not tails:
        raise ValueError(
            f"no injection found for {commodity.label()}; pass origin explicitly")
    if len(tails) > 1:
        raise ValueError(
            f"multiple injection nodes {sorted(tails)} for {commodity.label()}; "
            "pass origin explicitly")
    return tails.pop()


def _link_traversal_time(state: NetworkState, link: Link, m: int) -> float:
    return 1.0 / float(state.speeds[link][m])


def _link_costs(policy: RoutingPolicy, state: NetworkState, t: float,
                plan: _PathPlan) -> Optional[dict]:
    """Frozen per-link costs at ``t``; None signals missing history."""
    kind = policy.kind
    if kind == "delayed":
        t_eval = t - policy.delay
        if t_eval < float(state.times[0]):
            return None
        m = state.step_index(t_eval)
        return {a: _link_traversal_time(state, a, m) for a in plan.links}
    if kind == "database":
        costs = {}
        for a in plan.links:
            series = policy.table.get(a)
            if series is None or not series.covers(t):
                return None
            costs[a] = float(series.sample(t))
        return costs
    m = state.step_index(t)
    if kind == "incentivized":
        return {a: _link_traversal_time(state, a, m)
                + policy.congestion_weight * state.windowed_mass(a, m)
                for a in plan.links}
    if kind == "simplified_forecast":
        dt = state.dt
        costs = {}
        for a in plan.links:
            w_now = state.windowed_mass(a, m)
            if m == 0:
                w_pred = w_now
            else:
                slope = (w_now - state.windowed_mass(a, m - 1)) / dt
                w_pred = w_now + slope * policy.forecast
            w_pred = max(w_pred, 0.0)
            law = state.laws[a]
            speed = max(float(law(t + policy.forecast, w_pred)), law.floor)
            costs[a] = 1.0 / speed
        return costs
    # full_information, ex_ante, sub_network share the frozen-instant cost
    return {a: _link_traversal_time(state, a, m) for a in plan.links}


def _local_rows(policy: RoutingPolicy, state: NetworkState, t: float,
                commodity: Commodity, plan: _PathPlan) -> dict:
    """Static rows pushed toward emptier downstream neighborhoods."""
    base_rows = _rows_from_base(policy.base, plan, commodity, t)
    m = state.step_index(t)
    net = plan.net
    rows = {}
    for v, base_row in base_rows.items():
        scores = {}
        for a in base_row:
            seen = {a}
            frontier = [a]
            for _ in range(policy.radius - 1):
                frontier = [b for lk in frontier for b in net.out_links(lk[1])
                            if b not in seen]
                seen.update(frontier)
            scores[a] = sum(state.link_mass(lk, m) for lk in seen)
        weights = {a: base_row[a] * math.exp(-policy.logit.beta * scores[a])
                   for a in base_row}
        total = sum(weights.values())
        if total <= 0.0:
            rows[v] = base_row
        else:
            rows[v] = {a: w / total for a, w in weights.items()}
    return rows


def _split_at(policy: RoutingPolicy, state: NetworkState, t: float,
              commodity: Commodity, plan: _PathPlan) -> SplitDecision:
    kind = policy.kind
    if kind == "static":
        return SplitDecision(_rows_from_base(policy.base, plan, commodity, t), False)
    if kind == "local":
        return SplitDecision(_local_rows(policy, state, t, commodity, plan), False)
    if kind == "ex_ante":
        t = _first_departure(state, commodity)
    costs = _link_costs(policy, state, t, plan)
    if costs is None:
        return SplitDecision(_rows_from_base(policy.base, plan, commodity, t), True)
    path_costs = np.array([sum(costs[a] for a in p) for p in plan.paths])
    probs = policy.logit.split(path_costs)
    return SplitDecision(_rows_from_path_probs(plan, probs), False)


def compute_splits(policy: RoutingPolicy, state: NetworkState, t: float,
                   commodity: Commodity, *, origin: Optional[int] = None,
                   cap: int = PATH_CAP) -> SplitDecision:
    """Turning rows for every junction that can forward the commodity.

    Rows follow the policy's information principle evaluated on the given
    state at time ``t``.  Every returned row sums to one over the node's
    outgoing links and puts weight only on links from which the destination
    stays reachable.
    """
    if origin is None:
        origin = infer_origin(state, commodity)
    mask = policy.mask if policy.kind == "sub_network" else None
    plan = _build_plan(state.net, origin, commodity.destination, cap=cap,
                       mask=mask)
    return _split_at(policy, state, t, commodity, plan)


def policy_grid_splits(policy: RoutingPolicy, state: NetworkState,
                       commodity: Commodity, *, origin: Optional[int] = None,
                       cap: int = PATH_CAP) -> tuple[dict, np.ndarray]:
    """Rows sampled on the whole simulation grid of ``state``.

    Returns ``(rows, fallback)`` where ``rows`` maps ``(node, commodity)``
    to an array of shape ``(n_out_links, len(times))`` suitable for
    :class:`GridSplits`, and ``fallback`` flags the time nodes where the
    policy had to fall back to its base rows.
    """
    if origin is None:
        origin = infer_origin(state, commodity)
    mask = policy.mask if policy.kind == "sub_network" else None
    plan = _build_plan(state.net, origin, commodity.destination, cap=cap,
                       mask=mask)
    times = state.times
    rows = {(v, commodity): np.zeros((len(state.net.out_links(v)), len(times)))
            for v in plan.row_nodes}
    fallback = np.zeros(len(times), dtype=bool)
    if policy.kind == "ex_ante":
        decision = _split_at(policy, state, float(times[0]), commodity, plan)
        decisions = [(j, decision) for j in range(len(times))]
    else:
        decisions = [(j, _split_at(policy, state, float(tj), commodity, plan))
                     for j, tj in enumerate(times)]
    for j, decision in decisions:
        fallback[j] = decision.used_fallback
        for v, row in decision.rows.items():
            out = state.net.out_links(v)
            arr = rows[(v, commodity)]
            for a, x in row.items():
                arr[out.index(a), j] = x
    return rows, fallback


def plan_share(state: NetworkState, path: Sequence[Link],
               commodity: Commodity, m: int) -> float:
    """Fraction of the commodity the simulated rows send along ``path``."""
    share = 1.0
    for a in path:
        v = a[0]
        key = (v, commodity)
        out = state.net.out_links(v)
        if key in state.split_rows:
            share *= float(state.split_rows[key][out.index(a), m])
        elif len(out) == 1:
            continue
        else:
            raise SplitRowInvalid(
                f"no simulated row at node {v} for {commodity.label()}")
    return share


def mixed_gap(state: NetworkState, t: float, origin: int, destination: int,
              weighted_classes: Sequence[tuple[Commodity, float]], *,
              eps: float = USED_PATH_EPS, cap: int = PATH_CAP) -> float:
    """Spread of frozen-state path times over the paths traffic uses.

    A path counts as used when its demand-weighted plan share at ``t``
    (sum of class weight times the product of that class's simulated
    turning fractions along the path) exceeds ``eps``.  Zero iff all used
    paths take equal time, the stationary equal-times condition among
    used routes.
    """
    paths = enumerate_paths(state.net, origin, destination, cap=cap)
    m = state.step_index(t)
    used_times = []
    for path in paths:
        share = sum(w * plan_share(state, path, k, m)
                    for k, w in weighted_classes if w > 0.0)
        if share > eps:
            used_times.append(
                float(sum(1.0 / state.speed_at(a, t) for a in path)))
    if not used_times:
        raise ValueError(f"no path has plan share above {eps} at t={t}")
    return max(used_times) - min(used_times)


def wardrop_gap(state: NetworkState, t: float, origin: int, destination: int,
                commodity: Commodity, *, eps: float = USED_PATH_EPS,
                cap: int = PATH_CAP) -> float:
    """Single-class gap: spread of path times over the plan's used paths."""
    return mixed_gap(state, t, origin, destination, [(commodity, 1.0)],
                     eps=eps, cap=cap)


@dataclass(frozen=True)
class EquilibriumDemand:
    """Total demand entering on one link, bound for one destination."""

    entry_link: Link
    rate: PiecewiseConstant
    destination: int

    def origin(self) -> int:
        """Node where route choice starts (head of the entry link)."""
        return self.entry_link[1]


@dataclass
class EquilibriumRound:
    index: int
    state: NetworkState
    gap: float
    used_fallback: bool


def _blend_rows(prev: dict, target: dict, kappa: float) -> dict:
    """Convex row update; rows stay probability rows exactly."""
    out = {}
    for key in set(prev) | set(target):
        if key in prev and key in target:
            out[key] = (1.0 - kappa) * prev[key] + kappa * target[key]
        else:
            out[key] = np.array(prev.get(key, target.get(key)), copy=True)
    return out


def equilibrium_iterate(net: RoadNetwork, demand: EquilibriumDemand,
                        alpha: float, policies: tuple, rounds: int, *,
                        laws, horizon: float, base_splits,
                        grid: Optional[GridSpec] = None,
                        eps: float = USED_PATH_EPS,
                        cap: int = PATH_CAP) -> list[EquilibriumRound]:
    """Day-to-day averaged row iteration.

    ``alpha`` of the demand follows the routed policy, the rest the
    non-routed one.  Round 0 simulates the base rows; each later round
    recomputes policy rows on the previous state and blends them into the
    simulated rows with weight 1/(round+1) (plain alternation oscillates on
    symmetric instances).  The reported gap averages the used-path time
    spread over the grid times with positive demand.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("routed fraction must lie in [0, 1]")
    if rounds < 1:
        raise ValueError("need at least one round")
    routed_policy, non_routed_policy = policies
    if not routed_policy.is_routed():
        raise ValueError(f"{routed_policy.kind!r} is not a routed kind")
    if non_routed_policy.is_routed():
        raise ValueError(f"{non_routed_policy.kind!r} is not a non-routed kind")
    kr = Commodity(group="routed", destination=demand.destination)
    kn = Commodity(group="non_routed", destination=demand.destination)
    commodities = [kr, kn]
    entry = demand.entry_link
    sources = SourceSchedule(entries={
        (entry[0], entry, kr): demand.rate.scaled(alpha),
        (entry[0], entry, kn): demand.rate.scaled(1.0 - alpha),
    })
    origin = demand.origin()

    if isinstance(base_splits, SplitSchedule):
        splits0: SplitSchedule | GridSplits = base_splits
    else:
        expanded = {}
        for v, entry_row in base_splits.items():
            series = {a: (val if isinstance(val, PiecewiseConstant)
                          else PiecewiseConstant.constant(float(val)))
                      for a, val in entry_row.items()}
            for k in commodities:
                expanded[(v, k)] = series
        splits0 = SplitSchedule(expanded)

    def run(splits):
        return simulate(net, commodities, splits, sources, laws,
                        horizon=horizon, grid=grid)

    weighted = [(kr, alpha), (kn, 1.0 - alpha)]

    def measure(state):
        active = [float(tv) for tv, r in
                  zip(state.times, demand.rate.sample(state.times))
                  if r > 0.0]
        if not active:
            active = [float(state.times[0])]
        gaps = [mixed_gap(state, tv, origin, demand.destination, weighted,
                          eps=eps, cap=cap) for tv in active]
        return float(np.mean(gaps))

    state = run(splits0)
    reports = [EquilibriumRound(index=0, state=state, gap=measure(state),
                                used_fallback=False)]
    for r in range(1, rounds + 1):
        target_r, fb_r = policy_grid_splits(routed_policy, state, kr,
                                            origin=origin, cap=cap)
        target_n, fb_n = policy_grid_splits(non_routed_policy, state, kn,
                                            origin=origin, cap=cap)
        prev_rows = {key: val for key, val in state.split_rows.items()}
        kappa = 1.0 / (r + 1)
        blended = _blend_rows(prev_rows, {**target_r, **target_n}, kappa)
        new_state = run(GridSplits(blended))
        if len(new_state.times) != len(state.times):
            raise RuntimeError("time grid changed between rounds")
        state = new_state
        reports.append(EquilibriumRound(
            index=r, state=state, gap=measure(state),
            used_fallback=bool(fb_r.any() or fb_n.any())))
    return reports
