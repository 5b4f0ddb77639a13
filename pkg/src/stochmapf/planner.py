"""Constraint-tree search over single-agent time-dependent A*.

Modes
-----
``cbs``   best-first on flowtime; conflicts from planned (delay-free) timings.
``stt``   best-first on flowtime; a node is conflict-free when no pair of
          agents conflicts with Monte-Carlo probability above ``epsilon``.
``gstt``  as ``stt`` but the frontier is ordered by the node's maximum
          command-pair conflict probability, flowtime breaking ties.

Every path starts with the agent's fixed command. Conflicts the fixed command
makes unavoidable only branch on the other agent; the search returns the best
frontier node when the calculation time limit runs out.
"""
from __future__ import annotations

import heapq
import itertools
import math
import time
from bisect import insort
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .conflict_estimator import (
    Conflict,
    ConflictEstimator,
    PairResult,
    SearchTimeout,
    p_max_of,
    select_first_conflict,
)
from .delay_model import GammaParams
from .graph_model import AgentTask, Command, Graph, Path

MODES = ("cbs", "stt", "gstt")


class NoPath(Exception):
    pass


class NoSolution(Exception):
    pass


class FixedCommandConstraint(ValueError):
    pass


@dataclass(frozen=True)
class FixedCommand:
    start_time: float
    from_vertex: int
    finish_time: float
    to_vertex: int

    @property
    def command(self) -> Command:
        return Command(self.from_vertex, self.to_vertex, self.finish_time - self.start_time)

    @classmethod
    def stationary(cls, vertex: int, t: float = 0.0) -> "FixedCommand":
        return cls(t, vertex, t, vertex)

    def to_json(self) -> dict:
        return {"start_time": self.start_time, "from": self.from_vertex,
                "finish_time": self.finish_time, "to": self.to_vertex}


@dataclass
class OnlineInstance:
    graph: Graph
    fixed: list[FixedCommand]
    goals: list[int]
    calc_time_limit: float = 10.0  # seconds of wall clock
    # agents already home for good; their paths are never changed
    finished: list[bool] | None = None

    def __post_init__(self):
        if len(self.fixed) != len(self.goals):
            raise ValueError("one fixed command and one goal per agent")
        if self.finished is None:
            self.finished = [False] * len(self.goals)
        elif len(self.finished) != len(self.goals):
            raise ValueError("one finished flag per agent")
        if not self.calc_time_limit > 0:
            raise ValueError("calc_time_limit must be positive")
        for g in self.goals:
            if g not in self.graph.adj:
                raise ValueError(f"goal {g} not in graph")

    @classmethod
    def offline(cls, graph: Graph, task: Sequence[AgentTask], calc_time_limit: float = 10.0) -> "OnlineInstance":
        return cls(graph, [FixedCommand.stationary(a.start) for a in task], [a.goal for a in task], calc_time_limit)

    @property
    def n_agents(self) -> int:
        return len(self.goals)


@dataclass(frozen=True)
class Constraint:
    """Forbidden interval ``[t_start, t_end)`` for one agent.

    On a move edge ``(u, v)`` the agent may not start traversing it during the
    interval. On ``(v, v)`` the agent may not be at ``v`` at any instant of it.
    With ``final`` set, ``v`` is the agent's goal and its last arrival there
    may not fall before ``t_start`` (``t_end`` is infinite).
    """

    agent: int
    edge: tuple[int, int]
    t_start: float
    t_end: float
    final: bool = False

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"empty constraint interval: {self}")
        if self.final and (not self.is_vertex or self.t_end != math.inf):
            raise ValueError("final-arrival constraints name the goal vertex and are unbounded")

    @property
    def is_vertex(self) -> bool:
        return self.edge[0] == self.edge[1]

    def forbids(self, edge: tuple[int, int], t: float) -> bool:
        return not self.is_vertex and edge == self.edge and self.t_start <= t < self.t_end

    def forbids_stay(self, vertex: int, arrival: float, departure: float) -> bool:
        """Whether a stay at ``vertex`` over the closed ``[arrival, departure]`` breaks this."""
        if not self.is_vertex or vertex != self.edge[0]:
            return False
        if self.final:
            return departure == math.inf and arrival < self.t_start
        return arrival < self.t_end and departure >= self.t_start


@dataclass
class PlannerConfig:
    mode: str = "gstt"
    epsilon: float = 0.01
    n_samples: int = 1000
    seed: int = 0
    horizon_factor: float = 4.0
    # Stochastic constraint intervals always cover [s, s + f·w) around the
    # planned start s, so a branch moves the command at least as far as a
    # delay-free branch would.
    min_interval_fraction: float = 1.0
    max_nodes: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class CTNode:
    constraints: tuple[tuple[Constraint, ...], ...]
    solution: list[Path]
    cost: float
    p_max: float = math.inf
    conflict: Conflict | None = None
    pairs: dict[tuple[int, int], PairResult] | None = None
    evaluated: bool = False
    seq: int = 0


@dataclass
class PlanResult:
    solution: list[Path]
    status: str  # conflict_free | timeout_best_effort | no_solution | incumbent
    cost: float
    p_max: float
    nodes_expanded: int
    nodes_generated: int
    elapsed: float

    @property
    def conflict_free(self) -> bool:
        return self.status == "conflict_free"


# ---------------------------------------------------------------- low level

def _earliest_start(t: float, intervals: Sequence[tuple[float, float]]) -> float:
    # intervals sorted by start; one sweep suffices
    for t0, t1 in intervals:
        if t0 <= t < t1:
            t = t1
    return t


def _safe_intervals(unsafe: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    out, prev = [], -math.inf
    for t0, t1 in sorted(unsafe):
        if t0 > prev:
            out.append((prev, t0))
        prev = max(prev, t1)
    if prev < math.inf:
        out.append((prev, math.inf))
    return out


def _wait_until(t: float, target: float) -> tuple[float, float]:
    """Wait length reaching ``target`` from ``t`` under float accumulation, and the time reached."""
    if target <= t:
        return 0.0, t
    d = target - t
    while t + d < target:
        d = math.nextafter(d, math.inf)
    return d, t + d


def low_level_search(
    graph: Graph,
    agent: int,
    goal: int,
    constraints: Sequence[Constraint],
    fixed: FixedCommand,
    horizon: float = math.inf,
) -> Path:
    """Earliest-arrival path from the end of ``fixed`` to ``goal``.

    Safe-interval search: a state is a vertex together with one maximal
    interval in which the agent may stay there. Arriving earlier within the
    same interval never hurts, so label setting over these states is exact,
    and a vertex can be revisited in a later interval. The agent must end in
    the goal's unbounded interval, arriving no earlier than any final-arrival
    bound; such arrivals get a state of their own. The heuristic is the
    delay-free distance.
    """
    by_edge: dict[tuple[int, int], list[tuple[float, float]]] = {}
    by_vertex: dict[int, list[tuple[float, float]]] = {}
    final_after = -math.inf
    for c in constraints:
        if c.agent != agent:
            continue
        if c.final:
            if c.edge[0] == goal:
                final_after = max(final_after, c.t_start)
            continue
        target = by_vertex if c.is_vertex else by_edge
        key = c.edge[0] if c.is_vertex else c.edge
        insort(target.setdefault(key, []), (c.t_start, c.t_end))
    safe_cache: dict[int, list[tuple[float, float]]] = {}

    def safe(v: int) -> list[tuple[float, float]]:
        if v not in safe_cache:
            safe_cache[v] = _safe_intervals(by_vertex.get(v, ()))
        return safe_cache[v]

    h = graph.shortest_from(goal)
    src, t_src = fixed.to_vertex, fixed.finish_time
    if src not in h:
        raise NoPath(f"goal {goal} unreachable from {src}")
    k0 = next((k for k, (lo, hi) in enumerate(safe(src)) if lo <= t_src < hi), None)
    if k0 is None:
        raise NoPath(f"agent {agent} is forced to violate a constraint at {src}")
    start = (src, k0, src == goal and safe(src)[k0][1] == math.inf and t_src >= final_after)
    best = {start: t_src}
    parent: dict[tuple, tuple[tuple, float, float]] = {}
    tie = itertools.count()
    heap = [(t_src + h[src], next(tie), t_src, start)]
    closed = set()
    while heap:
        _, _, t, state = heapq.heappop(heap)
        if state in closed:
            continue
        closed.add(state)
        u, k, done = state
        if done:
            return _assemble(agent, fixed, parent, state, graph)
        hi_u = safe(u)[k][1]
        for v, w in graph.adj[u].items():
            if v not in h:
                continue
            edge_cons = by_edge.get((u, v), ())
            for m, (lo_v, hi_v) in enumerate(safe(v)):
                if hi_v <= t + w:
                    continue
                if lo_v - w >= hi_u:
                    break
                d, dep = _wait_until(t, max(t, lo_v - w))
                while dep + w < lo_v:
                    d, dep = _wait_until(t, math.nextafter(dep, math.inf))
                later = _earliest_start(dep, edge_cons)
                if later > dep:
                    d, dep = _wait_until(t, later)
                arr = dep + w
                if dep >= hi_u or arr >= hi_v or arr > horizon:
                    continue
                nxt = (v, m, v == goal and hi_v == math.inf and arr >= final_after)
                if arr < best.get(nxt, math.inf):
                    best[nxt] = arr
                    parent[nxt] = (state, d, w)
                    heapq.heappush(heap, (arr + h[v], next(tie), arr, nxt))
                if v == goal and hi_v == math.inf and arr < final_after:
                    # a later arrival may satisfy the bound
                    d2, dep2 = _wait_until(t, _earliest_start(max(dep, final_after - w), edge_cons))
                    while dep2 + w < final_after:
                        d2, dep2 = _wait_until(t, math.nextafter(dep2, math.inf))
                    arr2 = dep2 + w
                    late = (v, m, True)
                    if dep2 < hi_u and arr2 <= horizon and arr2 < best.get(late, math.inf):
                        best[late] = arr2
                        parent[late] = (state, d2, w)
                        heapq.heappush(heap, (arr2 + h[v], next(tie), arr2, late))
    raise NoPath(f"agent {agent}: goal {goal} unreachable under constraints within horizon {horizon}")


def _assemble(agent: int, fixed: FixedCommand, parent, state, graph: Graph) -> Path:
    hops = []
    while state in parent:
        prev, d, w = parent[state]
        hops.append((prev[0], state[0], d, w))
        state = prev
    hops.reverse()
    cmds = [fixed.command]
    for u, v, d, w in hops:
        if d > 0:
            cmds.append(Command(u, u, d))
        cmds.append(Command(u, v, w))
    return Path(agent, cmds, fixed.start_time, True)


def path_stays(path: Path) -> list[tuple[int, int, float, float]]:
    """``(vertex, charged command, arrival, departure)`` for every planned stay."""
    times = path.planned_times()
    out = []
    current = None
    for k, c in enumerate(path.commands):
        if c.is_wait:
            if current is None:
                current = (c.u, k, times[k])
            continue
        if current is not None:
            out.append((*current, times[k]))
        current = (c.v, k, times[k + 1])
    if current is not None:
        out.append((*current, math.inf))
    return out


def solution_cost(solution: Sequence[Path]) -> float:
    """Flowtime: sum of planned goal-arrival times."""
    return float(sum(p.arrival_time for p in solution))


def _stay_of(path: Path, cmd_idx: int) -> tuple[float, float]:
    for _, k, a, d in path_stays(path):
        if k == cmd_idx:
            return a, d
    raise ValueError(f"command {cmd_idx} of agent {path.agent} starts no stay")


def make_constraint(conflict: Conflict, agent: int, path: Path, graph: Graph,
                    min_interval_fraction: float = 1.0, other: Path | None = None) -> Constraint:
    """Constraint that removes ``agent``'s side of ``conflict`` from ``path``.

    Edge conflicts forbid starting the charged move during ``[s, s + w)``
    around its planned start ``s``. With Monte-Carlo conflicts the interval
    also covers the move's realized starts in the conflicting samples and
    runs until the opposing move's planned end.

    Vertex conflicts forbid being at the vertex during ``[t, t + δ)``, where
    ``t`` is the planned instant of the agent's stay closest to the other
    agent's stay and ``δ`` the lightest edge at the vertex (widened to the
    spread of realized conflict times). When one of the overlapping stays is
    an agent parked at its goal, the branches split on when that agent gets
    home: it either arrives for good at ``t + δ`` or later, or it is home by
    ``t`` and the other agent must keep away from ``t`` on. With Monte-Carlo
    conflicts the interval also spans the other agent's planned stay, trading
    completeness for far fewer branchings. A stay forced by the fixed command
    at ``t`` cannot be constrained.
    """
    cmd_idx, locked, (lo, hi) = conflict.side(agent)
    cmd = path.commands[cmd_idx]
    if conflict.vertex is None:
        if locked:
            raise FixedCommandConstraint(f"agent {agent} command {cmd_idx} is fixed")
        if cmd.is_wait:
            raise ValueError("edge constraints apply to move commands only")
        planned = path.planned_times()[cmd_idx]
        w = graph.weight(cmd.u, cmd.v)
        if conflict.deterministic:
            return Constraint(agent, (cmd.u, cmd.v), planned, planned + w)
        lo = min(lo, planned)
        hi = max(hi, planned + min_interval_fraction * w)
        if other is not None:
            # start no earlier than the opposing move is planned to end
            k = conflict.side(other.agent)[0]
            hi = max(hi, other.planned_times()[k + 1])
        return Constraint(agent, (cmd.u, cmd.v), lo, hi)

    v = conflict.vertex
    a_i, d_i = _stay_of(path, cmd_idx)
    if other is not None:
        a_j, d_j = _stay_of(other, conflict.side(other.agent)[0])
    else:
        a_j, d_j = conflict.time_range[0], conflict.time_range[0]
    overlap = a_i <= d_j and a_j <= d_i
    if overlap:
        anchor = max(a_i, a_j)
    elif d_j < a_i:
        anchor = a_i
    else:
        anchor = d_i
    if locked and anchor <= path.planned_times()[1]:
        raise FixedCommandConstraint(f"agent {agent} must be at {v} at {anchor}")
    width = min(graph.adj[v].values()) * min_interval_fraction
    if overlap and d_j == math.inf:
        # the other agent may already be home for good: stay away from then on
        return Constraint(agent, (v, v), anchor, math.inf)
    if overlap and d_i == math.inf:
        return Constraint(agent, (v, v), anchor + width, math.inf, final=True)
    if conflict.deterministic:
        return Constraint(agent, (v, v), anchor, anchor + width)
    # clear the other agent's whole planned stay in one branch
    hi = max(anchor + width, anchor + conflict.time_range[1] - conflict.time_range[0])
    if overlap:
        hi = max(hi, d_j)
    return Constraint(agent, (v, v), anchor, math.nextafter(hi, math.inf))


# ---------------------------------------------------------------- high level

def default_horizon(instance: OnlineInstance, factor: float = 4.0) -> float:
    g = instance.graph
    lb = max(
        (f.finish_time + g.distance(f.to_vertex, goal) for f, goal in zip(instance.fixed, instance.goals)),
        default=0.0,
    )
    return max(factor * lb, lb + 2.0 * g.diameter)


class HighLevelSearch:
    def __init__(self, instance: OnlineInstance, config: PlannerConfig,
                 models: Mapping[tuple[int, int], GammaParams] | None = None, clock=time.perf_counter,
                 incumbent: Sequence[Path] | None = None):
        self.instance = instance
        self.incumbent = list(incumbent) if incumbent is not None else None
        self.config = config
        self.clock = clock
        deterministic = config.mode == "cbs" or models is None
        self.epsilon = 0.0 if deterministic else config.epsilon
        self.estimator = ConflictEstimator(
            None if deterministic else models,
            config.n_samples,
            config.seed,
            zero_delay=deterministic,
        )
        self.horizon = default_horizon(instance, config.horizon_factor)
        self._seq = itertools.count()
        self.expanded = 0
        self.generated = 0
        self.heap_audit = False

    def _key(self, node: CTNode) -> tuple:
        if self.config.mode == "gstt":
            return (node.p_max, node.cost, node.seq)
        return (node.cost, node.seq)

    def _evaluate(self, node: CTNode, deadline: float) -> None:
        pairs = node.pairs if node.pairs is not None else {}
        sampled = [self.estimator.sample(p) for p in node.solution]
        n = len(sampled)
        for i in range(n):
            for j in range(i + 1, n):
                if (i, j) in pairs:
                    continue
                if self.clock() > deadline:
                    node.pairs = pairs
                    raise SearchTimeout()
                pairs[(i, j)] = self.estimator.pair(sampled[i], sampled[j])
        node.pairs = pairs
        node.p_max, _ = p_max_of(pairs)
        node.conflict = select_first_conflict(self.estimator, node.solution, pairs, self.epsilon)
        node.evaluated = True

    def _child_pairs(self, parent: CTNode, agent: int) -> dict:
        return {k: v for k, v in (parent.pairs or {}).items() if agent not in k}

    def run(self) -> PlanResult:
        inst, cfg = self.instance, self.config
        t_begin = self.clock()
        deadline = t_begin + inst.calc_time_limit
        n = inst.n_agents
        try:
            root_paths = [
                low_level_search(inst.graph, i, inst.goals[i], (), inst.fixed[i], self.horizon) for i in range(n)
            ]
        except NoPath as exc:
            raise NoSolution(str(exc)) from exc
        root = CTNode(tuple(() for _ in range(n)), root_paths, solution_cost(root_paths), seq=next(self._seq))
        self.generated = 1

        inc = None
        if self.incumbent is not None:
            inc = CTNode((), self.incumbent, solution_cost(self.incumbent), seq=-1)
            try:
                self._evaluate(inc, deadline)
            except SearchTimeout:
                inc = None

        def result(node: CTNode, status: str) -> PlanResult:
            # a best-effort answer must beat the plan already running
            if status != "conflict_free" and inc is not None and \
                    (inc.p_max, inc.cost) <= (node.p_max, node.cost):
                node, status = inc, "incumbent"
            return PlanResult(node.solution, status, node.cost, node.p_max, self.expanded, self.generated,
                              self.clock() - t_begin)

        lazy = cfg.mode != "gstt"  # gstt needs P_max before queueing
        try:
            if not lazy:
                self._evaluate(root, deadline)
        except SearchTimeout:
            return result(root, "timeout_best_effort")
        heap = [(self._key(root), root)]
        last_key = None
        while heap:
            key, node = heapq.heappop(heap)
            if self.heap_audit and last_key is not None and cfg.mode == "gstt":
                assert all(node.p_max <= other.p_max for _, other in heap)
            last_key = key
            try:
                if not node.evaluated:
                    self._evaluate(node, deadline)
            except SearchTimeout:
                return result(node, "timeout_best_effort")
            if node.conflict is None:
                return result(node, "conflict_free")
            if self.clock() > deadline or (cfg.max_nodes is not None and self.expanded >= cfg.max_nodes):
                return result(node, "timeout_best_effort")
            self.expanded += 1
            conflict = node.conflict
            for agent in (conflict.agent_i, conflict.agent_j):
                if inst.finished[agent]:
                    continue
                other = conflict.agent_j if agent == conflict.agent_i else conflict.agent_i
                try:
                    cons = make_constraint(conflict, agent, node.solution[agent], inst.graph,
                                           cfg.min_interval_fraction, node.solution[other])
                except FixedCommandConstraint:
                    continue
                agent_cons = node.constraints[agent] + (cons,)
                try:
                    path = low_level_search(inst.graph, agent, inst.goals[agent], agent_cons,
                                            inst.fixed[agent], self.horizon)
                except NoPath:
                    continue
                constraints = node.constraints[:agent] + (agent_cons,) + node.constraints[agent + 1:]
                solution = list(node.solution)
                solution[agent] = path
                child = CTNode(constraints, solution, solution_cost(solution),
                               pairs=self._child_pairs(node, agent), seq=next(self._seq))
                self.generated += 1
                if not lazy:
                    try:
                        self._evaluate(child, deadline)
                    except SearchTimeout:
                        heapq.heappush(heap, (self._key(node), node))
                        _, top = heap[0]
                        return result(top, "timeout_best_effort")
                heapq.heappush(heap, (self._key(child), child))
        return result(root, "no_solution")


def high_level_search(
    instance: OnlineInstance,
    config: PlannerConfig,
    models: Mapping[tuple[int, int], GammaParams] | None = None,
    incumbent: Sequence[Path] | None = None,
) -> PlanResult:
    """Search for a conflict-free solution.

    ``incumbent`` is the plan currently executing (its paths start with the
    same fixed commands); it is returned instead of a best-effort node that
    does not improve on it.
    """
    return HighLevelSearch(instance, config, models, incumbent=incumbent).run()


def check_constraints(solution: Sequence[Path], constraints: Sequence[Sequence[Constraint]]) -> bool:
    """Replay every path against its constraint set."""
    for path, cons in zip(solution, constraints):
        times = path.planned_times()
        for k, c in enumerate(path.commands):
            if not c.is_wait and any(x.forbids((c.u, c.v), times[k]) for x in cons):
                return False
        for v, _, a, d in path_stays(path):
            if any(x.forbids_stay(v, a, d) for x in cons):
                return False
    return True
