"""Discrete-event execution of command plans under gamma travel delays.

Traffic rules: a vertex holds at most one agent, and an agent may not enter
``(u, v)`` while ``(v, u)`` is occupied (it waits instead). An agent arriving
at an occupied vertex is resolved by a slow operator maneuver: it leaves the
edge after ``w(u, v)·C`` and re-enters the graph on its next move after a
further ``w(next)·C``. Between the two it occupies nothing.
"""
from __future__ import annotations

import heapq
import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Mapping, Sequence

import numpy as np

from .delay_model import GammaParams
from .graph_model import TIME_EPS, AgentTask, Command, Graph, Path, edge_key, validate_path
from .planner import FixedCommand, OnlineInstance

ARRIVAL = "arrival_at_vertex"
REMOVAL = "removal_after_penalty"
REINSERT = "reinsert_after_penalty"
AVAILABLE = "edge_became_available"
ENTER = "enter_edge"
PRIORITY = {ARRIVAL: 0, REMOVAL: 1, REINSERT: 2, AVAILABLE: 3, ENTER: 4}

# agent status values
IDLE = "idle"            # ready to start its next command at the current clock
WAITING = "waiting"      # executing a wait command
TRAVERSING = "traversing"
BLOCKED = "blocked"      # edge entry deferred by the opposite direction
STUCK = "stuck"          # arrived at an occupied vertex, awaiting removal
RETREAT = "retreat"      # removed, awaiting reinsertion on its next move
RETREAT_GOAL = "retreat_goal"  # removed with no next move; re-enters its goal vertex
DONE = "done"
PENALIZED = (STUCK, RETREAT, RETREAT_GOAL)


class InvalidPlan(ValueError):
    pass


class InconsistentFixedCommand(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    penalty: float = 1.0
    seed: int = 0
    zero_delay: bool = False
    trace: bool = False
    audit: bool = False


@dataclass(frozen=True, order=True)
class SimEvent:
    time: float
    priority: int
    agent: int
    seq: int
    kind: str = field(compare=False)
    token: int = field(compare=False)
    payload: tuple = field(compare=False, default=())


@dataclass(frozen=True)
class DelayObservation:
    edge: tuple[int, int]
    delay: float
    time: float


@dataclass
class AgentState:
    agent: int
    goal: int
    commands: list[Command]
    k: int = 0
    status: str = IDLE
    vertex: int | None = None
    edge: tuple[int, int] | None = None
    cmd_start: float = 0.0
    token: int = 0
    blocked_on: tuple[int, int] | None = None  # edge of the current blocking episode
    reinsert_time: float = 0.0
    arrival_time: float | None = None


@dataclass
class StepResult:
    events: list[SimEvent]
    observations: list[DelayObservation]


@dataclass
class SimState:
    graph: Graph
    true_params: Mapping[tuple[int, int], GammaParams]
    config: SimConfig
    agents: list[AgentState]
    rng: np.random.Generator
    clock: float = 0.0
    queue: list[SimEvent] = field(default_factory=list)
    occupant: dict[int, int] = field(default_factory=dict)            # vertex -> agent
    on_edge: dict[tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))
    edge_waiters: dict[tuple[int, int], set] = field(default_factory=lambda: defaultdict(set))
    vertex_waiters: dict[int, set] = field(default_factory=lambda: defaultdict(set))
    observations: list[DelayObservation] = field(default_factory=list)
    draws: list[float] = field(default_factory=list)
    vertex_conflicts: int = 0
    edge_waits: int = 0
    trace: list[dict] = field(default_factory=list)
    _seq: itertools.count = field(default_factory=itertools.count)

    @property
    def flowtime(self) -> float:
        return float(sum(a.arrival_time or 0.0 for a in self.agents))

    def write_trace(self, path: str | FsPath) -> None:
        with open(path, "w") as fh:
            for row in self.trace:
                fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------- construction

def init_sim(
    graph: Graph,
    true_params: Mapping[tuple[int, int], GammaParams],
    task: Sequence[AgentTask],
    plan: Sequence[Path] | Sequence[Sequence[Command]],
    config: SimConfig = SimConfig(),
) -> SimState:
    if len(plan) != len(task):
        raise InvalidPlan("one path per agent required")
    agents = []
    for a, p in zip(task, plan):
        cmds = list(p.commands) if isinstance(p, Path) else [Command(*c) for c in p]
        if not validate_path(graph, p if isinstance(p, Path) else cmds, a.start, a.goal):
            raise InvalidPlan(f"plan of agent {a.agent} is not a valid {a.start}->{a.goal} path")
        agents.append(AgentState(a.agent, a.goal, cmds, vertex=a.start))
    state = SimState(graph, true_params, config, agents, np.random.default_rng(config.seed))
    for ag in agents:
        if ag.vertex in state.occupant:
            raise InvalidPlan(f"agents {state.occupant[ag.vertex]} and {ag.agent} share start {ag.vertex}")
        state.occupant[ag.vertex] = ag.agent
    for ag in agents:
        _skip_empty_waits(ag)
        if ag.k >= len(ag.commands):
            _finish(state, ag, 0.0)
        else:
            _schedule(state, 0.0, ENTER, ag, (ag.k,))
    return state


def _skip_empty_waits(ag: AgentState) -> None:
    while ag.k < len(ag.commands) and ag.commands[ag.k].is_wait and ag.commands[ag.k].d <= 0:
        ag.k += 1


def _schedule(state: SimState, t: float, kind: str, ag: AgentState, payload: tuple = ()) -> None:
    heapq.heappush(state.queue, SimEvent(t, PRIORITY[kind], ag.agent, next(state._seq), kind, ag.token, payload))


def _log(state: SimState, t: float, kind: str, agent: int, **detail) -> None:
    if state.config.trace:
        state.trace.append({"time": t, "kind": kind, "agent": agent, **detail})


# ---------------------------------------------------------------- event loop

def is_done(state: SimState) -> bool:
    return all(a.status == DONE for a in state.agents)


def step(state: SimState) -> StepResult:
    """Process the next live event (stale events are discarded on the way)."""
    observations: list[DelayObservation] = []
    while state.queue:
        ev = heapq.heappop(state.queue)
        ag = state.agents[ev.agent] if ev.agent >= 0 else None  # -1: broadcast
        if ag is not None and ev.token != ag.token:
            continue
        if ev.time < state.clock:
            raise AssertionError("event time went backwards")
        state.clock = ev.time
        _HANDLERS[ev.kind](state, ev, ag, observations)
        if state.config.audit:
            audit(state)
        return StepResult([ev], observations)
    return StepResult([], observations)


def run_to_completion(state: SimState, max_events: int = 10_000_000) -> SimState:
    for _ in range(max_events):
        if is_done(state):
            return state
        if not step(state).events:
            raise RuntimeError("event queue drained before all agents finished")
    raise RuntimeError("event budget exhausted")


def audit(state: SimState) -> None:
    seen = {}
    for ag in state.agents:
        if ag.vertex is not None:
            assert ag.vertex not in seen, f"vertex {ag.vertex} held by {seen[ag.vertex]} and {ag.agent}"
            seen[ag.vertex] = ag.agent
    assert seen == state.occupant, "occupancy map out of sync"


def _handle_enter(state: SimState, ev: SimEvent, ag: AgentState, obs) -> None:
    ag.k = ev.payload[0]
    _start_command(state, ag, ev.time)


def _start_command(state: SimState, ag: AgentState, t: float) -> None:
    _skip_empty_waits(ag)
    if ag.k >= len(ag.commands):
        _finish(state, ag, t)
        return
    cmd = ag.commands[ag.k]
    if cmd.is_wait:
        ag.status = WAITING
        ag.cmd_start = t
        _log(state, t, "wait", ag.agent, vertex=cmd.u, duration=cmd.d)
        _schedule(state, t + cmd.d, ENTER, ag, (ag.k + 1,))
        return
    _try_enter(state, ag, (cmd.u, cmd.v), t, from_vertex=True)


def _try_enter(state: SimState, ag: AgentState, e: tuple[int, int], t: float, from_vertex: bool) -> bool:
    u, v = e
    if state.on_edge[(v, u)] > 0:
        if ag.blocked_on != e:
            ag.blocked_on = e
            state.edge_waits += 1
            _log(state, t, "edge_wait", ag.agent, edge=[u, v])
        state.edge_waiters[e].add(ag.agent)
        if ag.status not in PENALIZED:
            ag.status = BLOCKED
        return False
    state.edge_waiters[e].discard(ag.agent)
    ag.blocked_on = None
    if from_vertex:
        _vacate(state, ag, t)
    state.on_edge[e] += 1
    ag.edge = e
    ag.status = TRAVERSING
    ag.cmd_start = t
    w = state.graph.weight(u, v)
    if state.config.zero_delay:
        x = 0.0
    else:
        p = state.true_params[edge_key(u, v)]
        x = float(state.rng.gamma(p.shape, p.scale))
        state.draws.append(x)
    _log(state, t, ENTER, ag.agent, edge=[u, v], delay=x)
    _schedule(state, t + w + x, ARRIVAL, ag, (u, v, x))
    return True


def _vacate(state: SimState, ag: AgentState, t: float) -> None:
    v = ag.vertex
    if v is None:
        return
    ag.vertex = None
    del state.occupant[v]
    # a goal-blocked penalized agent retries on every vacancy, lowest id first
    for other in sorted(state.vertex_waiters.get(v, ())):
        oa = state.agents[other]
        state.vertex_waiters[v].discard(other)
        _occupy(state, oa, v, t)
        oa.arrival_time = t
        _finish(state, oa, t)
        break


def _occupy(state: SimState, ag: AgentState, v: int, t: float) -> None:
    state.occupant[v] = ag.agent
    ag.vertex = v


def _leave_edge(state: SimState, ag: AgentState, t: float) -> None:
    e = ag.edge
    ag.edge = None
    state.on_edge[e] -= 1
    if state.on_edge[e] == 0:
        rev = (e[1], e[0])
        if state.edge_waiters.get(rev):
            heapq.heappush(state.queue, SimEvent(t, PRIORITY[AVAILABLE], -1, next(state._seq), AVAILABLE, 0, rev))


def _handle_arrival(state: SimState, ev: SimEvent, ag: AgentState, obs) -> None:
    u, v, x = ev.payload
    t = ev.time
    if x > 0:
        o = DelayObservation(edge_key(u, v), x, t)
        obs.append(o)
        state.observations.append(o)
    if v in state.occupant:
        state.vertex_conflicts += 1
        ag.status = STUCK
        _log(state, t, ARRIVAL, ag.agent, edge=[u, v], conflict_with=state.occupant[v])
        _schedule(state, t + state.graph.weight(u, v) * state.config.penalty, REMOVAL, ag)
        return
    _log(state, t, ARRIVAL, ag.agent, edge=[u, v])
    _leave_edge(state, ag, t)
    _occupy(state, ag, v, t)
    if v == ag.goal:
        ag.arrival_time = t
    ag.k += 1
    ag.status = IDLE
    _schedule(state, t, ENTER, ag, (ag.k,))


def _next_move(ag: AgentState, after: int) -> int | None:
    for j in range(after + 1, len(ag.commands)):
        if not ag.commands[j].is_wait:
            return j
    return None


def _handle_removal(state: SimState, ev: SimEvent, ag: AgentState, obs) -> None:
    t = ev.time
    u, v = ag.edge
    _log(state, t, REMOVAL, ag.agent, edge=[u, v])
    _leave_edge(state, ag, t)
    j = _next_move(ag, ag.k)
    if j is not None:
        # waits between the stuck move and the next move are dropped
        nxt = ag.commands[j]
        ag.k = j
        ag.status = RETREAT
        ag.reinsert_time = t + state.graph.weight(nxt.u, nxt.v) * state.config.penalty
        _schedule(state, ag.reinsert_time, REINSERT, ag)
        return
    ag.status = RETREAT_GOAL
    ag.cmd_start = t
    if v in state.occupant:
        state.vertex_waiters[v].add(ag.agent)
    else:
        _occupy(state, ag, v, t)
        ag.arrival_time = t
        _finish(state, ag, t)


def _handle_reinsert(state: SimState, ev: SimEvent, ag: AgentState, obs) -> None:
    cmd = ag.commands[ag.k]
    _log(state, ev.time, REINSERT, ag.agent, edge=[cmd.u, cmd.v])
    _try_enter(state, ag, (cmd.u, cmd.v), ev.time, from_vertex=False)


def _handle_available(state: SimState, ev: SimEvent, ag: AgentState, obs) -> None:
    e = ev.payload
    _log(state, ev.time, AVAILABLE, -1, edge=list(e))
    for other in sorted(state.edge_waiters.get(e, ())):
        oa = state.agents[other]
        _try_enter(state, oa, e, ev.time, from_vertex=oa.status != RETREAT)


def _finish(state: SimState, ag: AgentState, t: float) -> None:
    ag.status = DONE
    ag.k = len(ag.commands)
    if ag.arrival_time is None:
        ag.arrival_time = t
    _log(state, t, "done", ag.agent, vertex=ag.vertex)


_HANDLERS = {
    ARRIVAL: _handle_arrival,
    REMOVAL: _handle_removal,
    REINSERT: _handle_reinsert,
    AVAILABLE: _handle_available,
    ENTER: _handle_enter,
}


# ---------------------------------------------------------------- re-planning

def current_fixed(state: SimState, ag: AgentState) -> FixedCommand:
    g, t = state.graph, state.clock
    if ag.status in (TRAVERSING, STUCK):
        u, v = ag.commands[ag.k].u, ag.commands[ag.k].v
        return FixedCommand(ag.cmd_start, u, ag.cmd_start + g.weight(u, v), v)
    if ag.status == RETREAT_GOAL:
        return FixedCommand.stationary(ag.commands[ag.k].v, t)
    if ag.status == RETREAT:
        c = ag.commands[ag.k]
        return FixedCommand(ag.reinsert_time, c.u, ag.reinsert_time + g.weight(c.u, c.v), c.v)
    if ag.status == WAITING:
        c = ag.commands[ag.k]
        return FixedCommand(t, c.u, ag.cmd_start + c.d, c.u)
    v = ag.vertex if ag.vertex is not None else ag.goal
    return FixedCommand.stationary(v, t)


def to_online_instance(state: SimState, t_limit: float) -> OnlineInstance:
    fixed = [current_fixed(state, ag) for ag in state.agents]
    return OnlineInstance(state.graph, fixed, [ag.goal for ag in state.agents], t_limit,
                          [ag.status == DONE for ag in state.agents])


def current_solution(state: SimState) -> list[Path]:
    """The running plan as paths headed by each agent's fixed command."""
    out = []
    for ag in state.agents:
        f = current_fixed(state, ag)
        if ag.status in (TRAVERSING, STUCK, RETREAT, WAITING):
            rest = ag.commands[ag.k + 1:]
        elif ag.status in (IDLE, BLOCKED):
            rest = ag.commands[ag.k:]
        else:
            rest = []
        out.append(Path(ag.agent, [f.command] + [c for c in rest if not (c.is_wait and c.d <= 0)], f.start_time))
    return out


def apply_plan(state: SimState, solution: Sequence[Path]) -> None:
    """Replace every agent's not-yet-started commands; in-flight commands stay."""
    if len(solution) != len(state.agents):
        raise InconsistentFixedCommand("one path per agent required")
    updates = []
    for ag, path in zip(state.agents, solution):
        fixed = current_fixed(state, ag)
        if not path.commands:
            raise InconsistentFixedCommand(f"agent {ag.agent}: empty path")
        head = path.commands[0]
        if (head.u, head.v) != (fixed.from_vertex, fixed.to_vertex) or \
                abs(path.start_time + head.d - fixed.finish_time) > 1e-6:
            raise InconsistentFixedCommand(f"agent {ag.agent}: head {head} does not match in-flight {fixed}")
        if path.commands[-1].v != ag.goal:
            raise InconsistentFixedCommand(f"agent {ag.agent}: path does not end at goal {ag.goal}")
        updates.append((ag, path))
    for ag, path in updates:
        _replace(state, ag, list(path.commands[1:]))


def _replace(state: SimState, ag: AgentState, tail: list[Command]) -> None:
    t = state.clock
    if ag.status == DONE:
        return
    if ag.status in (TRAVERSING, STUCK, RETREAT, RETREAT_GOAL):
        ag.commands = [ag.commands[ag.k]] + tail
        ag.k = 0
        return
    if ag.status == WAITING:
        c = ag.commands[ag.k]
        ag.commands = [c] + tail
        ag.k = 0
        ag.token += 1
        _schedule(state, ag.cmd_start + c.d, ENTER, ag, (1,))
        return
    # idle or blocked at a vertex: restart from the new tail now
    v = ag.vertex
    if ag.blocked_on is not None:
        state.edge_waiters[ag.blocked_on].discard(ag.agent)
    ag.commands = [Command(v, v, 0.0)] + tail
    ag.k = 0
    ag.token += 1
    ag.status = IDLE
    if tail and not tail[0].is_wait and ag.blocked_on != (tail[0].u, tail[0].v):
        ag.blocked_on = None
    _schedule(state, t, ENTER, ag, (1,))


def simulate(
    graph: Graph,
    true_params: Mapping[tuple[int, int], GammaParams],
    task: Sequence[AgentTask],
    plan: Sequence[Path],
    config: SimConfig = SimConfig(),
) -> SimState:
    return run_to_completion(init_sim(graph, true_params, task, plan, config))
