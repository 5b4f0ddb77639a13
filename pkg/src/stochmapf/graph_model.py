"""Weighted bidirectional graphs, command paths and the random instance generator."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FsPath
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .delay_model import GammaParams, moments_to_params

# Weights and durations are compared with this absolute slack.
TIME_EPS = 1e-9


class DisconnectedGraph(ValueError):
    pass


class InvalidEdge(ValueError):
    pass


class GenerationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Vertex:
    id: int
    x: float
    y: float


class Command(NamedTuple):
    """A move ``(u, v, w(u, v))`` or a wait ``(u, u, d)``."""

    u: int
    v: int
    d: float

    @property
    def is_wait(self) -> bool:
        return self.u == self.v


def edge_key(u: int, v: int) -> tuple[int, int]:
    """Undirected key used for delay parameters and posteriors."""
    return (u, v) if u < v else (v, u)


class Graph:
    """Connected graph with symmetric edge weights.

    ``adj[u]`` maps each neighbour ``v`` to ``w(u, v)``; both directions are
    always present.
    """

    def __init__(self, vertices: Sequence[Vertex], weights: dict[tuple[int, int], float]):
        self.vertices = list(vertices)
        self.adj: dict[int, dict[int, float]] = {v.id: {} for v in self.vertices}
        for (u, v), w in sorted(weights.items()):
            self.adj[u][v] = w
            self.adj[v][u] = w
        self.edges = sorted(weights)  # undirected keys, u < v

    def __len__(self) -> int:
        return len(self.vertices)

    def weight(self, u: int, v: int) -> float:
        return self.adj[u][v]

    def has_edge(self, u: int, v: int) -> bool:
        return u in self.adj and v in self.adj[u]

    def neighbors(self, u: int) -> dict[int, float]:
        return self.adj[u]

    def coords(self, vid: int) -> tuple[float, float]:
        vert = self.vertices[self._index[vid]]
        return vert.x, vert.y

    @cached_property
    def _index(self) -> dict[int, int]:
        return {v.id: i for i, v in enumerate(self.vertices)}

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: i for i, e in enumerate(self.edges)}

    def is_connected(self) -> bool:
        return _connected(self.adj)

    def shortest_from(self, source: int) -> dict[int, float]:
        """Dijkstra distances from ``source`` (cached; the graph is immutable)."""
        cached = self._sp_cache.get(source)
        if cached is not None:
            return cached
        dist = {source: 0.0}
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for v, w in self.adj[u].items():
                nd = d + w
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        self._sp_cache[source] = dist
        return dist

    @cached_property
    def _sp_cache(self) -> dict[int, dict[int, float]]:
        return {}

    def distance(self, u: int, v: int) -> float:
        return self.shortest_from(v)[u]

    @cached_property
    def diameter(self) -> float:
        return max(max(self.shortest_from(v.id).values()) for v in self.vertices)


def _connected(adj: dict[int, dict[int, float]]) -> bool:
    if not adj:
        return True
    start = next(iter(adj))
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(adj)


def build_graph(
    vertices: Iterable[Vertex | tuple[float, float]],
    edge_pairs: Iterable[tuple[int, int]] | Iterable[tuple[int, int, float]],
) -> Graph:
    """Materialize a bidirectional graph.

    ``vertices`` are :class:`Vertex` objects or bare ``(x, y)`` tuples (ids are
    then positional). Edge weights default to the Euclidean distance between
    endpoints; a third tuple element overrides it.
    """
    verts = [
        v if isinstance(v, Vertex) else Vertex(i, float(v[0]), float(v[1]))
        for i, v in enumerate(vertices)
    ]
    ids = {v.id: v for v in verts}
    if len(ids) != len(verts):
        raise InvalidEdge("duplicate vertex id")
    weights: dict[tuple[int, int], float] = {}
    for pair in edge_pairs:
        u, v = int(pair[0]), int(pair[1])
        if u == v:
            raise InvalidEdge(f"self-loop at {u}")
        if u not in ids or v not in ids:
            raise InvalidEdge(f"unknown vertex in edge ({u}, {v})")
        if len(pair) > 2:
            w = float(pair[2])
        else:
            w = math.hypot(ids[u].x - ids[v].x, ids[u].y - ids[v].y)
        if not w > 0:
            raise InvalidEdge(f"non-positive weight on ({u}, {v})")
        weights[edge_key(u, v)] = w
    graph = Graph(verts, weights)
    if not graph.is_connected():
        raise DisconnectedGraph(f"{len(verts)} vertices, {len(weights)} edges, not connected")
    return graph


@dataclass
class Path:
    """Commands of one agent; ``start_time`` anchors the first command.

    When ``fixed`` is true the first command is the agent's fixed command and
    may be a zero-length stationary anchor.
    """

    agent: int
    commands: list[Command]
    start_time: float = 0.0
    fixed: bool = True

    def planned_times(self) -> list[float]:
        """Start time of every command plus the final arrival, summed in order."""
        t = self.start_time
        out = [t]
        for c in self.commands:
            t = t + c.d
            out.append(t)
        return out

    @property
    def arrival_time(self) -> float:
        return self.planned_times()[-1]

    @property
    def end_vertex(self) -> int | None:
        return self.commands[-1].v if self.commands else None

    def to_json(self) -> list[dict]:
        times = self.planned_times()
        return [
            {"u": c.u, "v": c.v, "d": c.d, "start_time": times[k], "fixed": self.fixed and k == 0}
            for k, c in enumerate(self.commands)
        ]

    @classmethod
    def from_json(cls, agent: int, rows: list[dict]) -> "Path":
        cmds = [Command(int(r["u"]), int(r["v"]), float(r["d"])) for r in rows]
        start = float(rows[0]["start_time"]) if rows else 0.0
        fixed = bool(rows[0].get("fixed", False)) if rows else False
        return cls(agent, cmds, start, fixed)


def validate_path(graph: Graph, path: Path | Sequence[Command], start: int, goal: int) -> bool:
    cmds = list(path.commands) if isinstance(path, Path) else [Command(*c) for c in path]
    head_may_be_empty = isinstance(path, Path) and path.fixed
    if not cmds:
        return start == goal
    if cmds[0].u != start or cmds[-1].v != goal:
        return False
    for k, c in enumerate(cmds):
        if k > 0 and cmds[k - 1].v != c.u:
            return False
        if c.u not in graph.adj:
            return False
        if c.is_wait:
            if c.d > 0 or (k == 0 and head_may_be_empty and c.d == 0):
                continue
            return False
        if not graph.has_edge(c.u, c.v):
            return False
        if abs(c.d - graph.weight(c.u, c.v)) > TIME_EPS:
            return False
    return True


@dataclass(frozen=True)
class AgentTask:
    agent: int
    start: int
    goal: int


Task = list[AgentTask]


def validate_task(task: Sequence[AgentTask]) -> bool:
    starts = [a.start for a in task]
    goals = [a.goal for a in task]
    return len(set(starts)) == len(starts) and len(set(goals)) == len(goals)


@dataclass
class Instance:
    seed: int
    graph: Graph
    true_params: dict[tuple[int, int], GammaParams]
    tasks: list[Task] = field(default_factory=list)
    attempts: int = 1

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "vertices": [{"id": v.id, "x": v.x, "y": v.y} for v in self.graph.vertices],
            "edges": [
                {
                    "u": u,
                    "v": v,
                    "weight": self.graph.weight(u, v),
                    "true_shape": self.true_params[(u, v)].shape,
                    "true_scale": self.true_params[(u, v)].scale,
                }
                for u, v in self.graph.edges
            ],
            "tasks": [
                [{"agent": a.agent, "start": a.start, "goal": a.goal} for a in task]
                for task in self.tasks
            ],
        }

    def save(self, path: str | FsPath) -> None:
        FsPath(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, data: dict) -> "Instance":
        verts = [Vertex(int(v["id"]), float(v["x"]), float(v["y"])) for v in data["vertices"]]
        graph = build_graph(verts, [(e["u"], e["v"], e["weight"]) for e in data["edges"]])
        params = {
            edge_key(int(e["u"]), int(e["v"])): GammaParams(float(e["true_shape"]), float(e["true_scale"]))
            for e in data["edges"]
        }
        tasks = [
            [AgentTask(int(a["agent"]), int(a["start"]), int(a["goal"])) for a in task]
            for task in data["tasks"]
        ]
        return cls(int(data["seed"]), graph, params, tasks)

    @classmethod
    def load(cls, path: str | FsPath) -> "Instance":
        return cls.from_json(json.loads(FsPath(path).read_text()))


def _nearest_edges(xy: np.ndarray, degrees: np.ndarray) -> set[tuple[int, int]]:
    n = len(xy)
    edges = set()
    for v in range(n):
        d2 = ((xy - xy[v]) ** 2).sum(axis=1)
        # lexsort: primary distance, ties by lower id
        order = np.lexsort((np.arange(n), d2))
        picked = [int(u) for u in order if u != v][: int(degrees[v])]
        edges.update(edge_key(v, u) for u in picked)
    return edges


def generate_instance(
    seed: int,
    n_vertices: int,
    n_agents: int,
    n_tasks: int,
    *,
    max_attempts: int = 1000,
    literal_shape: bool = False,
) -> Instance:
    """Random non-grid map, true delay parameters and tasks, deterministic in ``seed``."""
    if n_vertices < 2:
        raise ValueError("n_vertices must be >= 2")
    if n_agents > n_vertices // 2:
        raise ValueError("n_agents must be <= n_vertices / 2")
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_attempts + 1):
        coords: list[tuple[int, int]] = []
        taken = set()
        while len(coords) < n_vertices:
            xy = (int(rng.integers(0, 100)), int(rng.integers(0, 100)))
            if xy in taken:  # coincident vertices would give zero-length edges
                continue
            taken.add(xy)
            coords.append(xy)
        degrees = rng.integers(2, 5, size=n_vertices)
        arr = np.array(coords, dtype=float)
        edges = _nearest_edges(arr, degrees)
        try:
            graph = build_graph([Vertex(i, x, y) for i, (x, y) in enumerate(coords)], sorted(edges))
        except DisconnectedGraph:
            continue
        break
    else:
        raise GenerationFailed(f"no connected graph after {max_attempts} attempts")

    params = {}
    for e in graph.edges:
        mean = float(rng.integers(3, 10)) * 1.0
        var = float(rng.integers(1, 5)) * 0.1
        params[e] = moments_to_params(mean, var, literal=literal_shape)

    tasks = [sample_task(rng, n_vertices, n_agents) for _ in range(n_tasks)]
    return Instance(seed, graph, params, tasks, attempts=attempt)


def sample_task(rng: np.random.Generator, n_vertices: int, n_agents: int) -> Task:
    starts: list[int] = []
    goals: list[int] = []
    while len(starts) < n_agents:
        s = int(rng.integers(0, n_vertices))
        if s in starts:
            continue
        g = int(rng.integers(0, n_vertices))
        if g in goals or g == s:
            continue
        starts.append(s)
        goals.append(g)
    return [AgentTask(i, s, g) for i, (s, g) in enumerate(zip(starts, goals))]
