"""Monte-Carlo conflict probabilities between planned paths.

A path is realized by adding a gamma delay to every move; waits keep their
planned length and every command starts when the previous one ends. Two
realized schedules conflict when

* moves on ``(u, v)`` and ``(v, u)`` overlap in time (edge rule), or
* the agents' stays at a vertex overlap (vertex rule). An agent stays at a
  vertex from its arrival until it starts its next move, and forever at the
  end of its path.

Intervals are closed: an arrival at the instant the other agent departs is a
conflict. This matches the simulator, which processes arrivals before
departures at equal times.
"""
from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .delay_model import GammaParams
from .graph_model import Command, Path, edge_key
from .kernels import first_violations

Models = Mapping[tuple[int, int], GammaParams]


class SearchTimeout(Exception):
    """Raised by evaluations that run past their deadline."""


@dataclass
class TimedSchedule:
    agent: int
    commands: list[Command]
    starts: np.ndarray
    ends: np.ndarray

    def entries(self) -> list[tuple[Command, float, float]]:
        return list(zip(self.commands, self.starts.tolist(), self.ends.tolist()))


@dataclass(frozen=True)
class Conflict:
    agent_i: int
    agent_j: int
    cmd_i: int
    cmd_j: int
    probability: float
    fixed_i: bool
    fixed_j: bool
    earliest_expected_time: float
    pair_probability: float = 0.0
    # (min, max) realized start of each charged command over the conflicting samples
    start_range_i: tuple[float, float] = (0.0, 0.0)
    start_range_j: tuple[float, float] = (0.0, 0.0)
    deterministic: bool = False
    # vertex rule violations name the shared vertex; edge rule ones leave None
    vertex: int | None = None
    time_range: tuple[float, float] = (0.0, 0.0)

    @property
    def kind(self) -> str:
        return "edge" if self.vertex is None else "vertex"

    def side(self, agent: int) -> tuple[int, bool, tuple[float, float]]:
        if agent == self.agent_i:
            return self.cmd_i, self.fixed_i, self.start_range_i
        if agent == self.agent_j:
            return self.cmd_j, self.fixed_j, self.start_range_j
        raise KeyError(agent)


# ---------------------------------------------------------------- path layout

class PathLayout:
    """Structure of a path needed by the kernel: moves and vertex stays.

    Times live in a matrix ``T`` (samples x (L + 1)); command ``k`` runs from
    ``T[:, k]`` to ``T[:, k + 1]``.
    """

    def __init__(self, commands: Sequence[Command]):
        self.commands = list(commands)
        self.move_idx = np.array([k for k, c in enumerate(self.commands) if not c.is_wait], dtype=np.int64)
        self.move_edges = [(self.commands[k].u, self.commands[k].v) for k in self.move_idx.tolist()]
        visits: list[tuple[int, int, int, int]] = []  # vertex, charged cmd, arrival col, departure col
        current: list | None = None
        if self.commands and self.commands[0].is_wait:
            current = [self.commands[0].u, 0, 0]
        for k, c in enumerate(self.commands):
            if c.is_wait:
                continue
            if current is not None:
                visits.append((current[0], current[1], current[2], k))
            current = [c.v, k, k + 1]
        if current is not None:
            visits.append((current[0], current[1], current[2], -1))
        self.visit_vertex = [v[0] for v in visits]
        self.visit_cmd = np.array([v[1] for v in visits], dtype=np.int64)
        self.visit_arr = np.array([v[2] for v in visits], dtype=np.int64)
        self.visit_dep = np.array([v[3] for v in visits], dtype=np.int64)
        self.moves_by_edge: dict[tuple[int, int], list[int]] = defaultdict(list)
        for a, e in enumerate(self.move_edges):
            self.moves_by_edge[e].append(a)
        self.visits_by_vertex: dict[int, list[int]] = defaultdict(list)
        for a, v in enumerate(self.visit_vertex):
            self.visits_by_vertex[v].append(a)

    def matrices(self, T: np.ndarray) -> tuple[np.ndarray, ...]:
        ms = np.ascontiguousarray(T[:, self.move_idx])
        me = np.ascontiguousarray(T[:, self.move_idx + 1])
        va = np.ascontiguousarray(T[:, self.visit_arr])
        vd = np.empty((T.shape[0], len(self.visit_dep)))
        for col, dep in enumerate(self.visit_dep.tolist()):
            vd[:, col] = T[:, dep] if dep >= 0 else np.inf
        return ms, me, va, vd


def candidate_pairs(li: PathLayout, lj: PathLayout, lock_i: int = 0, lock_j: int = 0):
    """Index pairs the kernel must test.

    Edge pairs charging two locked commands are dropped. Vertex pairs of that
    kind stay, flagged, because the agent already present can still leave.
    """
    ep, ec, vp, vc, vl = [], [], [], [], []
    for (u, v), idx_i in li.moves_by_edge.items():
        for b in lj.moves_by_edge.get((v, u), ()):
            cj = int(lj.move_idx[b])
            for a in idx_i:
                ci = int(li.move_idx[a])
                if ci < lock_i and cj < lock_j:
                    continue
                ep.append((a, b))
                ec.append((ci, cj))
    for vert, idx_i in li.visits_by_vertex.items():
        for b in lj.visits_by_vertex.get(vert, ()):
            cj = int(lj.visit_cmd[b])
            for a in idx_i:
                ci = int(li.visit_cmd[a])
                vp.append((a, b))
                vc.append((ci, cj))
                vl.append(int(ci < lock_i and cj < lock_j))

    def arr(x):
        return np.array(x, dtype=np.int64).reshape(-1, 2)

    return arr(ep), arr(ec), arr(vp), arr(vc), np.array(vl, dtype=np.int64)


def scan(li: PathLayout, Ti: np.ndarray, lj: PathLayout, Tj: np.ndarray, lock_i: int = 0, lock_j: int = 0):
    """Run the kernel on two sampled time matrices with the same sample count."""
    ep, ec, vp, vc, vl = candidate_pairs(li, lj, lock_i, lock_j)
    n = Ti.shape[0]
    if len(ep) == 0 and len(vp) == 0:
        return np.full(n, -1, dtype=np.int64), np.full(n, -1, dtype=np.int64), np.full(n, np.inf)
    mi_s, mi_e, vi_a, vi_d = li.matrices(Ti)
    mj_s, mj_e, vj_a, vj_d = lj.matrices(Tj)
    return first_violations(mi_s, mi_e, mj_s, mj_e, vi_a, vi_d, vj_a, vj_d, ep, ec, vp, vc, vl)


# ---------------------------------------------------------------- realization

def sample_durations(
    commands: Sequence[Command],
    models: Models | None,
    n: int,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Durations matrix (n x L): waits exact, moves ``w + Gamma(a, b)``."""
    D = np.empty((n, len(commands)))
    base = np.array([c.d for c in commands], dtype=float)
    D[:] = base
    if models is None:
        return D
    moves = [k for k, c in enumerate(commands) if not c.is_wait]
    if not moves:
        return D
    shapes = np.array([models[edge_key(commands[k].u, commands[k].v)].shape for k in moves])
    scales = np.array([models[edge_key(commands[k].u, commands[k].v)].scale for k in moves])
    D[:, moves] += rng.gamma(shapes, scales, size=(n, len(moves)))
    return D


def times_from_durations(start_time: float, D: np.ndarray) -> np.ndarray:
    T = np.empty((D.shape[0], D.shape[1] + 1))
    T[:, 0] = start_time
    # sequential accumulation keeps exact ties identical to the simulator clock
    T[:, 1:] = D
    np.add.accumulate(T, axis=1, out=T)
    return T


def realize_schedule(
    path: Path,
    start_time: float | None,
    models: Models | None,
    rng: np.random.Generator | None,
    *,
    zero_delay: bool = False,
) -> TimedSchedule:
    t0 = path.start_time if start_time is None else start_time
    D = sample_durations(path.commands, None if zero_delay else models, 1, rng)
    T = times_from_durations(t0, D)[0]
    return TimedSchedule(path.agent, list(path.commands), T[:-1].copy(), T[1:].copy())


def schedules_conflict(s_i: TimedSchedule, s_j: TimedSchedule) -> tuple[int, int, float] | None:
    """Earliest violation ``(cmd_i, cmd_j, time)`` between two realized schedules."""
    li, lj = PathLayout(s_i.commands), PathLayout(s_j.commands)
    Ti = _schedule_matrix(s_i)
    Tj = _schedule_matrix(s_j)
    ci, cj, t = scan(li, Ti, lj, Tj)
    if ci[0] < 0:
        return None
    return int(ci[0]), int(cj[0]), float(t[0])


def _schedule_matrix(s: TimedSchedule) -> np.ndarray:
    if len(s.commands) == 0:
        return np.zeros((1, 1))
    return np.concatenate([s.starts, s.ends[-1:]]).reshape(1, -1)


# ---------------------------------------------------------------- estimation

@dataclass
class SampledPath:
    path: Path
    layout: PathLayout
    T: np.ndarray
    key: tuple

    @property
    def agent(self) -> int:
        return self.path.agent


@dataclass
class PairResult:
    agent_i: int
    agent_j: int
    ci: np.ndarray
    cj: np.ndarray
    t: np.ndarray
    n: int
    by_cmd: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        hit = self.ci >= 0
        self.count = int(hit.sum())
        if self.count:
            keys, counts = np.unique(np.stack([self.ci[hit], self.cj[hit]], axis=1), axis=0, return_counts=True)
            self.by_cmd = {(int(k[0]), int(k[1])): int(c) for k, c in zip(keys, counts)}
            self.mean_time = float(self.t[hit].mean())
        else:
            self.mean_time = math.inf

    @property
    def probability(self) -> float:
        return self.count / self.n

    @property
    def max_cmd_probability(self) -> float:
        return max(self.by_cmd.values(), default=0) / self.n

    def top_cmd_pair(self) -> tuple[int, int] | None:
        if not self.by_cmd:
            return None
        return min(self.by_cmd, key=lambda k: (-self.by_cmd[k], k))


def _path_digest(path: Path) -> int:
    text = repr((path.start_time, path.fixed, [tuple(c) for c in path.commands]))
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


class ConflictEstimator:
    """Cached Monte-Carlo evaluator used by the planner.

    Every path's delays come from a generator seeded by ``(seed, agent, path
    digest)``, so a pair's estimate depends only on the two paths involved and
    can be reused across constraint-tree nodes.
    """

    def __init__(
        self,
        models: Models | None,
        n_samples: int,
        seed: int = 0,
        *,
        lock: int = 1,
        zero_delay: bool = False,
    ):
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        self.models = models
        self.zero_delay = zero_delay or models is None
        self.n = 1 if self.zero_delay else n_samples
        self.seed = seed
        self.lock = lock
        self._paths: dict[tuple, SampledPath] = {}
        self._pairs: dict[tuple, PairResult] = {}

    def sample(self, path: Path) -> SampledPath:
        key = (path.agent, _path_digest(path))
        sp = self._paths.get(key)
        if sp is None:
            rng = None if self.zero_delay else np.random.default_rng([self.seed, path.agent, key[1]])
            D = sample_durations(path.commands, None if self.zero_delay else self.models, self.n, rng)
            sp = SampledPath(path, PathLayout(path.commands), times_from_durations(path.start_time, D), key)
            self._paths[key] = sp
        return sp

    def pair(self, si: SampledPath, sj: SampledPath) -> PairResult:
        key = (si.key, sj.key)
        res = self._pairs.get(key)
        if res is None:
            lock_i = self.lock if si.path.fixed else 0
            lock_j = self.lock if sj.path.fixed else 0
            ci, cj, t = scan(si.layout, si.T, sj.layout, sj.T, lock_i, lock_j)
            res = PairResult(si.agent, sj.agent, ci, cj, t, self.n)
            self._pairs[key] = res
        return res

    def evaluate(self, solution: Sequence[Path], deadline: float | None = None, clock=None) -> dict[tuple[int, int], PairResult]:
        sampled = [self.sample(p) for p in solution]
        out = {}
        for i in range(len(sampled)):
            for j in range(i + 1, len(sampled)):
                if deadline is not None and clock() > deadline:
                    raise SearchTimeout()
                out[(i, j)] = self.pair(sampled[i], sampled[j])
        return out

    def conflict_for(self, si: SampledPath, sj: SampledPath, res: PairResult) -> Conflict:
        ci, cj = res.top_cmd_pair()
        mask = (res.ci == ci) & (res.cj == cj)
        starts_i = si.T[mask, ci]
        starts_j = sj.T[mask, cj]
        times = res.t[mask]
        cmd_i, cmd_j = si.path.commands[ci], sj.path.commands[cj]
        # a move pair on opposite directions never shares its target vertex
        vertex = cmd_i.v if cmd_i.v == cmd_j.v else None
        return Conflict(
            agent_i=si.agent,
            agent_j=sj.agent,
            cmd_i=ci,
            cmd_j=cj,
            probability=res.by_cmd[(ci, cj)] / res.n,
            fixed_i=si.path.fixed and ci < self.lock,
            fixed_j=sj.path.fixed and cj < self.lock,
            earliest_expected_time=float(res.t[mask].mean()),
            pair_probability=res.probability,
            start_range_i=(float(starts_i.min()), float(starts_i.max())),
            start_range_j=(float(starts_j.min()), float(starts_j.max())),
            deterministic=self.zero_delay,
            vertex=vertex,
            time_range=(float(times.min()), float(times.max())),
        )


def select_first_conflict(
    estimator: ConflictEstimator,
    solution: Sequence[Path],
    pairs: Mapping[tuple[int, int], PairResult],
    epsilon: float,
) -> Conflict | None:
    """Among pairs above ``epsilon``, the one whose conflicts happen earliest on average."""
    best = None
    for (i, j), res in pairs.items():
        if res.count == 0 or res.probability <= epsilon:
            continue
        rank = (res.mean_time, i, j)
        if best is None or rank < best[0]:
            best = (rank, i, j, res)
    if best is None:
        return None
    _, i, j, res = best
    return estimator.conflict_for(estimator.sample(solution[i]), estimator.sample(solution[j]), res)


def p_max_of(pairs: Mapping[tuple[int, int], PairResult]) -> tuple[float, tuple | None]:
    best, arg = 0.0, None
    for (i, j), res in pairs.items():
        p = res.max_cmd_probability
        if p > best:
            ci, cj = res.top_cmd_pair()
            best, arg = p, ((res.agent_i, ci), (res.agent_j, cj))
    return best, arg


# ---------------------------------------------------------------- functional API

@dataclass
class PairEstimate:
    probability: float
    counts: dict[tuple[int, int], int]
    mean_time: float


def _sample_with(path: Path, start_time, models, n_samples, rng, zero_delay):
    t0 = path.start_time if start_time is None else start_time
    D = sample_durations(path.commands, None if zero_delay else models, n_samples, rng)
    return times_from_durations(t0, D)


def pairwise_conflict_probability(
    path_i: Path,
    path_j: Path,
    start_times: Sequence[float] | None,
    models: Models | None,
    n_samples: int,
    rng: np.random.Generator,
    *,
    lock: int = 0,
    zero_delay: bool = False,
) -> PairEstimate:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    st = start_times or (None, None)
    Ti = _sample_with(path_i, st[0], models, n_samples, rng, zero_delay)
    Tj = _sample_with(path_j, st[1], models, n_samples, rng, zero_delay)
    ci, cj, t = scan(PathLayout(path_i.commands), Ti, PathLayout(path_j.commands), Tj, lock, lock)
    res = PairResult(path_i.agent, path_j.agent, ci, cj, t, n_samples)
    return PairEstimate(res.probability, dict(res.by_cmd), res.mean_time)


def _functional_pairs(solution, start_times, models, n_samples, rng, lock, zero_delay):
    est = ConflictEstimator(models, n_samples, lock=lock, zero_delay=zero_delay)
    sampled = []
    for k, p in enumerate(solution):
        t0 = p.start_time if not start_times else start_times[k]
        T = _sample_with(p, t0, models, est.n, rng, est.zero_delay)
        sp = SampledPath(p, PathLayout(p.commands), T, (p.agent, k))
        est._paths[sp.key] = sp
        sampled.append(sp)
    pairs = {}
    for i in range(len(sampled)):
        for j in range(i + 1, len(sampled)):
            pairs[(i, j)] = est.pair(sampled[i], sampled[j])
    return est, sampled, pairs


def max_conflict_probability(
    solution: Sequence[Path],
    start_times: Sequence[float] | None,
    models: Models | None,
    n_samples: int,
    rng: np.random.Generator,
    *,
    lock: int = 0,
    zero_delay: bool = False,
) -> tuple[float, tuple | None]:
    """``(P_max, ((agent, cmd), (agent, cmd)))`` over all command pairs."""
    if len(solution) < 2:
        raise ValueError("need at least two paths")
    _, _, pairs = _functional_pairs(solution, start_times, models, n_samples, rng, lock, zero_delay)
    return p_max_of(pairs)


def first_conflict(
    solution: Sequence[Path],
    start_times: Sequence[float] | None,
    models: Models | None,
    epsilon: float,
    n_samples: int,
    rng: np.random.Generator,
    *,
    lock: int = 0,
    zero_delay: bool = False,
) -> Conflict | None:
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    est, sampled, pairs = _functional_pairs(solution, start_times, models, n_samples, rng, lock, zero_delay)
    best = None
    for (i, j), res in pairs.items():
        if res.count == 0 or res.probability <= epsilon:
            continue
        rank = (res.mean_time, i, j)
        if best is None or rank < best[0]:
            best = (rank, i, j, res)
    if best is None:
        return None
    _, i, j, res = best
    return est.conflict_for(sampled[i], sampled[j], res)
