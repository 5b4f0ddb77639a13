"""Plan, simulate, learn and re-plan over a sequence of tasks.

Randomness is derived from one master seed. Each stream is keyed by a
``(master, component, task, call)`` tuple through :class:`numpy.random.SeedSequence`:
component 1 drives the simulator of a task and component 2 the Monte-Carlo
sampling of each solver call. Configurations sharing a master seed therefore
see identical delay realizations for the same task.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path as FsPath
from typing import Mapping, Sequence

import numpy as np

from .delay_model import GammaParams, PosteriorState, PriorConfig, map_estimate, observe
from .graph_model import AgentTask, Graph, Instance
from .planner import (
    MODES,
    NoSolution,
    OnlineInstance,
    PlannerConfig,
    PlanResult,
    high_level_search,
)
from .simulator import SimConfig, apply_plan, current_solution, init_sim, is_done, step, to_online_instance

SIM_STREAM = 1
SOLVER_STREAM = 2


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "gstt"
    use_or: bool = False
    use_pu: bool = False
    epsilon: float = 0.01
    t_ci: float = 100.0
    c_penalty: float = 1.0
    t_limit: float = 10.0  # seconds
    prior: PriorConfig = PriorConfig()
    n_samples: int = 1000
    seed: int = 0
    oracle_params: bool = False  # plan with the true parameters ("no error")
    zero_delay: bool = False
    # a re-plan answer arriving later than t_limit + grace is discarded
    replan_grace: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (self.t_ci > 0 and self.t_limit > 0 and self.n_samples > 0 and self.c_penalty >= 0):
            raise ValueError("t_ci, t_limit and n_samples must be positive; penalty non-negative")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["prior"] = asdict(self.prior)
        return d


@dataclass
class TaskMetrics:
    task_id: int
    vertex_conflicts: int
    edge_waits: int
    flowtime: float
    init_calc_time: float
    init_timeout: bool
    replan_count: int
    total_online_calc_time: float
    replans_discarded: int = 0
    lower_bound: float = 0.0
    observations: int = 0


class SolverState:
    """Per-edge posteriors with lazily refreshed MAP estimates."""

    def __init__(self, edges: Sequence[tuple[int, int]], prior: PriorConfig,
                 truth: Mapping[tuple[int, int], GammaParams] | None = None):
        self.prior = prior
        self.truth = dict(truth) if truth is not None else None
        base = PosteriorState.from_prior(prior)
        self.posteriors: dict[tuple[int, int], PosteriorState] = {e: base for e in edges}
        self._map: dict[tuple[int, int], GammaParams] = {}
        self._dirty = set(edges)

    def observe(self, edge: tuple[int, int], x: float) -> None:
        self.posteriors[edge] = observe(self.posteriors[edge], x)
        self._dirty.add(edge)

    def estimates(self) -> dict[tuple[int, int], GammaParams]:
        if self.truth is not None:
            return self.truth
        for e in sorted(self._dirty):
            prev = self._map.get(e)
            self._map[e] = map_estimate(self.posteriors[e], a_init=self.prior.a_prior,
                                        b_init=prev.scale if prev else None)
        self._dirty.clear()
        return dict(self._map)

    def dump(self) -> list[dict]:
        est = self.estimates()
        return [
            {"u": e[0], "v": e[1], "a_map": est[e].shape, "b_map": est[e].scale, **self.posteriors[e].to_json()}
            for e in sorted(self.posteriors)
        ]


@dataclass
class LearningEntry:
    task_id: int
    rmse_a: float
    rmse_b: float
    e_a: dict[tuple[int, int], float | None]
    e_b: dict[tuple[int, int], float | None]
    n_obs: dict[tuple[int, int], int]


def _ratio(truth: float, est: float, prior: float) -> float | None:
    num, den = abs(truth - est), abs(truth - prior)
    if den == 0:
        return 0.0 if num == 0 else None
    return num / den


def rmse_report(solver_state: SolverState, true_params: Mapping[tuple[int, int], GammaParams],
                prior: PriorConfig, task_id: int = -1) -> LearningEntry:
    est = solver_state.estimates()
    edges = sorted(true_params)
    da = np.array([est[e].shape - true_params[e].shape for e in edges])
    db = np.array([est[e].scale - true_params[e].scale for e in edges])
    return LearningEntry(
        task_id,
        float(np.sqrt(np.mean(da * da))) if edges else 0.0,
        float(np.sqrt(np.mean(db * db))) if edges else 0.0,
        {e: _ratio(true_params[e].shape, est[e].shape, prior.a_prior) for e in edges},
        {e: _ratio(true_params[e].scale, est[e].scale, prior.b_prior) for e in edges},
        {e: solver_state.posteriors[e].n_obs for e in edges},
    )


def replan_policy(clock: float, last_replan_time: float, t_ci: float) -> bool:
    return clock - last_replan_time >= t_ci


def _solve(instance: OnlineInstance, config: ExperimentConfig, models, seed: int, incumbent=None) -> PlanResult:
    pc = PlannerConfig(mode=config.mode, epsilon=config.epsilon, n_samples=config.n_samples, seed=seed)
    return high_level_search(instance, pc, None if config.mode == "cbs" else models, incumbent)


def plan_initial(graph: Graph, task: Sequence[AgentTask], config: ExperimentConfig,
                 models: Mapping[tuple[int, int], GammaParams] | None, task_id: int = 0) -> PlanResult:
    inst = OnlineInstance.offline(graph, task, config.t_limit)
    return _solve(inst, config, models, derive_seed(config.seed, SOLVER_STREAM, task_id, 0))


def run_task(
    graph: Graph,
    true_params: Mapping[tuple[int, int], GammaParams],
    task: Sequence[AgentTask],
    solver_state: SolverState,
    config: ExperimentConfig,
    task_id: int = 0,
) -> TaskMetrics:
    first = plan_initial(graph, task, config, solver_state.estimates(), task_id)
    sim = init_sim(graph, true_params, task, first.solution,
                   SimConfig(config.c_penalty, derive_seed(config.seed, SIM_STREAM, task_id), config.zero_delay))
    calls, online_time, replans, discarded, n_obs = 1, 0.0, 0, 0, 0
    last = 0.0
    while not is_done(sim):
        res = step(sim)
        if not res.events:
            raise RuntimeError(f"task {task_id}: simulation stalled")
        if config.use_pu:
            for o in res.observations:
                solver_state.observe(o.edge, o.delay)
        n_obs += len(res.observations)
        if config.use_or and not is_done(sim) and replan_policy(sim.clock, last, config.t_ci):
            last = sim.clock
            inst = to_online_instance(sim, config.t_limit)
            t0 = time.perf_counter()
            try:
                r = _solve(inst, config, solver_state.estimates(),
                           derive_seed(config.seed, SOLVER_STREAM, task_id, calls), current_solution(sim))
            except NoSolution:
                r = None
            online_time += time.perf_counter() - t0
            calls += 1
            replans += 1
            if r is not None and r.elapsed <= config.t_limit + config.replan_grace:
                apply_plan(sim, r.solution)
            else:
                discarded += 1
    lb = sum(graph.distance(a.start, a.goal) for a in task)
    return TaskMetrics(task_id, sim.vertex_conflicts, sim.edge_waits, sim.flowtime, first.elapsed,
                       first.status == "timeout_best_effort", replans, online_time, discarded, lb, n_obs)


@dataclass
class SuiteResult:
    config: ExperimentConfig
    tasks: list[TaskMetrics]
    learning: list[LearningEntry]
    solver_state: SolverState
    instance: Instance

    @property
    def aggregates(self) -> dict:
        n = len(self.tasks)
        if n == 0:
            return {}
        mean = lambda f: float(np.mean([f(m) for m in self.tasks]))  # noqa: E731
        return {
            "n_tasks": n,
            "mean_vertex_conflicts": mean(lambda m: m.vertex_conflicts),
            "mean_edge_waits": mean(lambda m: m.edge_waits),
            "mean_flowtime": mean(lambda m: m.flowtime),
            "mean_init_calc_ms": mean(lambda m: m.init_calc_time * 1000),
            "timeout_rate": sum(m.init_timeout for m in self.tasks) / n,
            "mean_replans": mean(lambda m: m.replan_count),
            "mean_online_calc_ms": mean(lambda m: m.total_online_calc_time * 1000),
        }

    def rows(self) -> list[dict]:
        c = self.config
        out = []
        for m, le in zip(self.tasks, self.learning):
            out.append({
                "task_id": m.task_id, "mode": c.mode, "use_or": int(c.use_or), "use_pu": int(c.use_pu),
                "t_ci": c.t_ci, "vertex_conflicts": m.vertex_conflicts, "edge_waits": m.edge_waits,
                "flowtime": m.flowtime, "init_calc_ms": m.init_calc_time * 1000,
                "init_timeout": int(m.init_timeout), "replans": m.replan_count,
                "online_calc_ms": m.total_online_calc_time * 1000, "rmse_a": le.rmse_a, "rmse_b": le.rmse_b,
            })
        return out

    def learning_json(self) -> dict:
        g = self.instance.graph
        final = self.learning[-1] if self.learning else None
        edges = []
        if final is not None:
            for e in sorted(final.n_obs):
                (x1, y1), (x2, y2) = g.coords(e[0]), g.coords(e[1])
                edges.append({"u": e[0], "v": e[1], "x1": x1, "y1": y1, "x2": x2, "y2": y2,
                              "n_obs": final.n_obs[e], "e_a": final.e_a[e], "e_b": final.e_b[e]})
        return {
            "task_id": [le.task_id for le in self.learning],
            "rmse_a": [le.rmse_a for le in self.learning],
            "rmse_b": [le.rmse_b for le in self.learning],
            "edges": edges,
        }

    def to_json(self) -> dict:
        return {"config": self.config.to_json(), "aggregates": self.aggregates, "learning": self.learning_json()}


CSV_FIELDS = ["task_id", "mode", "use_or", "use_pu", "t_ci", "vertex_conflicts", "edge_waits", "flowtime",
              "init_calc_ms", "init_timeout", "replans", "online_calc_ms", "rmse_a", "rmse_b"]


def run_suite(
    instance: Instance | str | FsPath,
    config: ExperimentConfig,
    n_tasks: int | None = None,
    *,
    solver_state: SolverState | None = None,
    progress=None,
) -> SuiteResult:
    inst = instance if isinstance(instance, Instance) else Instance.load(instance)
    n = len(inst.tasks) if n_tasks is None else n_tasks
    if n > len(inst.tasks):
        raise ValueError(f"instance has {len(inst.tasks)} tasks, {n} requested")
    if solver_state is None:
        solver_state = SolverState(inst.graph.edges, config.prior,
                                   inst.true_params if config.oracle_params else None)
    metrics, learning = [], []
    for k in range(n):
        try:
            m = run_task(inst.graph, inst.true_params, inst.tasks[k], solver_state, config, task_id=k)
        except NoSolution as exc:
            raise NoSolution(f"task {k}: {exc}") from exc
        metrics.append(m)
        learning.append(rmse_report(solver_state, inst.true_params, config.prior, task_id=k))
        if progress is not None:
            progress(k, m)
    return SuiteResult(config, metrics, learning, solver_state, inst)


def write_results(result: SuiteResult, out_dir: str | FsPath, stem: str = "results", meta: dict | None = None) -> None:
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / f"{stem}.csv", result.rows())
    payload = result.to_json()
    if meta:
        payload["meta"] = meta
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=1))


def write_rows(path: str | FsPath, rows: Sequence[dict], fields: Sequence[str] = CSV_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
