"""Compare the compiled and numpy conflict-scan kernels on realistic inputs.

Paths come from a generated 50-vertex map: each agent follows its shortest
path, so pairs share vertices and edges the way planner candidates do.

    python3 benchmarks/bench_kernels.py [--samples 500 10000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from stochmapf import kernels
from stochmapf.conflict_estimator import PathLayout, candidate_pairs, sample_durations, times_from_durations
from stochmapf.graph_model import generate_instance
from stochmapf.planner import OnlineInstance, PlannerConfig, high_level_search


def workload(n_samples: int, seed: int = 1):
    inst = generate_instance(seed, 50, 10, 1)
    paths = []
    for a in inst.tasks[0]:
        r = high_level_search(OnlineInstance.offline(inst.graph, [a], 1.0), PlannerConfig(mode="cbs"))
        paths.append(r.solution[0])
    rng = np.random.default_rng(seed)
    sampled = []
    for p in paths:
        T = times_from_durations(0.0, sample_durations(p.commands, inst.true_params, n_samples, rng))
        sampled.append((PathLayout(p.commands), T))
    calls = []
    for i in range(len(sampled)):
        for j in range(i + 1, len(sampled)):
            (li, Ti), (lj, Tj) = sampled[i], sampled[j]
            ep, ec, vp, vc, vl = candidate_pairs(li, lj)
            if len(ep) or len(vp):
                mi_s, mi_e, vi_a, vi_d = li.matrices(Ti)
                mj_s, mj_e, vj_a, vj_d = lj.matrices(Tj)
                calls.append((mi_s, mi_e, mj_s, mj_e, vi_a, vi_d, vj_a, vj_d, ep, ec, vp, vc, vl))
    return calls


def run(fn, calls):
    for args in calls:
        fn(*args)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, nargs="+", default=[500, 10_000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = {"python": kernels.python_kernels.first_violations}
    if kernels.BACKEND == "cython":
        from stochmapf._kernels import first_violations as compiled
        backends["cython"] = compiled
    else:
        print("compiled kernel unavailable; timing the numpy fallback only")

    print(f"{'samples':>8} {'pairs':>6} " + " ".join(f"{b + ' ms':>12}" for b in backends) + f" {'speedup':>8}")
    for n in args.samples:
        calls = workload(n)
        ref = [kernels.python_kernels.first_violations(*c) for c in calls]
        for name, fn in backends.items():
            for r, c in zip(ref, calls):
                out = fn(*c)
                assert all(np.array_equal(x, y) for x, y in zip(r, out)), f"{name} disagrees"
        ms = {name: min(timeit.repeat(lambda: run(fn, calls), number=1, repeat=args.repeat)) * 1000
              for name, fn in backends.items()}
        speed = f"{ms['python'] / ms['cython']:8.1f}x" if "cython" in ms else f"{'-':>8}"
        print(f"{n:>8} {len(calls):>6} " + " ".join(f"{ms[b]:12.2f}" for b in backends) + " " + speed)


if __name__ == "__main__":
    main()
