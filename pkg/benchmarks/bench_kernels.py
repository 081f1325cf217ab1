"""Time the hot kernels under the numba backend and the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at import
time by EHPOWER_NUMBA.  The first call of every kernel is a warm-up (it
triggers compilation, or loads it from the cache) and is not timed.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from ehpower import _accel
from ehpower.envsim import SystemConfig, battery_trajectory, generate_episode
from ehpower.mdp import build_mdp, relative_value_iteration
from ehpower.neuralnet import build_architecture, forward_single, init_parameters
from ehpower.offline import build_offline_program, solve_offline

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)


def timed(fn):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


cases = {}
for k in (1, 5):
    cfg = SystemConfig(k=k, harvest_mean=6, harvest_var=3)
    progs = [build_offline_program(generate_episode(rng, cfg, 20), cfg) for _ in range(10)]
    cases[f"ipm_solve K={k} N=20 (x10)"] = lambda progs=progs: [solve_offline(p) for p in progs]

mdp = build_mdp(SystemConfig())
cases["relative_value_iteration 21x8x8"] = lambda: relative_value_iteration(mdp)

params = init_parameters(build_architecture(5), rng)
xs = rng.normal(size=(1000, 15))
params.flat()
cases["mlp forward K=5 h=30 (x1000)"] = lambda: [forward_single(params, x) for x in xs]

E = rng.uniform(0, 10, size=(200_000, 5))
P = rng.uniform(0, 5, size=E.shape)
cases["battery_rollout 2e5 x 5"] = lambda: battery_trajectory(10.0, E, P, 20.0)

print(json.dumps({"backend": _accel.backend_name(),
                  "times": {name: timed(fn) for name, fn in cases.items()}}))
"""


def run_backend(flag, repeat):
    env = dict(os.environ, EHPOWER_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    fast = run_backend("1", args.repeat)
    slow = run_backend("0", args.repeat)
    width = max(map(len, fast["times"]))
    print(f"{'kernel':<{width}}  {fast['backend']:>10}  {slow['backend']:>10}  speedup")
    for name, t_fast in fast["times"].items():
        t_slow = slow["times"][name]
        print(f"{name:<{width}}  {t_fast * 1e3:8.2f}ms  {t_slow * 1e3:8.2f}ms  {t_slow / t_fast:6.1f}x")


if __name__ == "__main__":
    main()
