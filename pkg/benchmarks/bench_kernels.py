"""Compare the compiled kernels with the numpy fallback.

Times each per-step kernel at the sizes of the 120-agent network scenarios,
then one short end-to-end scenario run per backend (in a subprocess, since
the backend is chosen at import).

    python3 benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import os
import subprocess
import sys
import timeit
from pathlib import Path

import numpy as np

from distfilt import kernels
from distfilt.network import read_topology, metropolis_weights

ROOT = Path(__file__).resolve().parents[1]
N_AGENTS, STATE_DIM, OBS_DIM = 120, 4, 1


def kernel_cases(rng):
    topo = read_topology(ROOT / "scenarios" / "sm7_topology.txt")
    csr = metropolis_weights(topo).to_csr()
    n, d, m = N_AGENTS, STATE_DIM, OBS_DIM
    A = np.tile(np.eye(d) + 0.04 * np.eye(d, k=1), (n, 1, 1))
    P = np.tile(np.eye(d), (n, 1, 1))
    Q = 0.04 * np.eye(d)
    xbar = rng.standard_normal((n, d))
    H = rng.standard_normal((n, m, d))
    innov = rng.standard_normal((n, m))
    R = np.tile(0.16 * np.eye(m), (n, 1, 1))
    mask = np.ones((n, d))
    X = rng.standard_normal((n, 5))
    Z = rng.standard_normal((n, 1, 5))
    return {
        "predict_covariance": lambda b: kernels.predict_covariance(A, P, Q, backend=b),
        "ekf_update": lambda b: kernels.ekf_update(xbar, P, H, innov, R, mask, backend=b),
        "gradient_update": lambda b: kernels.gradient_update(xbar, H, innov, 0.1, mask, backend=b),
        "combine": lambda b: kernels.combine(csr, xbar, backend=b),
        "tanh_observe": lambda b: kernels.tanh_observe(X, Z, backend=b),
    }


def end_to_end(pure):
    env = dict(os.environ, DISTFILT_PURE_PYTHON="1" if pure else "0")
    code = (
        "import time; from distfilt import cli, harness;"
        f"sc = cli.apply_overrides(cli.load_scenario(r'{ROOT / 'scenarios' / 'particle_box.cfg'}'),"
        " ['realisations=2', 'horizon=300']);"
        "t = time.perf_counter(); harness.run_scenario(sc); print(time.perf_counter() - t)"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--skip-end-to-end", action="store_true")
    args = parser.parse_args(argv)

    if "compiled" not in kernels.available_backends():
        print("compiled kernels are not built; run `python3 setup.py build_ext --inplace`")
        return 1
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<20}{'python us':>12}{'compiled us':>13}{'speedup':>9}")
    for name, fn in cases.items():
        times = {}
        for backend in ("python", "compiled"):
            fn(backend)
            times[backend] = 1e6 * min(timeit.repeat(lambda: fn(backend), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<20}{times['python']:>12.1f}{times['compiled']:>13.1f}{times['python'] / times['compiled']:>8.1f}x")

    if not args.skip_end_to_end:
        py, comp = end_to_end(True), end_to_end(False)
        print(f"\nparticle_box, 2 realisations x 300 steps: python {py:.2f}s, compiled {comp:.2f}s, "
              f"speedup {py / comp:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
