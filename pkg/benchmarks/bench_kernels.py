"""Compare the numba kernels with their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--no-e2e]

Kernel timings call both implementations directly.  The end-to-end rows
train a short Torus(5) run in a subprocess per backend, since the backend is
picked at import time from GEOWORLD_DISABLE_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from geoworld import _kernels as K

E2E = """
import time
from geoworld import envs, model, training
from geoworld.geometry import Circle, LatentSpaceSpec
mdp = envs.make_torus(5)
space = LatentSpaceSpec([Circle(), Circle()])
data = envs.collect_dataset(mdp, 2000, 50, 0)
b = model.init_params(space, 2, mdp.encoding_dim, 0, masks=model.default_masks("torus", space, 2))
training.train(training.TrainConfig(steps=20), data, mdp, b)  # warm-up and jit
b = model.init_params(space, 2, mdp.encoding_dim, 0, masks=model.default_masks("torus", space, 2))
t0 = time.perf_counter()
training.train(training.TrainConfig(steps={steps}), data, mdp, b)
print(time.perf_counter() - t0)
"""


def _inputs(n, m, d, seed=0):
    rng = np.random.default_rng(seed)
    moduli = np.full(d, 2 * np.pi)
    circ = np.arange(d) % 2 == 0
    A = rng.uniform(-7, 7, size=(n, d))
    B = rng.uniform(-7, 7, size=(m, d))
    G = rng.normal(size=(n, m))
    return A, B, moduli, circ, G


def _time(fn, repeat):
    fn()
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def kernel_rows(repeat):
    rows = []
    for n, m, d in ((32, 32, 2), (64, 64, 3), (1000, 1000, 3)):
        A, B, moduli, circ, G = _inputs(n, m, d)
        D = K.pairwise_distance_np(A, B, moduli, circ, 2)
        true = np.arange(n) % m
        cases = {
            "pairwise_distance": (lambda f: lambda: f(A, B, moduli, circ, 2), "pairwise_distance"),
            "pairwise_distance_grad": (lambda f: lambda: f(A, B, moduli, circ, 2, G, D), "pairwise_distance_grad"),
            "rank_of_true": (lambda f: lambda: f(D, true), "rank_of_true"),
            "wrap_columns": (lambda f: lambda: f(A, moduli, circ), "wrap_columns"),
        }
        for label, (bind, name) in cases.items():
            t_np = _time(bind(getattr(K, f"{name}_np")), repeat)
            t_nb = _time(bind(getattr(K, f"{name}_nb")), repeat)
            rows.append((f"{label} {n}x{m}x{d}", t_np, t_nb))
    return rows


def e2e_row(steps):
    times = {}
    for backend, flag in (("numpy", "1"), ("numba", "0")):
        env = dict(os.environ, GEOWORLD_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", E2E.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        times[backend] = float(out.stdout.strip().splitlines()[-1])
    return (f"train torus5 {steps} steps", times["numpy"], times["numba"])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--e2e-steps", type=int, default=500)
    p.add_argument("--no-e2e", action="store_true")
    args = p.parse_args(argv)
    if K.numba is None:
        sys.exit("numba is not installed; nothing to compare")
    rows = kernel_rows(args.repeat)
    if not args.no_e2e:
        rows.append(e2e_row(args.e2e_steps))
    w = max(len(r[0]) for r in rows)
    print(f"{'case':<{w}}  {'numpy':>11}  {'numba':>11}  speedup")
    for name, t_np, t_nb in rows:
        print(f"{name:<{w}}  {t_np * 1e6:9.1f}us  {t_nb * 1e6:9.1f}us  {t_np / t_nb:6.2f}x")


if __name__ == "__main__":
    main()
