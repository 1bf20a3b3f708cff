"""Time the compiled pair loops against the NumPy fallback.

    python3 benchmarks/bench_pairs.py [--sizes 200 500 1000] [--repeat 3]

Both backends run single-threaded so the numbers compare the loops only.
"""

import argparse
import os
import time

os.environ.setdefault("STEIN_ESTIM_THREADS", "1")

import numpy as np  # noqa: E402

from diffstein import _backend  # noqa: E402
from diffstein.diffusion import builtin_diffusion  # noqa: E402
from diffstein.estimators import dksd_grad, dksd_info_matrix, dksd_loss  # noqa: E402
from diffstein.kernel import identity_kernel, imq_kernel  # noqa: E402
from diffstein.model import builtin_model  # noqa: E402
from diffstein.steinkern import SteinKernelCtx  # noqa: E402


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[200, 500, 1000])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    backends = ["python"] + (["compiled"] if _backend.compiled_available() else [])
    model = builtin_model("student_t", {"nu": 5.0})
    K = identity_kernel(1, imq_kernel(10.0, -0.5))
    m = builtin_diffusion("student_loc")
    theta = np.array([25.0, 10.0])
    ops = {"loss": dksd_loss, "grad": dksd_grad, "info": dksd_info_matrix}

    print(f"{'n':>6} {'op':>5} " + " ".join(f"{b:>12}" for b in backends) + "   speedup")
    for n in args.sizes:
        X = 25 + 10 * np.random.default_rng(0).standard_t(5, size=(n, 1))
        for name, op in ops.items():
            secs = [best_of(lambda: op(SteinKernelCtx(model, K, m, theta, X, backend=b)), args.repeat)
                    for b in backends]
            speed = f"{secs[0] / secs[1]:8.1f}x" if len(secs) == 2 else "       -"
            print(f"{n:>6} {name:>5} " + " ".join(f"{s * 1e3:10.1f}ms" for s in secs) + "  " + speed)


if __name__ == "__main__":
    main()
