"""Time the spike-time kernels with and without numba.

    python3 benchmarks/bench_kernels.py [--batch 100] [--hidden 800] [--repeat 5]

Inputs mimic a binarized MNIST batch (about 19% of pixels spike at z=1, the
rest never spike), fed through a 784-hidden-10 network. The first numba call
is excluded from the timings since it includes JIT compilation.
"""
import argparse
import time

import numpy as np

from eslsnn import kernels


def make_inputs(batch, n_in, hidden, seed=0):
    rng = np.random.default_rng(seed)
    z = np.where(rng.random((batch, n_in)) < 0.19, 1.0, np.inf)
    w = rng.uniform(0, 20.0 / n_in, size=(n_in, hidden))
    return z, w


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--hidden", type=int, default=800)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    z, w = make_inputs(args.batch, 784, args.hidden)
    g = np.random.default_rng(1).normal(size=(args.batch, args.hidden))

    rows = []
    outs = {}
    for use_numba in (False, True):
        fwd = lambda: kernels.z_forward(z, w, use_numba=use_numba)
        out = fwd()  # warm-up / compile
        outs[use_numba] = out
        bwd = lambda: kernels.z_backward(g, z, w, *out, use_numba=use_numba)
        bwd()
        rows.append((("numba" if use_numba else "numpy"),
                     best_of(fwd, args.repeat), best_of(bwd, args.repeat)))

    # the two backends must agree before their timings mean anything
    a, b = outs[False][0], outs[True][0]
    fin = np.isfinite(a)
    assert np.array_equal(fin, np.isfinite(b)) and np.allclose(a[fin], b[fin], rtol=1e-12)

    print(f"batch={args.batch} in=784 out={args.hidden} best of {args.repeat}")
    print(f"{'backend':8s} {'forward ms':>11s} {'backward ms':>12s}")
    for name, f, bk in rows:
        print(f"{name:8s} {f * 1e3:11.2f} {bk * 1e3:12.2f}")
    (_, f0, b0), (_, f1, b1) = rows
    print(f"speedup  {f0 / f1:10.1f}x {b0 / b1:11.1f}x")


if __name__ == "__main__":
    main()
