"""Compare the compiled and pure-Python reduction backends on LWE embeddings.

    python benchmarks/bench_reduction.py [--dims 10 16 20] [--beta 10] [--repeat 1]

Both backends run the same algorithm, so the reduced bases must agree bit for bit;
the script checks that before reporting timings.
"""
import argparse
import time

import numpy as np

from picante import lattice
from picante.preprocess import build_embedding


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dims", type=int, nargs="+", default=[10, 16, 20])
    parser.add_argument("--beta", type=int, default=10)
    parser.add_argument("--q", type=int, default=113)
    parser.add_argument("--repeat", type=int, default=1)
    args = parser.parse_args()

    if lattice.BACKEND != "compiled":
        print("compiled extension not built; run `python setup.py build_ext --inplace` first")
        backends = ["python"]
    else:
        backends = ["compiled", "python"]

    print(f"{'n':>4} {'dim':>4} {'op':>6} " + " ".join(f"{b:>10}" for b in backends)
          + ("    speedup" if len(backends) == 2 else ""))
    rng = np.random.default_rng(0)
    for n in args.dims:
        emb = build_embedding(rng.integers(0, args.q, size=(n, n)), 15, args.q)
        ops = {
            "lll": lambda b: lattice.lll_reduce(emb, 0.99, backend=b),
            "bkz": lambda b: lattice.bkz_reduce(emb, min(args.beta, 2 * n), 0.99, backend=b).basis,
        }
        for op, fn in ops.items():
            times, bases = [], []
            for b in backends:
                best = float("inf")
                for _ in range(args.repeat):
                    basis, sec = timed(lambda: fn(b))
                    best = min(best, sec)
                times.append(best)
                bases.append(basis)
            if len(bases) == 2 and not np.array_equal(bases[0], bases[1]):
                raise SystemExit(f"backends disagree at n={n} ({op})")
            line = f"{n:>4} {2 * n:>4} {op:>6} " + " ".join(f"{t:>9.3f}s" for t in times)
            if len(times) == 2:
                line += f"  {times[1] / times[0]:>8.1f}x"
            print(line, flush=True)


if __name__ == "__main__":
    main()
