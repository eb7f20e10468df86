"""Compare the compiled metric kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--lengths 16,64,256]

Prints one line per (kernel, length) with the median time of each backend and
the speedup, then a corpus-level line timing BLEU-4 + ROUGE-L over 1,000
synthetic report pairs through ``mpath.metrics``.
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from mpath._ext import pykernels

try:
    from mpath._ext import ckernels
except ImportError:  # extension not built
    ckernels = None


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_kernels(lengths, repeat):
    rng = np.random.default_rng(0)
    for n in lengths:
        a = rng.integers(0, 40, size=n).astype(np.int64)
        b = rng.integers(0, 40, size=n).astype(np.int64)
        al, bl = a.tolist(), b.tolist()
        cases = {
            "lcs_length": (lambda: pykernels.lcs_length(al, bl), lambda: ckernels.lcs_length(a, b)),
            "ngram_matches": (
                lambda: [pykernels.ngram_matches(al, bl, k) for k in range(1, 5)],
                lambda: [ckernels.ngram_matches(a, b, k) for k in range(1, 5)],
            ),
        }
        for name, (py, cy) in cases.items():
            t_py = median_time(py, repeat)
            if ckernels is None:
                print(f"{name:14s} n={n:<5d} python {t_py * 1e6:9.1f} us   cython  (not built)")
                continue
            t_cy = median_time(cy, repeat)
            print(f"{name:14s} n={n:<5d} python {t_py * 1e6:9.1f} us   cython {t_cy * 1e6:8.1f} us   x{t_py / t_cy:6.1f}")


_CORPUS_SNIPPET = """
import time
from mpath import kernels
from mpath.metrics import bleu4, rouge_l_f1
from mpath.reports import CorpusConfig, synthesize_corpus
s = synthesize_corpus(CorpusConfig(n_samples=1000, d_v=4, seed=1))
pairs = [(s[i].report_text, s[i - 1].report_text) for i in range(len(s))]
t0 = time.perf_counter()
for c, r in pairs:
    bleu4(c, r); rouge_l_f1(c, r)
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def bench_corpus():
    # each backend in a fresh interpreter because the choice is made at import
    for pure in ("0", "1"):
        env = dict(os.environ, MPATH_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", _CORPUS_SNIPPET], env=env, capture_output=True, text=True)
        if out.returncode:
            print(out.stderr, file=sys.stderr)
            continue
        backend, secs = out.stdout.split()
        print(f"corpus BLEU+ROUGE over 1000 pairs: {backend:7s} {float(secs) * 1e3:8.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--lengths", default="16,64,256")
    args = ap.parse_args()
    bench_kernels([int(x) for x in args.lengths.split(",")], args.repeat)
    bench_corpus()


if __name__ == "__main__":
    main()
