"""Compare the numba and numpy kernel backends, plus one full training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import time

import numpy as np

from jachess import _kernels as K
from jachess import autodiff as ad
from jachess import regularizer as R
from jachess.estimators import ProjectionSampler
from jachess.model import ModelConfig, forward_ids, init_model


def timeit(fn, repeat):
    fn()  # warm-up (and JIT compile)
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t) / repeat * 1e3


def kernel_cases(rng):
    scores = rng.standard_normal((32, 4, 12, 12))
    h = rng.standard_normal((32, 12, 32))
    grads = rng.standard_normal((32 * 12, 32))
    ids = rng.integers(0, 64, 32 * 12)
    return {
        "softmax (32,4,12,12)": lambda: K.softmax(scores),
        "layer_norm (32,12,32)": lambda: K.layer_norm(h),
        "scatter_rows 384->64": lambda: K.scatter_rows(grads, ids, 64),
    }


def train_step_case(rng, regularized):
    ck = init_model(ModelConfig())
    ids = rng.integers(2, 64, (32, 10))
    lengths = np.full(32, 10)
    y = rng.integers(0, 2, 32)
    rc = R.RegularizerConfig().with_lambdas([1e-4] * 4)
    sampler = ProjectionSampler(0)

    def step():
        tr = forward_ids(ck, ids, lengths, train=True, second_order=regularized)
        loss = ad.cross_entropy(tr.logits, y)
        if regularized:
            loss = loss + R.omega_from_trace(tr, rc, sampler)
        ad.grad(loss, list(tr.params.values()), allow_unused=True)

    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if K.numba is not None else [])
    rows = {}
    for b in backends:
        K.set_backend(b)
        rng = np.random.default_rng(0)
        for name, fn in kernel_cases(rng).items():
            rows.setdefault(name, {})[b] = timeit(fn, args.repeat)
        for reg in (False, True):
            name = "train step B=32 T=10" + (" +omega" if reg else "")
            rows.setdefault(name, {})[b] = timeit(train_step_case(rng, reg), max(3, args.repeat // 10))
    print(f"{'case':34s}" + "".join(f"{b:>12s}" for b in backends) + "     ratio")
    for name, r in rows.items():
        ratio = r["numpy"] / r["numba"] if "numba" in r else float("nan")
        print(f"{name:34s}" + "".join(f"{r[b]:10.3f}ms" for b in backends) + f"  {ratio:7.2f}x")


if __name__ == "__main__":
    main()
