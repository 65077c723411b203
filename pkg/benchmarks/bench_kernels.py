"""Time the numba kernels against their numpy fallbacks, and one training step end to end.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from label2label import _kernels as K


def kernel_cases(rng):
    xp = np.pad(rng.normal(size=(32, 16, 16, 16)), ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = rng.normal(size=(32, 8, 8, 144))
    ids = rng.integers(0, 24, size=32 * 8)
    src = rng.normal(size=(ids.size, 64))
    vis = rng.random((1000, 8)) < 0.7
    obs = rng.integers(0, 2, (1000, 8))
    amap = np.arange(8) % 3
    return [
        ("im2col", lambda: K.im2col_np(xp, 3, 3, 2, 8, 8), lambda: K._im2col_nb(xp, 3, 3, 2, 8, 8)),
        ("col2im", lambda: K.col2im_np(cols, 18, 18, 16, 3, 3, 2), lambda: K._col2im_nb(cols, 18, 18, 16, 3, 3, 2)),
        ("scatter_add_rows", lambda: K.scatter_add_rows_np((24, 64), ids, src),
         lambda: K._scatter_add_rows_nb(24, ids, src)),
        ("bayes_posterior", lambda: K.bayes_posterior_np(vis, obs, amap, 3, 0.05, 0.5),
         lambda: K._bayes_posterior_nb(vis, obs, amap, 3, 0.05, 0.5)),
    ]


STEP = """
import time, numpy as np
from label2label.model import Label2Label, ModelConfig
from label2label import tensor as T
rng = np.random.default_rng(0)
m = Label2Label(ModelConfig(n_attributes=8), rng)
x = rng.normal(size=(32, 16, 16, 1)); y = rng.integers(0, 2, (32, 8))
def step():
    total = m.loss(x, y, 1.0, 0.1, rng)[0]
    T.backward(total)
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print((time.perf_counter() - t) / {n})
"""


def train_step_seconds(flag, n):
    env = dict(os.environ, L2L_USE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", STEP.format(n=n)], env=env, capture_output=True, text=True,
                         check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if K.numba is None:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, f_np, f_nb in kernel_cases(rng):
        f_nb()  # compile
        t_np = min(timeit.repeat(f_np, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(f_nb, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")
    s_np = train_step_seconds("0", 10) * 1e3
    s_nb = train_step_seconds("1", 10) * 1e3
    print(f"{'train step (B=32)':<18}{s_np:>10.1f}{s_nb:>10.1f}{s_np / s_nb:>8.1f}x")


if __name__ == "__main__":
    main()
