"""Compare the numba and numpy patch kernels.

Times im2col / col2im on encoder-sized maps and one full training step of the
tiny model under each backend. The first numba call compiles (or loads the
on-disk cache); it is run once before timing.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from pfanet import kernels
from pfanet import tensor as T
from pfanet.data import SynthSceneSpec, collate, synth_dataset
from pfanet.model import PFANet, tiny_config
from pfanet.objectives import total_loss
from pfanet.optim import Adam
from pfanet.tensor import Tensor

CASES = [  # (N, C, H, W, k, dilation, stride)
    (4, 8, 66, 130, 3, 1, 2),
    (4, 16, 34, 66, 3, 1, 1),
    (4, 32, 56, 64, 3, 24, 1),
    (4, 64, 10, 18, 3, 1, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'case':<28}{'numpy im2col':>14}{'numba im2col':>14}{'numpy col2im':>14}"
          f"{'numba col2im':>14}")
    for n, c, h, w, k, d, s in CASES:
        xp = rng.standard_normal((n, c, h, w)).astype(np.float32)
        span = d * (k - 1)
        oh, ow = (h - span - 1) // s + 1, (w - span - 1) // s + 1
        row = []
        cols = None
        for name in ("numpy", "numba"):
            im2col, _ = kernels.BACKENDS[name]
            im2col(xp, k, d, s, oh, ow)
            row.append(best_of(lambda: im2col(xp, k, d, s, oh, ow), repeat))
            cols = im2col(xp, k, d, s, oh, ow)
        for name in ("numpy", "numba"):
            _, col2im = kernels.BACKENDS[name]
            col2im(cols, xp.shape, k, d, s)
            row.append(best_of(lambda: col2im(cols, xp.shape, k, d, s), repeat))
        label = f"{n}x{c}x{h}x{w} k{k} d{d} s{s}"
        print(f"{label:<28}" + "".join(f"{1e3 * t:>12.2f}ms" for t in row))


def bench_train_step(repeat):
    batch = collate(synth_dataset(SynthSceneSpec(seed=0), 4))
    for name in ("numpy", "numba"):
        kernels.use_backend(name)
        model = PFANet(tiny_config())
        opt = Adam(model.named_parameters())

        def step():
            model.zero_grad()
            report = total_loss(model(Tensor(batch.rgb)), batch.depth, batch.mask)
            T.backward(report.total)
            opt.step(1e-4)
        step()
        print(f"train step, tiny model, batch 4 @ 64x128, {name:<6}: "
              f"{1e3 * best_of(step, repeat):8.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if "numba" not in kernels.BACKENDS:
        raise SystemExit("numba is not installed; nothing to compare")
    bench_kernels(args.repeat)
    bench_train_step(max(args.repeat // 4, 3))


if __name__ == "__main__":
    main()
