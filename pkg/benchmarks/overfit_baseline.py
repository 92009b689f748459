"""Overfit baseline: tiny model, 4 synthetic 64x128 scenes, full-batch steps.

    python benchmarks/overfit_baseline.py --lr 1e-3 --steps 300

Prints RMSE and d1 on the training scenes before and after, the wall time,
and whether the 20-step moving average of the loss decreased strictly over
the first 200 steps.
"""
import argparse
import tempfile
import time

import numpy as np

from pfanet.config import TrainConfig
from pfanet.data import synth_dataset
from pfanet.model import TINY, PFANet
from pfanet.trainer import evaluate, load_checkpoint, model_predictor, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as out:
        cfg = TrainConfig(**TINY, synth_count=4, batch_size=4, epochs=args.steps, augment=False,
                          lr=args.lr, seed=args.seed, out_dir=out)
        data = synth_dataset(cfg.synth_spec(), cfg.synth_count)
        before = evaluate(model_predictor(PFANet(cfg.model_config())), data).aggregate
        t0 = time.perf_counter()
        result = train(cfg, dataset=data)
        elapsed = time.perf_counter() - t0
        after = evaluate(model_predictor(load_checkpoint(result.checkpoint)[0]), data).aggregate
    moving = np.convolve(result.losses[:200], np.ones(20) / 20, "valid")
    print(f"lr {args.lr}  steps {result.steps}  time {elapsed:.1f}s")
    print(f"rmse {before.rmse:.3f} -> {after.rmse:.3f}  ({100 * after.rmse / before.rmse:.1f}%)")
    print(f"d1   {before.d1:.3f} -> {after.d1:.3f}")
    print(f"loss {result.losses[0]:.3f} -> {result.losses[-1]:.3f}")
    print(f"moving average strictly decreasing: {bool(np.all(np.diff(moving) < 0))}")


if __name__ == "__main__":
    main()
