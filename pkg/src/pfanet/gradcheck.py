"""Finite-difference verification of every backward rule.

Each component builds a small float64 problem, reduces its output to a
scalar with fixed random weights, and compares the tape gradient with
central differences (step 1e-5). The error of one input tensor is

    max |analytic - numeric| / max(max |analytic|, max |numeric|)

and a component reports the worst error over its inputs. The end-to-end
check scores its sampled parameters as one vector instead, since a nearly
dead tensor (gradient ~1e-8) sits below the difference's rounding noise.

A ReLU or max that sits within one step of its kink makes the central
difference straddle two linear pieces. Entries that miss the tolerance are
therefore re-probed at step/10 and step/100 and keep their best agreement;
a wrong backward rule disagrees at every step size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import (Conv2d, UpConv, bilinear_up, conv2d, global_avg_pool, global_max_pool,
                     nearest_down, nearest_up)
from .model import DCAM, SPAM, DenseASPP, Encoder, ModelConfig, PFANet
from .objectives import gradient_loss, scale_invariant_loss, total_loss
from .tensor import Tensor

STEP = 1e-5
OP_TOL = 1e-6
LAYER_TOL = 1e-5
E2E_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def _weighted_sum(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return T.reshape(out, ())
    return T.sum(out * Tensor(weights, dtype=out.dtype))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.max([np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0)])
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0:
        return float(diff)
    return float(diff / scale)


def _central(fn, inputs, weights, t, i, step) -> float:
    original = t.data
    vals = []
    for sign in (1, -1):
        bumped = original.copy()
        bumped.reshape(-1)[i] += sign * step
        t.data = bumped
        with T.no_grad():
            vals.append(_weighted_sum(fn(*inputs), weights).item())
    t.data = original
    return (vals[0] - vals[1]) / (2 * step)


def check_gradients(fn: Callable[..., Tensor], inputs: list[Tensor], step: float = STEP,
                    rng: np.random.Generator | None = None, sample: dict | None = None,
                    tol: float | None = None, retries: int = 2, joint: bool = False) -> float:
    """Worst relative error of d sum(w * fn(*inputs)) / d input over ``inputs``.

    ``sample`` optionally maps an input position to the flat indices to probe;
    other entries of that input are not checked. With ``tol`` set, entries
    above it are re-probed at smaller steps (see module docstring). ``joint``
    scores all probed entries as one vector.
    """
    rng = rng or np.random.default_rng(0)
    with T.no_grad():
        probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape) if probe.data.size > 1 else None
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    T.backward(_weighted_sum(fn(*inputs), weights))
    probes = []
    for pos, t in enumerate(inputs):
        idx = sample.get(pos) if sample else None
        flat_idx = np.arange(t.data.size) if idx is None else np.asarray(idx)
        analytic = t.grad.reshape(-1)[flat_idx]
        numeric = np.array([_central(fn, inputs, weights, t, i, step) for i in flat_idx])
        probes.append((t, flat_idx, analytic, numeric))
    groups = [probes] if joint else [[p] for p in probes]
    worst = 0.0
    for group in groups:
        analytic = np.concatenate([p[2] for p in group])
        if tol is not None:
            scale = max(np.abs(analytic).max(initial=0.0),
                        max(np.abs(p[3]).max(initial=0.0) for p in group))
            for t, flat_idx, a, numeric in group:
                for k, i in enumerate(flat_idx):
                    h = step
                    for _ in range(retries):
                        if abs(a[k] - numeric[k]) < tol * scale:
                            break
                        h /= 10
                        retry = _central(fn, inputs, weights, t, i, h)
                        if abs(a[k] - retry) < abs(a[k] - numeric[k]):
                            numeric[k] = retry
        numeric = np.concatenate([p[3] for p in group])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _t(rng, *shape, low=None, high=None) -> Tensor:
    if low is None:
        return Tensor(rng.standard_normal(shape), dtype=np.float64)
    return Tensor(rng.uniform(low, high, shape), dtype=np.float64)


def _away_from_zero(rng, *shape) -> Tensor:
    v = rng.standard_normal(shape)
    return Tensor(np.where(np.abs(v) < 0.05, 0.05 * np.sign(v) + v, v), dtype=np.float64)


def gradcheck_model_config() -> ModelConfig:
    return ModelConfig(block_channels=(4, 8, 16, 16, 16), c_high=16, c_low=16, growth=4, seed=3)


def _e2e(rng):
    model = PFANet(gradcheck_model_config(), dtype=np.float64)
    # zero biases put dead ReLUs exactly on their kink
    for p in model.parameters():
        if p.ndim == 1:
            p.data = 0.1 * rng.standard_normal(p.shape)
    rgb = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)), dtype=np.float64)
    gt = rng.uniform(5, 60, (1, 1, 32, 32))
    mask = rng.random((1, 1, 32, 32)) > 0.2
    names, params = zip(*model.named_parameters())
    sizes = np.array([p.data.size for p in params])
    # 1% of all parameters, spread over every tensor
    n_pick = max(int(0.01 * sizes.sum()), len(params))
    picks = {i: [int(rng.integers(s))] for i, s in enumerate(sizes)}
    for flat in rng.choice(sizes.sum(), n_pick - len(params), replace=False):
        owner = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        picks[owner].append(int(flat - (np.cumsum(sizes)[owner - 1] if owner else 0)))

    def fn(*ps):
        return total_loss(model(rgb), gt, mask).total
    return fn, list(params), {i: sorted(set(v)) for i, v in picks.items()}


def _components() -> dict[str, tuple[float, Callable]]:
    def conv_case(k, stride, dilation):
        def build(rng):
            x = _t(rng, 2, 3, 7, 8)
            layer = Conv2d(3, 4, k, stride, dilation, rng=rng, dtype=np.float64)
            layer.bias.data = rng.standard_normal(4)
            return (lambda x, w, b: conv2d(x, w, b, stride, dilation)), [x, layer.weight, layer.bias]
        return build

    def module_case(make, shape, pick=lambda out: out):
        def build(rng):
            m = make(rng)
            for p in m.parameters():
                if p.ndim == 1:
                    p.data = 0.1 * rng.standard_normal(p.shape)
            x = _t(rng, *shape)
            return (lambda x, *ps: pick(m(x))), [x] + m.parameters()
        return build

    def loss_case(loss):
        def build(rng):
            pred = _t(rng, 2, 1, 20, 20, low=1.0, high=50.0)
            gt = rng.uniform(1.0, 50.0, (2, 1, 20, 20))
            mask = rng.random((2, 1, 20, 20)) > 0.3
            return (lambda p: loss(p, gt, mask)), [pred]
        return build

    c = {
        "add": (OP_TOL, lambda r: (T.add, [_t(r, 2, 3, 4, 4), _t(r, 3, 1, 1)])),
        "sub": (OP_TOL, lambda r: (T.sub, [_t(r, 2, 3, 4, 4), _t(r, 2, 3, 4, 4)])),
        "mul": (OP_TOL, lambda r: (T.mul, [_t(r, 2, 3, 4, 4), _t(r, 3, 1, 1)])),
        "relu": (OP_TOL, lambda r: (T.relu, [_away_from_zero(r, 3, 5, 5)])),
        "sigmoid": (OP_TOL, lambda r: (T.sigmoid, [_t(r, 3, 5, 5)])),
        "exp": (OP_TOL, lambda r: (T.exp, [_t(r, 3, 5)])),
        "log": (OP_TOL, lambda r: (T.log, [_t(r, 3, 5, low=0.5, high=3.0)])),
        "sqrt": (OP_TOL, lambda r: (T.sqrt, [_t(r, 3, 5, low=0.5, high=3.0)])),
        "sum": (OP_TOL, lambda r: ((lambda x: T.sum(x, (1, 2))), [_t(r, 3, 4, 5)])),
        "mean": (OP_TOL, lambda r: ((lambda x: T.mean(x, (0, 2))), [_t(r, 3, 4, 5)])),
        "max": (OP_TOL, lambda r: ((lambda x: T.max(x, (2, 3), keepdims=True)),
                                   [_t(r, 2, 3, 4, 5)])),
        "concat": (OP_TOL, lambda r: ((lambda a, b: T.concat([a, b], 1)),
                                      [_t(r, 2, 2, 3, 3), _t(r, 2, 3, 3, 3)])),
        "slice": (OP_TOL, lambda r: ((lambda x: T.slice(x, 1, 1, 3)), [_t(r, 2, 4, 3)])),
        "reshape": (OP_TOL, lambda r: ((lambda x: T.reshape(x, (6, 4))), [_t(r, 2, 3, 4)])),
        "conv2d_1x1": (LAYER_TOL, conv_case(1, 1, 1)),
        "conv2d_3x3": (LAYER_TOL, conv_case(3, 1, 1)),
        "conv2d_3x3_dilated": (LAYER_TOL, conv_case(3, 1, 2)),
        "conv2d_3x3_stride2": (LAYER_TOL, conv_case(3, 2, 1)),
        "global_avg_pool": (LAYER_TOL, lambda r: (global_avg_pool, [_t(r, 2, 3, 4, 4)])),
        "global_max_pool": (LAYER_TOL, lambda r: (global_max_pool, [_t(r, 2, 3, 4, 4)])),
        "nearest_up": (LAYER_TOL, lambda r: ((lambda x: nearest_up(x, 2)), [_t(r, 1, 2, 3, 4)])),
        "nearest_down": (LAYER_TOL, lambda r: ((lambda x: nearest_down(x, 2)),
                                               [_t(r, 1, 2, 4, 6)])),
        "bilinear_up": (LAYER_TOL, lambda r: ((lambda x: bilinear_up(x, 2)), [_t(r, 1, 2, 3, 4)])),
        "upconv": (LAYER_TOL, module_case(lambda r: UpConv(3, 2, r, np.float64), (1, 3, 4, 4))),
        "encoder": (LAYER_TOL, module_case(lambda r: Encoder((2, 3, 3, 4, 4), 1, r, np.float64),
                                           (1, 3, 32, 32), pick=lambda feats: feats[-1])),
        "dense_aspp": (LAYER_TOL, module_case(lambda r: DenseASPP(4, 2, 3, r, np.float64),
                                              (1, 4, 6, 6))),
        "dcam": (LAYER_TOL, module_case(lambda r: DCAM(16, 16, r, np.float64), (2, 16, 4, 4))),
        "spam": (LAYER_TOL, module_case(lambda r: SPAM(4, 2, r, np.float64), (1, 4, 8, 8))),
        "scale_invariant_loss": (OP_TOL, loss_case(scale_invariant_loss)),
        "gradient_loss": (OP_TOL, loss_case(
            lambda p, g, m: gradient_loss(p, g, m, spacings=(1, 2, 4, 8)))),
        "total_loss": (OP_TOL, loss_case(
            lambda p, g, m: total_loss(p, g, m, spacings=(1, 2, 4, 8)).total)),
        "pfanet": (E2E_TOL, _e2e),
    }
    return c


COMPONENTS = tuple(_components())


def run(tol: float | None = None, only=None, seed: int = 0) -> list[CheckResult]:
    """Check every component (or those named in ``only``) at float64."""
    results = []
    with T.precision(np.float64):
        for name, (default_tol, build) in _components().items():
            if only is not None and name not in only:
                continue
            rng = np.random.default_rng([seed, len(name)])
            built = build(rng)
            fn, inputs = built[:2]
            sample = built[2] if len(built) > 2 else None
            # sampled end-to-end checks are scored as one parameter vector
            limit = default_tol if tol is None else tol
            err = check_gradients(fn, inputs, rng=rng, sample=sample, tol=limit,
                                  joint=sample is not None)
            results.append(CheckResult(name, err, limit))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  max rel err {r.error:.3e}  tol {r.tol:.0e}  "
             f"{'ok' if r.passed else 'FAIL'}" for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"failed: {', '.join(failed)}" if failed else "all components passed")
    return "\n".join(lines)
