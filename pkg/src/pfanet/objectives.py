"""Mask-aware depth losses and evaluation metrics.

Convention throughout: ``gt`` is the ground-truth depth, ``pred`` the network
estimate. Both are N x 1 x H x W (any shape works as long as the last two
axes are image rows and columns) and ``mask`` marks pixels with valid ground
truth. Losses pool all valid pixels of a batch, so T counts valid pixels over
the whole batch.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor, make_op, register_backward

SI_LAMBDA = 0.85
GRAD_SPACINGS = (1, 2, 4, 8, 16)
ALPHA = 10.0
BETA = 2.0
MIN_EVAL_DEPTH = 1e-3
MAX_EVAL_DEPTH = 80.0
THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)


class LossInputError(ValueError):
    pass


def _check(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise LossInputError(
            f"pred {pred.shape}, gt {gt.shape} and mask {mask.shape} must share a shape")
    mask = mask.astype(bool)
    if not mask.any():
        raise LossInputError("no valid pixels (T = 0)")
    if not (pred[mask] > 0).all():
        raise LossInputError("prediction must be positive on valid pixels")
    if not (gt[mask] > 0).all():
        raise LossInputError("ground truth must be positive on valid pixels")
    return mask


def scale_invariant_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray,
                         lam: float = SI_LAMBDA) -> Tensor:
    """Log-space loss mean(e^2) - lam * mean(e)^2 over valid pixels.

    With lam = 1 this is the variance of the log error and ignores any global
    rescaling of ``pred``.
    """
    p = pred.data
    gt = np.asarray(gt, dtype=p.dtype)
    mask = _check(p, gt, np.asarray(mask))
    count = int(mask.sum())
    e = np.zeros_like(p)
    e[mask] = np.log(p[mask]) - np.log(gt[mask])
    total = e.sum()
    value = (e * e).sum() / count - lam * total * total / count ** 2
    return make_op("scale_invariant_loss", np.asarray(value, dtype=p.dtype), (pred,),
                   e=e, total=total, count=count, lam=lam, mask=mask)


@register_backward("scale_invariant_loss")
def _si_bw(g, node):
    s = node.saved
    p = node.inputs[0].data
    de = 2 * s["e"] / s["count"] - 2 * s["lam"] * s["total"] / s["count"] ** 2
    grad = np.where(s["mask"], de / np.where(s["mask"], p, 1), 0)
    return ((g * grad).astype(p.dtype, copy=False),)


def normalized_gradients(d: np.ndarray, s: int):
    """Per-pixel (row, column) normalized differences at spacing ``s``.

    Entry (i, j) holds ((d[i+s,j] - d[i,j]) / |d[i+s,j] + d[i,j]|,
    (d[i,j+s] - d[i,j]) / |d[i,j+s] + d[i,j]|) for the region where both
    offsets are inside the image.
    """
    h, w = d.shape[-2:]
    base = d[..., :h - s, :w - s]
    down = d[..., s:, :w - s]
    right = d[..., :h - s, s:]
    return (down - base) / np.abs(down + base), (right - base) / np.abs(right + base)


def gradient_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray,
                  spacings=GRAD_SPACINGS) -> Tensor:
    """Multi-spacing scale-invariant gradient loss.

    Sums the Euclidean norm of the difference between predicted and true
    normalized gradients over pixels whose two offset partners are also valid,
    then divides by the valid-pixel count T.
    """
    p = pred.data
    gt = np.asarray(gt, dtype=p.dtype)
    mask = _check(p, gt, np.asarray(mask))
    h, w = p.shape[-2:]
    if h <= max(spacings) or w <= max(spacings):
        raise LossInputError(f"image {h}x{w} must exceed the largest spacing {max(spacings)}")
    count = int(mask.sum())
    # invalid pixels get a dummy positive depth; their pairs are masked out below
    p_safe = np.where(mask, p, 1)
    g_safe = np.where(mask, gt, 1)
    total = 0.0
    terms = []
    for s in spacings:
        pr, pc = normalized_gradients(p_safe, s)
        gr, gc = normalized_gradients(g_safe, s)
        valid = mask[..., :h - s, :w - s] & mask[..., s:, :w - s] & mask[..., :h - s, s:]
        dr = np.where(valid, pr - gr, 0)
        dc = np.where(valid, pc - gc, 0)
        norm = np.sqrt(dr * dr + dc * dc)
        total += norm.sum()
        terms.append((s, dr, dc, norm))
    value = total / count
    return make_op("gradient_loss", np.asarray(value, dtype=p.dtype), (pred,),
                   terms=terms, count=count, p=p_safe)


@register_backward("gradient_loss")
def _grad_loss_bw(g, node):
    p = node.saved["p"]
    h, w = p.shape[-2:]
    out = np.zeros_like(p)
    for s, dr, dc, norm in node.saved["terms"]:
        # d||v|| / dv = v / ||v||, defined as 0 where v = 0
        safe = np.where(norm > 0, norm, 1)
        ur = np.where(norm > 0, dr / safe, 0)
        uc = np.where(norm > 0, dc / safe, 0)
        base = p[..., :h - s, :w - s]
        down = p[..., s:, :w - s]
        right = p[..., :h - s, s:]
        # q = (a - b) / (a + b) for positive a, b: dq/da = 2b/(a+b)^2, dq/db = -2a/(a+b)^2
        sr = (down + base) ** 2
        sc = (right + base) ** 2
        out[..., s:, :w - s] += ur * 2 * base / sr
        out[..., :h - s, :w - s] -= ur * 2 * down / sr
        out[..., :h - s, s:] += uc * 2 * base / sc
        out[..., :h - s, :w - s] -= uc * 2 * right / sc
    return ((g * out / node.saved["count"]).astype(p.dtype, copy=False),)


@dataclass
class LossReport:
    total: Tensor
    l_d: float
    l_g: float
    count: int

    @property
    def value(self) -> float:
        return self.total.item()


def total_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray, alpha: float = ALPHA,
               beta: float = BETA, lam: float = SI_LAMBDA, spacings=GRAD_SPACINGS) -> LossReport:
    """alpha * sqrt(L_d) + beta * sqrt(L_g)."""
    l_d = scale_invariant_loss(pred, gt, mask, lam)
    l_g = gradient_loss(pred, gt, mask, spacings)
    # rounding can push a near-perfect L_d a hair below zero
    l_d_pos = T.clip(l_d, 0.0, np.inf)
    total = T.sqrt(l_d_pos) * alpha + T.sqrt(l_g) * beta
    return LossReport(total, l_d.item(), l_g.item(), int(np.asarray(mask, bool).sum()))


# -- metrics ----------------------------------------------------------------

METRIC_COLUMNS = ("d1", "d2", "d3", "abs_rel", "sq_rel", "rmse", "rmse_log", "N")
TABLE_HEADERS = ("d<1.25", "d<1.25^2", "d<1.25^3", "AbsRel", "SqRel", "RMSE", "RMSElog", "N")


@dataclass
class MetricReport:
    d1: float
    d2: float
    d3: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    N: int  # noqa: N815

    def as_row(self) -> tuple:
        return astuple(self)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                    cap: float = MAX_EVAL_DEPTH, min_depth: float = MIN_EVAL_DEPTH) -> MetricReport:
    """Threshold accuracies and error metrics over pixels with valid ground truth.

    Ground truth beyond ``cap`` is excluded; predictions are clamped to
    [min_depth, cap] first.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(mask, bool) & (gt > 0) & (gt <= cap)
    n = int(valid.sum())
    if n == 0:
        raise LossInputError("no valid pixels to evaluate")
    d = gt[valid]
    p = np.clip(pred[valid], min_depth, cap)
    ratio = np.maximum(d / p, p / d)
    diff = p - d
    return MetricReport(
        d1=float((ratio < THRESHOLDS[0]).mean()),
        d2=float((ratio < THRESHOLDS[1]).mean()),
        d3=float((ratio < THRESHOLDS[2]).mean()),
        abs_rel=float(np.mean(np.abs(diff) / d)),
        sq_rel=float(np.mean(diff ** 2 / d)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(d)) ** 2))),
        N=n,
    )


def aggregate_metrics(reports: list[MetricReport]) -> MetricReport:
    """Valid-pixel-weighted mean of per-sample reports."""
    if not reports:
        raise LossInputError("nothing to aggregate")
    total = sum(r.N for r in reports)
    vals = {}
    for f in fields(MetricReport):
        if f.name == "N":
            continue
        vals[f.name] = math.fsum(getattr(r, f.name) * r.N for r in reports) / total
    return MetricReport(**vals, N=total)


def metrics_csv(reports: list[MetricReport], ids: list[str] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow((("id",) if ids is not None else ()) + METRIC_COLUMNS)
    for i, r in enumerate(reports):
        writer.writerow(((ids[i],) if ids is not None else ()) + tuple(
            repr(v) for v in r.as_row()))
    return buf.getvalue()


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Aligned text table, accuracy columns first, then error columns."""
    label_w = max([len("sample")] + [len(name) for name, _ in rows])
    head = "  ".join([f"{'sample':<{label_w}}"] + [f"{h:>9}" for h in TABLE_HEADERS])
    lines = [head, "-" * len(head)]
    for name, r in rows:
        cells = [f"{v:9.4f}" for v in r.as_row()[:-1]] + [f"{r.N:>9d}"]
        lines.append("  ".join([f"{name:<{label_w}}"] + cells))
    return "\n".join(lines)
