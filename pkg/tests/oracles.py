"""Scalar-loop reference implementations used as test oracles.

Deliberately naive: plain Python floats, one pixel at a time, no numpy
vectorisation, so they share no code path with the package.
"""
import math


def _pixels(a):
    """Yield (n, i, j) over an N x 1 x H x W nested array."""
    for n in range(len(a)):
        for i in range(len(a[n][0])):
            for j in range(len(a[n][0][0])):
                yield n, i, j


def scale_invariant(pred, gt, mask, lam):
    errs = [math.log(pred[n][0][i][j]) - math.log(gt[n][0][i][j])
            for n, i, j in _pixels(mask) if mask[n][0][i][j]]
    t = len(errs)
    sq = 0.0
    for e in errs:
        sq += e * e
    s = 0.0
    for e in errs:
        s += e
    return sq / t - lam * s * s / (t * t)


def gradient(pred, gt, mask, spacings):
    h, w = len(mask[0][0]), len(mask[0][0][0])
    t = sum(1 for n, i, j in _pixels(mask) if mask[n][0][i][j])
    total = 0.0
    for s in spacings:
        for n, i, j in _pixels(mask):
            if i + s >= h or j + s >= w:
                continue
            m = mask[n][0]
            if not (m[i][j] and m[i + s][j] and m[i][j + s]):
                continue
            diff = []
            for di, dj in ((s, 0), (0, s)):
                a, b = pred[n][0][i + di][j + dj], pred[n][0][i][j]
                c, d = gt[n][0][i + di][j + dj], gt[n][0][i][j]
                diff.append((a - b) / abs(a + b) - (c - d) / abs(c + d))
            total += math.sqrt(diff[0] ** 2 + diff[1] ** 2)
    return total / t


def metrics(pred, gt, mask, cap=80.0, floor=1e-3):
    n = 0
    acc = [0, 0, 0]
    abs_rel = sq_rel = sq = sq_log = 0.0
    for b, i, j in _pixels(mask):
        d = gt[b][0][i][j]
        if not mask[b][0][i][j] or d <= 0 or d > cap:
            continue
        p = min(max(pred[b][0][i][j], floor), cap)
        n += 1
        ratio = max(d / p, p / d)
        for k, thr in enumerate((1.25, 1.25 ** 2, 1.25 ** 3)):
            acc[k] += ratio < thr
        abs_rel += abs(p - d) / d
        sq_rel += (p - d) ** 2 / d
        sq += (p - d) ** 2
        sq_log += (math.log(p) - math.log(d)) ** 2
    return dict(d1=acc[0] / n, d2=acc[1] / n, d3=acc[2] / n, abs_rel=abs_rel / n,
                sq_rel=sq_rel / n, rmse=math.sqrt(sq / n), rmse_log=math.sqrt(sq_log / n), N=n)


def aggregate(rows):
    """Weighted mean of per-sample metric dicts by their N."""
    total = sum(r["N"] for r in rows)
    out = {}
    for key in ("d1", "d2", "d3", "abs_rel", "sq_rel", "rmse", "rmse_log"):
        acc = 0.0
        for r in rows:
            acc += r[key] * r["N"]
        out[key] = acc / total
    out["N"] = total
    return out
