"""Independent reference implementations used as test oracles."""

from fractions import Fraction

import mpmath
import numpy as np

from fedpoison.model import ParamSet, loss_and_grads


def rel_error(a, b):
    """Elementwise |a-b| / max(|a|, |b|), with 0/0 taken as 0."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    den = np.maximum(np.abs(a), np.abs(b))
    out = np.zeros_like(den)
    nz = den > 0
    out[nz] = np.abs(a - b)[nz] / den[nz]
    return out


def mp_loss(flat, dims, X, y):
    """Mean cross-entropy of the MLP evaluated in mpmath, independent of the model code."""
    d, h, c = dims
    w1 = [flat[i * h:(i + 1) * h] for i in range(d)]
    b1 = flat[d * h:d * h + h]
    o = d * h + h
    w2 = [flat[o + j * c:o + (j + 1) * c] for j in range(h)]
    b2 = flat[o + h * c:o + h * c + c]
    total = mpmath.mpf(0)
    for row, label in zip(X, y):
        hid = [max(mpmath.mpf(0), b1[j] + mpmath.fsum(row[i] * w1[i][j] for i in range(d))) for j in range(h)]
        z = [b2[k] + mpmath.fsum(hid[j] * w2[j][k] for j in range(h)) for k in range(c)]
        top = max(z)
        total += top + mpmath.log(mpmath.fsum(mpmath.exp(v - top) for v in z)) - z[int(label)]
    return total / len(y)


def mp_fd_grads(params: ParamSet, X, y, h=1e-5, dps=40):
    """Central differences on the mpmath loss, so the only error left is truncation."""
    with mpmath.workdps(dps):
        base = [mpmath.mpf(float(v)) for v in params.flat]
        Xm = [[mpmath.mpf(float(v)) for v in row] for row in np.asarray(X)]
        step = mpmath.mpf(h)
        out = np.empty(len(base))
        for i in range(len(base)):
            up, down = list(base), list(base)
            up[i] += step
            down[i] -= step
            diff = mp_loss(up, params.dims, Xm, y) - mp_loss(down, params.dims, Xm, y)
            out[i] = float(diff / (2 * step))
    return out


def fd_max_rel_error(params: ParamSet, X, y, h=1e-5, analytic=None) -> float:
    g = loss_and_grads(params, X, y)[1].flat if analytic is None else analytic
    return float(rel_error(g, mp_fd_grads(params, X, y, h)).max())


def exact_weighted_mean(vectors, weights):
    ws = [Fraction(int(w)) for w in weights]
    total = sum(ws)
    p = len(vectors[0])
    return [float(sum(Fraction(float(v[j])) * w for v, w in zip(vectors, ws)) / total) for j in range(p)]


def exact_median(vectors):
    out = []
    for j in range(len(vectors[0])):
        col = sorted(Fraction(float(v[j])) for v in vectors)
        n = len(col)
        out.append(float(col[n // 2]) if n % 2 else float((col[n // 2 - 1] + col[n // 2]) / 2))
    return out


def exact_trimmed_mean(vectors, k):
    out = []
    for j in range(len(vectors[0])):
        col = sorted(Fraction(float(v[j])) for v in vectors)
        kept = col[k: len(col) - k]
        out.append(float(sum(kept) / len(kept)))
    return out


def exact_krum_scores(vectors, f):
    """Scores in exact rational arithmetic, indexed like ``vectors``."""
    n = len(vectors)
    fr = [[Fraction(float(x)) for x in v] for v in vectors]
    scores = []
    for i in range(n):
        d = sorted(sum((a - b) ** 2 for a, b in zip(fr[i], fr[j])) for j in range(n) if j != i)
        scores.append(sum(d[: n - f - 2]))
    return scores


def brute_f1(pred, true, c, average="macro"):
    scores, support = [], []
    for k in range(c):
        tp = sum(1 for p, t in zip(pred, true) if p == k and t == k)
        fp = sum(1 for p, t in zip(pred, true) if p == k and t != k)
        fn = sum(1 for p, t in zip(pred, true) if p != k and t == k)
        if tp + fp + fn == 0:
            continue
        scores.append(Fraction(2 * tp, 2 * tp + fp + fn))
        support.append(tp + fn)
    if not scores:
        return 0.0
    if average == "macro":
        return float(sum(scores) / len(scores))
    tot = sum(support)
    return float(sum(s * w for s, w in zip(scores, support)) / tot) if tot else 0.0


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Remember a criterion outcome for the end-of-run summary and assert it."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def record_skip(number: int, reason: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:>2}: SKIP  {reason}"
