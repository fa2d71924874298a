"""Independent reference implementations used by the tests.

Everything here is written with plain loops over python floats or numpy so
that it shares no code path with the package under test.
"""

import math

import numpy as np
import torch


def cosine(u, v):
    u, v = np.asarray(u, float), np.asarray(v, float)
    nu, nv = math.sqrt(float(u @ u)), math.sqrt(float(v @ v))
    return 0.0 if nu == 0 or nv == 0 else float(u @ v) / (nu * nv)


def window_sims(a, b):
    return [cosine(a[w], b[w]) for w in range(len(a))]


def mean_sim(a, b):
    s = window_sims(a, b)
    return sum(s) / len(s)


def batch_hard(anchors, positives):
    out = []
    for i in range(len(anchors)):
        best, best_j = -math.inf, None
        for j in range(len(positives)):
            if j == i:
                continue
            s = mean_sim(anchors[i], positives[j])
            if s > best:  # strict: the first maximum is kept
                best, best_j = s, j
        out.append(best_j)
    return out


def triplet(sim_ap, sim_an, margin):
    return sum(max(0.0, n - p + margin) for p, n in zip(sim_ap, sim_an)) / len(sim_ap)


def batch_all(anchors, positives, margin):
    out = []
    for i in range(len(anchors)):
        ap = window_sims(anchors[i], positives[i])
        for j in range(len(positives)):
            if j != i and triplet(ap, window_sims(anchors[i], positives[j]), margin) > 0:
                out.append((i, i, j))
    return out


def roc_points(scores, labels):
    """O(n^2) sweep: one operating point per distinct score, plus the origin."""
    scores = [float(s) for s in scores]
    labels = [bool(v) for v in labels]
    p = sum(labels)
    n = len(labels) - p
    pts = [(math.inf, 0.0, 0.0)]
    for th in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= th and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= th and not y)
        pts.append((th, tp / p, fp / n))
    return pts


def max_tpr(pts, tau):
    ok = [t for _, t, f in pts if f <= tau]
    return max(ok) if ok else 0.0


def pauc(pts, tau):
    """Area under the piecewise-linear ROC between fpr 0 and tau, divided by tau."""
    area = 0.0
    for (_, t0, f0), (_, t1, f1) in zip(pts, pts[1:]):
        if f0 >= tau:
            break
        if f1 > tau:
            t1 = t0 + (t1 - t0) * (tau - f0) / (f1 - f0)
            f1 = tau
        area += (f1 - f0) * (t0 + t1) / 2
    return area / tau


def max_rel_grad_error(loss_fn, params, n_dirs=24, h=1e-5, seed=0):
    """Largest relative error between autograd and central differences.

    Both sides are directional derivatives along random unit directions over
    all parameters at once. Per-coordinate ratios are ill-defined for
    parameters whose gradient is structurally zero, where the difference
    quotient only measures rounding noise.
    ``loss_fn()`` must be a deterministic float64 scalar.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        norm = torch.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
            up = float(loss_fn())
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            down = float(loss_fn())
            for p, d in zip(params, dirs):
                p.add_(h * d)
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
