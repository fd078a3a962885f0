"""Brute-force reference implementations used only by the tests.

These deliberately avoid the vectorised code paths they check: plain Python
loops over elements, and score-cutoff enumeration for AP.
"""
import math
from itertools import combinations


def sum_sq_loop(a, b):
    """Sum of squared differences over nested lists / numpy arrays, element by element."""
    flat_a, flat_b = a.reshape(-1).tolist(), b.reshape(-1).tolist()
    assert len(flat_a) == len(flat_b)
    acc = 0.0
    for x, y in zip(flat_a, flat_b):
        acc += (x - y) * (x - y)
    return acc


def ir_loss_loop(targets, sources):
    """Inter-related loss: sum over taps and pairs i < j of (D_t - D_s)^2."""
    acc = 0.0
    for t, s in zip(targets, sources):
        n = t.shape[0]
        for i in range(n):
            for j in range(i + 1, n):
                d_t = sum_sq_loop(t[i], t[j])
                d_s = sum_sq_loop(s[i], s[j])
                acc += (d_t - d_s) ** 2
    return acc


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def ap_by_cutoffs(preds, gts, thr):
    """AP from precision/recall evaluated independently at every score cutoff.

    ``preds``: list of (image_id, score, box); ``gts``: image_id -> boxes.
    For every cutoff k the top-k predictions are re-matched from scratch.
    AP = sum over k where recall rises of (r_k - r_{k-1}) * max_{k' >= k} p_{k'}.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0 or not preds:
        return 0.0
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][1], str(preds[k][0]), k))
    ranked = [preds[k] for k in order]
    rec, prec = [], []
    for k in range(1, len(ranked) + 1):
        used = {img: [False] * len(b) for img, b in gts.items()}
        tp = 0
        for img, _, box in ranked[:k]:
            cands = gts.get(img, [])
            best, bj = -1.0, -1
            for j, g in enumerate(cands):
                o = box_iou(box, g)
                if o > best:
                    best, bj = o, j
            if bj >= 0 and best >= thr and not used[img][bj]:
                used[img][bj] = True
                tp += 1
        rec.append(tp / n_gt)
        prec.append(tp / k)
    terms = []
    prev = 0.0
    for k in range(len(rec)):
        if rec[k] != prev:
            terms.append((rec[k] - prev) * max(prec[k:]))
        prev = rec[k]
    return math.fsum(terms)


def central_difference(f, x, eps=1e-5):
    """Numerical gradient of scalar f at numpy array x (modified in place, restored)."""
    import numpy as np
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def pairs(n):
    return list(combinations(range(n), 2))
