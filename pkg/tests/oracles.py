"""Independent reference computations used by the test-suite.

Each oracle is written as plain loops over numpy scalars so it shares no
code path with the vectorised implementation it checks.
"""
import math

import numpy as np
import torch


def softmax_row(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def brute_force_attention(x, wq, wk, wv, H):
    """Per-position multi-head attention (before the output projection)."""
    n, d = x.shape
    dh = d // H
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros((n, d))
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        for p in range(n):
            logits = [sum(q[p, cols][j] * k[t, cols][j] for j in range(dh)) / math.sqrt(dh) for t in range(n)]
            w = softmax_row(logits)
            for j in range(dh):
                out[p, h * dh + j] = sum(w[t] * v[t, cols][j] for t in range(n))
    return out


def layer_norm_rows(x, gain, bias, eps):
    out = np.zeros_like(x)
    for p in range(x.shape[0]):
        row = x[p]
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out[p] = [(r - mu) / math.sqrt(var + eps) * g + b for r, g, b in zip(row, gain, bias)]
    return out


def naive_recon_loss(pred, target, m):
    """Masked mean of squared (amplitude, phase) distances, one frame."""
    num = 0.0
    count = 0
    for p in range(len(m)):
        if m[p] == 0:
            num += (pred[0][p] - target[0][p]) ** 2 + (pred[1][p] - target[1][p]) ** 2
            count += 1
    return num / count


def naive_macro_prf(cm):
    k = len(cm)
    ps, rs, fs = [], [], []
    for c in range(k):
        tp = cm[c][c]
        col = sum(cm[r][c] for r in range(k))
        row = sum(cm[c][j] for j in range(k))
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return sum(ps) / k, sum(rs) / k, sum(fs) / k


def brute_force_roc(scores, labels):
    """(pfa, pd) for threshold +inf and then every distinct score, descending."""
    pos = sum(1 for y in labels if y == 1)
    neg = len(labels) - pos
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        pts.append((fp / neg, tp / pos))
    return pts


def central_differences(loss_fn, params, h=1e-6):
    """Finite-difference gradient of ``loss_fn()`` w.r.t. each tensor in ``params``.

    Perturbs one element at a time in place and restores it.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = float(loss_fn())
                flat[k] = orig - h
                down = float(loss_fn())
                flat[k] = orig
                gflat[k] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_errors(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)`` across all tensors."""
    out = []
    for a, n in zip(analytic, numeric):
        a, n = a.detach().double().view(-1), n.double().view(-1)
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        out.append(((a - n).abs() / denom))
    return torch.cat(out)
