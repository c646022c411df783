"""Brute-force reference implementations used by the tests.

Nothing here touches the package's fast paths; each function is a direct
loop over the defining formula.
"""
import numpy as np
import torch


def conv_same_loops(x, w, b, stride=1):
    """Quadruple loop over replicate-padded input (cross-correlation)."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    r = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for m in range(ho):
                for q in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for p in range(k):
                            for s in range(k):
                                yy = min(max(m * stride + p - r, 0), h - 1)
                                xx = min(max(q * stride + s - r, 0), wd - 1)
                                acc += w[o, c, p, s] * x[n, c, yy, xx]
                    out[n, o, m, q] = acc
    return out


def cosine_matrix_loops(f):
    n = len(f)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = np.dot(f[i], f[j]) / (np.sqrt(np.dot(f[i], f[i])) * np.sqrt(np.dot(f[j], f[j])))
    return out


def batch_hard_loops(f, labels, margin):
    n = len(f)
    total, count = 0.0, 0
    for a in range(n):
        pos = [np.sqrt(np.sum((f[a] - f[p]) ** 2)) for p in range(n) if p != a and labels[p] == labels[a]]
        neg = [np.sqrt(np.sum((f[a] - f[q]) ** 2)) for q in range(n) if labels[q] != labels[a]]
        if not pos or not neg:
            continue
        total += max(0.0, max(pos) - min(neg) + margin)
        count += 1
    return total / count


def average_precision_loops(sims, relevant):
    """AP for one query: sims over gallery, relevant flags; ties by index."""
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    hits, precisions = 0, []
    for rank, idx in enumerate(order, start=1):
        if relevant[idx]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def map_rank1_loops(qf, ql, gf, gl):
    aps, r1 = [], []
    for i in range(len(qf)):
        sims = [np.dot(qf[i], g) / (np.linalg.norm(qf[i]) * np.linalg.norm(g)) for g in gf]
        rel = [gl[j] == ql[i] for j in range(len(gf))]
        aps.append(average_precision_loops(sims, rel))
        best = sorted(range(len(sims)), key=lambda j: (-sims[j], j))[0]
        r1.append(rel[best])
    return float(np.mean(aps)), float(np.mean(r1))


def mean_std_two_pass(values):
    values = list(values)
    mu = sum(values) / len(values)
    var = sum((v - mu) ** 2 for v in values) / len(values)
    return mu, var ** 0.5


def blur_dense(img, sigma):
    """Dense 2-D Gaussian filter with clamped indices."""
    r = int(np.ceil(3 * sigma))
    ax = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    g /= g.sum()
    k2 = np.outer(g, g)
    h, w, c = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = np.zeros(c)
            for i, dy in enumerate(ax):
                for j, dx in enumerate(ax):
                    acc += k2[i, j] * img[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
            out[y, x] = acc
    return out


def numerical_grad(fn, tensors, h=1e-4):
    """Central differences of scalar ``fn()`` w.r.t. each tensor (in place perturbation)."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = np.zeros(t.shape)
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(fn())
                flat[i] = orig - h
                fm = float(fn())
                flat[i] = orig
                g.reshape(-1)[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
