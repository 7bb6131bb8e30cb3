"""Slow, independent reference implementations used only by the tests.

Nothing here imports the code under test beyond plain data containers.
"""
import math

import numpy as np


# -- warping ------------------------------------------------------------------

def warp_loop(img, part, u, v, S):
    """Pixel-by-pixel copy loop in raster order; returns (texels dict, fill)."""
    H, W, _ = img.shape
    fill = tuple(int(round(sum(float(img[i, j, c]) for i in range(H) for j in range(W)) / (H * W)))
                 for c in range(3))
    texels = {}
    for i in range(H):
        for j in range(W):
            p = int(part[i, j])
            if p == 0:
                continue
            r = min(math.floor(u[i, j] * S), S - 1)
            c = min(math.floor(v[i, j] * S), S - 1)
            texels[(p, r, c)] = tuple(int(x) for x in img[i, j])
    return texels, fill


def nearest_resize(patch, S):
    """Nearest neighbour: output cell k samples source floor(k * n / S)."""
    h, w = patch.shape[:2]
    out = np.empty((S, S) + patch.shape[2:], dtype=patch.dtype)
    for a in range(S):
        for b in range(S):
            out[a, b] = patch[(a * h) // S, (b * w) // S]
    return out


# -- convolutional layers -----------------------------------------------------

def conv2d(x, w, stride=1, pad=0, groups=1):
    """x (C, H, W), w (O, C/groups, k, k); plain loops over outputs."""
    C, H, W = x.shape
    O, cg, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    og = O // groups
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        g = o // og
        xs = xp[g * cg:(g + 1) * cg]
        for y in range(Ho):
            for z in range(Wo):
                win = xs[:, y * stride:y * stride + k, z * stride:z * stride + k]
                out[o, y, z] = float(np.sum(win * w[o]))
    return out


def bn_eval(x, sd, prefix, eps=1e-5):
    g = sd[prefix + "weight"][:, None, None]
    b = sd[prefix + "bias"][:, None, None]
    m = sd[prefix + "running_mean"][:, None, None]
    v = sd[prefix + "running_var"][:, None, None]
    return (x - m) / np.sqrt(v + eps) * g + b


def relu(x):
    return np.maximum(x, 0.0)


def conv_bn(x, sd, prefix, stride, groups):
    w = sd[prefix + "0.weight"]
    k = w.shape[-1]
    return bn_eval(conv2d(x, w, stride, k // 2, groups), sd, prefix + "1.")


def basic_block(x, sd, prefix, stride, groups):
    out = relu(conv_bn(x, sd, prefix + "conv1.", stride, groups))
    out = conv_bn(out, sd, prefix + "conv2.", 1, groups)
    sc = x if prefix + "shortcut.0.weight" not in sd else conv_bn(x, sd, prefix + "shortcut.", stride, groups)
    return relu(out + sc)


def bottleneck(x, sd, prefix, stride, groups):
    out = relu(conv_bn(x, sd, prefix + "conv1.", 1, groups))
    out = relu(conv_bn(out, sd, prefix + "conv2.", stride, groups))
    out = conv_bn(out, sd, prefix + "conv3.", 1, groups)
    sc = x if prefix + "shortcut.0.weight" not in sd else conv_bn(x, sd, prefix + "shortcut.", stride, groups)
    return relu(out + sc)


def group_slice(sd, groups, g):
    """State dict of branch ``g`` of a grouped module, as an ungrouped module."""
    out = {}
    for k, v in sd.items():
        n = v.shape[0]
        out[k] = v[g * n // groups:(g + 1) * n // groups]
    return out


# -- losses -------------------------------------------------------------------

def smoothed_ce(probs, label, eps):
    C = len(probs)
    return -sum(((1 - eps) * (k == label) + eps / C) * math.log(probs[k]) for k in range(C))


def triplet_exhaustive(X, labels, margin):
    """For each anchor, the largest hinge over every (positive, negative) combination."""
    n = len(labels)
    total = 0.0
    for a in range(n):
        worst = None
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                h = max(0.0, margin + math.dist(X[a], X[p]) - math.dist(X[a], X[q]))
                worst = h if worst is None else max(worst, h)
        total += worst
    return total / n


# -- retrieval ----------------------------------------------------------------

def cmc_map_bruteforce(dist, q_ids, q_cams, g_ids, g_cams, ranks):
    nq, ng = len(q_ids), len(g_ids)
    hits_at = {r: 0 for r in ranks}
    aps = []
    for i in range(nq):
        cand = []
        for j in range(ng):
            if g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i]:
                continue
            cand.append((float(dist[i][j]), j))
        cand.sort()
        good = [g_ids[j] == q_ids[i] for _, j in cand]
        if not any(good):
            continue
        precisions = []
        found = 0
        for rank, ok in enumerate(good, start=1):
            if ok:
                found += 1
                precisions.append(found / rank)
        aps.append(math.fsum(precisions) / len(precisions))
        first = good.index(True) + 1
        for r in ranks:
            if first <= r:
                hits_at[r] += 1
    n = len(aps)
    if n == 0:
        return {r: 0.0 for r in ranks}, 0.0, 0
    return {r: hits_at[r] / n for r in ranks}, math.fsum(aps) / n, n


def finite_difference(f, x, h=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of float64 array ``x``."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))
